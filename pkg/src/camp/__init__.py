"""Cross-modal region/word matching with gated message passing.

The package pairs a small reverse-mode autodiff engine (:mod:`camp.tensor`)
with the matching pipeline built on top of it: feature encoders, the
attention/fusion core, batch losses, an Adam training loop, recall@K
evaluation, and a synthetic benchmark with on-disk formats.
"""

from camp.config import ModelConfig, SyntheticSpec, TrainConfig
from camp.tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "ModelConfig",
    "SyntheticSpec",
    "TrainConfig",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
