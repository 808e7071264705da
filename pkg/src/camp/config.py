"""Dataclass configs: model switches, training hyperparameters, benchmark spec."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Inconsistent or unknown configuration value."""


FUSION_OPS = ("add", "concat", "product")
AGGREGATIONS = ("attention", "mean")
SCORERS = ("mlp", "cosine")
VARIANTS = ("camp", "base", "no_fusion")
LOSSES = ("bce_hardest", "bce_plain", "ranking")

PAD_TOKEN = 0  # reserved padding token id in every vocabulary


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches and dimensions.

    Defaults document the full-scale configuration; desk-scale runs shrink
    the dimensions via :func:`desk_model_config`.
    """

    d: int = 1024  # shared feature dimension of regions and words
    d_h: int | None = None  # affinity projection dim; defaults to d // 2
    raw_region_dim: int = 2048
    embed_dim: int = 300
    vocab_size: int = 10000
    max_words: int = 50
    fusion_op: str = "add"
    use_gates: bool = True
    use_residual: bool = True
    use_cross_attn: bool = True
    use_fusion: bool = True
    aggregation: str = "attention"
    scorer: str = "mlp"
    variant: str = "camp"

    def __post_init__(self):
        if self.fusion_op not in FUSION_OPS:
            raise ConfigError(f"fusion_op must be one of {FUSION_OPS}, got {self.fusion_op!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d < 1 or self.vocab_size < 2 or self.embed_dim < 1:
            raise ConfigError("dimensions must be positive (vocab needs a padding id)")
        if self.d_h is not None and self.d_h > self.d:
            raise ConfigError(f"d_h={self.d_h} must not exceed d={self.d}")

    @property
    def d_hidden(self) -> int:
        return self.d_h if self.d_h is not None else max(1, self.d // 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class TrainConfig:
    """Optimizer schedule and batch settings.

    The learning rate runs at ``lr_phase1`` for the first ``phase1_epochs``
    epochs and at ``lr_phase2`` afterwards. Early stopping keeps the
    checkpoint with the best validation rsum.
    """

    batch_size: int = 16
    epochs_total: int = 40
    lr_phase1: float = 2e-4
    phase1_epochs: int = 15
    lr_phase2: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    grad_clip: float = 2.0
    margin: float = 0.2
    loss: str = "bce_hardest"
    seed: int = 0
    debug_checks: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (needs in-batch negatives)")
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr_phase1 if epoch < self.phase1_epochs else self.lr_phase2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic retrieval benchmark.

    Every pair plants a unique set of latent concepts: image regions are
    noisy copies of concept prototype vectors (plus optional pure-noise
    distractors) and the caption carries the matching concept token ids in
    random order, padded with filler tokens.
    """

    n_pairs: int = 200  # training pairs
    val_pairs: int = 50
    test_pairs: int = 50
    n_concepts: int = 20
    regions_per_image: int = 4
    words_per_caption: int = 6
    raw_region_dim: int = 2048
    vocab_size: int = 64
    noise_sigma: float = 0.1
    distractor_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_concepts > self.vocab_size - 2:
            # ids: 0 = padding, 1..n_concepts = concepts, rest = fillers
            raise ConfigError(
                f"vocab_size={self.vocab_size} too small for {self.n_concepts} "
                "concepts plus padding and filler tokens"
            )
        if not (1 <= self.regions_per_image <= 36):
            raise ConfigError("regions_per_image must be in [1, 36]")
        if not (1 <= self.words_per_caption <= 50):
            raise ConfigError("words_per_caption must be in [1, 50]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not (0.0 <= self.distractor_rate < 1.0):
            raise ConfigError("distractor_rate must be in [0, 1)")
        if min(self.n_pairs, self.val_pairs, self.test_pairs) < 0:
            raise ConfigError("split sizes must be non-negative")

    @property
    def concepts_per_pair(self) -> int:
        usable_regions = self.regions_per_image - self.distractor_count
        return max(1, min(self.words_per_caption, usable_regions, self.n_concepts))

    @property
    def distractor_count(self) -> int:
        n = int(self.distractor_rate * self.regions_per_image)
        return min(n, self.regions_per_image - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_model_config(vocab_size: int = 64, raw_region_dim: int = 2048, **overrides) -> ModelConfig:
    """Small configuration that trains in minutes on one core."""
    base = dict(d=32, embed_dim=16, vocab_size=vocab_size, raw_region_dim=raw_region_dim)
    base.update(overrides)
    return ModelConfig(**base)


def desk_train_config(**overrides) -> TrainConfig:
    base = dict(batch_size=16, epochs_total=30)
    base.update(overrides)
    return TrainConfig(**base)


# Ablation grid: variant name -> (ModelConfig field overrides, loss name).
ABLATION_GRID: dict[str, tuple[dict, str]] = {
    "camp": ({}, "bce_hardest"),
    "base": ({"variant": "base", "scorer": "cosine"}, "ranking"),
    "no-cross-attn": ({"use_cross_attn": False}, "bce_hardest"),
    "no-fusion": ({"variant": "no_fusion", "use_fusion": False, "scorer": "cosine"}, "ranking"),
    "no-gates": ({"use_gates": False}, "bce_hardest"),
    "no-residual": ({"use_residual": False}, "bce_hardest"),
    "concat": ({"fusion_op": "concat"}, "bce_hardest"),
    "product": ({"fusion_op": "product"}, "bce_hardest"),
    "joint-embedding": ({"scorer": "cosine"}, "ranking"),
    "mlp-ranking": ({"scorer": "mlp"}, "ranking"),
    "bce-plain": ({}, "bce_plain"),
}


def variant_config(name: str, base: ModelConfig) -> tuple[ModelConfig, str]:
    """Resolve an ablation row into a concrete config and its loss."""
    if name not in ABLATION_GRID:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(ABLATION_GRID)}")
    overrides, loss = ABLATION_GRID[name]
    cfg = dataclasses.replace(base, **overrides)
    return cfg, loss


def load_config_file(path) -> dict:
    """Read a JSON config file with optional "model" / "train" sections."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return payload
