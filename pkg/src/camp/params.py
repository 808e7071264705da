"""Learnable parameter containers with named access for checkpointing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from camp.config import ModelConfig
from camp.tensor import Tensor


class ParamError(ValueError):
    """Checkpoint state does not match the parameter set."""


def _uniform(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    # fan-in = input dimension (number of columns)
    bound = 1.0 / np.sqrt(cols)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class GruParams:
    """One direction of a gated recurrent cell (update/reset/candidate)."""

    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor

    @classmethod
    def init(cls, hidden: int, inputs: int, rng: np.random.Generator) -> "GruParams":
        return cls(
            w_update=_uniform(rng, hidden, inputs),
            u_update=_uniform(rng, hidden, hidden),
            b_update=_zeros(hidden),
            w_reset=_uniform(rng, hidden, inputs),
            u_reset=_uniform(rng, hidden, hidden),
            b_reset=_zeros(hidden),
            w_cand=_uniform(rng, hidden, inputs),
            u_cand=_uniform(rng, hidden, hidden),
            b_cand=_zeros(hidden),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key in ("w_update", "u_update", "b_update", "w_reset", "u_reset",
                    "b_reset", "w_cand", "u_cand", "b_cand"):
            yield f"{prefix}.{key}", getattr(self, key)


@dataclass
class EncoderParams:
    """Region projection, word embedding, and the bidirectional recurrent cell."""

    region_w: Tensor  # (d, raw_region_dim)
    region_b: Tensor  # (d,)
    embed: Tensor  # (embed_dim, vocab_size), one column per token id
    fwd: GruParams
    bwd: GruParams

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "EncoderParams":
        return cls(
            region_w=_uniform(rng, cfg.d, cfg.raw_region_dim),
            region_b=_zeros(cfg.d),
            embed=_uniform(rng, cfg.embed_dim, cfg.vocab_size),
            fwd=GruParams.init(cfg.d, cfg.embed_dim, rng),
            bwd=GruParams.init(cfg.d, cfg.embed_dim, rng),
        )

    def named(self, prefix: str = "encoder") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.region_w", self.region_w
        yield f"{prefix}.region_b", self.region_b
        yield f"{prefix}.embed", self.embed
        yield from self.fwd.named(f"{prefix}.fwd")
        yield from self.bwd.named(f"{prefix}.bwd")


@dataclass
class FuseTransform:
    """Linear layer + tanh applied to the gated fusion core."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, d: int, in_dim: int, rng: np.random.Generator) -> "FuseTransform":
        return cls(w=_uniform(rng, d, in_dim), b=_zeros(d))


@dataclass
class CampCoreParams:
    """Affinity projections, fusion transforms, pooling rows, and the scorer MLP."""

    vis_proj: Tensor  # (d_h, d)
    txt_proj: Tensor  # (d_h, d)
    fuse_vis: FuseTransform
    fuse_txt: FuseTransform
    pool_vis: Tensor  # (1, d)
    pool_txt: Tensor  # (1, d)
    score_w1: Tensor  # (d, d)
    score_b1: Tensor  # (d,)
    score_w2: Tensor  # (1, d)
    score_b2: Tensor  # (1,)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "CampCoreParams":
        d = cfg.d
        fuse_in = 2 * d if cfg.fusion_op == "concat" else d
        return cls(
            vis_proj=_uniform(rng, cfg.d_hidden, d),
            txt_proj=_uniform(rng, cfg.d_hidden, d),
            fuse_vis=FuseTransform.init(d, fuse_in, rng),
            fuse_txt=FuseTransform.init(d, fuse_in, rng),
            pool_vis=_uniform(rng, 1, d),
            pool_txt=_uniform(rng, 1, d),
            score_w1=_uniform(rng, d, d),
            score_b1=_zeros(d),
            score_w2=_uniform(rng, 1, d),
            score_b2=_zeros(1),
        )

    def named(self, prefix: str = "core") -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.vis_proj", self.vis_proj
        yield f"{prefix}.txt_proj", self.txt_proj
        yield f"{prefix}.fuse_vis.w", self.fuse_vis.w
        yield f"{prefix}.fuse_vis.b", self.fuse_vis.b
        yield f"{prefix}.fuse_txt.w", self.fuse_txt.w
        yield f"{prefix}.fuse_txt.b", self.fuse_txt.b
        yield f"{prefix}.pool_vis", self.pool_vis
        yield f"{prefix}.pool_txt", self.pool_txt
        yield f"{prefix}.score_w1", self.score_w1
        yield f"{prefix}.score_b1", self.score_b1
        yield f"{prefix}.score_w2", self.score_w2
        yield f"{prefix}.score_b2", self.score_b2


@dataclass
class CampParams:
    """Every learnable tensor of the model, addressable by dotted name."""

    encoder: EncoderParams
    core: CampCoreParams

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "CampParams":
        return cls(encoder=EncoderParams.init(cfg, rng), core=CampCoreParams.init(cfg, rng))

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named()
        yield from self.core.named()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ParamError(f"parameter names disagree: missing={missing}, extra={extra}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ParamError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}"
                )
        for name, t in own.items():
            t.data = np.ascontiguousarray(state[name], dtype=np.float64)
            t.grad = None

    def trainable(self, cfg: ModelConfig) -> list[tuple[str, Tensor]]:
        """Parameters actually reachable from the configured forward pass.

        Ablation variants bypass whole blocks; excluding those parameters
        keeps the optimizer's missing-gradient check strict.
        """
        fused = cfg.variant == "camp" and cfg.use_fusion
        if cfg.variant == "base":
            uses_affinity = False  # no cross-modal attention at all
        elif fused:
            uses_affinity = cfg.use_cross_attn  # mean messages skip the projections
        else:
            uses_affinity = True  # message enrichment without fusion
        uses_mlp = fused and cfg.scorer == "mlp"

        drop: set[str] = set()
        if not uses_affinity:
            drop |= {"core.vis_proj", "core.txt_proj"}
        if not fused:
            drop |= {"core.fuse_vis.w", "core.fuse_vis.b", "core.fuse_txt.w", "core.fuse_txt.b"}
        if cfg.aggregation == "mean":
            drop |= {"core.pool_vis", "core.pool_txt"}
        if not uses_mlp:
            drop |= {"core.score_w1", "core.score_b1", "core.score_w2", "core.score_b2"}
        return [(name, t) for name, t in self.named() if name not in drop]

    def clear_grads(self) -> None:
        for _, t in self.named():
            t.grad = None
