"""Cross-modal matching core.

Pipeline for one image/sentence pair: an affinity matrix between projected
region and word features drives two attention directions that aggregate
"messages" (region features per word, word features per region); each
modality is fused with its incoming message through a sigmoid gate, a
learned transform, and a residual connection; fused features are attention-
pooled to a single vector per modality, and an MLP (or cosine) turns the
pooled pair into a matching score.

All variant switches from :class:`camp.config.ModelConfig` route through
:func:`forward`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from camp import tensor as tz
from camp.config import ConfigError, ModelConfig
from camp.params import CampCoreParams, CampParams, FuseTransform
from camp.tensor import Tensor

# Count of scoring forward passes, for cost assertions in tests.
FORWARD_CALLS = 0


def reset_forward_counter() -> None:
    global FORWARD_CALLS
    FORWARD_CALLS = 0


@dataclass
class FeatureBatch:
    """Encoded features of one image/sentence pair."""

    regions: Tensor  # (d, R)
    words: Tensor  # (d, N)
    word_mask: np.ndarray  # (N,) bool, True at real tokens

    def __post_init__(self):
        self.word_mask = np.asarray(self.word_mask, dtype=bool)
        if self.regions.shape[0] != self.words.shape[0]:
            raise ConfigError(
                f"feature dims differ: regions {self.regions.shape} vs words {self.words.shape}"
            )
        if self.word_mask.size != self.words.shape[1]:
            raise ConfigError("word mask length does not match word count")


def affinity(batch: FeatureBatch, p: CampCoreParams) -> Tensor:
    """Region-word affinity: inner products of the projected features, (R, N)."""
    proj_regions = tz.matmul(p.vis_proj, batch.regions)  # (d_h, R)
    proj_words = tz.matmul(p.txt_proj, batch.words)  # (d_h, N)
    return tz.matmul(tz.transpose(proj_regions), proj_words)


def aggregate_messages(
    aff: Tensor, batch: FeatureBatch, d_h: int
) -> tuple[Tensor, Tensor]:
    """Attention-weighted cross-modal messages.

    Returns ``(vis_messages, txt_messages)``: row i of ``vis_messages``
    (N, d) mixes region features by word i's attention over regions; row j
    of ``txt_messages`` (R, d) mixes the real word features by region j's
    attention over words.
    """
    temp = math.sqrt(d_h)
    att_regions = tz.scaled_softmax(tz.transpose(aff), temp)  # (N, R)
    vis_messages = tz.matmul_canonical(att_regions, tz.transpose(batch.regions))
    word_mask = np.tile(batch.word_mask, (aff.shape[0], 1))
    att_words = tz.scaled_softmax(aff, temp, mask=word_mask)  # (R, N)
    txt_messages = tz.matmul_canonical(att_words, tz.transpose(batch.words))
    return vis_messages, txt_messages


def _mean_messages(batch: FeatureBatch) -> tuple[Tensor, Tensor]:
    """Cross-attention ablation: every message is the other modality's mean."""
    n_regions = batch.regions.shape[1]
    n_words = batch.words.shape[1]
    uniform_regions = Tensor(np.full((n_words, n_regions), 1.0 / n_regions))
    vis_messages = tz.matmul_canonical(uniform_regions, tz.transpose(batch.regions))
    word_w = batch.word_mask / batch.word_mask.sum()
    uniform_words = Tensor(np.tile(word_w, (n_regions, 1)))
    txt_messages = tz.matmul_canonical(uniform_words, tz.transpose(batch.words))
    return vis_messages, txt_messages


def _gated_fuse(
    x: Tensor, messages: Tensor, transform: FuseTransform, cfg: ModelConfig
) -> tuple[Tensor, Tensor | None]:
    """Fuse features (d, K) with incoming messages (K, d); returns (fused, gates)."""
    if messages.shape != (x.shape[1], x.shape[0]):
        raise ConfigError(
            f"messages shaped {messages.shape} do not pair with features {x.shape}"
        )
    incoming = tz.transpose(messages)  # (d, K)
    gates = tz.sigmoid(tz.mul(x, incoming)) if cfg.use_gates else None

    if cfg.fusion_op == "add":
        core = tz.add(x, incoming)
        gate_full = gates
    elif cfg.fusion_op == "product":
        core = tz.mul(x, incoming)
        gate_full = gates
    elif cfg.fusion_op == "concat":
        core = tz.concat_rows(x, incoming)  # (2d, K)
        gate_full = tz.concat_rows(gates, gates) if gates is not None else None
    else:  # pragma: no cover - ModelConfig validates
        raise ConfigError(f"unknown fusion_op {cfg.fusion_op!r}")

    expected_in = core.shape[0]
    if transform.w.shape[1] != expected_in:
        raise ConfigError(
            f"fusion transform expects input dim {transform.w.shape[1]}, "
            f"but fusion_op={cfg.fusion_op!r} produces {expected_in}"
        )
    gated = tz.mul(gate_full, core) if gate_full is not None else core
    fused = tz.tanh(tz.linear(gated, transform.w, transform.b))
    if cfg.use_residual:
        fused = tz.add(fused, x)
    return fused, gates


def gated_fuse(x: Tensor, messages: Tensor, transform: FuseTransform, cfg: ModelConfig) -> Tensor:
    fused, _ = _gated_fuse(x, messages, transform, cfg)
    return fused


def attend_aggregate(
    x: Tensor,
    w: Tensor,
    d: int,
    mask: np.ndarray | None = None,
    aggregation: str = "attention",
) -> Tensor:
    """Pool columns of (d, K) into a single vector (d,).

    Attention mode scores each column with ``w`` at temperature sqrt(d);
    mean mode weights the unmasked columns uniformly.
    """
    k = x.shape[1]
    if aggregation == "attention":
        logits = tz.matmul(w, x)  # (1, K)
        att_mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        att = tz.scaled_softmax(logits, math.sqrt(d), mask=att_mask)
        pooled = tz.matmul_canonical(x, tz.transpose(att))  # (d, 1)
    elif aggregation == "mean":
        if mask is None:
            weights = np.full((k, 1), 1.0 / k)
        else:
            m = np.asarray(mask, dtype=bool)
            if not m.any():
                raise tz.DegenerateRowError("attend_aggregate: all columns masked")
            weights = (m / m.sum())[:, None]
        pooled = tz.matmul_canonical(x, Tensor(weights))
    else:  # pragma: no cover - ModelConfig validates
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    return tz.reshape(pooled, (d,))


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    qa = tz.sum_all(tz.mul(a, a))
    qb = tz.sum_all(tz.mul(b, b))
    if qa.item() == 0.0 or qb.item() == 0.0:
        warnings.warn("cosine score of a zero vector defined as 0", RuntimeWarning)
        return Tensor(0.0)
    denom = tz.sqrt(tz.mul(qa, qb))
    return tz.div(tz.sum_all(tz.mul(a, b)), denom)


def match_score(
    v_star: Tensor, t_star: Tensor, p: CampCoreParams, cfg: ModelConfig
) -> Tensor:
    """Scalar matching score: sigmoid-MLP of the pooled sum, or cosine."""
    if v_star.shape != t_star.shape:
        raise ConfigError(f"pooled shapes differ: {v_star.shape} vs {t_star.shape}")
    if cfg.scorer == "cosine":
        return _cosine(v_star, t_star)
    joint = tz.reshape(tz.add(v_star, t_star), (v_star.shape[0], 1))
    # tanh hidden: a relu layer here collapses (all units dead -> constant
    # score -> zero gradient) under the balanced BCE saddle at small scale
    hidden = tz.tanh(tz.linear(joint, p.score_w1, p.score_b1))
    out = tz.sigmoid(tz.linear(hidden, p.score_w2, p.score_b2))
    return tz.reshape(out, ())


def _forward(
    batch: FeatureBatch,
    params: CampParams | CampCoreParams,
    cfg: ModelConfig,
    collect: dict | None = None,
) -> Tensor:
    global FORWARD_CALLS
    FORWARD_CALLS += 1
    core = params.core if isinstance(params, CampParams) else params
    d = batch.regions.shape[0]

    if cfg.variant == "base":
        v_star = attend_aggregate(batch.regions, core.pool_vis, d, aggregation=cfg.aggregation)
        t_star = attend_aggregate(batch.words, core.pool_txt, d, mask=batch.word_mask,
                                  aggregation=cfg.aggregation)
        return _cosine(v_star, t_star)

    if cfg.variant == "no_fusion" or not cfg.use_fusion:
        aff = affinity(batch, core)
        vis_messages, txt_messages = aggregate_messages(aff, batch, cfg.d_hidden)
        enriched_regions = tz.add(batch.regions, tz.transpose(txt_messages))
        enriched_words = tz.add(batch.words, tz.transpose(vis_messages))
        v_star = attend_aggregate(enriched_regions, core.pool_vis, d, aggregation=cfg.aggregation)
        t_star = attend_aggregate(enriched_words, core.pool_txt, d, mask=batch.word_mask,
                                  aggregation=cfg.aggregation)
        return _cosine(v_star, t_star)

    if cfg.use_cross_attn:
        aff = affinity(batch, core)
        vis_messages, txt_messages = aggregate_messages(aff, batch, cfg.d_hidden)
    else:
        vis_messages, txt_messages = _mean_messages(batch)

    fused_regions, gates_vis = _gated_fuse(batch.regions, txt_messages, core.fuse_vis, cfg)
    fused_words, gates_txt = _gated_fuse(batch.words, vis_messages, core.fuse_txt, cfg)

    if collect is not None and gates_vis is not None:
        vis_vals = gates_vis.data
        txt_vals = gates_txt.data[:, batch.word_mask]
        collect["gate_mean_visual"] = float(vis_vals.mean())
        collect["gate_mean_textual"] = float(txt_vals.mean())
        collect["gate_mean"] = float(
            (vis_vals.sum() + txt_vals.sum()) / (vis_vals.size + txt_vals.size)
        )
        collect["gates_visual"] = vis_vals
        collect["gates_textual"] = txt_vals

    v_star = attend_aggregate(fused_regions, core.pool_vis, d, aggregation=cfg.aggregation)
    t_star = attend_aggregate(fused_words, core.pool_txt, d, mask=batch.word_mask,
                              aggregation=cfg.aggregation)
    return match_score(v_star, t_star, core, cfg)


def forward(batch: FeatureBatch, params: CampParams | CampCoreParams, cfg: ModelConfig) -> Tensor:
    """Matching score for one pair, as a 0-d tensor."""
    return _forward(batch, params, cfg)


def forward_diagnostics(
    batch: FeatureBatch, params: CampParams | CampCoreParams, cfg: ModelConfig
) -> tuple[Tensor, dict]:
    """Forward pass that also reports gate statistics (empty for ungated variants)."""
    collect: dict = {}
    score = _forward(batch, params, cfg, collect=collect)
    return score, collect
