"""Mini-batch losses over a square score matrix.

Row/column ``i`` of the matrix hold the scores of image ``i`` against every
caption and of caption ``i`` against every image; the diagonal carries the
positive pairs. Hardest negatives are the highest-scoring mismatched
entries per row/column. Losses are negated log-likelihoods averaged over
the batch, so minimizing them is the right direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camp import tensor as tz
from camp.tensor import Tensor

SCORE_FLOOR = 1e-7  # clamp window applied before any log


class DomainError(ValueError):
    """Scores are outside the range the loss is defined on."""


@dataclass
class ScoreMatrix:
    """Pairwise match scores with positives on the diagonal."""

    scores: Tensor  # (B, B)

    def __post_init__(self):
        shape = self.scores.shape
        if len(shape) != 2 or shape[0] != shape[1] or shape[0] < 2:
            raise DomainError(f"score matrix must be square with B >= 2, got {shape}")

    @classmethod
    def from_grid(cls, grid: list[list[Tensor]]) -> "ScoreMatrix":
        return cls(scores=tz.stack2d(grid))

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]


@dataclass
class LossValue:
    """Scalar training loss plus its per-direction breakdown."""

    value: Tensor
    components: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.value.item()


def hardest_negative_indices(
    scores: np.ndarray, hardest_by: str = "score"
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row and per-column hardest (off-diagonal) indices.

    ``hardest_by="score"`` picks the highest-scoring negative. The
    alternative ``"loss-term"`` maximizes log(1 - s) instead, which selects
    the lowest-scoring negative; it exists to compare both readings of the
    selection rule.
    """
    if hardest_by not in ("score", "loss-term"):
        raise ValueError(f"hardest_by must be 'score' or 'loss-term', got {hardest_by!r}")
    b = scores.shape[0]
    masked = scores.copy()
    if hardest_by == "score":
        np.fill_diagonal(masked, -np.inf)
        row = masked.argmax(axis=1)
        col = masked.argmax(axis=0)
    else:
        np.fill_diagonal(masked, np.inf)
        row = masked.argmin(axis=1)
        col = masked.argmin(axis=0)
    assert (row != np.arange(b)).all() and (col != np.arange(b)).all()
    return row, col


def _check_bce_domain(values: np.ndarray) -> None:
    if (values < 0.0).any() or (values > 1.0).any():
        bad = values[(values < 0.0) | (values > 1.0)]
        raise DomainError(
            f"BCE losses need scores in (0, 1); got values like {bad.flat[0]:.4g}"
        )


def _log(t: Tensor) -> Tensor:
    return tz.log(tz.clamp(t, SCORE_FLOOR, 1.0 - SCORE_FLOOR))


def _log1m(t: Tensor) -> Tensor:
    return _log(tz.add_scalar(tz.scale(t, -1.0), 1.0))


def bce_hardest(sm: ScoreMatrix, hardest_by: str = "score") -> LossValue:
    """Binary cross-entropy over positives and their hardest in-batch negatives.

    Gradients touch only the diagonal and the selected negative entries.
    """
    s = sm.scores
    _check_bce_domain(s.data)
    b = sm.batch_size
    row_neg, col_neg = hardest_negative_indices(s.data, hardest_by)

    i2t_terms = []
    t2i_terms = []
    for i in range(b):
        pos = tz.entry(s, i, i)
        i2t_terms.append(tz.add(_log(pos), _log1m(tz.entry(s, i, int(row_neg[i])))))
        t2i_terms.append(tz.add(_log(pos), _log1m(tz.entry(s, int(col_neg[i]), i))))

    i2t = tz.scale(_tree_sum(i2t_terms), -1.0 / b)
    t2i = tz.scale(_tree_sum(t2i_terms), -1.0 / b)
    total = tz.add(i2t, t2i)
    return LossValue(value=total, components={"i2t": i2t.item(), "t2i": t2i.item()})


def bce_plain(sm: ScoreMatrix) -> LossValue:
    """Binary cross-entropy over every negative, balanced by the negative count."""
    s = sm.scores
    _check_bce_domain(s.data)
    b = sm.batch_size
    neg_weight = 1.0 / (b - 1)

    i2t_terms = []
    t2i_terms = []
    for i in range(b):
        pos_log = _log(tz.entry(s, i, i))
        row_negs = [_log1m(tz.entry(s, i, j)) for j in range(b) if j != i]
        col_negs = [_log1m(tz.entry(s, k, i)) for k in range(b) if k != i]
        i2t_terms.append(tz.add(pos_log, tz.scale(_tree_sum(row_negs), neg_weight)))
        t2i_terms.append(tz.add(pos_log, tz.scale(_tree_sum(col_negs), neg_weight)))

    i2t = tz.scale(_tree_sum(i2t_terms), -1.0 / b)
    t2i = tz.scale(_tree_sum(t2i_terms), -1.0 / b)
    total = tz.add(i2t, t2i)
    return LossValue(value=total, components={"i2t": i2t.item(), "t2i": t2i.item()})


def ranking_hardest(sm: ScoreMatrix, alpha: float = 0.2) -> LossValue:
    """Hinge ranking loss against the hardest in-batch negatives."""
    if alpha < 0:
        raise ValueError(f"margin must be non-negative, got {alpha}")
    s = sm.scores
    b = sm.batch_size
    row_neg, col_neg = hardest_negative_indices(s.data, "score")

    i2t_terms = []
    t2i_terms = []
    for i in range(b):
        pos = tz.entry(s, i, i)
        row_hinge = tz.relu(tz.add_scalar(tz.sub(tz.entry(s, i, int(row_neg[i])), pos), alpha))
        col_hinge = tz.relu(tz.add_scalar(tz.sub(tz.entry(s, int(col_neg[i]), i), pos), alpha))
        i2t_terms.append(row_hinge)
        t2i_terms.append(col_hinge)

    i2t = tz.scale(_tree_sum(i2t_terms), 1.0 / b)
    t2i = tz.scale(_tree_sum(t2i_terms), 1.0 / b)
    total = tz.add(i2t, t2i)
    return LossValue(value=total, components={"i2t": i2t.item(), "t2i": t2i.item()})


def _tree_sum(terms: list[Tensor]) -> Tensor:
    """Pairwise sum of scalar tensors (shallower tape than a left fold)."""
    assert terms
    while len(terms) > 1:
        nxt = [tz.add(terms[i], terms[i + 1]) for i in range(0, len(terms) - 1, 2)]
        if len(terms) % 2:
            nxt.append(terms[-1])
        terms = nxt
    return terms[0]


def compute_loss(sm: ScoreMatrix, name: str, margin: float = 0.2) -> LossValue:
    """Dispatch by configured loss name."""
    if name == "bce_hardest":
        return bce_hardest(sm)
    if name == "bce_plain":
        return bce_plain(sm)
    if name == "ranking":
        return ranking_hardest(sm, alpha=margin)
    raise ValueError(f"unknown loss {name!r}")
