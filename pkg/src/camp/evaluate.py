"""Retrieval scoring and recall@K metrics."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from camp.config import ModelConfig
from camp.data import Dataset
from camp.encoders import encode_caption, encode_image
from camp.model import FeatureBatch, forward
from camp.params import CampParams


@dataclass
class RecallTriple:
    r1: float
    r5: float
    r10: float

    def as_dict(self) -> dict:
        return {"r1": self.r1, "r5": self.r5, "r10": self.r10}


@dataclass
class RetrievalReport:
    caption_retrieval: RecallTriple
    image_retrieval: RecallTriple
    rsum: float
    pair_count: int

    def as_dict(self) -> dict:
        return {
            "caption_retrieval": self.caption_retrieval.as_dict(),
            "image_retrieval": self.image_retrieval.as_dict(),
            "rsum": self.rsum,
            "pair_count": self.pair_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


def score_all(
    images: list[np.ndarray],
    captions: list[list[int]],
    params: CampParams,
    cfg: ModelConfig,
    threads: int = 1,
) -> np.ndarray:
    """Score every image against every caption; (n_img, n_cap), no tape.

    Encoders run once per item; the pairwise core runs for each cell.
    """
    if not images or not captions:
        raise ValueError("score_all: empty gallery")
    img_feats = [encode_image(np.asarray(m, dtype=np.float64), params.encoder) for m in images]
    cap_feats = [encode_caption(c, params.encoder, cfg) for c in captions]

    out = np.zeros((len(images), len(captions)))

    def fill_row(i: int) -> None:
        v = img_feats[i]
        for j, (t, mask) in enumerate(cap_feats):
            out[i, j] = forward(FeatureBatch(v, t, mask), params, cfg).item()

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(len(images))))
    else:
        for i in range(len(images)):
            fill_row(i)
    return out


def score_dataset(ds: Dataset, params: CampParams, cfg: ModelConfig, threads: int = 1) -> np.ndarray:
    return score_all(ds.regions, ds.captions, params, cfg, threads=threads)


def _rank_of(scores: np.ndarray, target: int) -> int:
    """Rank of ``target`` under descending score, ties going to lower index."""
    s = scores[target]
    better = int((scores > s).sum())
    tied_before = int(((scores == s) & (np.arange(scores.size) < target)).sum())
    return better + tied_before


def _effective_k(k: int, size: int) -> int:
    if k > size:
        warnings.warn(
            f"recall_at_k: k={k} exceeds gallery size {size}; using the full gallery",
            RuntimeWarning,
        )
        return size
    return k


def recall_at_k(scores: np.ndarray, cap_to_img: list[int], k: int, direction: str) -> float:
    """Fraction of queries whose ground truth lands in the top-k.

    ``direction="image"``: each caption queries the image gallery (its
    column). ``direction="caption"``: each image queries the captions (its
    row); a hit is at least one of its ground-truth captions in the top-k.
    """
    if k < 1:
        raise ValueError(f"recall_at_k: k must be >= 1, got {k}")
    n_img, n_cap = scores.shape
    gt = np.asarray(cap_to_img)
    if direction == "image":
        k_eff = _effective_k(k, n_img)
        hits = sum(
            1 for j in range(n_cap) if _rank_of(scores[:, j], int(gt[j])) < k_eff
        )
        return hits / n_cap
    if direction == "caption":
        k_eff = _effective_k(k, n_cap)
        hits = 0
        for i in range(n_img):
            own = np.flatnonzero(gt == i)
            if own.size and min(_rank_of(scores[i, :], int(j)) for j in own) < k_eff:
                hits += 1
        return hits / n_img
    raise ValueError(f"direction must be 'image' or 'caption', got {direction!r}")


def retrieval_report(scores: np.ndarray, cap_to_img: list[int]) -> RetrievalReport:
    cap = RecallTriple(*(recall_at_k(scores, cap_to_img, k, "caption") for k in (1, 5, 10)))
    img = RecallTriple(*(recall_at_k(scores, cap_to_img, k, "image") for k in (1, 5, 10)))
    rsum = cap.r1 + cap.r5 + cap.r10 + img.r1 + img.r5 + img.r10
    return RetrievalReport(
        caption_retrieval=cap,
        image_retrieval=img,
        rsum=rsum,
        pair_count=len(cap_to_img),
    )


def folded_report(
    scores: np.ndarray, cap_to_img: list[int], n_folds: int = 1
) -> RetrievalReport:
    """Average the report over consecutive image folds (single fold by default)."""
    if n_folds <= 1:
        return retrieval_report(scores, cap_to_img)
    n_img = scores.shape[0]
    bounds = np.linspace(0, n_img, n_folds + 1, dtype=int)
    gt = np.asarray(cap_to_img)
    reports = []
    for f in range(n_folds):
        lo, hi = bounds[f], bounds[f + 1]
        cap_idx = np.flatnonzero((gt >= lo) & (gt < hi))
        sub = scores[np.ix_(np.arange(lo, hi), cap_idx)]
        reports.append(retrieval_report(sub, (gt[cap_idx] - lo).tolist()))
    mean = lambda vals: float(np.mean(vals))  # noqa: E731
    cap = RecallTriple(
        mean([r.caption_retrieval.r1 for r in reports]),
        mean([r.caption_retrieval.r5 for r in reports]),
        mean([r.caption_retrieval.r10 for r in reports]),
    )
    img = RecallTriple(
        mean([r.image_retrieval.r1 for r in reports]),
        mean([r.image_retrieval.r5 for r in reports]),
        mean([r.image_retrieval.r10 for r in reports]),
    )
    return RetrievalReport(
        caption_retrieval=cap,
        image_retrieval=img,
        rsum=cap.r1 + cap.r5 + cap.r10 + img.r1 + img.r5 + img.r10,
        pair_count=len(cap_to_img),
    )


def evaluate_dataset(
    ds: Dataset, params: CampParams, cfg: ModelConfig, threads: int = 1, n_folds: int = 1
) -> RetrievalReport:
    return folded_report(score_dataset(ds, params, cfg, threads=threads), ds.cap_to_img, n_folds)
