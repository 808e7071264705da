"""Mini-batch training: Adam, two-phase learning rate, early stopping.

Scoring a batch costs B^2 core forward passes (the fused architecture has
no per-modality embeddings to cache), but each item is encoded only once
per batch and shared across its row/column of the score grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from camp import tensor as tz
from camp.config import ModelConfig, TrainConfig
from camp.data import Checkpoint, Dataset
from camp.encoders import encode_caption, encode_image
from camp.evaluate import evaluate_dataset
from camp.losses import ScoreMatrix, compute_loss, hardest_negative_indices
from camp.model import FeatureBatch, _forward
from camp.params import CampParams
from camp.tensor import Tape, Tensor, backward


class TrainingError(RuntimeError):
    """Optimizer invoked in an inconsistent state."""


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates and the shared step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict:
        # deep copy: the live moment arrays are mutated in place by adam_step
        return {
            "step": self.step,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AdamState":
        return cls(
            step=int(payload["step"]),
            m={k: np.asarray(a, dtype=np.float64).copy() for k, a in payload["m"].items()},
            v={k: np.asarray(a, dtype=np.float64).copy() for k, a in payload["v"].items()},
        )


def adam_step(
    named_params: list[tuple[str, Tensor]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over the given parameters."""
    for name, t in named_params:
        if t.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, t in named_params:
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(named_params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for _, t in named_params:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, t in named_params:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if b.size >= 2]  # a lone pair has no negatives


def train_epoch(
    data: Dataset,
    params: CampParams,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    opt: AdamState,
    rng: np.random.Generator,
    lr: float,
) -> dict:
    """One pass over the data; returns mean loss and gate statistics."""
    named = params.trainable(model_cfg)
    losses = []
    pos_gates: list[float] = []
    neg_gates: list[float] = []

    for idx in _batch_indices(len(data), train_cfg.batch_size, rng):
        with Tape() as tape:
            img_feats = [
                encode_image(np.asarray(data.regions[i], dtype=np.float64), params.encoder)
                for i in idx
            ]
            cap_feats = [encode_caption(data.captions[i], params.encoder, model_cfg) for i in idx]
            grid = []
            for a, v in enumerate(img_feats):
                row = []
                for b, (t, mask) in enumerate(cap_feats):
                    collect: dict = {}
                    score = _forward(FeatureBatch(v, t, mask), params, model_cfg, collect=collect)
                    if "gate_mean" in collect:
                        (pos_gates if a == b else neg_gates).append(collect["gate_mean"])
                    row.append(score)
                grid.append(row)
            sm = ScoreMatrix.from_grid(grid)
            loss = compute_loss(sm, train_cfg.loss, margin=train_cfg.margin)
        if train_cfg.debug_checks:
            _assert_hardest_selection(sm)
        backward(tape, loss.value)
        clip_gradients(named, train_cfg.grad_clip)
        adam_step(named, opt, lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
        params.clear_grads()
        losses.append(loss.item())

    return {
        "loss": float(np.mean(losses)) if losses else None,
        "mean_pos_gate": float(np.mean(pos_gates)) if pos_gates else None,
        "mean_neg_gate": float(np.mean(neg_gates)) if neg_gates else None,
        "batches": len(losses),
    }


def _assert_hardest_selection(sm: ScoreMatrix) -> None:
    s = sm.scores.data
    row, col = hardest_negative_indices(s)
    b = s.shape[0]
    for i in range(b):
        others_row = [s[i, j] for j in range(b) if j != i]
        others_col = [s[k, i] for k in range(b) if k != i]
        assert s[i, row[i]] == max(others_row)
        assert s[col[i], i] == max(others_col)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def make_checkpoint(
    params: CampParams,
    model_cfg: ModelConfig,
    rsum: float,
    epoch: int,
    opt: AdamState | None = None,
    rng: np.random.Generator | None = None,
) -> Checkpoint:
    return Checkpoint(
        model_cfg=model_cfg,
        params=params.state_dict(),
        best_rsum=rsum,
        epoch=epoch,
        rng_state=None if rng is None else _rng_state(rng),
        opt_state=None if opt is None else opt.as_dict(),
    )


def fit(
    train: Dataset,
    val: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    params: CampParams | None = None,
    on_epoch=None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Train with the two-phase schedule; keep the best-validation checkpoint.

    Stops once the validation rsum has failed to improve for more than
    ``early_stop_patience`` consecutive epochs. Both the parameter
    initialization and the batch order derive from ``train_cfg.seed``.
    """
    init_ss, epoch_ss = np.random.SeedSequence(train_cfg.seed).spawn(2)
    if params is None:
        params = CampParams.init(model_cfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(epoch_ss)
    opt = AdamState()
    start_epoch = 0
    if resume is not None:
        params.load_state(resume.params)
        if resume.opt_state is not None:
            opt = AdamState.from_dict(resume.opt_state)
        if resume.rng_state is not None:
            rng = _restore_rng(resume.rng_state)
        start_epoch = resume.epoch + 1

    best: Checkpoint | None = None
    best_rsum = -np.inf
    stall = 0
    history: list[dict] = []
    for epoch in range(start_epoch, train_cfg.epochs_total):
        lr = train_cfg.lr_at(epoch)
        stats = train_epoch(train, params, model_cfg, train_cfg, opt, rng, lr)
        report = evaluate_dataset(val, params, model_cfg)
        record = {
            "epoch": epoch,
            "loss": stats["loss"],
            "lr": lr,
            "val_rsum": report.rsum,
            "mean_pos_gate": stats["mean_pos_gate"],
            "mean_neg_gate": stats["mean_neg_gate"],
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if report.rsum > best_rsum:
            best_rsum = report.rsum
            best = make_checkpoint(params, model_cfg, report.rsum, epoch, opt=opt, rng=rng)
            stall = 0
        else:
            stall += 1
            if stall > train_cfg.early_stop_patience:
                break
    if best is None:  # zero epochs requested
        best = make_checkpoint(params, model_cfg, 0.0, -1, opt=opt, rng=rng)
    return best, history
