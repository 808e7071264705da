"""Finite-difference verification suite for every differentiable operation.

Backs the ``camp gradcheck`` command and the acceptance tests: each op is
checked on ten random shapes/seeds, plus the encoder and the full matching
pipeline end to end.
"""

from __future__ import annotations

import numpy as np

from camp import tensor as tz
from camp.config import ModelConfig
from camp.encoders import RawRegionFeatures, clip_and_pad, encode_words, project_regions
from camp.model import FeatureBatch, forward
from camp.params import CampCoreParams, EncoderParams
from camp.tensor import Tensor, grad_check


def _mask(rng, shape):
    m = rng.random(size=shape) > 0.3
    m[..., 0] = True
    return m


def _op_cases(rng):
    return {
        "matmul": (
            lambda a, b: tz.sum_all(tz.matmul(a, b)),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        ),
        "matmul_canonical": (
            lambda a, b: tz.sum_all(tz.matmul_canonical(a, b)),
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
        ),
        "linear": (
            lambda x, w, b: tz.sum_all(tz.mul(tz.linear(x, w, b), tz.linear(x, w, b))),
            [rng.normal(size=(3, 5)), rng.normal(size=(2, 3)), rng.normal(size=(2,))],
        ),
        "scaled_softmax": (
            lambda m: tz.sum_all(tz.mul(tz.scaled_softmax(m, 1.7), m)),
            [rng.normal(size=(3, 5))],
        ),
        "scaled_softmax_masked": (
            lambda m, _k=_mask(rng, (3, 5)): tz.sum_all(
                tz.mul(tz.scaled_softmax(m, 1.7, mask=_k), m)
            ),
            [rng.normal(size=(3, 5))],
        ),
        "sigmoid": (
            lambda a: tz.sum_all(tz.mul(tz.sigmoid(a), tz.sigmoid(a))),
            [rng.normal(size=(3, 4))],
        ),
        "tanh": (
            lambda a: tz.sum_all(tz.mul(tz.tanh(a), tz.tanh(a))),
            [rng.normal(size=(3, 4))],
        ),
        "relu": (
            lambda a: tz.sum_all(tz.mul(tz.relu(a), a)),
            [rng.normal(size=(3, 4)) + 0.05],
        ),
        "add_mul_sub_div": (
            lambda a, b: tz.sum_all(tz.div(tz.mul(tz.add(a, b), tz.sub(a, b)), b)),
            [rng.normal(size=(3, 3)), rng.uniform(0.5, 2.0, size=(3, 3))],
        ),
        "log_sqrt_clamp": (
            lambda a: tz.sum_all(tz.log(tz.sqrt(tz.clamp(a, 0.05, 10.0)))),
            [rng.uniform(0.2, 3.0, size=(3, 3))],
        ),
        "concat_gather": (
            lambda a, b: tz.sum_all(
                tz.mul(
                    tz.gather_columns(tz.concat_rows(a, b), [0, 2, 2]),
                    tz.gather_columns(tz.concat_rows(a, b), [0, 2, 2]),
                )
            ),
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))],
        ),
        "stack_entry": (
            lambda a: tz.sum_all(
                tz.stack2d(
                    [
                        [tz.mul(tz.entry(a, 0, 0), tz.entry(a, 1, 1)), tz.entry(a, 0, 1)],
                        [tz.entry(a, 1, 0), tz.entry(a, 1, 1)],
                    ]
                )
            ),
            [rng.normal(size=(2, 2))],
        ),
    }


def _encoder_case(seed: int):
    cfg = ModelConfig(d=5, d_h=2, embed_dim=3, vocab_size=9, raw_region_dim=6, max_words=3)
    rng = np.random.default_rng(seed)
    params = EncoderParams.init(cfg, rng)
    raw = rng.normal(size=(cfg.raw_region_dim, 2))
    seq = clip_and_pad([1, 5, 2], cfg.vocab_size, cfg.max_words)
    names = [name for name, _ in params.named()]

    def assign(tensors):
        for name, t in zip(names, tensors):
            obj = params
            parts = name.split(".")[1:]
            for part in parts[:-1]:
                obj = getattr(obj, part)
            setattr(obj, parts[-1], t)

    def f(*tensors):
        assign(tensors)
        v = project_regions(RawRegionFeatures(Tensor(raw)), params)
        t = encode_words(seq, params)
        return tz.add(tz.sum_all(v), tz.sum_all(t))

    return f, [t.data.copy() for _, t in params.named()]


def _forward_case(seed: int):
    cfg = ModelConfig(d=8, d_h=4, embed_dim=4, vocab_size=8, raw_region_dim=8, max_words=5)
    core = CampCoreParams.init(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(10_000 + seed)
    v = rng.normal(size=(8, 4))
    t = rng.normal(size=(8, 5))
    mask = np.array([True, True, True, True, False])
    names = [name for name, _ in core.named()]

    def f(v_in, t_in, *param_tensors):
        for name, tens in zip(names, param_tensors):
            obj = core
            parts = name.split(".")[1:]
            for part in parts[:-1]:
                obj = getattr(obj, part)
            setattr(obj, parts[-1], tens)
        return forward(FeatureBatch(v_in, t_in, mask), core, cfg)

    return f, [v, t] + [t_.data.copy() for _, t_ in core.named()]


def run_grad_suite(seed: int = 0, op_seeds: int = 10, pipeline_seeds: int = 5) -> dict[str, float]:
    """Worst relative finite-difference error per op and per pipeline."""
    results: dict[str, float] = {}
    names = list(_op_cases(np.random.default_rng(0)))
    for name in names:
        worst = 0.0
        for s in range(op_seeds):
            rng = np.random.default_rng(seed * 1009 + 17 * s)
            f, inputs = _op_cases(rng)[name]
            worst = max(worst, grad_check(f, inputs, eps=1e-5))
        results[name] = worst

    worst = 0.0
    for s in range(3):
        f, inputs = _encoder_case(seed * 31 + s)
        worst = max(worst, grad_check(f, inputs, eps=1e-5))
    results["encoder_end_to_end"] = worst

    worst = 0.0
    for s in range(pipeline_seeds):
        f, inputs = _forward_case(seed * 97 + s)
        worst = max(worst, grad_check(f, inputs, eps=1e-5))
    results["forward_end_to_end"] = worst
    return results
