"""Tensor engine: forward semantics, tape gradients, finite-difference checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camp import tensor as tz
from camp.tensor import (
    DegenerateRowError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    grad_check,
)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(tz.matmul(a, b).data, b.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(
            tz.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]]
        )

    def test_zero_annihilates(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)))
        z = Tensor(np.zeros((4, 2)))
        np.testing.assert_array_equal(tz.matmul(a, z).data, np.zeros((3, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tz.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_contract(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with Tape() as tape:
            loss = tz.sum_all(tz.matmul(a, b))
        backward(tape, loss)
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)


class TestMatmulCanonical:
    def test_matches_plain_matmul_closely(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(5, 7)))
        b = Tensor(rng.normal(size=(7, 3)))
        np.testing.assert_allclose(
            tz.matmul_canonical(a, b).data, a.data @ b.data, rtol=1e-12
        )

    def test_permutation_of_contracted_axis_is_bit_identical(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            k = int(rng.integers(2, 20))
            a = Tensor(rng.normal(size=(4, k)))
            b = Tensor(rng.normal(size=(k, 6)))
            perm = rng.permutation(k)
            ap = Tensor(a.data[:, perm])
            bp = Tensor(b.data[perm, :])
            np.testing.assert_array_equal(
                tz.matmul_canonical(a, b).data, tz.matmul_canonical(ap, bp).data
            )


class TestScaledSoftmax:
    def test_uniform_row(self):
        out = tz.scaled_softmax(Tensor([[0.0, 0.0, 0.0]]), 1.0)
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_closed_form(self):
        out = tz.scaled_softmax(Tensor([[math.log(2.0), 0.0]]), 1.0)
        np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3]], atol=1e-12)

    def test_mask_forces_all_weight(self):
        out = tz.scaled_softmax(
            Tensor([[5.0, 5.0]]), 1.0, mask=np.array([[True, False]])
        )
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_fully_masked_row_raises(self):
        with pytest.raises(DegenerateRowError):
            tz.scaled_softmax(
                Tensor([[1.0, 2.0]]), 1.0, mask=np.array([[False, False]])
            )

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            tz.scaled_softmax(Tensor([[1.0, 2.0]]), 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one_and_masked_exactly_zero(self, seed):
        rng = np.random.default_rng(seed)
        r, c = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        m = Tensor(rng.normal(scale=5.0, size=(r, c)))
        mask = rng.random(size=(r, c)) > 0.3
        mask[:, 0] = True  # keep every row alive
        out = tz.scaled_softmax(m, float(rng.uniform(0.5, 4.0)), mask=mask)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(r), atol=1e-6)
        assert (out.data[~mask] == 0.0).all()
        assert np.isfinite(out.data).all()

    def test_extreme_logits_stay_finite(self):
        out = tz.scaled_softmax(Tensor([[1e4, -1e4, 0.0]]), 1.0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-6)


class TestPointwise:
    def test_sigmoid_symmetry_point(self):
        assert tz.pointwise("sigmoid", Tensor([0.0])).data[0] == 0.5

    def test_tanh_odd(self):
        assert tz.pointwise("tanh", Tensor([0.0])).data[0] == 0.0

    def test_add(self):
        out = tz.pointwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tz.pointwise("mul", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            tz.pointwise("exp", Tensor([1.0]))

    def test_sigmoid_strictly_inside_unit_interval(self):
        out = tz.sigmoid(Tensor([-1e4, -50.0, 0.0, 50.0, 1e4]))
        assert (out.data > 0.0).all() and (out.data < 1.0).all()


class TestLinear:
    def test_identity_passthrough(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = tz.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_scalar_affine(self):
        out = tz.linear(Tensor([[3.0]]), Tensor([[2.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, [[7.0]])

    def test_zero_input_gives_bias_columns(self):
        b = np.array([1.0, -2.0])
        out = tz.linear(Tensor(np.zeros((3, 4))), Tensor(np.ones((2, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b[:, None], (1, 4)))

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            tz.linear(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = tz.sum_all(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = tz.sum_all(tz.mul(x, x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_constant_loss_writes_nothing(self):
        x = Tensor([1.0, 2.0])  # no grad requested anywhere
        with Tape() as tape:
            loss = tz.sum_all(tz.mul(x, x))
        backward(tape, loss)
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = tz.mul(x, x)
        with pytest.raises(TapeError):
            backward(tape, y)

    def test_foreign_tensor_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            tz.sum_all(tz.mul(x, x))
        stray = tz.sum_all(Tensor([3.0]))  # produced outside the tape
        with pytest.raises(TapeError):
            backward(tape, stray)

    def test_reuse_accumulates(self):
        # y = x + x: dy/dx = 2
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = tz.sum_all(tz.add(x, x))
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_backward_deterministic(self):
        grads = []
        for _ in range(2):
            x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
            w = Tensor(np.linspace(-1, 1, 12).reshape(4, 3), requires_grad=True)
            with Tape() as tape:
                y = tz.matmul(x, w)
                loss = tz.sum_all(tz.mul(tz.sigmoid(y), tz.tanh(y)))
            backward(tape, loss)
            grads.append((x.grad.copy(), w.grad.copy()))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])


class TestGradCheck:
    def test_sigmoid_sum(self):
        rng = np.random.default_rng(11)
        err = grad_check(lambda x: tz.sum_all(tz.sigmoid(x)), [rng.normal(size=(3, 4))])
        assert err < 1e-4

    def test_pure_matmul_chain_is_tight(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))

        def f(x, y):
            return tz.sum_all(tz.matmul(x, y))

        assert grad_check(f, [a, b]) < 1e-6

    def test_constant_function(self):
        c = Tensor([[2.0]])
        err = grad_check(lambda x: tz.sum_all(tz.mul(c, c)), [np.ones(3)])
        assert err == 0.0


def _random_mask(rng, shape):
    mask = rng.random(size=shape) > 0.3
    mask[..., 0] = True
    return mask


# Each differentiable op, exercised at ten random shapes/seeds.
_OP_CASES = {
    "matmul": lambda rng: (
        lambda a, b: tz.sum_all(tz.matmul(a, b)),
        [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
    ),
    "matmul_canonical": lambda rng: (
        lambda a, b: tz.sum_all(tz.matmul_canonical(a, b)),
        [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
    ),
    "transpose": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.transpose(a), tz.transpose(a))),
        [rng.normal(size=(2, 5))],
    ),
    "reshape": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.reshape(a, (6,)), tz.reshape(a, (6,)))),
        [rng.normal(size=(2, 3))],
    ),
    "add": lambda rng: (
        lambda a, b: tz.sum_all(tz.mul(tz.add(a, b), tz.add(a, b))),
        [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))],
    ),
    "sub": lambda rng: (
        lambda a, b: tz.sum_all(tz.mul(tz.sub(a, b), tz.sub(a, b))),
        [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))],
    ),
    "mul": lambda rng: (
        lambda a, b: tz.sum_all(tz.mul(a, b)),
        [rng.normal(size=(4, 2)), rng.normal(size=(4, 2))],
    ),
    "div": lambda rng: (
        lambda a, b: tz.sum_all(tz.div(a, b)),
        [rng.normal(size=(3, 3)), rng.uniform(0.5, 2.0, size=(3, 3))],
    ),
    "scale": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.scale(a, -1.7), a)),
        [rng.normal(size=(4,))],
    ),
    "add_scalar": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.add_scalar(a, 2.5), a)),
        [rng.normal(size=(4,))],
    ),
    "sigmoid": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.sigmoid(a), tz.sigmoid(a))),
        [rng.normal(size=(3, 4))],
    ),
    "tanh": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.tanh(a), tz.tanh(a))),
        [rng.normal(size=(3, 4))],
    ),
    "relu": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.relu(a), a)),
        [rng.normal(size=(3, 4)) + 0.05],  # keep coordinates off the kink
    ),
    "linear": lambda rng: (
        lambda x, w, b: tz.sum_all(tz.mul(tz.linear(x, w, b), tz.linear(x, w, b))),
        [rng.normal(size=(3, 5)), rng.normal(size=(2, 3)), rng.normal(size=(2,))],
    ),
    "scaled_softmax": lambda rng: (
        lambda m: tz.sum_all(tz.mul(tz.scaled_softmax(m, 1.3), m)),
        [rng.normal(size=(3, 5))],
    ),
    "scaled_softmax_masked": lambda rng: (
        lambda m, _mask=_random_mask(rng, (3, 5)): tz.sum_all(
            tz.mul(tz.scaled_softmax(m, 1.3, mask=_mask), m)
        ),
        [rng.normal(size=(3, 5))],
    ),
    "sum_all": lambda rng: (
        lambda a: tz.mul(tz.sum_all(a), tz.sum_all(a)),
        [rng.normal(size=(3, 2))],
    ),
    "log": lambda rng: (
        lambda a: tz.sum_all(tz.log(a)),
        [rng.uniform(0.3, 2.0, size=(3, 3))],
    ),
    "sqrt": lambda rng: (
        lambda a: tz.sum_all(tz.sqrt(a)),
        [rng.uniform(0.3, 2.0, size=(3, 3))],
    ),
    "clamp": lambda rng: (
        lambda a: tz.sum_all(tz.mul(tz.clamp(a, -0.5, 0.5), a)),
        [rng.normal(size=(8,)) * 2.0 + 0.01],
    ),
    "concat_rows": lambda rng: (
        lambda a, b: tz.sum_all(tz.mul(tz.concat_rows(a, b), tz.concat_rows(a, b))),
        [rng.normal(size=(2, 3)), rng.normal(size=(4, 3))],
    ),
    "concat_cols": lambda rng: (
        lambda a, b: tz.sum_all(
            tz.mul(tz.concat_cols([a, b]), tz.concat_cols([a, b]))
        ),
        [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))],
    ),
    "gather_columns": lambda rng: (
        lambda e: tz.sum_all(
            tz.mul(tz.gather_columns(e, [0, 2, 2]), tz.gather_columns(e, [0, 2, 2]))
        ),
        [rng.normal(size=(3, 4))],
    ),
    "entry": lambda rng: (
        lambda a: tz.mul(tz.entry(a, 1, 2), tz.entry(a, 0, 0)),
        [rng.normal(size=(3, 4))],
    ),
    "stack2d": lambda rng: (
        lambda a: tz.sum_all(
            tz.mul(
                tz.stack2d([[tz.entry(a, 0, 0), tz.entry(a, 0, 1)],
                            [tz.entry(a, 1, 0), tz.entry(a, 1, 1)]]),
                tz.stack2d([[tz.entry(a, 0, 0), tz.entry(a, 0, 1)],
                            [tz.entry(a, 1, 0), tz.entry(a, 1, 1)]]),
            )
        ),
        [rng.normal(size=(2, 2))],
    ),
}


@pytest.mark.parametrize("opname", sorted(_OP_CASES))
def test_gradients_against_finite_differences(opname):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        f, inputs = _OP_CASES[opname](rng)
        worst = max(worst, grad_check(f, inputs, eps=1e-5))
    assert worst < 1e-4, f"{opname}: worst relative error {worst}"


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_forward_ops_finite_on_finite_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=30.0, size=(3, 4)))
    w = Tensor(rng.normal(scale=30.0, size=(2, 3)))
    outs = [
        tz.sigmoid(x),
        tz.tanh(x),
        tz.relu(x),
        tz.scaled_softmax(x, 2.0),
        tz.linear(x, w, Tensor(rng.normal(size=2))),
        tz.matmul(w, x),
    ]
    for out in outs:
        assert np.isfinite(out.data).all()


def test_tensor_row_major_and_shape_invariant():
    t = Tensor(np.asfortranarray(np.arange(6.0).reshape(2, 3)))
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.size == 6
