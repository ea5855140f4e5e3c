from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shiftlab.errors import ContractError, DimensionError, NonFiniteError, UnknownPromptError
from shiftlab.numerics import (
    Tensor,
    backward,
    concat,
    embedding,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    mean,
    mse_loss,
    mul,
    no_grad,
    parameter,
    patchify,
    precision,
    reshape,
    scale,
    silu,
    softmax_lastdim,
    square,
    sub,
    sum_,
    transpose,
    unpatchify,
)


def rand_param(rng, *shape):
    return parameter(rng.normal(size=shape))


# -- matmul ------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_hand_product():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_backward_vs_fd_64bit():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        a, b = rand_param(rng, 3, 4), rand_param(rng, 4, 5)
        assert finite_diff_check(lambda: sum_(matmul(a, b)), [a, b], h=1e-6) < 1e-4


def test_batched_matmul_backward():
    rng = np.random.default_rng(2)
    with precision(np.float64):
        a, b = rand_param(rng, 2, 3, 4), rand_param(rng, 2, 4, 5)
        w = rand_param(rng, 4, 2)
        f = lambda: sum_(square(matmul(a, b))) + sum_(square(matmul(a, w)))
        assert finite_diff_check(f, [a, b, w], h=1e-6) < 1e-4


# -- softmax -----------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_closed_form():
    np.testing.assert_allclose(
        softmax_lastdim(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-7
    )


def test_softmax_shift_invariance():
    x = np.random.default_rng(3).normal(size=(4, 6)).astype(np.float32)
    y1 = softmax_lastdim(Tensor(x)).data
    y2 = softmax_lastdim(Tensor(x + 7.5)).data
    np.testing.assert_allclose(y1, y2, atol=1e-6)


def test_softmax_rows_sum_to_one_and_mask_zeroes():
    x = Tensor(np.random.default_rng(4).normal(size=(5, 5)))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    y = softmax_lastdim(x, mask=mask).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-6)
    assert np.all(y[~mask] == 0.0)


def test_softmax_empty_lastdim():
    with pytest.raises(DimensionError):
        softmax_lastdim(Tensor(np.zeros((3, 0))))


# -- layer norm --------------------------------------------------------

def test_layer_norm_constant_slice_is_zero():
    y = layer_norm(Tensor(np.full((2, 4), 3.0)), np.ones(4), np.zeros(4)).data
    np.testing.assert_array_equal(y, 0.0)


def test_layer_norm_two_values():
    y = layer_norm(Tensor([[1.0, 3.0]]), np.ones(2), np.zeros(2)).data
    expected = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(y, [[-expected, expected]], rtol=1e-6)


def test_layer_norm_needs_width_two():
    with pytest.raises(DimensionError):
        layer_norm(Tensor([[1.0]]), np.ones(1), np.zeros(1))


def test_layer_norm_grad_vs_fd():
    rng = np.random.default_rng(5)
    with precision(np.float64):
        x, g, b = rand_param(rng, 3, 6), rand_param(rng, 6), rand_param(rng, 6)
        w = Tensor(rng.normal(size=(3, 6)))
        f = lambda: sum_(mul(layer_norm(x, g, b), w))
        assert finite_diff_check(f, [x, g, b], h=1e-6) < 1e-4


# -- backward ----------------------------------------------------------

def test_backward_sum_gives_ones():
    x = parameter(np.arange(4.0))
    backward(sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_square_closed_form():
    x = parameter([1.0, 2.0])
    backward(sum_(mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_non_scalar_rejected():
    x = parameter(np.ones(3))
    with pytest.raises(ContractError):
        backward(mul(x, x))


def test_unreachable_leaf_gets_zero():
    x, y = parameter(np.ones(3)), parameter(np.ones(2))
    backward(sum_(x), [x, y])
    np.testing.assert_array_equal(y.grad, np.zeros(2))


def test_shared_input_accumulates():
    x = parameter([3.0])
    backward(sum_(x + x + x))
    np.testing.assert_array_equal(x.grad, [3.0])


def test_mlp_32bit_grads_vs_fd():
    rng = np.random.default_rng(6)
    w1 = parameter(rng.normal(size=(8, 16)) / 3)
    b1 = parameter(rng.normal(size=16) * 0.1)
    w2 = parameter(rng.normal(size=(16, 4)) / 4)
    x = Tensor(rng.normal(size=(10, 8)))
    y = Tensor(rng.normal(size=(10, 4)))
    f = lambda: mse_loss(matmul(gelu(matmul(x, w1) + b1), w2), y)
    assert w1.dtype == np.float32
    assert finite_diff_check(f, [w1, b1, w2], h=1e-6) < 1e-3


def test_backward_linearity_exact_64bit():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        w = rand_param(rng, 4, 3)
        x1, x2 = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 4)))
        l1 = lambda: sum_(square(matmul(x1, w)))
        l2 = lambda: sum_(gelu(matmul(x2, w)))
        backward(l1() + l2())
        joint = w.grad.copy()
        w.grad = None
        backward(l1())
        backward(l2())
        np.testing.assert_array_equal(joint, w.grad)


def test_seeded_forward_backward_bit_identical():
    def run():
        rng = np.random.default_rng(8)
        w = parameter(rng.normal(size=(6, 6)))
        x = Tensor(rng.normal(size=(3, 6)))
        backward(mean(square(softmax_lastdim(matmul(x, w)))))
        return w.grad

    np.testing.assert_array_equal(run(), run())


# -- finite_diff_check -------------------------------------------------

def test_fd_check_quadratic():
    with precision(np.float64):
        x = parameter([3.0])
        assert finite_diff_check(lambda: sum_(mul(x, x)), [x], h=1e-4) < 1e-6


def test_fd_check_linear_exact():
    with precision(np.float64):
        x = parameter([1.0, -2.0, 0.5])
        assert finite_diff_check(lambda: sum_(scale(x, 2.5)), [x], h=1e-3) < 1e-12


def test_fd_check_rejects_nondeterministic():
    rng = np.random.default_rng()
    x = parameter([1.0])
    with pytest.raises(ContractError):
        finite_diff_check(lambda: sum_(mul(x, Tensor(rng.normal(size=1)))), [x])


def test_fd_check_rejects_bad_step():
    x = parameter([1.0])
    with pytest.raises(ContractError):
        finite_diff_check(lambda: sum_(x), [x], h=0.0)


# -- remaining primitives ----------------------------------------------

PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: sub(a, b),
    "mul": lambda a, b: mul(a, b),
    "scale": lambda a, b: scale(a, -1.7) + b,
    "gelu": lambda a, b: gelu(a) + b,
    "silu": lambda a, b: mul(silu(a), b),
    "transpose": lambda a, b: mul(transpose(transpose(a)), b),
    "slice": lambda a, b: mul(a[..., :1], b[..., :1]),
    "concat": lambda a, b: concat([a, mul(a, b)], axis=-1),
    "mean": lambda a, b: mean(mul(a, b), axis=-1),
    "square": lambda a, b: square(a) + b,
    "mse": lambda a, b: mse_loss(a, b),
    "reshape": lambda a, b: mul(reshape(a, (-1,)), reshape(b, (-1,))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=8, deadline=None)
@given(shape=st.lists(st.integers(1, 3), min_size=1, max_size=4), seed=st.integers(0, 2**16))
def test_primitive_grads_match_fd(name, shape, seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        a, b = rand_param(rng, *shape), rand_param(rng, *shape)
        w = Tensor(rng.normal(size=PRIMITIVES[name](a, b).shape))
        f = lambda: sum_(mul(PRIMITIVES[name](a, b), w))
        assert finite_diff_check(f, [a, b], h=1e-6) < 1e-4


def test_embedding_lookup_and_grad():
    with precision(np.float64):
        table = parameter(np.arange(12.0).reshape(4, 3))
        out = embedding(table, [2, 0, 2])
        np.testing.assert_array_equal(out.data[0], [6, 7, 8])
        backward(sum_(out))
        np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 0])
    with pytest.raises(UnknownPromptError):
        embedding(table, [4])


def test_patchify_roundtrip_and_grad():
    rng = np.random.default_rng(9)
    with precision(np.float64):
        x = rand_param(rng, 2, 3, 8, 8)
        tok = patchify(x, 4)
        assert tok.shape == (2, 4, 48)
        np.testing.assert_array_equal(tok.data[0, 1], x.data[0, :, 0:4, 4:8].reshape(-1))
        back = unpatchify(tok, 4, 3, 8, 8)
        np.testing.assert_array_equal(back.data, x.data)
        w = Tensor(rng.normal(size=tok.shape))
        assert finite_diff_check(lambda: sum_(mul(patchify(x, 4), w)), [x], h=1e-6) < 1e-4
    with pytest.raises(DimensionError):
        patchify(Tensor(np.zeros((1, 3, 6, 6))), 4)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        scale(Tensor(np.array([3e38], dtype=np.float32)), 10.0)


def test_no_grad_records_nothing():
    x = parameter([1.0, 2.0])
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad and y.node is None
