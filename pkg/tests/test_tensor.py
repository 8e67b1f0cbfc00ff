import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from panoseg.errors import DimensionError, NumericError, UsageError
from panoseg.tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    add_constant,
    backward,
    concat,
    cross_entropy,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    roll,
    scale,
    softmax_rows,
    sub,
    transpose,
    tsum,
)

from oracles import naive_matmul

F64 = np.float64


def t64(arr, grad=True):
    return Tensor(arr, requires_grad=grad, dtype=F64)


# ---------------------------------------------------------------- forward values


def test_matmul_identity_and_projection():
    out = matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])
    out = matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5], [7]]))
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_random_against_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    out = matmul(Tensor(a, dtype=F64), Tensor(b, dtype=F64))
    np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_matmul_matches_oracle_up_to_16(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    out = matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, naive_matmul(a.astype(np.float32), b.astype(np.float32)), atol=1e-6, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(Tensor([[0, 0, 0]])).data, [[1 / 3] * 3], atol=1e-7)
    np.testing.assert_allclose(softmax_rows(Tensor([[1000, 0]])).data, [[1, 0]], atol=1e-6)
    e = math.e / (math.e + 1)
    np.testing.assert_allclose(softmax_rows(Tensor([[1, 0]])).data, [[e, 1 - e]], atol=1e-4)
    np.testing.assert_allclose(softmax_rows(Tensor([[1, 0]])).data, [[0.7311, 0.2689]], atol=1e-4)


def test_nan_input_is_a_numeric_error():
    with pytest.raises(NumericError):
        Tensor([[np.nan, 0.0]])
    x = Tensor([[1.0, 2.0]])
    x.data[0, 0] = np.nan
    with pytest.raises(NumericError):
        softmax_rows(x)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(F64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = softmax_rows(Tensor(x, dtype=F64)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    out32 = softmax_rows(Tensor(x)).data
    np.testing.assert_allclose(out32.sum(axis=-1), 1.0, atol=1e-6)


def test_gelu_examples():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-3
    k = math.sqrt(2 / math.pi)
    expected = 0.5 * (1 + math.tanh(k * (1 + 0.044715)))
    assert abs(gelu(Tensor([1.0])).data[0] - expected) < 1e-6
    assert abs(gelu(Tensor([1.0])).data[0] - 0.8412) < 1e-3


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor([3.0, 3, 3, 3]), ones, zeros).data, np.zeros(4))
    out = layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1, -1], atol=1e-3)
    out = layer_norm(Tensor([[5.0, -2, 7, 0]]), Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)))
    np.testing.assert_array_equal(out.data, np.full((1, 4), 2.5))


def test_default_dtype_is_32_bit():
    assert Tensor([1.0]).dtype == np.float32
    assert matmul(Tensor(np.eye(2)), Tensor(np.eye(2))).dtype == np.float32


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(mul(x, x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = scale(x, 2.0)
    with pytest.raises(UsageError):
        backward(tape, y)


def test_backward_rejects_unrecorded_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tsum(x)
    with Tape() as tape:
        pass
    with pytest.raises(UsageError):
        backward(tape, loss)


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        tsum(Tensor([1.0, 2.0]))
    assert len(tape) == 0
    tsum(x)
    assert len(tape) == 0


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = tsum(x)
        backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_input_gradients_add():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(add(x, mul(x, x)))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [7.0])


# ---------------------------------------------------------------- finite differences


def test_finite_diff_quadratic():
    x = t64([0.3, -1.2, 2.0])
    assert finite_diff_check(lambda: tsum(mul(x, x)), [x]) < 1e-6


def test_finite_diff_gelu_sum():
    x = t64(np.linspace(-3, 3, 13))
    assert finite_diff_check(lambda: tsum(gelu(x)), [x]) < 1e-4


def test_finite_diff_softmax_loss():
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((4, 5)))
    w = t64(rng.standard_normal((4, 5)), grad=False)
    assert finite_diff_check(lambda: tsum(mul(softmax_rows(x), w)), [x]) < 1e-4


def _rand(rng, *shape):
    return t64(rng.standard_normal(shape))


def _per_op_cases():
    rng = np.random.default_rng(11)
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    ba, bb = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)
    c, d = _rand(rng, 3, 4), _rand(rng, 3, 4)
    bias = _rand(rng, 4)
    gain, beta = _rand(rng, 4), _rand(rng, 4)
    e = _rand(rng, 2, 3, 4)
    w = rng.standard_normal((3, 4))
    w6 = rng.standard_normal((4, 3))
    w3 = rng.standard_normal((2, 3, 4))
    targets = np.array([0, 3, 1])
    return {
        "matmul": (lambda: tsum(mul(matmul(a, b), t64(np.arange(6.0).reshape(3, 2), False))), [a, b]),
        "matmul_batched": (lambda: tsum(mul(matmul(ba, bb), t64(np.ones((2, 3, 3)) * 0.5 + np.eye(3), False))), [ba, bb]),
        "add": (lambda: tsum(mul(add(c, d), t64(w, False))), [c, d]),
        "sub": (lambda: tsum(mul(sub(c, d), t64(w, False))), [c, d]),
        "mul": (lambda: tsum(mul(c, d)), [c, d]),
        "add_bias": (lambda: tsum(mul(add_bias(c, bias), t64(w, False))), [c, bias]),
        "scale": (lambda: tsum(mul(scale(c, -1.7), t64(w, False))), [c]),
        "add_constant": (lambda: tsum(mul(add_constant(c, w), c)), [c]),
        "mean": (lambda: mean(mul(c, c)), [c]),
        "reshape": (lambda: tsum(mul(reshape(c, (4, 3)), t64(w6, False))), [c]),
        "transpose": (lambda: tsum(mul(transpose(e, (2, 0, 1)), t64(np.transpose(w3, (2, 0, 1)) + 1, False))), [e]),
        "roll": (lambda: tsum(mul(roll(c, 1, axis=1), t64(w, False))), [c]),
        "concat": (lambda: tsum(mul(concat([c, d], axis=0), t64(np.vstack([w, -2 * w]), False))), [c, d]),
        "softmax_rows": (lambda: tsum(mul(softmax_rows(c), t64(w, False))), [c]),
        "gelu": (lambda: tsum(mul(gelu(c), t64(w, False))), [c]),
        "layer_norm": (lambda: tsum(mul(layer_norm(c, gain, beta), t64(w, False))), [c, gain, beta]),
        "cross_entropy": (lambda: cross_entropy(c, targets), [c]),
    }


@pytest.mark.parametrize("op", sorted(_per_op_cases()))
def test_each_op_matches_finite_differences(op):
    f, params = _per_op_cases()[op]
    assert finite_diff_check(f, params) < 1e-4


def test_composed_ops_match_finite_differences():
    rng = np.random.default_rng(5)
    x = _rand(rng, 6, 4)
    w1, b1, w2 = _rand(rng, 4, 8), _rand(rng, 8), _rand(rng, 8, 3)
    gain, beta = t64(np.ones(4)), t64(np.zeros(4))
    targets = np.array([0, 1, 2, 2, 1, 0])

    def loss():
        h = gelu(add_bias(matmul(layer_norm(x, gain, beta), w1), b1))
        att = softmax_rows(scale(matmul(h, transpose(h, (1, 0))), 1 / math.sqrt(8)))
        return cross_entropy(matmul(matmul(att, h), w2), targets)

    assert finite_diff_check(loss, [x, w1, b1, w2, gain, beta]) < 1e-4


# ---------------------------------------------------------------- shape contract


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(-6, 6))
def test_output_shapes_depend_only_on_input_shapes(m, k, n, shift):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a, b = Tensor(rng.standard_normal((m, k))), Tensor(rng.standard_normal((k, n)))
    c = Tensor(rng.standard_normal((m, k)))
    assert matmul(a, b).shape == (m, n)
    assert add(a, c).shape == sub(a, c).shape == mul(a, c).shape == (m, k)
    assert add_bias(a, Tensor(np.ones(k))).shape == (m, k)
    assert softmax_rows(a).shape == gelu(a).shape == (m, k)
    assert layer_norm(a, Tensor(np.ones(k)), Tensor(np.zeros(k))).shape == (m, k)
    assert transpose(a, (1, 0)).shape == (k, m)
    assert reshape(a, (k, m)).shape == (k, m)
    assert roll(a, shift, axis=1).shape == (m, k)
    assert concat([a, c], axis=0).shape == (2 * m, k)
    assert tsum(a).shape == mean(a).shape == ()
    assert cross_entropy(a, np.zeros(m, dtype=int)).shape == ()
