"""
Tests for the tape-based tensor core:
- Forward values of elementwise, reduction and network ops
- stack on every positive and negative axis
- Backward accumulation and per-tape gradients
- Norm subgradient at zero
- Tape discipline (no assignment while recording)
- Default dtype switching
"""
import threading

import numpy as np
import pytest

from rpeflow.errors import ConfigError, ContractError, ShapeError
from rpeflow.tensor import (
    Tape,
    Tensor,
    concat,
    conv2d,
    correlation2d,
    default_dtype,
    get_default_dtype,
    layernorm,
    matmul,
    max_,
    minimum,
    norm,
    segment_sum,
    softmax,
    stack,
    sum_,
    take,
    zeros,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_arithmetic_matches_numpy(rng):
    a, b = rng.standard_normal((3, 4)), rng.uniform(0.5, 1.5, (3, 4))
    ta, tb = Tensor(a), Tensor(b)
    np.testing.assert_allclose((ta + tb).values, a + b)
    np.testing.assert_allclose((ta - tb).values, a - b)
    np.testing.assert_allclose((ta * tb).values, a * b)
    np.testing.assert_allclose((ta / tb).values, a / b)
    np.testing.assert_allclose((-ta).values, -a)
    np.testing.assert_allclose((2.0 - ta).values, 2.0 - a)


def test_backward_accumulates_into_leaves():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = sum_(x * x) + sum_(x)
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.values + 1)


def test_gradients_leaves_grad_untouched():
    x = Tensor([1.0, -2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    with Tape() as tape:
        y = sum_(x * 3.0)
    gx, gu = tape.gradients(y, [x, unused])
    np.testing.assert_allclose(gx, [3.0, 3.0])
    np.testing.assert_allclose(gu, [0.0])
    assert x.grad is None


def test_broadcast_gradient_is_reduced():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        y = sum_(x + b)
    gx, gb = tape.gradients(y, [x, b])
    assert gx.shape == (3, 4)
    np.testing.assert_allclose(gb, np.full(4, 3.0))


def test_norm_subgradient_is_zero_at_origin():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    with Tape() as tape:
        y = sum_(norm(x, axis=-1))
    (g,) = tape.gradients(y, [x])
    assert y.item() == 0.0
    assert np.all(g == 0.0)


def test_assign_while_recording_is_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        with pytest.raises(ContractError):
            x.assign([2.0])
    x.assign([2.0])
    assert x.values[0] == 2.0


def test_assign_rejects_shape_change():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ShapeError):
        x.assign([1.0])


def test_tapes_are_per_thread():
    x = Tensor([2.0], requires_grad=True)
    seen = {}

    def worker():
        with Tape() as tape:
            y = sum_(x * x)
        seen["grad"] = tape.gradients(y, [x])[0]

    with Tape() as outer:
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert len(outer) == 0
    np.testing.assert_allclose(seen["grad"], [4.0])


def test_softmax_columns_sum_to_one(rng):
    s = softmax(Tensor(rng.standard_normal((4, 3))), axis=0)
    np.testing.assert_allclose(s.values.sum(axis=0), np.ones(3))


def test_max_routes_gradient_to_first_maximum():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    with Tape() as tape:
        y = sum_(max_(x, axis=1))
    (g,) = tape.gradients(y, [x])
    np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])


def test_minimum_of_scalars():
    a, b = Tensor(2.0, requires_grad=True), Tensor(-1.0, requires_grad=True)
    with Tape() as tape:
        m = minimum([a, b])
    ga, gb = tape.gradients(m, [a, b])
    assert m.item() == -1.0
    assert (ga, gb) == (0.0, 1.0)


def test_take_and_segment_sum_are_adjoint(rng):
    a = Tensor(rng.standard_normal((4, 2)))
    idx = np.array([3, 0, 3])
    np.testing.assert_allclose(take(a, idx).values, a.values[idx])
    s = segment_sum(Tensor(np.ones((3, 2))), idx, 4)
    np.testing.assert_allclose(s.values[:, 0], [1.0, 0.0, 0.0, 2.0])


def test_concat_and_matmul_shapes(rng):
    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 1)))
    assert concat([a, b], axis=1).shape == (2, 4)
    assert matmul(a, Tensor(rng.standard_normal((3, 5)))).shape == (2, 5)


@pytest.mark.parametrize("axis", [0, 1, 2, -1, -2, -3])
def test_stack_matches_numpy_for_every_axis(rng, axis):
    arrays = [rng.standard_normal((2, 3)) for _ in range(4)]
    with Tape() as tape:
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = stack(ts, axis=axis)
        loss = sum_(out * Tensor(np.arange(out.size, dtype=float).reshape(out.shape)))
    np.testing.assert_array_equal(out.values, np.stack(arrays, axis=axis))
    grads = tape.gradients(loss, ts)
    weights = np.arange(out.size, dtype=float).reshape(out.shape)
    for k, g in enumerate(grads):
        np.testing.assert_array_equal(g, np.take(weights, k, axis=axis))


def test_stack_rejects_out_of_range_axis(rng):
    with pytest.raises(ShapeError):
        stack([Tensor(rng.standard_normal((2, 3)))], axis=3)


def test_conv2d_matches_direct_sum(rng):
    x = rng.standard_normal((4, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    out = conv2d(Tensor(x), Tensor(w), padding=1).values
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    expected = np.zeros((4, 5, 3))
    for i in range(4):
        for j in range(5):
            expected[i, j] = np.einsum("abc,abco->o", xp[i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv2d_stride_output_size(rng):
    out = conv2d(Tensor(rng.standard_normal((8, 8, 1))), Tensor(rng.standard_normal((3, 3, 1, 2))),
                 stride=2, padding=1)
    assert out.shape == (4, 4, 2)


def test_conv2d_rejects_even_kernels(rng):
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))


def test_correlation2d_layout(rng):
    a = rng.standard_normal((3, 4, 2))
    b = rng.standard_normal((3, 4, 2))
    out = correlation2d(Tensor(a), Tensor(b), 1).values
    assert out.shape == (3, 4, 9)
    # centre channel compares equal positions
    np.testing.assert_allclose(out[:, :, 4], (a * b).sum(axis=2) / 2)
    # dy = +1, dx = -1 -> channel (1 + 1)·3 + (−1 + 1) = 6
    np.testing.assert_allclose(out[1, 2, 6], (a[1, 2] * b[2, 1]).sum() / 2)
    # out of image reads zeros
    assert out[2, 0, 6] == 0.0


def test_correlation2d_rejects_negative_radius():
    with pytest.raises(ConfigError):
        correlation2d(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((2, 2, 1))), -1)


def test_layernorm_standardizes(rng):
    x = Tensor(rng.standard_normal((5, 6)) * 3 + 1)
    y = layernorm(x).values
    np.testing.assert_allclose(y.mean(axis=-1), np.zeros(5), atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), np.ones(5), atol=1e-5)


def test_default_dtype_context():
    assert get_default_dtype() == np.float64
    with default_dtype(np.float32):
        assert zeros((2,)).dtype == np.float32
    assert zeros((2,)).dtype == np.float64


def test_default_dtype_rejects_integers():
    with pytest.raises(ConfigError):
        with default_dtype(np.int32):
            pass
