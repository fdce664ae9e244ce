import zlib

import numpy as np
import pytest

from scribseg.autodiff import ShapeError, Tensor, backward, load_tensor, ops, save_tensor
from scribseg.autodiff.serialize import tensor_from_bytes, tensor_to_bytes

from conftest import grad_check


def weighted(fn, weights):
    # project a tensor-valued op to a scalar with fixed random weights
    return lambda *xs: ops.sum(ops.mul(fn(*xs), weights))


def test_softmax_uniform_logits():
    out = ops.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_matmul_identity(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)


def test_sigmoid_grad_at_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    backward(ops.sum(ops.sigmoid(x)))
    np.testing.assert_array_equal(x.grad, np.full(4, 0.25))


def test_sum_grad_is_ones():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_square_grad_is_2x(rng):
    v = rng.normal(size=(3, 4))
    x = Tensor(v, requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * v)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.mul(x, 2.0))


def test_repeated_backward_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum(ops.mul(x, 3.0))
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(x.grad, np.full(3, 6.0))
    with pytest.raises(RuntimeError):
        backward(loss, accumulate=False)
    x.zero_grad()
    y = Tensor(np.ones(3), requires_grad=True)
    backward(ops.sum(y), accumulate=False)
    np.testing.assert_array_equal(y.grad, np.ones(3))


def test_intermediates_get_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    mid = ops.exp(x)
    backward(ops.sum(mid))
    np.testing.assert_array_equal(mid.grad, np.ones(2))
    assert x.grad is not None


def test_shape_errors_name_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 1, 3, 3))))
    with pytest.raises(ShapeError, match="concat") as err:
        ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))], axis=0)
    assert err.value.axes == (1,)
    with pytest.raises(ShapeError, match="add"):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


SMOOTH_CASES = {
    "add": (lambda a, b: ops.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: ops.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ops.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: ops.mul(a, b), [(3, 4), (3, 4)]),
    "div": (lambda a, b: ops.div(a, ops.add(ops.mul(b, b), 1.0)), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: ops.matmul(a, b), [(3, 5), (5, 4)]),
    "exp": (lambda a: ops.exp(a), [(3, 4)]),
    "log": (lambda a: ops.log(ops.add(ops.mul(a, a), 0.5)), [(3, 4)]),
    "sigmoid": (lambda a: ops.sigmoid(a), [(3, 4)]),
    "softmax0": (lambda a: ops.softmax(a, axis=0), [(4, 5)]),
    "softmax1": (lambda a: ops.softmax(a, axis=1), [(4, 5)]),
    "log_softmax": (lambda a: ops.log_softmax(a, axis=0), [(4, 3, 3)]),
    "layer_norm": (lambda a: ops.layer_norm(a, axis=1), [(4, 6)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "transpose": (lambda a: ops.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    "reshape": (lambda a: ops.reshape(a, (6, 4)), [(2, 3, 4)]),
    "slice": (lambda a: a[1:, ::2], [(4, 5)]),
    "fancy_index": (lambda a: a[np.array([0, 2, 2]), np.array([1, 1, 1])], [(4, 5)]),
    "masked_sum": (lambda a: ops.masked_sum(a, np.array([[1, 0, 1, 1]] * 3), axis=1), [(3, 4)]),
    "mean": (lambda a: ops.mean(a, axis=0), [(3, 4)]),
    "power": (lambda a: ops.power(ops.add(ops.mul(a, a), 1.0), 1.5), [(3, 4)]),
    "conv2d_same": (lambda x, w, b: ops.conv2d(x, w, b, pad=1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    "conv2d_stride": (lambda x, w: ops.conv2d(x, w, stride=2, pad=1), [(1, 2, 7, 7), (3, 2, 3, 3)]),
    "conv2d_1x1": (lambda x, w, b: ops.conv2d(x, w, b), [(2, 3, 4, 4), (5, 3, 1, 1), (5,)]),
    "transposed_conv2d": (lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=2), [(2, 3, 3, 4), (3, 2, 2, 2), (2,)]),
    "transposed_conv2d_overlap": (lambda x, w: ops.transposed_conv2d(x, w, stride=2, pad=1), [(1, 2, 3, 3), (2, 3, 3, 3)]),
    "bilinear_down": (lambda a: ops.bilinear_interpolate(a, 2, 3), [(2, 8, 12)]),
    "bilinear_up": (lambda a: ops.bilinear_interpolate(a, 7, 5), [(3, 4)]),
    "shifted_agreement": (lambda a: ops.shifted_agreement(a, [(0, 1), (-1, 2), (2, -2)]), [(3, 5, 6)]),
}


@pytest.mark.parametrize("name", sorted(SMOOTH_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = SMOOTH_CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    arrays = [rng.normal(size=s) for s in shapes]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.normal(size=out_shape)
    assert grad_check(weighted(fn, weights), arrays, n_coords=20, rng=rng) < 1e-6


def test_relu_gradient_away_from_kinks(rng):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-2] = 0.5
    w = rng.normal(size=x.shape)
    assert grad_check(weighted(ops.relu, w), [x], rng=rng) < 1e-3


def test_max_pool_gradient_away_from_ties(rng):
    x = rng.permutation(64).reshape(1, 1, 8, 8).astype(float) * 0.1
    w = rng.normal(size=(1, 1, 4, 4))
    assert grad_check(weighted(lambda a: ops.max_pool2d(a, 2), w), [x], rng=rng) < 1e-3


def test_max_pool_tie_goes_to_first_element():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(ops.sum(ops.max_pool2d(x, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_softmax_rows_on_simplex(rng):
    for _ in range(20):
        x = rng.normal(scale=5.0, size=(6, 7))
        for axis in (0, 1):
            s = ops.softmax(Tensor(x), axis=axis).data
            assert (s >= 0).all()
            np.testing.assert_allclose(s.sum(axis=axis), 1.0, rtol=0, atol=1e-12)


def test_bilinear_identity(rng):
    x = rng.normal(size=(3, 9, 11))
    out = ops.bilinear_interpolate(Tensor(x), 9, 11).data
    np.testing.assert_allclose(out, x, rtol=0, atol=1e-12)


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert out.shape[2:] == x.shape[2:]


def test_transposed_conv_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv^T(y)>
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 2, 2))
    y = rng.normal(size=(2, 4, 4, 4))
    lhs = (ops.conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * ops.transposed_conv2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert abs(lhs - rhs) < 1e-10


def test_serialization_roundtrip(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4))
    blob = tensor_to_bytes(Tensor(x))
    assert blob[:4] == b"SSTN"
    assert int.from_bytes(blob[4:8], "little") == 3
    assert len(blob) == 4 + 4 + 3 * 4 + 8 * x.size
    back, end = tensor_from_bytes(blob)
    assert end == len(blob)
    np.testing.assert_array_equal(back.data, x)
    save_tensor(tmp_path / "t.sstn", Tensor(x))
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.sstn").data, x)
    with pytest.raises(ValueError):
        tensor_from_bytes(b"XXXX" + blob[4:])
