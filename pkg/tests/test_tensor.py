"""Autodiff engine: forward values, gradients vs finite differences,
graph mechanics, and checkpoint serialization."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_grad_check
from matchdiff import tensor
from matchdiff.errors import DataError, DimensionError, NumericError


def test_value_accepts_scalar_and_matrix():
    assert tensor.value(3.0).data.shape == ()
    assert tensor.value(np.ones((2, 3))).data.shape == (2, 3)


def test_value_rejects_other_ranks():
    with pytest.raises(DimensionError):
        tensor.value(np.ones(4))
    with pytest.raises(DimensionError):
        tensor.value(np.ones((2, 2, 2)))


def test_add_broadcasts_row_and_col():
    a = tensor.value(np.zeros((2, 3)))
    row = tensor.value(np.array([[1.0, 2.0, 3.0]]))
    col = tensor.value(np.array([[10.0], [20.0]]))
    np.testing.assert_array_equal((a + row).data, np.tile([1.0, 2.0, 3.0], (2, 1)))
    np.testing.assert_array_equal((a + col).data, np.array([[10.0] * 3, [20.0] * 3]))


def test_binary_rejects_general_broadcast():
    a = tensor.value(np.zeros((4, 3)))
    b = tensor.value(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        tensor.add(a, b)


def test_matmul_shape_check():
    with pytest.raises(DimensionError):
        tensor.matmul(tensor.value(np.zeros((2, 3))), tensor.value(np.zeros((2, 3))))


def test_log_rejects_nonpositive():
    with pytest.raises(NumericError):
        tensor.log(tensor.value(np.array([[1.0, 0.0]])))


def test_pow_const_rejects_negative_base_fractional_exponent():
    with pytest.raises(NumericError):
        tensor.pow_const(tensor.value(np.array([[-1.0]])), 0.5)


def test_pow_const_zero_exponent_zero_grad():
    a = tensor.value(np.array([[2.0, 3.0]]))
    loss = tensor.sum_all(tensor.pow_const(a, 0.0))
    tensor.backward(loss)
    np.testing.assert_array_equal(a.grad, np.zeros((1, 2)))
    np.testing.assert_array_equal(loss.data, 2.0)


def test_backward_requires_scalar():
    with pytest.raises(DimensionError):
        tensor.backward(tensor.value(np.ones((2, 2))))


def test_shared_subgraph_accumulates():
    # loss = sum(x*x + x) -> dloss/dx = 2x + 1
    x = tensor.value(np.array([[1.0, -2.0], [3.0, 0.5]]))
    loss = tensor.sum_all(tensor.add(tensor.mul(x, x), x))
    tensor.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)


def test_repeated_backward_accumulates_and_zero_grad_resets():
    x = tensor.value(np.ones((2, 2)))
    loss = tensor.sum_all(x)
    tensor.backward(loss)
    first = x.grad.copy()
    loss2 = tensor.sum_all(x)
    tensor.backward(loss2)
    np.testing.assert_allclose(x.grad, 2.0 * first)
    tensor.zero_grad([x])
    np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))


def test_clamp_blocks_gradient_outside():
    a = tensor.value(np.array([[-2.0, 0.0, 2.0]]))
    loss = tensor.sum_all(tensor.clamp(a, -1.0, 1.0))
    tensor.backward(loss)
    np.testing.assert_array_equal(a.grad, np.array([[0.0, 1.0, 0.0]]))


def test_maximum_const_blocks_gradient_below():
    a = tensor.value(np.array([[-1.0, 3.0]]))
    loss = tensor.sum_all(tensor.maximum_const(a, 0.0))
    tensor.backward(loss)
    np.testing.assert_array_equal(a.grad, np.array([[0.0, 1.0]]))


@pytest.mark.parametrize("seed", range(5))
def test_grad_elementwise_binary(seed):
    rng = np.random.default_rng(seed)
    a = tensor.value(rng.normal(size=(3, 4)))
    b = tensor.value(rng.uniform(0.5, 1.5, size=(3, 4)))
    row = tensor.value(rng.uniform(0.5, 1.5, size=(1, 4)))
    col = tensor.value(rng.uniform(0.5, 1.5, size=(3, 1)))

    def build():
        x = tensor.div(tensor.mul(tensor.add(a, row), b), col)
        return tensor.sum_all(tensor.sub(x, b))

    fd_grad_check(build, {"a": a, "b": b, "row": row, "col": col})


@pytest.mark.parametrize("seed", range(5))
def test_grad_matmul_transpose(seed):
    rng = np.random.default_rng(seed)
    a = tensor.value(rng.normal(size=(3, 4)))
    b = tensor.value(rng.normal(size=(4, 2)))

    def build():
        return tensor.mean_all(tensor.matmul(tensor.transpose(tensor.matmul(a, b)), a))

    fd_grad_check(build, {"a": a, "b": b})


@pytest.mark.parametrize("seed", range(5))
def test_grad_unary_chain(seed):
    rng = np.random.default_rng(seed)
    # keep relu inputs away from the kink and log/pow inputs positive
    a = tensor.value(rng.uniform(0.3, 1.5, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3)))
    b = tensor.value(rng.uniform(0.5, 1.5, size=(3, 3)))

    def build():
        x = tensor.add(tensor.relu(a), tensor.sigmoid(a))
        y = tensor.add(tensor.log(b), tensor.pow_const(b, 2.5))
        z = tensor.add(tensor.exp(tensor.scale(a, 0.3)), tensor.add_const(y, 1.0))
        return tensor.mean_all(tensor.mul(x, z))

    fd_grad_check(build, {"a": a, "b": b})


@pytest.mark.parametrize("seed", range(5))
def test_grad_clamp_inside_interval(seed):
    rng = np.random.default_rng(seed)
    a = tensor.value(rng.uniform(-0.4, 0.4, size=(3, 3)))

    def build():
        return tensor.sum_all(tensor.mul(tensor.clamp(a, -0.5, 0.5), a))

    fd_grad_check(build, {"a": a})


@pytest.mark.parametrize("seed", range(5))
def test_grad_reductions_softmax_logsumexp(seed):
    rng = np.random.default_rng(seed)
    a = tensor.value(rng.normal(size=(4, 3)))

    def build():
        x = tensor.softmax_rows(a)
        lse = tensor.add(
            tensor.mean_all(tensor.logsumexp_rows(a)), tensor.mean_all(tensor.logsumexp_cols(a))
        )
        return tensor.add(
            tensor.mean_all(tensor.mul(x, a)),
            tensor.add(lse, tensor.mean_all(tensor.sum_rows(tensor.mul(a, a)))),
        )

    fd_grad_check(build, {"a": a})


@pytest.mark.parametrize("seed", range(5))
def test_grad_structural_ops(seed):
    rng = np.random.default_rng(seed)
    a = tensor.value(rng.normal(size=(3, 4)))
    b = tensor.value(rng.normal(size=(3, 2)))
    angles = rng.normal(size=(3, 3))
    cos, sin = np.cos(angles), np.sin(angles)

    def build():
        cat = tensor.concat_channels(a, b)  # (3, 6)
        rot = tensor.rotate_channel_pairs(cat, cos, sin)
        padded = tensor.pad_slack(rot)
        return tensor.mean_all(tensor.mul(tensor.crop(padded, 3, 4), a))

    fd_grad_check(build, {"a": a, "b": b})


@pytest.mark.parametrize("seed", range(5))
def test_grad_layer_norm(seed):
    rng = np.random.default_rng(seed)
    a = tensor.value(rng.normal(size=(4, 6)))

    def build():
        return tensor.mean_all(tensor.mul(tensor.layer_norm(a), a))

    fd_grad_check(build, {"a": a})


@pytest.mark.parametrize("seed", range(20))
def test_grad_composite_graph(seed):
    """One graph touching most ops at once, over many seeds."""
    rng = np.random.default_rng(100 + seed)
    a = tensor.value(rng.normal(size=(4, 4)))
    w = tensor.value(rng.normal(size=(4, 4)))
    bias = tensor.value(rng.normal(size=(1, 4)))

    def build():
        h = tensor.add(tensor.matmul(a, w), bias)
        h = tensor.layer_norm(tensor.relu(tensor.add_const(h, 0.05)))
        att = tensor.softmax_rows(tensor.matmul(h, tensor.transpose(h)))
        mixed = tensor.matmul(att, h)
        p = tensor.sigmoid(mixed)
        score = tensor.mul(p, tensor.log(tensor.add_const(p, 1.0)))
        return tensor.mean_all(score)

    fd_grad_check(build, {"a": a, "w": w, "bias": bias})


@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)) * rng.uniform(0.1, 10.0)
    y = tensor.softmax_rows(tensor.value(x)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y >= 0.0)


@given(st.integers(0, 10_000))
def test_logsumexp_matches_naive(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5)) * 5.0
    got = tensor.logsumexp_rows(tensor.value(x)).data
    want = np.log(np.exp(x).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(got, want, atol=1e-10)


@given(st.integers(0, 10_000))
def test_rotate_channel_pairs_preserves_norms(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 6))
    angles = rng.normal(size=(4, 3))
    y = tensor.rotate_channel_pairs(tensor.value(x), np.cos(angles), np.sin(angles)).data
    np.testing.assert_allclose(
        np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1), atol=1e-12
    )


def test_checkpoint_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "b.mat": rng.normal(size=(3, 4)),
        "a.scalar": np.asarray(np.pi),
        "c.col": rng.normal(size=(5, 1)),
    }
    path = str(tmp_path / "ck.bin")
    tensor.save_checkpoint(path, tensors)
    loaded = tensor.load_checkpoint(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.asarray(arr).shape
        np.testing.assert_array_equal(loaded[name], arr)  # bit-exact


def test_checkpoint_deterministic_bytes(tmp_path):
    tensors = {"x": np.ones((2, 2)), "a": np.zeros((1, 3))}
    p1, p2 = str(tmp_path / "1.bin"), str(tmp_path / "2.bin")
    tensor.save_checkpoint(p1, tensors)
    tensor.save_checkpoint(p2, dict(reversed(list(tensors.items()))))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        tensor.load_checkpoint(str(path))


def test_checkpoint_truncated(tmp_path):
    path = str(tmp_path / "ck.bin")
    tensor.save_checkpoint(path, {"w": np.ones((4, 4))})
    blob = open(path, "rb").read()
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(DataError):
        tensor.load_checkpoint(str(trunc))


def test_checkpoint_missing_file():
    with pytest.raises(DataError):
        tensor.load_checkpoint("/nonexistent/ck.bin")
