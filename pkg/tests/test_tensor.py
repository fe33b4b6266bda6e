import numpy as np
import pytest

from dife import tensor as T
from dife.tensor import Tape, Tensor, ShapeError, ContractError, OracleError


def t4(values, shape=None):
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    while arr.ndim < 4:
        arr = arr[np.newaxis]
    return Tensor(arr)


class TestTensorBasics:
    def test_rejects_non_4d(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3)))

    def test_data_length_matches_shape(self):
        x = T.zeros((2, 3, 4, 5))
        assert x.data.size == 2 * 3 * 4 * 5

    def test_nonfinite_detection(self):
        x = t4([1.0, np.nan], (1, 1, 1, 2))
        assert x.has_nonfinite()
        assert not T.ones((1, 1, 1, 1)).has_nonfinite()


class TestConv2d:
    def test_sum_of_four_ones(self):
        x = T.ones((1, 1, 2, 2))
        w = T.ones((1, 1, 2, 2))
        b = T.zeros((1, 1, 1, 1))
        out = T.conv2d(x, w, b, stride=1, pad=0)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_identity_kernel_is_identity(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 1, 5, 5)))
        w = T.ones((1, 1, 1, 1))
        b = T.zeros((1, 1, 1, 1))
        out = T.conv2d(x, w, b, stride=1, pad=0)
        assert np.array_equal(out.data, x.data)  # bit-for-bit

    def test_zero_input_gives_zeros(self):
        x = T.zeros((1, 2, 4, 4))
        w = Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
        b = T.zeros((1, 3, 1, 1))
        out = T.conv2d(x, w, b, stride=1, pad=1)
        assert np.all(out.data == 0.0)

    def test_channel_mismatch_names_axes(self):
        x = T.zeros((1, 3, 4, 4))
        w = T.zeros((2, 2, 3, 3))
        b = T.zeros((1, 2, 1, 1))
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(x, w, b)

    def test_output_spatial_dims(self):
        x = T.zeros((1, 1, 7, 9))
        w = T.zeros((1, 1, 3, 3))
        b = T.zeros((1, 1, 1, 1))
        out = T.conv2d(x, w, b, stride=2, pad=1)
        assert out.shape == (1, 1, 4, 5)


class TestBackward:
    def test_sum_of_squares(self):
        x = t4([1.0, 2.0, 3.0], (1, 1, 1, 3))
        x.requires_grad = True
        with Tape() as tape:
            y = T.sum_all(T.mul(x, x))
            tape.backward(y)
            assert np.allclose(tape.grad(x).reshape(-1), [2.0, 4.0, 6.0])

    def test_bilinear(self):
        a = t4([1.0, -2.0, 0.5], (1, 1, 1, 3))
        b = t4([3.0, 4.0, -1.0], (1, 1, 1, 3))
        a.requires_grad = b.requires_grad = True
        with Tape() as tape:
            y = T.sum_all(T.mul(a, b))
            tape.backward(y)
            assert np.allclose(tape.grad(a), b.data)
            assert np.allclose(tape.grad(b), a.data)

    def test_non_scalar_root_rejected(self):
        x = T.ones((1, 1, 2, 2), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_unreachable_node_gets_zero_grad(self):
        x = T.ones((1, 1, 1, 2), requires_grad=True)
        z = T.ones((1, 1, 1, 2), requires_grad=True)
        with Tape() as tape:
            y = T.sum_all(x)
            _ = T.mul(z, z)  # recorded but not reachable from y
            tape.backward(y)
            assert np.all(tape.grad(z) == 0.0)

    def test_cross_entropy_grad_matches_fd(self):
        rng = np.random.default_rng(11)
        logits = Tensor(rng.normal(size=(1, 2, 1, 1)), requires_grad=True)
        target = np.array([[[1]]])
        with Tape() as tape:
            loss = T.cross_entropy(logits, target)
            tape.backward(loss)
            analytic = tape.grad(logits)
        fd = T.finite_difference_gradient(
            lambda l: T.cross_entropy(l, target), logits
        ).data
        assert np.abs(analytic - fd).max() / np.abs(fd).max() < 1e-6


class TestFiniteDifference:
    def test_linear_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2, 2)))
        g = T.finite_difference_gradient(T.sum_all, x)
        assert np.allclose(g.data, 1.0, atol=1e-9)

    def test_square_scalar(self):
        x = t4([3.0], (1, 1, 1, 1))
        g = T.finite_difference_gradient(lambda v: T.sum_all(T.mul(v, v)), x)
        assert abs(g.item() - 6.0) < 1e-7

    def test_nondeterministic_f_rejected(self):
        state = {"n": 0}

        def f(x):
            state["n"] += 1
            return float(state["n"])

        with pytest.raises(OracleError):
            T.finite_difference_gradient(f, T.ones((1, 1, 1, 1)))

    def test_bad_eps_rejected(self):
        with pytest.raises(OracleError):
            T.finite_difference_gradient(T.sum_all, T.ones((1, 1, 1, 1)), eps=0.0)


class TestSoftmax:
    def test_sums_to_one_and_in_open_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = Tensor(rng.uniform(-10, 10, (2, 5, 3, 3)))
            p = T.softmax_channels(x).data
            assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-9
            assert np.all(p > 0.0) and np.all(p < 1.0)


class TestOther:
    def test_upsample_constant_stays_constant(self):
        x = Tensor(np.full((1, 2, 3, 3), 1.5))
        out = T.upsample_bilinear2x(x)
        assert out.shape == (1, 2, 6, 6)
        assert np.allclose(out.data, 1.5)

    def test_matmul_shapes_checked(self):
        a = T.zeros((1, 1, 2, 3))
        b = T.zeros((1, 1, 2, 3))
        with pytest.raises(ShapeError):
            T.matmul(a, b)

    def test_broadcast_rejected_beyond_channel_panels(self):
        a = T.zeros((2, 3, 4, 4))
        b = T.zeros((2, 3, 1, 4))
        with pytest.raises(ShapeError):
            T.add(a, b)

    def test_concat_channels(self):
        a = T.ones((1, 2, 2, 2))
        b = T.zeros((1, 3, 2, 2))
        out = T.concat_channels(a, b)
        assert out.shape == (1, 5, 2, 2)
        assert np.all(out.data[:, :2] == 1.0) and np.all(out.data[:, 2:] == 0.0)


def test_every_primitive_matches_finite_differences():
    from dife import gradcheck as G

    results = G.suite_tensor(seeds=range(5))
    bad = {k: v for k, v in results.items() if v >= G.OP_TOL}
    assert not bad, f"ops over tolerance: {bad}"
