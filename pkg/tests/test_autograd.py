"""Numeric core: op values against independent oracles, gradients, Adam."""

import numpy as np
import pytest

import refseg.autograd as ag
from refseg.autograd import Tensor, backward
from refseg.errors import NumericError
from refseg.gradcheck import finite_diff_check, op_suite
from refseg.optim import Parameter, adam_step


def t(x, rg=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# oracles


def matmul_oracle(a, b):
    """Scalar triple loop."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def conv2d_oracle(x, k, stride, padding):
    """Direct six-loop cross-correlation."""
    c_out, c_in, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (x.shape[1] + 2 * padding - kh) // stride + 1
    w_out = (x.shape[2] + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for co in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for ci in range(c_in):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[ci, i * stride + di, j * stride + dj] * k[co, ci, di, dj]
                out[co, i, j] = acc
    return out


def softmax_oracle(row):
    """exp/sum in extended precision."""
    r = np.asarray(row, dtype=np.longdouble)
    e = np.exp(r - r.max())
    return (e / e.sum()).astype(np.float64)


class TestMatmul:
    def test_identity(self):
        out = ag.matmul(t(np.eye(2)), t([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_hand_case(self):
        out = ag.matmul(t([[1, 2]]), t([[3], [4]]))
        assert out.data == np.array([[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ag.matmul(t(a), t(b)).data
        np.testing.assert_allclose(out, matmul_oracle(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ag.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


class TestConv2d:
    def test_1x1_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 4, 4))
        k = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(ag.conv2d(t(x), t(k)).data, x)

    def test_ones_kernel_neighbor_count(self):
        x = np.ones((1, 3, 3))
        k = np.ones((1, 1, 3, 3))
        out = ag.conv2d(t(x), t(k), stride=1, padding=1).data[0]
        assert out[1, 1] == 9.0
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[i, j] == 4.0

    @pytest.mark.parametrize("stride,padding,kh", [(1, 0, 1), (1, 1, 3), (2, 1, 3)])
    def test_against_loop_oracle(self, stride, padding, kh):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, kh, kh))
        got = ag.conv2d(t(x), t(k), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, conv2d_oracle(x, k, stride, padding), atol=1e-12, rtol=0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ag.conv2d(t(np.ones((2, 4, 4))), t(np.ones((1, 3, 1, 1))))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(ag.relu(t([-1, 0, 2])).data, [0, 0, 2])

    def test_sigmoid_zero(self):
        assert ag.sigmoid(t([0.0])).data[0] == 0.5

    def test_broadcast_mul_identity(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 2, 2))
        ones = np.ones((3, 1, 1))
        np.testing.assert_array_equal(ag.mul(t(x), t(ones)).data, x)

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            ag.add(t(np.ones((2, 3))), t(np.ones((4, 5))))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(ag.softmax(t([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_large_inputs_no_overflow(self):
        np.testing.assert_allclose(ag.softmax(t([1000.0, 1000.0])).data, [0.5, 0.5], atol=1e-15)

    def test_against_extended_precision(self):
        rng = np.random.default_rng(4)
        row = rng.normal(scale=3.0, size=8)
        np.testing.assert_allclose(ag.softmax(t(row)).data, softmax_oracle(row),
                                   atol=1e-12, rtol=0)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        y = ag.softmax(t(rng.normal(size=(6, 7))), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(y > 0) and np.all(y < 1)


class TestMaskedSoftmax:
    def test_masked_weight_exactly_zero(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5))
        mask = np.zeros((3, 5), dtype=bool)
        mask[:, 3:] = True
        y = ag.masked_softmax(t(x), mask).data
        assert np.all(y[:, 3:] == 0.0)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_single_unmasked_key(self):
        mask = np.array([[False, True, True]])
        y = ag.masked_softmax(t([[0.3, 9.0, -2.0]]), mask).data
        np.testing.assert_array_equal(y, [[1.0, 0.0, 0.0]])

    def test_fully_masked_rejected(self):
        with pytest.raises(ValueError):
            ag.masked_softmax(t([[1.0, 2.0]]), np.array([[True, True]]))


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = ag.layer_norm(t([3.0, 3.0, 3.0]), t(np.ones(3)), t(np.zeros(3))).data
        np.testing.assert_array_equal(out, np.zeros(3))

    def test_hand_case(self):
        # [1,-1]: mean 0, var 1 -> 1/sqrt(1+1e-5)
        out = ag.layer_norm(t([1.0, -1.0]), t(np.ones(2)), t(np.zeros(2))).data
        expect = 0.9999950000374997
        np.testing.assert_allclose(out, [expect, -expect], atol=1e-15, rtol=0)

    def test_statistics_on_random(self):
        rng = np.random.default_rng(7)
        x = rng.normal(scale=2.0, size=(10, 16))
        y = ag.layer_norm(t(x), t(np.ones(16)), t(np.zeros(16))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


class TestResample:
    def test_avgpool2_mean_of_four(self):
        out = ag.avgpool2(t([[[1.0, 3.0], [5.0, 7.0]]])).data
        np.testing.assert_array_equal(out, [[[4.0]]])

    def test_avgpool2_rejects_odd(self):
        with pytest.raises(ValueError):
            ag.avgpool2(t(np.ones((1, 3, 4))))

    @pytest.mark.parametrize("fn", [ag.upsample2, ag.upsample4,
                                    lambda x: ag.bilinear_resize(x, 7, 5)])
    def test_constant_preserved(self, fn):
        out = fn(t(np.full((2, 4, 4), 2.5))).data
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_up2_ramp_hand_weights(self):
        # corner-aligned bilinear of [[0,1],[2,3]] is (2i+j)/3 on the 4x4 grid
        ramp = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        expect = np.array([[(2 * i + j) / 3 for j in range(4)] for i in range(4)])
        np.testing.assert_allclose(ag.upsample2(t(ramp)).data[0], expect, atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        w = t(np.arange(6.0).reshape(2, 3), rg=True)
        backward(ag.tsum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_square_sum_gives_2w(self):
        rng = np.random.default_rng(8)
        wdata = rng.normal(size=(3, 4))
        w = t(wdata, rg=True)
        backward(ag.tsum(ag.mul(w, w)))
        np.testing.assert_allclose(w.grad, 2 * wdata, atol=1e-12)

    def test_accumulates_across_calls(self):
        w = t(np.ones(3), rg=True)
        for _ in range(2):
            backward(ag.tsum(ag.mul(w, w)))
        np.testing.assert_allclose(w.grad, 4 * np.ones(3), atol=1e-12)

    def test_shared_node_fanout(self):
        w = t([2.0], rg=True)
        y = ag.mul(w, w)
        backward(ag.tsum(ag.add(y, y)))
        np.testing.assert_allclose(w.grad, [8.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            backward(t(np.ones(2), rg=True))

    def test_nan_raises(self):
        with pytest.raises(NumericError):
            Tensor(np.array([1.0, np.nan]))


class TestFiniteDiff:
    def test_linear_exact(self):
        rng = np.random.default_rng(9)
        x = t(rng.normal(size=(3, 3)))
        assert finite_diff_check(ag.tsum, x) < 1e-9

    def test_softmax_matmul_chain(self):
        rng = np.random.default_rng(10)
        w = t(rng.normal(size=(4, 4)))
        r = t(rng.normal(size=(3, 4)))

        def f(x):
            return ag.tsum(ag.mul(ag.softmax(ag.matmul(x, w), axis=-1), r))

        assert finite_diff_check(f, t(rng.normal(size=(3, 4)))) < 1e-6

    def test_negative_control_detected(self, monkeypatch):
        monkeypatch.setattr(ag, "_sigmoid_grad_scale", 1.05)
        rng = np.random.default_rng(11)
        r = t(rng.normal(size=(3, 4)))

        def f(x):
            return ag.tsum(ag.mul(ag.sigmoid(x), r))

        assert finite_diff_check(f, t(rng.normal(size=(3, 4)))) > 1e-2

    def test_op_suite_all_below_threshold(self):
        worst = op_suite(seed=0)
        bad = {k: v for k, v in worst.items() if v >= 1e-6}
        assert not bad, f"ops failing finite-difference check: {bad}"


class TestAdam:
    def test_first_step_scalar_oracle(self):
        p = Parameter("w", t([1.0], rg=True))
        p.tensor.grad[:] = 1.0
        adam_step([p], lr=1e-4)
        # update = lr*g/(sqrt(g^2)+eps)
        np.testing.assert_allclose(p.data, [0.999900000001], atol=1e-12, rtol=0)
        assert p.step_count == 1
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_zero_grad_no_motion(self):
        p = Parameter("w", t(np.array([0.5, -0.25]), rg=True))
        adam_step([p], lr=0.1)
        np.testing.assert_array_equal(p.data, [0.5, -0.25])

    def test_two_runs_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(42)
            p = Parameter("w", t(rng.normal(size=4), rg=True))
            for _ in range(5):
                backward(ag.tsum(ag.mul(p.tensor, p.tensor)))
                adam_step([p], lr=1e-2)
            return p.data.tobytes()

        assert run() == run()


class TestNoGrad:
    def test_no_graph_recorded(self):
        w = t(np.ones(3), rg=True)
        with ag.no_grad():
            y = ag.mul(w, w)
        assert not y.requires_grad and y._backward is None
