"""Tensor engine tests: frozen examples, properties, and gradient checks.

Expected values for the non-trivial cases come from the brute-force oracles
at the top of this file (direct convolution sums, per-window maxima, the
normalization formula applied by hand); the oracles never call the code
under test's fast paths.
"""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdcount.gradcheck import max_relative_error, numeric_grad, numeric_grad_smooth
from crowdcount.tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    Tensor4,
    add,
    add_backward,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    read_tensor,
    relu,
    relu_backward,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def conv2d_bruteforce(x, w, bias=None):
    """Direct quadruple-loop same-padding cross-correlation in float64."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((n, oc, h, wd), dtype=np.float64)
    for b in range(n):
        for o in range(oc):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for ci in range(ic):
                        for u in range(kh):
                            for v in range(kw):
                                ii, jj = i + u - ph, j + v - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[b, ci, ii, jj] * w[o, ci, u, v]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def maxpool2_bruteforce(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for b in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[b, ci, i, j] = x[b, ci, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    return out


def batchnorm_bruteforce(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def t4(values, shape=None):
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return Tensor4(arr)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

class TestConv2d:
    def test_identity_kernel(self):
        x = t4([1, 2, 3, 4], (1, 1, 2, 2))
        p = ConvParams(t4([1.0], (1, 1, 1, 1)))
        y = conv2d(x, p)
        np.testing.assert_array_equal(y.data, x.data)

    def test_zero_input_any_weights(self):
        rng = np.random.default_rng(0)
        x = Tensor4(np.zeros((2, 3, 4, 4)))
        p = ConvParams(Tensor4(rng.standard_normal((5, 3, 3, 3))))
        np.testing.assert_array_equal(conv2d(x, p).data, 0.0)

    def test_ones_3x3_padded(self):
        # brute-force direct sum: center 9, edge centers 6, corners 4
        x = Tensor4(np.ones((1, 1, 3, 3)))
        p = ConvParams(Tensor4(np.ones((1, 1, 3, 3))))
        y = conv2d(x, p)
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=np.float64)
        np.testing.assert_array_equal(y.data[0, 0], expected)
        np.testing.assert_allclose(
            y.data, conv2d_bruteforce(x.data, p.weights.data), rtol=1e-12)

    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(7)
        for k, ic, oc in [(3, 2, 4), (1, 3, 2), (3, 1, 1)]:
            x = Tensor4(rng.standard_normal((2, ic, 4, 5)))
            p = ConvParams(Tensor4(rng.standard_normal((oc, ic, k, k))),
                           rng.standard_normal(oc))
            got = conv2d(x, p).data
            want = conv2d_bruteforce(x.data, p.weights.data, p.bias)
            np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    @given(alpha=st.floats(-3, 3), beta=st.floats(-3, 3), seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 4, 4))
        y = rng.standard_normal((1, 2, 4, 4))
        p = ConvParams(Tensor4(rng.standard_normal((3, 2, 3, 3))))
        lhs = conv2d(Tensor4(alpha * x + beta * y), p).data
        rhs = alpha * conv2d(Tensor4(x), p).data + beta * conv2d(Tensor4(y), p).data
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-9)

    def test_shape_mismatch_rejected(self):
        p = ConvParams(Tensor4(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor4(np.ones((1, 2, 4, 4))), p)

    def test_zero_batch_rejected(self):
        p = ConvParams(Tensor4(np.ones((1, 1, 1, 1))))
        with pytest.raises(ShapeError, match="batch"):
            conv2d(Tensor4(np.ones((0, 1, 4, 4))), p)

    def test_kernel_size_restricted(self):
        with pytest.raises(ShapeError, match="kernel"):
            ConvParams(Tensor4(np.ones((1, 1, 5, 5))))

    def test_backward_accumulates_exactly(self):
        rng = np.random.default_rng(3)
        x = Tensor4(rng.standard_normal((1, 2, 3, 3)))
        p = ConvParams(Tensor4(rng.standard_normal((2, 2, 3, 3))), np.zeros(2))
        dy = Tensor4(rng.standard_normal((1, 2, 3, 3)))
        conv2d_backward(x, p, dy)
        once = p.weights.grad.copy()
        once_b = p.bias_grad.copy()
        conv2d_backward(x, p, dy)
        np.testing.assert_array_equal(p.weights.grad, 2.0 * once)
        np.testing.assert_array_equal(p.bias_grad, 2.0 * once_b)

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(11)
        x = Tensor4(rng.standard_normal((2, 2, 4, 4)))
        p = ConvParams(Tensor4(rng.standard_normal((3, 2, 3, 3))),
                       rng.standard_normal(3))
        proj = rng.standard_normal((2, 3, 4, 4))

        def f():
            return float((conv2d(x, p).data * proj).sum())

        p.zero_grad()
        dx = conv2d_backward(x, p, Tensor4(proj.copy()))
        assert max_relative_error(dx.data, numeric_grad(f, x.data)) < 1e-4
        assert max_relative_error(p.weights.grad, numeric_grad(f, p.weights.data)) < 1e-4
        assert max_relative_error(p.bias_grad, numeric_grad(f, p.bias)) < 1e-4


# ---------------------------------------------------------------------------
# batchnorm
# ---------------------------------------------------------------------------

def bn_params(c=1, gamma=1.0, beta=0.0, eps=1e-5, dtype=np.float64):
    p = BatchNormParams.create(c, epsilon=eps, dtype=dtype)
    p.gamma[:] = gamma
    p.beta[:] = beta
    return p


class TestBatchnorm:
    def test_constant_channel_normalizes_to_zero(self):
        x = Tensor4(np.full((1, 1, 2, 2), 3.7))
        y = batchnorm(x, bn_params())
        assert np.abs(y.data).max() <= 1e-2  # epsilon-induced bound only

    def test_hand_computed_values(self):
        # mean 2.5, biased var 1.25; eps 0 -> {-3,-1,1,3}/sqrt(5)
        x = t4([1, 2, 3, 4], (1, 1, 2, 2))
        y = batchnorm(x, bn_params(eps=0.0))
        expected = np.array([-3, -1, 1, 3], dtype=np.float64) / np.sqrt(5.0)
        np.testing.assert_allclose(y.data.reshape(-1), expected, rtol=1e-12)

    def test_gamma_zero_beta_dominates(self):
        rng = np.random.default_rng(5)
        x = Tensor4(rng.standard_normal((2, 3, 4, 4)))
        y = batchnorm(x, bn_params(c=3, gamma=0.0, beta=7.0))
        np.testing.assert_array_equal(y.data, 7.0)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(9)
        x = Tensor4(rng.standard_normal((3, 4, 2, 5)))
        p = bn_params(c=4)
        p.gamma[:] = rng.standard_normal(4)
        p.beta[:] = rng.standard_normal(4)
        want = batchnorm_bruteforce(x.data, p.gamma, p.beta, p.epsilon)
        np.testing.assert_allclose(batchnorm(x, p).data, want, rtol=1e-12)

    def test_train_output_statistics(self):
        rng = np.random.default_rng(13)
        x = Tensor4(rng.standard_normal((4, 3, 8, 8)) * 5.0 + 2.0)
        y = batchnorm(x, bn_params(c=3)).data
        assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
        assert np.abs(y.var(axis=(0, 2, 3)) - 1.0).max() < 1e-3

    def test_running_stats_update(self):
        x = Tensor4(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2))
        p = bn_params()
        batchnorm(x, p)
        np.testing.assert_allclose(p.running_mean, [0.99 * 0 + 0.01 * 2.5])
        np.testing.assert_allclose(p.running_var, [0.99 * 1 + 0.01 * 1.25])

    def test_eval_mode_uses_running_stats(self):
        p = bn_params()
        p.mode = "eval"
        p.running_mean[:] = 1.0
        p.running_var[:] = 4.0
        x = Tensor4(np.full((1, 1, 1, 1), 3.0))
        y = batchnorm(x, p)
        np.testing.assert_allclose(y.data, (3 - 1) / np.sqrt(4 + p.epsilon))

    def test_single_value_train_rejected(self):
        with pytest.raises(ShapeError, match="train"):
            batchnorm(Tensor4(np.ones((1, 1, 1, 1))), bn_params())

    def test_eval_mode_single_value_ok(self):
        p = bn_params()
        p.mode = "eval"
        batchnorm(Tensor4(np.ones((1, 1, 1, 1))), p)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients_vs_finite_differences(self, mode):
        rng = np.random.default_rng(17)
        x = Tensor4(rng.standard_normal((2, 3, 4, 4)))
        p = bn_params(c=3)
        p.gamma[:] = rng.standard_normal(3)
        p.beta[:] = rng.standard_normal(3)
        p.running_mean[:] = rng.standard_normal(3)
        p.running_var[:] = rng.uniform(0.5, 2.0, 3)
        p.mode = mode
        proj = rng.standard_normal(x.shape)
        snapshot = (p.running_mean.copy(), p.running_var.copy())

        def f():
            p.running_mean[:], p.running_var[:] = snapshot
            return float((batchnorm(x, p).data * proj).sum())

        p.running_mean[:], p.running_var[:] = snapshot
        dx = batchnorm_backward(x, p, Tensor4(proj.copy()))
        assert max_relative_error(dx.data, numeric_grad(f, x.data)) < 1e-4
        assert max_relative_error(p.gamma_grad, numeric_grad(f, p.gamma)) < 1e-4
        assert max_relative_error(p.beta_grad, numeric_grad(f, p.beta)) < 1e-4


# ---------------------------------------------------------------------------
# relu / maxpool2 / add
# ---------------------------------------------------------------------------

class TestRelu:
    def test_basic(self):
        y = relu(t4([-1, 0, 2, 5], (1, 1, 1, 4)))
        np.testing.assert_array_equal(y.data.reshape(-1), [0, 0, 2, 5])

    def test_all_negative_zero_everything(self):
        x = t4([-1, -2, -3, -4], (1, 1, 2, 2))
        dy = Tensor4(np.ones((1, 1, 2, 2)))
        assert relu(x).data.sum() == 0
        assert relu_backward(x, dy).data.sum() == 0

    def test_subgradient_rule(self):
        x = t4([-1, 2], (1, 1, 1, 2))
        dy = t4([5, 5], (1, 1, 1, 2))
        np.testing.assert_array_equal(relu_backward(x, dy).data.reshape(-1), [0, 5])

    def test_grad_at_exact_zero_is_zero(self):
        x = t4([0.0], (1, 1, 1, 1))
        dy = t4([3.0], (1, 1, 1, 1))
        assert relu_backward(x, dy).data.item() == 0.0

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(19)
        # keep inputs away from the kink at 0 so the difference quotient is valid
        x = Tensor4(rng.choice([-1.0, 1.0], (2, 2, 4, 4)) * rng.uniform(0.1, 1.0, (2, 2, 4, 4)))
        proj = rng.standard_normal(x.shape)

        def f():
            return float((relu(x).data * proj).sum())

        dx = relu_backward(x, Tensor4(proj.copy()))
        assert max_relative_error(dx.data, numeric_grad(f, x.data)) < 1e-4


class TestMaxpool2:
    def test_single_window(self):
        y = maxpool2(t4([1, 2, 3, 4], (1, 1, 2, 2)))
        assert y.data.item() == 4.0

    def test_window_maxima_by_inspection(self):
        x = t4([[5, 1], [1, 1], [1, 1], [9, 1]], (1, 1, 4, 2))
        y = maxpool2(x)
        np.testing.assert_array_equal(y.data[0, 0], [[5], [9]])
        np.testing.assert_array_equal(y.data, maxpool2_bruteforce(x.data))

    def test_constant_grid_and_tie_break(self):
        x = Tensor4(np.full((1, 1, 4, 4), 2.5))
        y = maxpool2(x)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 2.5))
        dx = maxpool2_backward(x, Tensor4(np.ones((1, 1, 2, 2))))
        # all-tied windows route gradient to the first row-major cell
        expected = np.zeros((4, 4))
        expected[0::2, 0::2] = 1.0
        np.testing.assert_array_equal(dx.data[0, 0], expected)

    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(23)
        x = Tensor4(rng.standard_normal((3, 2, 6, 8)))
        np.testing.assert_array_equal(maxpool2(x).data, maxpool2_bruteforce(x.data))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2(Tensor4(np.ones((1, 1, 3, 4))))

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_sum_and_max_properties(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor4(rng.uniform(0, 1, (1, 2, 4, 6)))
        y = maxpool2(x)
        assert y.data.sum() <= x.data.sum() + 1e-12
        assert y.data.max() == x.data.max()

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(29)
        # distinct window entries keep the argmax stable under the FD step
        x = Tensor4(rng.permutation(96).astype(np.float64).reshape(2, 2, 4, 6))
        proj = rng.standard_normal((2, 2, 2, 3))

        def f():
            return float((maxpool2(x).data * proj).sum())

        dx = maxpool2_backward(x, Tensor4(proj.copy()))
        assert max_relative_error(dx.data, numeric_grad(f, x.data)) < 1e-4


class TestAdd:
    def test_zero_identity(self):
        rng = np.random.default_rng(31)
        a = Tensor4(rng.standard_normal((1, 2, 3, 3)))
        np.testing.assert_array_equal(add(a, Tensor4(np.zeros_like(a.data))).data, a.data)

    def test_values(self):
        y = add(t4([1, 2], (1, 1, 1, 2)), t4([3, 4], (1, 1, 1, 2)))
        np.testing.assert_array_equal(y.data.reshape(-1), [4, 6])

    def test_backward_passes_through(self):
        dy = t4([1.5, -2.0], (1, 1, 1, 2))
        da, db = add_backward(dy)
        np.testing.assert_array_equal(da.data, dy.data)
        np.testing.assert_array_equal(db.data, dy.data)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            add(Tensor4(np.ones((1, 1, 2, 2))), Tensor4(np.ones((1, 1, 2, 3))))


# ---------------------------------------------------------------------------
# composition gradient check
# ---------------------------------------------------------------------------

def test_composed_pipeline_gradient():
    """conv -> bn -> relu -> pool, checked end to end against central FD.

    BN centers activations at zero, so some perturbed coordinates cross the
    ReLU kink or flip a pool argmax inside the difference bracket; those
    coordinates carry no information about the analytic gradient and are
    excluded via the region fingerprint. Most coordinates must stay valid
    for the check to count.
    """
    rng = np.random.default_rng(37)
    x = Tensor4(rng.standard_normal((2, 2, 4, 4)))
    conv = ConvParams(Tensor4(rng.standard_normal((3, 2, 3, 3))))
    bn = bn_params(c=3)
    proj = rng.standard_normal((2, 3, 2, 2))

    def forward():
        c = conv2d(x, conv)
        b = batchnorm(c, bn)
        r = relu(b)
        return c, b, r, maxpool2(r)

    def f():
        c, b, r, y = forward()
        n, ch, h, w = r.shape
        argmax = (r.data.reshape(n, ch, h // 2, 2, w // 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(n, ch, h // 2, w // 2, 4)
                  .argmax(axis=-1))
        pattern = np.packbits(b.data > 0).tobytes() + argmax.astype(np.uint8).tobytes()
        return float((y.data * proj).sum()), pattern

    c, b, r, y = forward()
    conv.zero_grad()
    bn.zero_grad()
    g = maxpool2_backward(r, Tensor4(proj.copy()))
    g = relu_backward(b, g)
    g = batchnorm_backward(c, bn, g)
    dx = conv2d_backward(x, conv, g)

    for analytic, arr in [(dx.data, x.data), (conv.weights.grad, conv.weights.data),
                          (bn.gamma_grad, bn.gamma), (bn.beta_grad, bn.beta)]:
        numeric, valid = numeric_grad_smooth(f, arr)
        assert valid.mean() > 0.7, f"too many kink crossings: {valid.mean():.2f} valid"
        err = max_relative_error(analytic.reshape(-1)[valid], numeric[valid])
        assert err < 1e-4, err


def test_outputs_stay_finite():
    rng = np.random.default_rng(41)
    x = Tensor4((rng.standard_normal((2, 3, 4, 4)) * 1e3).astype(np.float32))
    p = ConvParams(Tensor4((rng.standard_normal((4, 3, 3, 3)) * 1e2).astype(np.float32)))
    y = relu(batchnorm(conv2d(x, p), bn_params(c=4, dtype=np.float32)))
    assert np.isfinite(y.data).all()


# ---------------------------------------------------------------------------
# DRT4 serialization
# ---------------------------------------------------------------------------

class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(43)
        t = Tensor4(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
        path = tmp_path / "t.drt4"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.shape == t.shape
        np.testing.assert_array_equal(back.data, t.data)

    def test_header_layout(self):
        t = Tensor4(np.zeros((1, 2, 3, 4), dtype=np.float32))
        buf = tensor_to_bytes(t)
        assert buf[:4] == b"DRT4"
        assert np.frombuffer(buf[4:24], dtype="<u4").tolist() == [1, 1, 2, 3, 4]
        assert len(buf) == 24 + 4 * 24

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            tensor_from_bytes(b"XXXX" + b"\x00" * 40)

    def test_truncated_rejected(self):
        t = Tensor4(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="truncated"):
            tensor_from_bytes(tensor_to_bytes(t)[:-3])

    def test_stream_holds_consecutive_records(self):
        a = Tensor4(np.ones((1, 1, 1, 2), dtype=np.float32))
        b = Tensor4(np.full((1, 1, 1, 3), 2.0, dtype=np.float32))
        stream = io.BytesIO(tensor_to_bytes(a) + tensor_to_bytes(b))
        first, second = read_tensor(stream), read_tensor(stream)
        np.testing.assert_array_equal(first.data.reshape(-1), [1, 1])
        np.testing.assert_array_equal(second.data.reshape(-1), [2, 2, 2])


class TestTensor4:
    def test_requires_four_dims(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((2, 3)))

    def test_grad_shape_checked(self):
        with pytest.raises(ShapeError):
            Tensor4(np.zeros((1, 1, 2, 2)), grad=np.zeros((1, 1, 2, 3)))

    def test_ensure_and_zero_grad(self):
        t = Tensor4(np.ones((1, 1, 2, 2)))
        g = t.ensure_grad()
        g += 5.0
        t.zero_grad()
        np.testing.assert_array_equal(t.grad, 0.0)
