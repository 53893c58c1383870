"""Numeric-kernel tests.

The reference implementations here are written first and kept dumb on
purpose: a six-nested-loop convolution in scalar float32 arithmetic,
and central finite differences for every gradient. The library must
match the loop oracle bit-for-bit (same summation order) and the
finite differences to tolerance.
"""

import numpy as np
import pytest

from aslab import tensor as T
from aslab.errors import ShapeError


# ---------------------------------------------------------------- oracles


def conv2d_loop_oracle(x, kernel, bias, pad):
    """Naive six-nested-loop cross-correlation, scalar accumulation in
    the input dtype, loop order (cout, i, j) x (cin, fi, fj)."""
    cin, h, w = x.shape
    cout, _, fh, fw = kernel.shape
    h2 = h + 2 * pad - fh + 1
    w2 = w + 2 * pad - fw + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.empty((cout, h2, w2), dtype=x.dtype)
    for co in range(cout):
        for i in range(h2):
            for j in range(w2):
                acc = bias[co]
                for ci in range(cin):
                    for fi in range(fh):
                        for fj in range(fw):
                            acc = acc + xp[ci, i + fi, j + fj] * kernel[co, ci, fi, fj]
                out[co, i, j] = acc
    return out


def finite_diff(fn, x, eps):
    """Central-difference gradient of scalar fn at x (flattened loop)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = fn()
        flat[i] = old - eps
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b):
    na = np.linalg.norm(a.ravel())
    nb = np.linalg.norm(b.ravel())
    denom = max(na, nb, 1e-30)
    return np.linalg.norm((a - b).ravel()) / denom


# ------------------------------------------------------------ conv forward


class TestConvForward:
    def test_matches_loop_oracle_bitwise(self):
        """The ordered forward must equal the naive loop exactly, not
        just to tolerance — same summation order, same bits."""
        rng = np.random.default_rng(42)
        shapes = [
            (2, 5, 5, 3, 3, 1),
            (1, 8, 6, 2, 3, 0),
            (3, 7, 7, 4, 1, 0),
            (2, 9, 4, 2, 3, 2),
            (4, 6, 6, 3, 5, 2),
        ]
        for cin, h, w, cout, f, pad in shapes:
            x = rng.standard_normal((cin, h, w)).astype(np.float32)
            k = rng.standard_normal((cout, cin, f, f)).astype(np.float32)
            b = rng.standard_normal(cout).astype(np.float32)
            got = T.conv2d_forward(x, k, b, pad)
            ref = conv2d_loop_oracle(x, k, b, pad)
            assert got.dtype == np.float32
            assert got.tobytes() == ref.tobytes(), f"shape {(cin, h, w, cout, f, pad)}"

    def test_output_shape_formula(self):
        x = np.zeros((2, 10, 7), np.float32)
        k = np.zeros((3, 2, 3, 3), np.float32)
        b = np.zeros(3, np.float32)
        assert T.conv2d_forward(x, k, b, pad=0).shape == (3, 8, 5)
        assert T.conv2d_forward(x, k, b, pad=1).shape == (3, 10, 7)

    def test_identity_kernel(self):
        """1x1 kernel with weight 1 reproduces the input channel."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 6, 6)).astype(np.float32)
        k = np.ones((1, 1, 1, 1), np.float32)
        b = np.zeros(1, np.float32)
        out = T.conv2d_forward(x, k, b)
        assert np.array_equal(out, x)

    def test_batch_path_matches_reference(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3, 12, 11)).astype(np.float32)
        k = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(5).astype(np.float32)
        got = T.conv2d_forward_batch(x, k, b, pad=1)
        for i in range(4):
            ref = T.conv2d_forward(x[i], k, b, pad=1)
            np.testing.assert_allclose(got[i], ref, rtol=2e-6, atol=2e-6)

    def test_batch_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 2, 9, 9)).astype(np.float32)
        k = rng.standard_normal((4, 2, 5, 5)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        a = T.conv2d_forward_batch(x, k, b, pad=2)
        bb = T.conv2d_forward_batch(x.copy(), k.copy(), b.copy(), pad=2)
        assert a.tobytes() == bb.tobytes()

    def test_shape_errors_name_dims(self):
        x = np.zeros((2, 5, 5), np.float32)
        k = np.zeros((3, 4, 3, 3), np.float32)
        b = np.zeros(3, np.float32)
        with pytest.raises(ShapeError, match="4 input channels"):
            T.conv2d_forward(x, k, b)
        k2 = np.zeros((3, 2, 9, 9), np.float32)
        with pytest.raises(ShapeError, match="larger than padded input"):
            T.conv2d_forward(x, k2, b, pad=1)


# ----------------------------------------------------------- conv backward


class TestConvBackward:
    def test_finite_difference_input_and_kernel(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 6, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        tgt = rng.standard_normal((3, 6, 5))

        def loss():
            out = T.conv2d_forward_batch(x[None], k, b, pad=1)[0]
            return float(((out - tgt) ** 2).sum())

        out = T.conv2d_forward_batch(x[None], k, b, pad=1)[0]
        g = 2.0 * (out - tgt)
        grads = T.conv2d_backward_batch(x[None], k, g[None], pad=1)
        eps = 1e-6
        assert rel_err(grads.input_grad[0], finite_diff(loss, x, eps)) < 1e-6
        assert rel_err(grads.kernel_grad, finite_diff(loss, k, eps)) < 1e-6
        assert rel_err(grads.bias_grad, finite_diff(loss, b, eps)) < 1e-6

    def test_zero_out_grad_gives_zero_grads(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        g = np.zeros((1, 2, 4, 4), np.float32)
        grads = T.conv2d_backward_batch(x, k, g, pad=1)
        assert not grads.input_grad.any()
        assert not grads.kernel_grad.any()
        assert not grads.bias_grad.any()

    def test_one_by_one_kernel_input_grad_is_scaled_out_grad(self):
        """With a single 1x1 kernel the input gradient is just
        out_grad * weight, elementwise."""
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
        k = np.full((1, 1, 1, 1), 2.5, np.float32)
        g = rng.standard_normal((1, 1, 5, 5)).astype(np.float32)
        grads = T.conv2d_backward_batch(x, k, g, pad=0)
        np.testing.assert_array_equal(grads.input_grad, g * np.float32(2.5))

    def test_input_grad_equals_rotated_kernel_full_correlation(self):
        """Transposed-conv identity: the input gradient equals a full
        correlation of out_grad with the 180-rotated, channel-swapped
        kernel."""
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 6, 6))
        k = rng.standard_normal((3, 2, 3, 3))
        g = rng.standard_normal((3, 6, 6))
        grads = T.conv2d_backward(x, k, g, pad=1)
        krot = k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).copy()
        ref = conv2d_loop_oracle(g, krot, np.zeros(2), pad=1)
        np.testing.assert_allclose(grads.input_grad, ref, rtol=1e-12, atol=1e-12)

    def test_single_image_wrapper(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 5, 5)).astype(np.float32)
        k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        g = rng.standard_normal((2, 5, 5)).astype(np.float32)
        a = T.conv2d_backward(x, k, g, pad=1)
        bb = T.conv2d_backward_batch(x[None], k, g[None], pad=1)
        assert a.input_grad.tobytes() == bb.input_grad[0].tobytes()
        assert a.kernel_grad.tobytes() == bb.kernel_grad.tobytes()


# ---------------------------------------------------------------- relu/gap


class TestReluGap:
    def test_relu_forward_clamps(self):
        x = np.array([-1.0, 0.0, 2.0], np.float32)
        np.testing.assert_array_equal(T.relu_forward(x), [0, 0, 2])

    def test_relu_backward_subgradient_zero_at_zero(self):
        x = np.array([-1.0, 0.0, 3.0], np.float32)
        g = np.ones(3, np.float32)
        np.testing.assert_array_equal(T.relu_backward(x, g), [0, 0, 1])

    def test_gap_forward_is_channel_mean(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 4, 5)).astype(np.float32)
        got = T.gap_forward(a)
        for c in range(3):
            assert got[c] == np.float32(a[c].mean())

    def test_gap_backward_distributes_uniformly(self):
        g = np.array([2.0, -4.0], np.float32)
        out = T.gap_backward(g, 4, 4)
        assert out.shape == (2, 4, 4)
        assert np.all(out[0] == np.float32(2.0 / 16))
        assert np.all(out[1] == np.float32(-4.0 / 16))

    def test_gap_backward_sums_back_to_out_grad(self):
        """Summing the distributed gradient per channel recovers
        out_grad up to one ulp of accumulation."""
        rng = np.random.default_rng(13)
        g = rng.standard_normal(16).astype(np.float32)
        out = T.gap_backward(g, 8, 8)
        sums = out.sum(axis=(1, 2))
        np.testing.assert_allclose(sums, g, rtol=2e-6)

    def test_gap_batch_matches_single(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((3, 2, 6, 6)).astype(np.float32)
        got = T.gap_forward_batch(a)
        for i in range(3):
            assert got[i].tobytes() == T.gap_forward(a[i]).tobytes()


# ------------------------------------------------------------------- dense


class TestDense:
    def test_forward_matches_manual(self):
        x = np.array([1.0, 2.0], np.float32)
        w = np.array([[3.0, 4.0], [5.0, 6.0]], np.float32)
        b = np.array([0.5, -0.5], np.float32)
        np.testing.assert_allclose(T.dense_forward(x, w, b), [11.5, 16.5])

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal(6)
        w = rng.standard_normal((4, 6))
        b = rng.standard_normal(4)
        tgt = rng.standard_normal(4)

        def loss():
            return float(((T.dense_forward(x, w, b) - tgt) ** 2).sum())

        g = 2.0 * (T.dense_forward(x, w, b) - tgt)
        dx, dw, db = T.dense_backward(x, w, g)
        assert rel_err(dx, finite_diff(loss, x, 1e-6)) < 1e-7
        assert rel_err(dw, finite_diff(loss, w, 1e-6)) < 1e-7
        assert rel_err(db, finite_diff(loss, b, 1e-6)) < 1e-7

    def test_batch_backward_reduces_over_samples(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((3, 5)).astype(np.float32)
        w = rng.standard_normal((2, 5)).astype(np.float32)
        g = rng.standard_normal((3, 2)).astype(np.float32)
        dx, dw, db = T.dense_backward_batch(x, w, g)
        dw_ref = sum(np.outer(g[i], x[i]) for i in range(3))
        np.testing.assert_allclose(dw, dw_ref, rtol=1e-5)
        np.testing.assert_allclose(db, g.sum(0), rtol=1e-6)
        assert dx.shape == x.shape


# ------------------------------------------------------------- softmax/CE


class TestSoftmaxCE:
    def test_equal_logits_loss_is_ln_classes(self):
        logits = np.zeros(10, np.float32)
        loss, _ = T.softmax_cross_entropy(logits, 3)
        assert abs(loss - np.log(10.0)) < 1e-6

    def test_loss_nonnegative_and_stable_for_large_logits(self):
        logits = np.array([1e4, -1e4, 0.0], np.float32)
        loss, grad = T.softmax_cross_entropy(logits, 0)
        assert np.isfinite(loss) and loss >= 0
        assert np.all(np.isfinite(grad))
        loss2, _ = T.softmax_cross_entropy(logits, 1)
        assert np.isfinite(loss2) and loss2 > 0

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(17)
        logits = rng.standard_normal(7).astype(np.float32)
        _, grad = T.softmax_cross_entropy(logits, 2)
        p = np.exp(logits - logits.max())
        p = p / p.sum()
        onehot = np.zeros(7, np.float32)
        onehot[2] = 1
        np.testing.assert_allclose(grad, p - onehot, rtol=1e-6, atol=1e-7)
        # gradient of the loss sums to zero
        assert abs(grad.sum()) < 1e-6

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(18)
        logits = rng.standard_normal(5)

        def loss():
            return T.softmax_cross_entropy(logits, 1)[0]

        _, grad = T.softmax_cross_entropy(logits, 1)
        fd = finite_diff(loss, logits, 1e-6)
        assert rel_err(grad, fd) < 1e-8

    def test_batch_matches_single(self):
        rng = np.random.default_rng(19)
        logits = rng.standard_normal((4, 6)).astype(np.float32)
        targets = np.array([0, 5, 2, 2])
        losses, grads = T.softmax_cross_entropy_batch(logits, targets)
        for i in range(4):
            li, gi = T.softmax_cross_entropy(logits[i].copy(), int(targets[i]))
            assert abs(losses[i] - li) < 1e-7
            np.testing.assert_allclose(grads[i], gi, rtol=1e-6, atol=1e-7)

    def test_target_out_of_range(self):
        with pytest.raises(ShapeError, match="out of range"):
            T.softmax_cross_entropy(np.zeros(3, np.float32), 3)


# -------------------------------------------------------- full-chain check


def _random_chain(rng):
    """A random little conv->relu stack ending in gap->dense->CE, built
    directly from the kernels. Returns (params list, forward closure)."""
    cin = int(rng.integers(1, 4))
    h = int(rng.integers(5, 9))
    w = int(rng.integers(5, 9))
    depth = int(rng.integers(1, 4))
    n_classes = int(rng.integers(2, 6))
    x = rng.standard_normal((cin, h, w))
    convs = []
    c_prev = cin
    for _ in range(depth):
        f = int(rng.choice([1, 3]))
        c_out = int(rng.integers(2, 6))
        k = rng.standard_normal((c_out, c_prev, f, f)) * 0.5
        b = rng.standard_normal(c_out) * 0.1
        convs.append((k, b, (f - 1) // 2))
        c_prev = c_out
    wd = rng.standard_normal((n_classes, c_prev)) * 0.5
    bd = rng.standard_normal(n_classes) * 0.1
    target = int(rng.integers(0, n_classes))
    return x, convs, wd, bd, target


def chain_loss_and_grads(x, convs, wd, bd, target):
    acts = [x]
    pre = []
    cur = x
    for k, b, pad in convs:
        z = T.conv2d_forward_batch(cur[None], k, b, pad)[0]
        pre.append(z)
        cur = T.relu_forward(z)
        acts.append(cur)
    gvec = T.gap_forward(cur)
    logits = T.dense_forward(gvec, wd, bd)
    loss, gl = T.softmax_cross_entropy(logits, target)
    dgap, dwd, dbd = T.dense_backward(gvec, wd, gl)
    g = T.gap_backward(dgap, cur.shape[1], cur.shape[2])
    kgrads = []
    for i in reversed(range(len(convs))):
        k, b, pad = convs[i]
        g = T.relu_backward(pre[i], g)
        cg = T.conv2d_backward(acts[i], k, g, pad)
        kgrads.append((cg.kernel_grad, cg.bias_grad))
        g = cg.input_grad
    kgrads.reverse()
    return loss, g, kgrads, dwd, dbd


class TestChainGradients:
    def test_full_chain_finite_difference(self):
        """End-to-end gradient of conv/relu/gap/dense/CE chains against
        central differences, float64, a handful of random nets."""
        rng = np.random.default_rng(100)
        for _ in range(5):
            x, convs, wd, bd, target = _random_chain(rng)
            loss, gx, kgrads, dwd, dbd = chain_loss_and_grads(x, convs, wd, bd, target)

            def loss_only():
                return chain_loss_and_grads(x, convs, wd, bd, target)[0]

            assert rel_err(gx, finite_diff(loss_only, x, 1e-6)) < 1e-6
            assert rel_err(dwd, finite_diff(loss_only, wd, 1e-6)) < 1e-6
            for i, (kg, bg) in enumerate(kgrads):
                assert rel_err(kg, finite_diff(loss_only, convs[i][0], 1e-6)) < 1e-6
                assert rel_err(bg, finite_diff(loss_only, convs[i][1], 1e-6)) < 1e-6
