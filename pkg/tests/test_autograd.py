import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spn import autograd as ag
from spn.autograd import Tensor
from spn.gradcheck import check_gradients


def naive_conv2d(x, w, mask, b):
    """Hand cross-correlation oracle: plain loops, zero padding, same size."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    weff = w * mask
    out = np.zeros((n, o, h, wd))
    for ni in range(n):
        for oi in range(o):
            for y in range(h):
                for xx in range(wd):
                    acc = b[oi]
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                yy, xc = y + ky - p, xx + kx - p
                                if 0 <= yy < h and 0 <= xc < wd:
                                    acc += x[ni, ci, yy, xc] * weff[oi, ci, ky, kx]
                    out[ni, oi, y, xx] = acc
    return out


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestConv2dMasked:
    def test_1x1_is_scalar_product(self):
        x = Tensor([[[[2.0]]]])
        w = Tensor([[[[3.0]]]], requires_grad=True)
        out = ag.conv2d_masked(x, w, np.ones((1, 1, 1, 1)), Tensor([0.0]))
        assert out.data[0, 0, 0, 0] == pytest.approx(6.0)

    def test_all_zero_mask_gives_bias(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(rng.standard_normal((5, 3, 3, 3)), requires_grad=True)
        b = Tensor(np.arange(5, dtype=np.float32))
        out = ag.conv2d_masked(x, w, np.zeros((5, 3, 3, 3)), b)
        expected = np.broadcast_to(np.arange(5, dtype=np.float32)[:, None, None], (5, 4, 4))
        assert np.array_equal(out.data[0], expected)
        assert np.array_equal(out.data[1], expected)

    def test_ramp_strict_past_mask(self):
        # 3x3 ramp 0..8, all-ones kernel, mask keeps strictly-raster-past taps:
        # center output = 0 + 1 + 2 + 3 = 6.0
        x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        w = np.ones((1, 1, 3, 3))
        mask = np.array([[[[1, 1, 1], [1, 0, 0], [0, 0, 0]]]], dtype=np.float64)
        b = np.zeros(1)
        out = ag.conv2d_masked(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                               mask, Tensor(b, dtype=np.float64))
        assert out.data[0, 0, 1, 1] == 6.0
        assert np.allclose(out.data, naive_conv2d(x, w, mask, b))

    def test_matches_naive_oracle_random(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((6, 3, 3, 3))
        mask = (rng.random((6, 3, 3, 3)) < 0.6).astype(np.float64)
        b = rng.standard_normal(6)
        out = ag.conv2d_masked(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                               mask, Tensor(b, dtype=np.float64))
        assert np.allclose(out.data, naive_conv2d(x, w, mask, b), atol=1e-12)

    def test_rejects_non_binary_mask(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 3, 3)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3)))
        with pytest.raises(ValueError, match="binary"):
            ag.conv2d_masked(x, w, np.full((1, 1, 3, 3), 0.5), Tensor([0.0]))

    def test_rejects_even_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = Tensor(rng.standard_normal((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="odd"):
            ag.conv2d_masked(x, w, np.ones((1, 1, 2, 2)), Tensor([0.0]))

    def test_masked_weight_gradient_support(self, rng):
        # gradient support is a subset of the mask support, exactly
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        w = Tensor(rng.standard_normal((6, 3, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(6), requires_grad=True)
        mask = (rng.random((6, 3, 3, 3)) < 0.5).astype(np.float32)
        out = ag.conv2d_masked(x, w, mask, b)
        ag.backward(out.sum())
        assert np.all(w.grad[mask == 0] == 0.0)


class TestLinear:
    def test_identity(self):
        out = ag.linear(Tensor([1.0, 0.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        assert np.array_equal(out.data, [1.0, 0.0])

    def test_sum_plus_bias(self):
        out = ag.linear(Tensor([1.0, 2.0]), Tensor([[1.0], [1.0]]), Tensor([0.5]))
        assert out.data[0] == pytest.approx(3.5)

    def test_matches_naive_matmul(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))
        out = ag.linear(Tensor(x), Tensor(w), Tensor(np.zeros(2)))
        assert np.allclose(out.data, naive_matmul(x, w), atol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            ag.linear(Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal((4, 2))),
                      Tensor(np.zeros(2)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = ag.softmax_cross_entropy(Tensor(np.zeros((4, 8))), np.zeros(4, dtype=np.int64))
        assert np.allclose(loss.data, np.log(8.0), atol=1e-6)

    def test_saturated(self):
        loss = ag.softmax_cross_entropy(Tensor([[30.0, -30.0]]), np.array([0]))
        assert loss.data[0] < 1e-9

    def test_matches_extended_precision(self, rng):
        logits = rng.standard_normal(5) * 4
        target = 3
        loss = ag.softmax_cross_entropy(Tensor(logits, dtype=np.float64), np.array(target))
        with mpmath.workdps(50):
            den = mpmath.fsum(mpmath.e ** mpmath.mpf(float(v)) for v in logits)
            expected = -mpmath.log(mpmath.e ** mpmath.mpf(float(logits[target])) / den)
        assert abs(float(loss.data) - float(expected)) / abs(float(expected)) < 1e-6

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            ag.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    @given(k=st.integers(min_value=2, max_value=64))
    def test_zero_logits_give_ln_k(self, k):
        loss = ag.softmax_cross_entropy(Tensor(np.zeros((1, k))), np.array([k - 1]))
        assert loss.data[0] == pytest.approx(np.log(k), rel=1e-6)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=30)
    def test_nonnegative(self, seed):
        r = np.random.default_rng(seed)
        logits = r.standard_normal((3, 6)) * 5
        targets = r.integers(0, 6, size=3)
        loss = ag.softmax_cross_entropy(Tensor(logits), targets)
        assert np.all(loss.data >= 0)

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        targets = np.array([1, 3])
        loss = ag.softmax_cross_entropy(logits, targets).sum()
        ag.backward(loss)
        z = logits.data - logits.data.max(-1, keepdims=True)
        soft = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        onehot = np.eye(4, dtype=np.float32)[targets]
        assert np.allclose(logits.grad, soft - onehot, atol=1e-6)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ag.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_concat_shapes(self, rng):
        a = Tensor(rng.standard_normal((2, 3)))
        b = Tensor(rng.standard_normal((2, 5)))
        assert ag.concat([a, b], axis=1).shape == (2, 8)

    def test_embed_lookup_gathers_row(self, rng):
        table = Tensor(rng.standard_normal((4, 8)))
        out = ag.embed_lookup(table, np.array(2))
        assert np.array_equal(out.data, table.data[2])

    def test_embed_lookup_out_of_range(self, rng):
        table = Tensor(rng.standard_normal((4, 8)))
        with pytest.raises(IndexError):
            ag.embed_lookup(table, np.array([4]))

    def test_reshape_mismatch(self, rng):
        with pytest.raises(ValueError):
            ag.reshape(Tensor(rng.standard_normal((2, 3))), (7,))

    def test_embed_gradient_scatters(self, rng):
        table = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        out = ag.embed_lookup(table, np.array([1, 1, 3]))
        ag.backward(out.sum())
        expected = np.zeros((4, 2), dtype=np.float32)
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(table.grad, expected)


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        ag.backward(ag.mul(x, x).sum())
        assert x.grad[0] == pytest.approx(6.0)

    def test_matmul_grad_matches_finite_differences(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)
        err = check_gradients(lambda: ag.matmul(a, b).sum(), [a, b], h=1e-6)
        assert err < 1e-8

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError):
            ag.backward(ag.relu(x))

    def test_detached_graph_rejected(self):
        with pytest.raises(RuntimeError, match="detached"):
            ag.backward(Tensor(1.0))

    def test_repeated_backward_rejected(self):
        x = Tensor([2.0], requires_grad=True)
        loss = ag.mul(x, x).sum()
        ag.backward(loss)
        with pytest.raises(RuntimeError, match="already"):
            ag.backward(loss)

    def test_backward_linearity(self, rng):
        # backward of a sum of losses equals the sum of individual passes
        xv = rng.standard_normal(5)
        wv = rng.standard_normal((5, 3))

        def grad_of(fn):
            x = Tensor(xv, requires_grad=True)
            w = Tensor(wv, requires_grad=True)
            ag.backward(fn(x, w))
            zero = lambda g, p: np.zeros(p.shape, dtype=np.float32) if g is None else g
            return zero(x.grad, x), zero(w.grad, w)

        g1x, g1w = grad_of(lambda x, w: ag.linear(x, w, Tensor(np.zeros(3))).sum())
        g2x, g2w = grad_of(lambda x, w: ag.tanh(x).sum())
        gsx, gsw = grad_of(lambda x, w: ag.add(ag.linear(x, w, Tensor(np.zeros(3))).sum(),
                                               ag.tanh(x).sum()))
        assert np.allclose(gsx, g1x + g2x, atol=1e-6)
        assert np.allclose(gsw, g1w + g2w, atol=1e-6)

    def test_forward_determinism(self, rng):
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((6, 5))
        a = ag.linear(Tensor(x), Tensor(w), Tensor(np.zeros(5)))
        b = ag.linear(Tensor(x), Tensor(w), Tensor(np.zeros(5)))
        assert np.array_equal(a.data, b.data)


class TestFiniteChecks:
    def test_nan_raises(self):
        x = Tensor([1.0, -1.0])
        with pytest.raises(FloatingPointError):
            ag.scale(x, np.inf)

    def test_toggle(self):
        with ag.finite_checks(False):
            out = ag.scale(Tensor([1.0]), np.inf)
        assert np.isinf(out.data[0])


class TestGradcheckHarness:
    def test_quadratic_form(self, rng):
        a = rng.standard_normal((4, 4))
        a = a + a.T
        x = Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
        at = Tensor(a, dtype=np.float64)

        def f():
            y = ag.linear(x, at, Tensor(np.zeros(4), dtype=np.float64))
            return ag.mul(ag.reshape(x, (4,)), y).sum()

        assert check_gradients(f, [x], h=1e-5) < 1e-8

    def test_requires_float64(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ValueError, match="float64"):
            check_gradients(lambda: ag.tanh(x).sum(), [x])


class TestStructuralOps:
    def test_masked_softmax_future_rows_zero(self, rng):
        scores = Tensor(rng.standard_normal((2, 4, 4)))
        allowed = np.tril(np.ones((4, 4), dtype=bool))
        p = ag.masked_softmax(scores, allowed)
        assert np.all(p.data[:, ~allowed] == 0.0)
        assert np.allclose(p.data.sum(-1), 1.0, atol=1e-6)

    def test_masked_softmax_invariant_to_masked_scores(self, rng):
        base = rng.standard_normal((4, 4)).astype(np.float32)
        allowed = np.tril(np.ones((4, 4), dtype=bool))
        other = base.copy()
        other[~allowed] = 99.0
        p1 = ag.masked_softmax(Tensor(base), allowed)
        p2 = ag.masked_softmax(Tensor(other), allowed)
        assert np.array_equal(p1.data, p2.data)

    def test_narrow_expand_roundtrip(self, rng):
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64)
        err = check_gradients(lambda: ag.expand(ag.narrow(x, 1, 1, 2), (4, 3, 2)).sum(), [x], h=1e-6)
        assert err < 1e-8

    def test_layer_norm_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True, dtype=np.float64)
        g = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
        err = check_gradients(lambda: ag.tanh(ag.layer_norm(x, g, b)).sum(), [x, g, b], h=1e-6)
        assert err < 1e-7
