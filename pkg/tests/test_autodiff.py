import numpy as np
import pytest
from helpers import finite_difference, rel_err

import hybridseg.autodiff as ad
from hybridseg.errors import ContractViolation


def scalar_loss(t):
    return ad.tsum(ad.mul(t, t))


class TestGraphMechanics:
    def test_backward_without_graph_rejected(self):
        with pytest.raises(ContractViolation):
            ad.constant(3.0).backward()

    def test_backward_on_non_scalar_rejected(self):
        x = ad.parameter(np.ones(3))
        y = ad.mul(x, x)
        with pytest.raises(ContractViolation):
            y.backward()

    def test_diamond_graph_accumulates_both_paths(self):
        x = ad.parameter(2.0)
        y = ad.add(ad.mul(x, x), x)  # x^2 + x, dy/dx = 2x + 1 = 5
        y.backward()
        assert x.grad == pytest.approx(5.0)

    def test_rebuilt_graph_gives_fresh_gradients(self):
        # grads are recomputed per pass, never accumulated across passes
        x = ad.parameter(3.0)
        ad.mul(x, x).backward()
        first = x.grad.copy()
        ad.mul(x, x).backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_backward_releases_graph(self):
        x = ad.parameter(3.0)
        y = ad.mul(x, x)
        y.backward()
        assert y._parents == () and y._backprop is None
        with pytest.raises(ContractViolation):
            y.backward()

    def test_constant_times_zero_gives_exact_zero_grads(self):
        x = ad.parameter(np.arange(4.0))
        loss = ad.mul(ad.tsum(x), ad.constant(0.0))
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_unreached_parameter_has_no_grad(self):
        x = ad.parameter(1.0)
        z = ad.parameter(1.0)
        loss = ad.mul(x, x)
        loss.backward()
        assert z.grad is None


def check_op_grad(build, arrays, rtol=1e-6, h=1e-6):
    """Compare analytic and central-difference gradients of scalar build()."""
    params = [ad.parameter(a) for a in arrays]
    loss = build(*params)
    loss.backward()
    fd = finite_difference(lambda: build(*[ad.constant(p.value) for p in params]).item(),
                           [p.value for p in params], h=h)
    for p, g in zip(params, fd):
        got = p.grad if p.grad is not None else np.zeros_like(p.value)
        err = np.array([rel_err(a, b) for a, b in zip(got.ravel(), g.ravel())])
        assert err.max() <= rtol, f"max grad error {err.max():.3g}"


class TestElementwiseGradients:
    def test_add_mul_sub_broadcasting(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(1, 4))
        c = rng.normal(size=())
        check_op_grad(lambda x, y, z: ad.tsum(ad.mul(ad.add(x, y), ad.sub(x, z))),
                      [a, b, c], rtol=1e-5)

    def test_relu(self):
        # keep coordinates away from the kink; finite differences straddle it
        x = np.linspace(-2, 2, 9) + 0.011
        check_op_grad(lambda t: ad.tsum(ad.mul(ad.relu(t), t)), [x], rtol=1e-5)

    def test_relu_subgradient_at_zero_is_zero(self):
        x = ad.parameter(np.array([0.0]))
        ad.tsum(ad.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_sigmoid_extremes_stay_finite(self):
        x = np.array([-500.0, -5.0, 0.0, 5.0, 500.0])
        out = ad.sigmoid(ad.constant(x))
        assert np.isfinite(out.value).all()
        assert out.value[0] == pytest.approx(0.0, abs=1e-100)
        assert out.value[-1] == pytest.approx(1.0)

    def test_sigmoid_grad(self):
        x = np.random.default_rng(1).normal(size=7)
        check_op_grad(lambda t: ad.tsum(ad.sigmoid(t)), [x], rtol=1e-5)

    def test_log_grad(self):
        x = np.random.default_rng(2).uniform(0.5, 3.0, size=6)
        check_op_grad(lambda t: ad.tsum(ad.log(t)), [x], rtol=1e-5)

    def test_clip_passes_gradient_only_inside(self):
        x = ad.parameter(np.array([-2.0, 0.3, 2.0]))
        y = ad.tsum(ad.clip(x, 0.0, 1.0))
        y.backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestMaskedMean:
    def test_value_and_grad(self):
        x = ad.parameter(np.arange(6.0).reshape(2, 3))
        mask = np.array([[True, False, True], [False, False, True]])
        m = ad.masked_mean(x, mask)
        assert m.item() == pytest.approx((0 + 2 + 5) / 3)
        m.backward()
        np.testing.assert_allclose(x.grad, mask / 3)

    def test_empty_mask_is_constant_zero(self):
        x = ad.parameter(np.ones((2, 2)))
        m = ad.masked_mean(x, np.zeros((2, 2), dtype=bool))
        assert m.item() == 0.0
        assert m._parents == ()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ad.masked_mean(ad.parameter(np.ones((2, 2))), np.ones(4, dtype=bool))


class TestChannelOps:
    def test_channel_lse_matches_scoring_kernel(self):
        from hybridseg.scoring import log_sum_exp

        x = np.random.default_rng(3).normal(size=(2, 5, 3, 4))
        out = ad.channel_log_sum_exp(ad.constant(x))
        np.testing.assert_allclose(out.value[:, 0], log_sum_exp(x, axis=1), atol=1e-12)

    def test_channel_lse_grad(self):
        x = np.random.default_rng(4).normal(size=(1, 4, 2, 2))
        w = np.random.default_rng(5).normal(size=(1, 1, 2, 2))
        check_op_grad(lambda t: ad.tsum(ad.mul(ad.channel_log_sum_exp(t), ad.constant(w))),
                      [x], rtol=1e-5)

    def test_take_channel_value_and_grad(self):
        x = np.random.default_rng(6).normal(size=(2, 3, 2, 2))
        idx = np.random.default_rng(7).integers(0, 3, size=(2, 2, 2))
        t = ad.parameter(x)
        out = ad.take_channel(t, idx)
        for n in range(2):
            for i in range(2):
                for j in range(2):
                    assert out.value[n, 0, i, j] == x[n, idx[n, i, j], i, j]
        ad.tsum(out).backward()
        expect = np.zeros_like(x)
        for n in range(2):
            for i in range(2):
                for j in range(2):
                    expect[n, idx[n, i, j], i, j] += 1
        np.testing.assert_array_equal(t.grad, expect)

    def test_take_channel_rejects_out_of_range(self):
        with pytest.raises(ContractViolation):
            ad.take_channel(ad.constant(np.zeros((1, 2, 2, 2))),
                            np.full((1, 2, 2), 5))


def naive_conv2d(x, w, b):
    n, c, hh, ww = x.shape
    co, ci, kh, kw = w.shape
    p = kh // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, co, hh, ww))
    for nn in range(n):
        for o in range(co):
            for i in range(hh):
                for j in range(ww):
                    acc = b[o]
                    for cc in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, cc, u, v] * xp[nn, cc, i + u, j + v]
                    out[nn, o, i, j] = acc
    return out


class TestConv2d:
    def test_forward_matches_naive_loops(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 5, 4))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b))
        np.testing.assert_allclose(out.value, naive_conv2d(x, w, b), atol=1e-12)

    def test_1x1_is_channel_projection(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 3, 4, 4))
        w = rng.normal(size=(2, 3, 1, 1))
        b = np.zeros(2)
        out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b))
        expect = np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x)
        np.testing.assert_allclose(out.value, expect, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 2, 4, 3))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5
        b = rng.normal(size=3)
        weight = rng.normal(size=(2, 3, 4, 3))
        check_op_grad(
            lambda xx, ww, bb: ad.tsum(ad.mul(ad.conv2d(xx, ww, bb), ad.constant(weight))),
            [x, w, b], rtol=1e-5)

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractViolation):
            ad.conv2d(ad.constant(np.zeros((1, 1, 4, 4))),
                      ad.constant(np.zeros((1, 1, 2, 2))))


class TestBatchNorm:
    def test_training_forward_normalizes(self):
        rng = np.random.default_rng(11)
        x = rng.normal(loc=3.0, scale=2.0, size=(4, 3, 5, 5))
        rm, rv = np.zeros(3), np.ones(3)
        out = ad.batch_norm(ad.constant(x), ad.constant(np.ones(3)),
                            ad.constant(np.zeros(3)), rm, rv, training=True)
        np.testing.assert_allclose(out.value.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.value.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_updated_only_in_training(self):
        x = np.random.default_rng(12).normal(size=(2, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        ad.batch_norm(ad.constant(x), ad.constant(np.ones(2)), ad.constant(np.zeros(2)),
                      rm, rv, training=False)
        np.testing.assert_array_equal(rm, 0.0)
        ad.batch_norm(ad.constant(x), ad.constant(np.ones(2)), ad.constant(np.zeros(2)),
                      rm, rv, training=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, training):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(3, 2, 4, 4))
        gamma = rng.uniform(0.5, 1.5, size=2)
        beta = rng.normal(size=2)
        weight = rng.normal(size=(3, 2, 4, 4))
        rm = rng.normal(size=2)
        rv = rng.uniform(0.5, 2.0, size=2)

        def build(xx, gg, bb):
            out = ad.batch_norm(xx, gg, bb, rm.copy(), rv.copy(), training=training)
            return ad.tsum(ad.mul(out, ad.constant(weight)))

        check_op_grad(build, [x, gamma, beta], rtol=2e-5)
