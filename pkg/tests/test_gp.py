import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.oracles import central_difference, dense_posterior, relative_error
from wgpnn.errors import NumericalError
from wgpnn.gp import (
    KernelParams,
    RegularizerConfig,
    gp_posterior,
    gram_matrix,
    predict_scores,
    regularizer,
    softmax_cross_entropy,
    stable_cholesky,
    uce_loss_approx,
    uce_loss_mc,
    weighted_kernel,
)

# E[softplus(sqrt(2) x)], x ~ N(0, 1), by adaptive quadrature (scipy.integrate.quad)
UCE_UNIT_VARIANCE = 0.9026619077200264
# same with variance 0.25 per class
UCE_QUARTER_VARIANCE = 0.7522629793107749


def draw_points(rng, n):
    return rng.uniform(0, 5, n), rng.uniform(-3, 3, n), rng.uniform(0.05, 0.95, n)


class TestKernel:
    def test_unit_at_zero_distance(self):
        assert float(weighted_kernel(0.3, 1.0, 0.3, 1.0)) == 1.0

    def test_value(self):
        k = weighted_kernel(1.0, 0.8, 2.0, 0.6, KernelParams(gamma=1.0))
        assert float(k) == pytest.approx(0.6 * math.exp(-1), abs=1e-12)
        assert float(k) == pytest.approx(0.220728, abs=1e-6)

    @given(st.floats(0, 5), st.floats(0.01, 1), st.floats(0, 5), st.floats(0.01, 1), st.floats(0.1, 3))
    def test_symmetric_and_bounded(self, t1, w1, t2, w2, gamma):
        p = KernelParams(gamma=gamma)
        a = float(weighted_kernel(t1, w1, t2, w2, p))
        assert a == float(weighted_kernel(t2, w2, t1, w1, p))
        assert a <= min(w1, w2)

    def test_tie_gradient_goes_to_first_argument(self):
        w1 = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
        w2 = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
        weighted_kernel(0.0, w1, 0.0, w2).backward()
        assert w1.grad.item() == 1.0 and w2.grad.item() == 0.0

    def test_gram_psd(self, rng):
        for _ in range(100):
            n = rng.integers(1, 9)
            tau, _, w = draw_points(rng, n)
            K = gram_matrix(tau, w).numpy()
            assert np.linalg.eigvalsh(K).min() >= -1e-8

    def test_params_validation(self):
        with pytest.raises(ValueError):
            KernelParams(gamma=0.0)
        with pytest.raises(ValueError):
            KernelParams(query_weight=1.5)
        with pytest.raises(ValueError):
            KernelParams(jitter=1e-2)


class TestPosterior:
    def test_single_point(self):
        post = gp_posterior([1.0], [2.0], [0.5], [1.0], KernelParams(jitter=0.0))
        assert post.mean.item() == pytest.approx(2.0, abs=1e-12)
        assert post.var.item() == pytest.approx(0.5, abs=1e-12)

    def test_prior(self):
        post = gp_posterior(np.zeros(0), np.zeros(0), np.zeros(0), [0.0, 3.0, 100.0])
        assert post.mean.tolist() == [0.0, 0.0, 0.0]
        assert post.var.tolist() == [1.0, 1.0, 1.0]

    def test_far_query_reverts_to_prior(self, rng):
        gamma = 1.3
        for _ in range(20):
            tau, y, w = draw_points(rng, rng.integers(1, 9))
            q = tau.max() + 6 / gamma + rng.uniform(0, 3)
            post = gp_posterior(tau, y, w, [q], KernelParams(gamma=gamma))
            dm, dv = dense_posterior(tau, y, w, [q], gamma)
            assert abs(post.mean.item()) < 1e-6 and abs(post.var.item() - 1) < 1e-6
            assert post.mean.item() == pytest.approx(dm[0], abs=1e-10)

    def test_matches_dense_inverse(self, rng):
        for _ in range(100):
            n = rng.integers(1, 9)
            tau, y, w = draw_points(rng, n)
            queries = rng.uniform(-1, 6, 5)
            gamma = rng.uniform(0.5, 2.0)
            post = gp_posterior(tau, y, w, queries, KernelParams(gamma=gamma))
            mean, var = dense_posterior(tau, y, w, queries, gamma)
            np.testing.assert_allclose(post.mean.numpy(), mean, atol=1e-8)
            np.testing.assert_allclose(post.var.numpy(), var, atol=1e-8)

    def test_batched_equals_individual(self, rng):
        tau, y, w = (rng.uniform(0.1, 0.9, (3, 4, 2)) for _ in range(3))
        q = rng.uniform(0, 2, (3, 4, 5))
        post = gp_posterior(tau, y, w, q)
        for i in range(3):
            for j in range(4):
                single = gp_posterior(tau[i, j], y[i, j], w[i, j], q[i, j])
                np.testing.assert_allclose(post.mean[i, j].numpy(), single.mean.numpy(), atol=1e-13)

    def test_noise_free_interpolation(self, rng):
        for _ in range(20):
            n = rng.integers(1, 6)
            tau = np.sort(rng.choice(np.linspace(0, 5, 11), n, replace=False))
            y = rng.uniform(0, 3, n)
            # exact interpolation needs the query weight to equal the point weights
            w = float(rng.uniform(0.2, 1.0))
            post = gp_posterior(tau, y, np.full(n, w), tau, KernelParams(jitter=0.0, query_weight=w))
            np.testing.assert_allclose(post.mean.numpy(), y, atol=1e-8)
            np.testing.assert_allclose(post.var.numpy(), 0.0, atol=1e-8)
            # mixed weights: agree with the direct solve
            wm = rng.uniform(0.2, 0.9, n)
            post = gp_posterior(tau, y, wm, tau, KernelParams(jitter=0.0))
            mean, var = dense_posterior(tau, y, wm, tau, jitter=0.0)
            np.testing.assert_allclose(post.mean.numpy(), mean, atol=1e-8)
            np.testing.assert_allclose(post.var.numpy(), var, atol=1e-8)

    def test_variance_bounds(self, rng):
        tau, y, w = draw_points(rng, 8)
        post = gp_posterior(tau, y, w, np.linspace(-2, 8, 101), KernelParams(query_weight=0.7))
        assert post.var.min() >= 0 and post.var.max() <= 0.7

    def test_jitter_escalation_and_failure(self):
        # duplicate inputs make K singular without jitter
        post = gp_posterior([1.0, 1.0], [1.0, 1.0], [0.5, 0.5], [1.0], KernelParams(jitter=0.0))
        assert post.mean.item() == pytest.approx(1.0, abs=1e-5)
        with pytest.raises(NumericalError, match="condition"):
            stable_cholesky(torch.tensor([[1.0, 2.0], [2.0, 1.0]], dtype=torch.float64))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_locality(self, seed):
        rng = np.random.default_rng(seed)
        gamma = rng.uniform(0.3, 3)
        tau, y, w = draw_points(rng, rng.integers(1, 9))
        q = tau.max() + 5 / gamma + rng.uniform(0, 2)
        assert gp_posterior(tau, y, w, [q], KernelParams(gamma=gamma)).var.item() >= 0.99

    def test_gradients_match_finite_differences(self, rng):
        for _ in range(10):
            n = rng.integers(2, 6)
            tau, y, w = draw_points(rng, n)
            w = np.sort(w)
            if np.min(np.diff(w)) <= 1e-3:
                continue
            q = rng.uniform(0, 5, 3)

            def f(tau, y, w, gamma):
                post = gp_posterior(tau, y, w, q, KernelParams(gamma=gamma))
                return post.mean.sum() + (post.var**2).sum()

            args = [torch.tensor(a, requires_grad=True) for a in (tau, y, w, np.float64(1.2))]
            f(*args).backward()
            for i, a in enumerate(args):
                def g(x, i=i):
                    vals = [b.detach().clone() for b in args]
                    vals[i] = torch.tensor(x)
                    return f(*vals).item()

                num = central_difference(g, a.detach().numpy())
                assert relative_error(a.grad.numpy(), num) <= 1e-4


class TestUCE:
    def test_mc_degenerate(self):
        assert uce_loss_mc([0, 0], [0, 0], 0, samples=1000)[0] == pytest.approx(math.log(2), abs=1e-12)
        assert uce_loss_mc([1, 0], [0, 0], 0, samples=1000)[0] == pytest.approx(0.313262, abs=1e-6)
        assert uce_loss_mc([1, 0], [0, 0], 0, samples=10)[1] < 1e-15

    def test_mc_reference(self):
        value, se = uce_loss_mc([0, 0], [1, 1], 0, samples=10**6, seed=0)
        assert se < 1e-3
        assert abs(value - UCE_UNIT_VARIANCE) < 3 * se

    def test_mc_deterministic(self):
        assert uce_loss_mc([0.3, -1], [0.2, 0.1], 1, 5000, seed=7) == uce_loss_mc([0.3, -1], [0.2, 0.1], 1, 5000, seed=7)

    def test_zero_variance_reduces_to_cross_entropy(self, rng):
        for _ in range(20):
            mu = rng.uniform(-3, 3, 6)
            c = int(rng.integers(6))
            expected = -mu[c] + np.log(np.exp(mu).sum())
            assert float(uce_loss_approx(mu, np.zeros(6), c)) == pytest.approx(expected, abs=1e-12)
            assert float(softmax_cross_entropy(mu, c)) == pytest.approx(expected, abs=1e-12)

    def test_quarter_variance_against_monte_carlo(self):
        value, se = uce_loss_mc([0, 0], [0.25, 0.25], 0, samples=10**6, seed=0)
        approx = float(uce_loss_approx([0.0, 0.0], [0.25, 0.25], 0))
        assert abs(approx - value) <= max(3 * se, 0.05 * abs(value))
        assert abs(value - UCE_QUARTER_VARIANCE) < 3 * se

    @pytest.mark.xfail(strict=True, reason="second-order expansion is biased by ~0.003 here, about 9 MC standard errors")
    def test_quarter_variance_within_three_standard_errors(self):
        value, se = uce_loss_mc([0, 0], [0.25, 0.25], 0, samples=10**6, seed=0)
        assert abs(float(uce_loss_approx([0.0, 0.0], [0.25, 0.25], 0)) - value) <= 3 * se

    def test_symmetric_inputs(self):
        mu, var = np.full(4, 0.7), np.full(4, 0.2)
        losses = [float(uce_loss_approx(mu, var, c)) for c in range(4)]
        assert max(losses) - min(losses) < 1e-14

    def test_printed_variant_rejected(self):
        # the exp(var - 1) reading fails both the zero-variance reduction and the MC oracle
        mu = np.array([1.0, 0.0])
        assert float(uce_loss_approx(mu, np.zeros(2), 0, correction="printed")) != pytest.approx(0.313262, abs=1e-3)
        value, se = uce_loss_mc([0, 0], [0.25, 0.25], 0, samples=10**6, seed=0)
        printed = float(uce_loss_approx([0.0, 0.0], [0.25, 0.25], 0, correction="printed"))
        assert abs(printed - value) > max(3 * se, 0.05 * abs(value))

    @pytest.mark.parametrize("correction", ["taylor", "lognormal"])
    def test_stable_for_large_logits(self, correction):
        loss = uce_loss_approx([800.0, 0.0, -800.0], [0.1, 0.2, 0.0], 0, correction=correction)
        assert torch.isfinite(loss)

    def test_lognormal_form(self):
        mu, var = np.array([0.4, -1.0, 2.0]), np.array([0.1, 0.2, 0.05])
        es = np.exp(mu + var / 2)
        vs = np.expm1(var) * np.exp(2 * mu + var)
        expected = -mu[1] + np.log(es.sum()) - vs.sum() / (2 * es.sum() ** 2)
        assert float(uce_loss_approx(mu, var, 1, correction="lognormal")) == pytest.approx(expected, abs=1e-12)
        assert float(uce_loss_approx(mu, np.zeros(3), 1, correction="lognormal")) == pytest.approx(float(softmax_cross_entropy(mu, 1)), abs=1e-12)

    def test_dominant_logit(self):
        # one confident class: the expansion around E[S] misses most of the variance penalty
        mu, var = [1.13, -2.53], [0.203, 0.072]
        value, se = uce_loss_mc(mu, var, 0, samples=10**6, seed=0)
        tol = max(3 * se, 0.05 * value)
        assert abs(float(uce_loss_approx(mu, var, 0)) - value) <= tol
        assert abs(float(uce_loss_approx(mu, var, 0, correction="lognormal")) - value) > tol

    def test_unknown_correction(self):
        with pytest.raises(ValueError):
            uce_loss_approx([0.0, 0.0], [0.1, 0.1], 0, correction="bogus")

    @pytest.mark.parametrize("correction", ["taylor", "lognormal"])
    def test_gradient(self, rng, correction):
        mu, var = rng.uniform(-3, 3, 5), rng.uniform(0, 0.25, 5)
        m, v = torch.tensor(mu, requires_grad=True), torch.tensor(var, requires_grad=True)
        uce_loss_approx(m, v, 2, correction=correction).backward()
        num_m = central_difference(lambda x: float(uce_loss_approx(x, var, 2, correction=correction)), mu)
        num_v = central_difference(lambda x: float(uce_loss_approx(mu, x, 2, correction=correction)), var)
        assert relative_error(m.grad, num_m) <= 1e-4
        assert relative_error(v.grad, num_v) <= 1e-4


class TestRegularizer:
    def test_prior_matches_targets(self):
        cfg = RegularizerConfig(alpha=1.0, beta=1.0, nu=1.0, tau_max=3.0)
        assert float(regularizer(np.zeros(0), np.zeros(0), np.zeros(0), KernelParams(), cfg)) == 0.0

    def test_zero_coefficients(self, rng):
        tau, y, w = draw_points(rng, 3)
        cfg = RegularizerConfig(alpha=0.0, beta=0.0)
        assert float(regularizer(tau, y, w, KernelParams(), cfg)) == 0.0

    def test_quadrature_convergence(self):
        args = ([0.5], [1.0], [0.9], KernelParams())
        coarse = float(regularizer(*args, RegularizerConfig(1e-3, 1e-3, 1.0, 2.0, 16)))
        fine = float(regularizer(*args, RegularizerConfig(1e-3, 1e-3, 1.0, 2.0, 4096)))
        assert coarse > 0
        assert abs(coarse - fine) <= 0.01 * fine

    def test_non_negative(self, rng):
        for _ in range(20):
            tau, y, w = draw_points(rng, 4)
            assert float(regularizer(tau, y, w, KernelParams(), RegularizerConfig(tau_max=4.0))) >= 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RegularizerConfig(quad_points=1)
        with pytest.raises(ValueError):
            RegularizerConfig(tau_max=0.0)


class TestPredictScores:
    def test_prior(self):
        empty = (np.zeros(0),) * 3
        out = predict_scores([empty] * 4, 1.0)
        assert out.mean.tolist() == [0.0] * 4
        assert out.var.tolist() == [1.0] * 4
        np.testing.assert_allclose(out.probs.numpy(), 0.25)

    def test_evidence_ranks_first(self):
        empty = (np.zeros(0),) * 3
        out = predict_scores([empty, ([0.7], [3.0], [0.99]), empty], 0.7)
        assert int(out.scores.argmax()) == 1
        assert out.mean[1].item() == pytest.approx(3.0, abs=1e-6)
        assert out.var[1].item() < 0.02

    def test_shift_preserves_argmax(self, rng):
        tau, w = rng.uniform(0, 2, 3), rng.uniform(0.2, 0.9, 3)
        ys = rng.uniform(0, 2, (5, 3))
        pts = (np.tile(tau, (5, 1)), ys, np.tile(w, (5, 1)))
        base = predict_scores(pts, 0.8)
        shifted = predict_scores((pts[0], ys + 1.5, pts[2]), 0.8)
        assert int(base.scores.argmax()) == int(shifted.scores.argmax())

    def test_batched_path(self, rng):
        tau, y, w = (rng.uniform(0.1, 0.9, (2, 3, 2)) for _ in range(3))
        out = predict_scores((tau, y, w), torch.tensor([0.3, 0.6], dtype=torch.float64))
        assert out.mean.shape == (2, 3)
        ragged = predict_scores([(tau[1, c], y[1, c], w[1, c]) for c in range(3)], 0.6)
        np.testing.assert_allclose(out.mean[1].numpy(), ragged.mean.numpy(), atol=1e-14)
