import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adgmcm.errors import FitError, InvalidParams, NonFiniteGradient
from adgmcm.likelihood import exact_loglik
from adgmcm.marginals import exact_latent, reset_latent, scaled_ranks
from adgmcm.model import (DataMatrix, GmcmParams, UnconstrainedParams, anchor_first_component,
                          to_constrained)
from adgmcm.optimize import (AdamState, FitConfig, adam_step, fit_ad_gmcm, grad_exact_loglik,
                             init_params, monotonicity_check, value_and_grad_exact)
from adgmcm.simulate import random_gmcm_params, simulate_gmcm


def random_u(rng, K, p):
    return UnconstrainedParams(rng.normal(size=K), rng.normal(size=(K, p)),
                               np.eye(p) + 0.3 * rng.normal(size=(K, p, p)))


def fd_exact(u, latent, h_rel=1e-5):
    flat = u.flat()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        h = h_rel * max(1.0, abs(flat[i]))
        e = np.zeros_like(flat)
        e[i] = h
        up = exact_loglik(latent, to_constrained(u.with_flat(flat + e))).exact_ll
        dn = exact_loglik(latent, to_constrained(u.with_flat(flat - e))).exact_ll
        g[i] = (up - dn) / (2 * h)
    return g


def small_dataset(K=2, p=2, n=150, seed=0):
    ds = simulate_gmcm(random_gmcm_params(K, p, seed=seed), n, seed=seed)
    return scaled_ranks(ds.data)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"adam_beta1": 1.0},
                                    {"max_iterations": 0}, {"erf": "approx"},
                                    {"covariance": "banded"}, {"latent_gradient": "x"}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParams):
            FitConfig(**kw)

    def test_defaults(self):
        c = FitConfig()
        assert (c.learning_rate, c.max_iterations, c.convergence_gamma) == (1e-3, 750, 1e-6)
        assert c.grad_steps_per_reset == 1 and c.latent_gradient == "fixed"


class TestGradient:
    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        u = random_u(rng, 2, 2)
        latent = DataMatrix(rng.normal(size=(50, 2)), "latent")
        g = grad_exact_loglik(u, latent).flat()
        fd = fd_exact(u, latent)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)

    def test_stationary_single_component(self):
        # symmetric data under a K=1 identity fit: zero mean, unit variance, no correlation
        z = np.array([-1.5, -0.5, 0.5, 1.5])
        y = np.array(np.meshgrid(z, z)).reshape(2, -1).T
        u = UnconstrainedParams.identity(np.zeros((1, 2)))
        g = grad_exact_loglik(u, DataMatrix(y, "latent"))
        assert np.linalg.norm(g.flat()) < 1e-6

    def test_anchor_mask(self):
        rng = np.random.default_rng(1)
        u = anchor_first_component(random_u(rng, 3, 2))
        g = grad_exact_loglik(u, DataMatrix(rng.normal(size=(40, 2)), "latent"), anchor=True)
        assert np.all(g.means[0] == 0) and np.all(g.factors[0] == 0)
        assert np.any(g.means[1] != 0)

    def test_diagonal_mask(self):
        rng = np.random.default_rng(2)
        u = UnconstrainedParams.identity(rng.normal(size=(2, 3)))
        g = grad_exact_loglik(u, DataMatrix(rng.normal(size=(40, 3)), "latent"),
                              covariance="diagonal")
        off = ~np.eye(3, dtype=bool)
        assert np.all(g.factors[:, off] == 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite(self):
        u = UnconstrainedParams(np.zeros(1), np.zeros((1, 1)), np.array([[[1e-160]]]))
        with pytest.raises(NonFiniteGradient):
            value_and_grad_exact(u, DataMatrix(np.array([[1e160], [0.0]]), "latent"))

    def test_implicit_matches_total_derivative(self):
        # with the latent recomputed exactly, the implicit gradient is the true gradient
        rng = np.random.default_rng(3)
        ranks = small_dataset(n=60, seed=3)
        u = random_u(rng, 2, 2)

        def total(flat):
            p = to_constrained(u.with_flat(flat))
            return exact_loglik(exact_latent(ranks, p), p).exact_ll

        flat = u.flat()
        fd = np.array([(total(flat + 1e-5 * e) - total(flat - 1e-5 * e)) / 2e-5
                       for e in np.eye(flat.size)])
        latent = exact_latent(ranks, to_constrained(u))
        g = grad_exact_loglik(u, latent, implicit=True).flat()
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-5)
        # and the fixed-latent gradient is a different vector
        assert np.max(np.abs(grad_exact_loglik(u, latent).flat() - fd)) > 1e-2


class TestAdam:
    def test_zero_gradient(self):
        u = UnconstrainedParams.identity(np.ones((2, 2)))
        state = AdamState.zeros_like(u.arrays())
        state = AdamState(tuple(m + 1.0 for m in state.m), tuple(v + 4.0 for v in state.v), 3)
        zero = UnconstrainedParams(*(np.zeros_like(a) for a in u.arrays()))
        u2, s2 = adam_step(u, zero, state, FitConfig())
        np.testing.assert_allclose(s2.m[0], 0.9)
        np.testing.assert_allclose(s2.v[0], 0.999 * 4.0)
        # moments still push the parameters; only the update direction is inherited
        assert s2.t == 4 and u2.alpha[0] > u.alpha[0]
        u3, _ = adam_step(u, zero, None, FitConfig())
        np.testing.assert_array_equal(u3.flat(), u.flat())

    def test_first_step(self):
        cfg = FitConfig(learning_rate=0.01)
        u = UnconstrainedParams.identity(np.zeros((1, 1)))
        g = UnconstrainedParams(np.array([2.0]), np.array([[-0.5]]), np.array([[[1e-12]]]))
        u2, _ = adam_step(u, g, None, cfg)
        expect = cfg.learning_rate * g.flat() / (np.abs(g.flat()) + cfg.adam_epsilon)
        np.testing.assert_allclose(u2.flat() - u.flat(), expect, rtol=1e-12, atol=1e-15)

    def test_two_steps_scalar(self):
        cfg = FitConfig(learning_rate=0.1)
        u = UnconstrainedParams(np.array([0.0]), np.zeros((1, 1)), np.ones((1, 1, 1)))
        g1 = UnconstrainedParams(np.array([1.0]), np.zeros((1, 1)), np.zeros((1, 1, 1)))
        g2 = UnconstrainedParams(np.array([3.0]), np.zeros((1, 1)), np.zeros((1, 1, 1)))
        u1, s1 = adam_step(u, g1, None, cfg)
        u2, s2 = adam_step(u1, g2, s1, cfg)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert u2.alpha[0] == pytest.approx(0.1 * 1 / (1 + 1e-8) + step2, rel=1e-12)


class TestInit:
    def test_random_reproducible(self):
        r = small_dataset()
        a, b = init_params(r, 3, "random", 4), init_params(r, 3, "random", 4)
        np.testing.assert_array_equal(a.flat(), b.flat())
        np.testing.assert_array_equal(a.alpha, 0)
        np.testing.assert_array_equal(a.factors, np.tile(np.eye(2), (3, 1, 1)))

    def test_kmeans_blobs(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(-2, 0.2, size=(100, 2)), rng.normal(2, 0.2, size=(100, 2))])
        r = scaled_ranks(DataMatrix(x))
        u = init_params(r, 2, "kmeans", 0)
        from scipy.special import ndtri
        z = ndtri(r.values)
        centers = np.array([z[:100].mean(axis=0), z[100:].mean(axis=0)])
        order = np.argsort(u.means[:, 0])
        np.testing.assert_allclose(u.means[order], centers, atol=0.5)

    def test_kmeans_alpha_log_proportions(self):
        # two tight groups of 10 and 30 in normal-score space
        z = np.vstack([np.full((10, 2), -1.5), np.full((30, 2), 1.0)])
        z = z + np.random.default_rng(1).normal(scale=0.01, size=z.shape)
        from scipy.special import ndtr
        u = init_params(DataMatrix(ndtr(z), "rank"), 2, "kmeans", 0)
        assert abs(u.alpha[0] - u.alpha[1]) == pytest.approx(np.log(3))
        np.testing.assert_allclose(np.sort(np.exp(u.alpha)), [0.25, 0.75])

    def test_bad_k(self):
        with pytest.raises(InvalidParams):
            init_params(small_dataset(n=10), 11, "random", 0)
        with pytest.raises(InvalidParams):
            init_params(small_dataset(n=10), 2, "spectral", 0)


class TestMonotonicityCheck:
    def test_unchanged(self):
        y = np.random.default_rng(0).normal(size=(10, 2))
        p = GmcmParams([0.5, 0.5], [[0, 0], [1, 1]], [np.eye(2)] * 2)
        assert monotonicity_check(y, y, p) == {"condition_1": 0, "condition_2": 0,
                                               "condition_3": 0}

    def test_scalar_example(self):
        p = GmcmParams([1.0], [[0.0]], [[[1.0]]])
        out = monotonicity_check(np.array([[1.0]]), np.array([[2.0]]), p)
        assert out["condition_2"] == 1
        assert out["condition_1"] == 0

    @given(st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_conditions_imply_no_decrease(self, seed):
        rng = np.random.default_rng(seed)
        K, p = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        params = GmcmParams(rng.dirichlet(np.ones(K)), rng.normal(size=(K, p)),
                            [np.eye(p) * rng.uniform(0.5, 2) for _ in range(K)])
        y_old = rng.normal(size=(5, p))
        mask = rng.uniform(size=y_old.shape) < 0.5
        y_new = y_old + mask * rng.normal(scale=0.05, size=y_old.shape)
        counts = monotonicity_check(y_old, y_new, params)
        if sum(counts.values()) == 0:
            ll_old = exact_loglik(DataMatrix(y_old, "latent"), params).exact_ll
            ll_new = exact_loglik(DataMatrix(y_new, "latent"), params).exact_ll
            assert ll_new >= ll_old - 1e-9


class TestFit:
    def test_deterministic(self):
        r = small_dataset(n=120, seed=5)
        cfg = FitConfig(max_iterations=30, learning_rate=0.01)
        a, b = fit_ad_gmcm(r, 2, "kmeans", cfg), fit_ad_gmcm(r, 2, "kmeans", cfg)
        np.testing.assert_array_equal(a.exact_ll, b.exact_ll)
        np.testing.assert_array_equal(a.final_params.covariances, b.final_params.covariances)

    def test_report_shape(self):
        r = small_dataset(n=120, seed=6)
        rep = fit_ad_gmcm(r, 2, "kmeans", FitConfig(max_iterations=25))
        assert rep.iterations_used == len(rep.exact_ll) == len(rep.pseudo_ll) == 25
        assert not rep.converged
        # the reported final state is the one the last trace entry was evaluated at
        latent = reset_latent(r, rep.final_params)
        assert exact_loglik(latent, rep.final_params).exact_ll == pytest.approx(
            rep.final_exact_ll, abs=1e-9)
        d = rep.to_dict()
        assert len(d["trace"]["exact_ll"]) == 25

    def test_converged_flag(self):
        r = small_dataset(n=100, seed=7)
        rep = fit_ad_gmcm(r, 1, "random", FitConfig(covariance="diagonal"))
        assert rep.converged
        assert abs(rep.exact_ll[-1] - rep.exact_ll[-2]) < 1e-6
        assert abs(rep.final_exact_ll) < 1e-8

    def test_anchor_frozen(self):
        r = small_dataset(n=120, seed=8)
        rep = fit_ad_gmcm(r, 2, "kmeans", FitConfig(max_iterations=10, anchor=True,
                                                     learning_rate=0.05))
        for params in rep.param_trace:
            np.testing.assert_array_equal(params.means[0], 0.0)
            np.testing.assert_array_equal(params.covariances[0], np.eye(2))

    def test_likelihood_increases(self):
        r = small_dataset(n=200, seed=9)
        rep = fit_ad_gmcm(r, 2, "kmeans", FitConfig(max_iterations=200, learning_rate=0.01))
        assert rep.exact_ll.max() > rep.exact_ll[0] + 1.0

    def test_fit_error_carries_iteration(self):
        r = small_dataset(n=50, seed=10)
        bad = UnconstrainedParams(np.zeros(2), np.zeros((2, 2)), np.zeros((2, 2, 2)))
        with pytest.raises(FitError) as info:
            fit_ad_gmcm(r, 2, bad, FitConfig(max_iterations=5))
        assert info.value.iteration == 0 and info.value.partial is None
