import numpy as np
import pytest
from scipy import stats

from heavysgd.errors import NonConvergenceError, ParameterError
from heavysgd.models import (
    LINEAR,
    LOGISTIC,
    GlmOracle,
    GlmSpec,
    LinearModelSpec,
    OlsOracle,
    find_glm_optimum,
    glm_noise_step,
    hessian_at,
    ols_noise_step,
)
from heavysgd.ppd import classify_cones, diag_dominance_margin
from heavysgd.sgd_core import StepSchedule, sgd_run
from heavysgd.stable import NoiseLaw, RngStream

CHOL = np.array([[1.0, 0.0], [0.5, 0.8]])
NONE = NoiseLaw("none")


def draws(oracle, n, seed=0):
    rng = RngStream(seed)
    return oracle.draw((rng.generator(0), rng.generator(1)), n)


class TestLinearModelSpec:
    def test_optimum_is_beta0(self):
        spec = LinearModelSpec([1.0, -1.0], CHOL)
        np.testing.assert_array_equal(spec.x_star, [1.0, -1.0])
        np.testing.assert_allclose(spec.second_moment, CHOL @ CHOL.T)

    def test_singular_covariance(self):
        with pytest.raises(ParameterError):
            LinearModelSpec([1.0, 0.0], [[1.0, 0.0], [1.0, 0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            LinearModelSpec([1.0, 0.0, 2.0], np.eye(2))


class TestOlsNoiseStep:
    def test_optimum_no_noise(self):
        spec = LinearModelSpec([0.3, 2.0], CHOL, NONE)
        g, zeta, m = ols_noise_step(spec, spec.beta0, RngStream(1))
        np.testing.assert_allclose(g, zeta + m, atol=1e-14)
        np.testing.assert_allclose(spec.grad(spec.beta0), 0.0)

    def test_degenerate_model(self):
        spec = LinearModelSpec([0.0, 0.0], np.eye(2), NONE)
        for s in range(20):
            _, zeta, _ = ols_noise_step(spec, [1.0, 2.0], RngStream(s))
            assert np.all(zeta == 0)

    def test_decomposition_identity(self):
        spec = LinearModelSpec([1.0, -1.0], CHOL, NoiseLaw("pareto", 1.5))
        oracle = OlsOracle(spec)
        d = draws(oracle, 1000)
        xs = RngStream(2).generator().normal(size=(1000, 2)) * 3
        g, zeta, m = oracle.decompose(xs, d)
        grad = np.array([spec.grad(x) for x in xs])
        resid = g - grad - zeta - m
        assert np.max(np.abs(resid) / (1 + np.abs(g))) < 1e-12

    def test_kernel_matches_decomposition(self):
        spec = LinearModelSpec([1.0, -1.0], CHOL, NoiseLaw("pareto", 1.5))
        oracle = OlsOracle(spec)
        d = draws(oracle, 50)
        x, xbar = np.array([0.2, 0.1]), np.zeros(2)
        gam = StepSchedule().gammas(1, 50)
        ref = x.copy()
        for k in range(50):
            g, _, _ = oracle.decompose(ref, tuple(a[k:k + 1] for a in d))
            ref = ref - gam[k] * g[0]
        assert oracle.advance(x, xbar, 1, gam, d) == -1
        np.testing.assert_allclose(x, ref, rtol=1e-12)

    def test_m_bound(self):
        spec = LinearModelSpec([1.0, -1.0], CHOL, NoiseLaw("pareto", 1.5))
        oracle = OlsOracle(spec)
        d = draws(oracle, 20000, seed=3)
        sig = spec.second_moment
        ez2 = np.trace(sig)
        for x in ([0.0, 0.0], [3.0, -1.0], [10.0, 10.0]):
            _, _, m = oracle.decompose(np.array(x), d)
            ratio = np.mean(np.sum(m * m, axis=1)) / (1 + np.dot(x, x))
            assert ratio <= 3 * np.linalg.norm(sig, 2) * ez2
            assert ratio <= spec.K

    def test_zeta_does_not_depend_on_path(self):
        spec = LinearModelSpec([1.0, -1.0], np.eye(2), NoiseLaw("pareto", 1.5))
        oracle = OlsOracle(spec)
        d = draws(oracle, 4000, seed=4)
        _, z_frozen, _ = oracle.decompose(np.zeros(2), d)
        path = RngStream(5).generator().normal(size=(4000, 2)) * 5
        _, z_moving, _ = oracle.decompose(path, draws(oracle, 4000, seed=6))
        for i in range(2):
            assert stats.ks_2samp(z_frozen[:, i], z_moving[:, i]).pvalue > 0.01

    def test_hessian(self):
        spec = LinearModelSpec([1.0, -1.0], np.eye(2))
        h = hessian_at(spec, [0.0, 0.0])
        np.testing.assert_array_equal(h.matrix.entries, np.eye(2))
        np.testing.assert_array_equal(hessian_at(spec, [5.0, 1.0]).matrix.entries, h.matrix.entries)
        assert h.stderr is None


class TestCgf:
    def test_convex(self):
        u = np.linspace(-60, 60, 10001)
        for c in (LINEAR, LOGISTIC):
            assert np.all(c.d2psi(u) >= 0)

    def test_logistic_growth(self):
        u = np.linspace(-50, 50, 10001)
        assert np.all(np.abs(LOGISTIC.dpsi(u)) <= 1.0 * (1 + np.abs(u)))

    def test_derivatives(self):
        u = np.linspace(-5, 5, 101)
        h = 1e-6
        for c in (LINEAR, LOGISTIC):
            np.testing.assert_allclose((c.psi(u + h) - c.psi(u - h)) / (2 * h), c.dpsi(u), atol=1e-8)
            np.testing.assert_allclose((c.dpsi(u + h) - c.dpsi(u - h)) / (2 * h), c.d2psi(u), atol=1e-8)


class TestGlm:
    def test_linear_cgf_reduces_to_ols(self):
        lam = 0.3
        eps = NoiseLaw("pareto", 1.5)
        glm = GlmSpec("linear", lam, [1.0, -1.0], CHOL, eps)
        ols = LinearModelSpec([1.0, -1.0], CHOL, eps)
        x = np.array([0.4, 0.9])
        for s in range(10):
            g1, z1, m1 = glm_noise_step(glm, x, RngStream(s))
            g2, z2, m2 = ols_noise_step(ols, x, RngStream(s))
            np.testing.assert_allclose(g1, g2 + lam * x, rtol=1e-13)
            np.testing.assert_allclose(z1, z2, rtol=1e-13)
            np.testing.assert_allclose(m1, m2, rtol=1e-13, atol=1e-15)

    def test_linear_optimum_closed_form(self):
        lam = 0.5
        spec = GlmSpec("linear", lam, [1.0, -2.0], CHOL, x_star_tol=1e-11)
        sig = CHOL @ CHOL.T
        expect = np.linalg.solve(sig + lam * np.eye(2), sig @ np.array([1.0, -2.0]))
        np.testing.assert_allclose(spec.x_star, expect, atol=1e-10)

    def test_symmetric_design_optimum_zero(self):
        spec = GlmSpec("logistic", 0.1, [0.0, 0.0], np.eye(2), panel_size=20000)
        np.testing.assert_allclose(spec.x_star, 0.0, atol=1e-12)

    def test_optimum_out_of_sample(self):
        spec = GlmSpec("logistic", 0.1, [1.0, -1.0], np.eye(2), panel_size=50000, panel_seed=1)
        fresh = GlmSpec("logistic", 0.1, [1.0, -1.0], np.eye(2), panel_size=100000, panel_seed=2)
        assert spec.optimum.grad_norm < spec.optimum.tol
        # on an independent panel twice the size the residual is pure Monte-Carlo error
        assert np.linalg.norm(fresh.grad(spec.x_star)) < 5e-3

    def test_nonconvergence(self):
        spec = GlmSpec("logistic", 0.1, [1.0, -1.0], np.eye(2), panel_size=5000)
        with pytest.raises(NonConvergenceError) as exc:
            find_glm_optimum(spec, tol=1e-14, max_iter=3)
        assert exc.value.iterations == 3 and exc.value.achieved > 1e-14

    def test_decomposition_identity(self):
        spec = GlmSpec("logistic", 0.2, [1.0, -1.0], CHOL, NoiseLaw("pareto", 1.5), panel_size=20000)
        oracle = GlmOracle(spec)
        d = draws(oracle, 1000, seed=7)
        for x in (np.zeros(2), np.array([0.5, -2.0])):
            g, zeta, m = oracle.decompose(x, d)
            resid = g - spec.grad(x) - zeta - m
            assert np.max(np.abs(resid)) < 1e-12

    def test_kernel_matches_decomposition(self):
        spec = GlmSpec("logistic", 0.2, [1.0, -1.0], CHOL, NoiseLaw("pareto", 1.5), panel_size=20000)
        oracle = GlmOracle(spec)
        d = draws(oracle, 50, seed=8)
        x, xbar = np.array([0.2, 0.1]), np.zeros(2)
        gam = StepSchedule().gammas(1, 50)
        ref = x.copy()
        for k in range(50):
            g, _, _ = oracle.decompose(ref, tuple(a[k:k + 1] for a in d))
            ref = ref - gam[k] * g[0]
        oracle.advance(x, xbar, 1, gam, d)
        np.testing.assert_allclose(x, ref, rtol=1e-12)

    def test_hessian_logistic_at_zero(self):
        spec = GlmSpec("logistic", 0.1, [1.0, -1.0], np.eye(2), panel_size=10**6, panel_seed=3)
        h = hessian_at(spec, np.zeros(2))
        target = 0.25 * np.eye(2) + 0.1 * np.eye(2)
        assert np.all(np.abs(h.matrix.entries - target) <= 3 * h.stderr + 1e-12)

    def test_hessian_linear_cgf(self):
        spec = GlmSpec("linear", 0.3, [1.0, -1.0], CHOL)
        np.testing.assert_allclose(hessian_at(spec, [1.0, 1.0]).matrix.entries,
                                   CHOL @ CHOL.T + 0.3 * np.eye(2))

    def test_large_ridge_is_diagonally_dominant(self):
        spec = GlmSpec("logistic", 2.0, [1.0, -1.0], CHOL, panel_size=50000)
        h = hessian_at(spec, spec.x_star).matrix
        assert diag_dominance_margin(h) > 0
        assert classify_cones(h).row(1.0).member_pd

    def test_sgd_approaches_optimum(self):
        spec = GlmSpec("logistic", 0.1, [1.0, -1.0], np.eye(2), NoiseLaw("gaussian", 0.5), panel_size=50000)
        tr = sgd_run(GlmOracle(spec), None, np.zeros(2), StepSchedule(1.0, 0.7), 200000,
                     rng=RngStream(9), x_star=spec.x_star)
        assert tr.errors_bar[-1] < 0.1
        assert tr.audit.ok

    def test_invalid(self):
        with pytest.raises(ParameterError):
            GlmSpec("logistic", 0.0, [1.0], np.eye(1))
        with pytest.raises(ParameterError):
            GlmSpec("poisson", 0.1, [1.0], np.eye(1))
