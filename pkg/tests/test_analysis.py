import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import heavysgd.ppd as ppd
from heavysgd._io import dumps
from heavysgd.analysis import (
    MomentCurve,
    _sym_spectral_norm,
    check_p_expand,
    check_phi_sum,
    check_phi_sum_scalar,
    check_rho_exp,
    check_vecexpandp,
    curve_csv,
    default_directions,
    fabian_recursion,
    fit_rate,
    moment_curve,
    rate_exponent,
    relative_oscillation,
    stable_limit_diagnostic,
    vecexpandp_sweep,
)
from heavysgd.errors import EstimationError, InsufficientDataError, LogDomainError, ParameterError
from heavysgd.sgd_core import SgdTrace
from heavysgd.stable import NoiseLaw, RngStream, StableParams, sample_stable

TIMES = np.unique(np.geomspace(1, 10**6, 60).astype(np.int64))


def fake_trace(iterates, averages=None, times=TIMES, x_star=(0.0,)):
    it = np.asarray(iterates, dtype=float).reshape(len(times), -1)
    av = it if averages is None else np.asarray(averages, dtype=float).reshape(len(times), -1)
    return SgdTrace(np.asarray(times), it, av, np.zeros(it.shape[1]), np.asarray(x_star, dtype=float))


def curve_from(values, times=TIMES):
    return MomentCurve(1.0, times, values, np.zeros(len(times)))


def gammas(g0, rho, T):
    return g0 * np.arange(1, T + 1, dtype=float) ** -rho


class TestMomentCurve:
    def test_all_at_optimum(self):
        traces = [fake_trace(np.zeros(TIMES.size)) for _ in range(5)]
        c = moment_curve(traces, 1.2)
        assert np.all(c.values == 0) and np.all(c.std_errors == 0)
        assert not c.heavy

    def test_mean_of_two(self):
        traces = [fake_trace(np.full(TIMES.size, 1.0)), fake_trace(np.full(TIMES.size, -3.0))]
        c = moment_curve(traces, 1.0, tail_index=math.inf)
        np.testing.assert_allclose(c.values, 2.0)

    def test_deterministic_power_law(self):
        traces = [fake_trace(TIMES ** -0.35) for _ in range(3)]
        c = moment_curve(traces, 1.0)
        np.testing.assert_allclose(c.values, TIMES ** -0.35, rtol=1e-14)

    def test_identical_traces_zero_se(self):
        path = RngStream(0).generator().normal(size=TIMES.size)
        c = moment_curve([fake_trace(path)] * 4, 0.8, tail_index=5.0)
        np.testing.assert_array_equal(c.std_errors, 0.0)

    def test_heavy_flag_uses_bootstrap(self):
        gen = RngStream(1).generator()
        traces = [fake_trace(NoiseLaw("pareto", 1.5).draw(gen, TIMES.size)) for _ in range(100)]
        c = moment_curve(traces, 1.2, tail_index=1.5)
        assert c.heavy and np.all(np.isnan(c.std_errors))
        assert np.all(c.band_low <= c.band_high)

    def test_censored_count_and_errors(self):
        class Reps(list):
            n_censored = 3

        c = moment_curve(Reps([fake_trace(np.ones(TIMES.size))]), 1.0)
        assert c.censored == 3
        with pytest.raises(EstimationError):
            moment_curve([], 1.0)
        with pytest.raises(ParameterError):
            moment_curve([fake_trace(np.ones(TIMES.size))], 2.5)

    def test_average_quantity(self):
        tr = fake_trace(np.ones(TIMES.size), averages=np.full(TIMES.size, 2.0))
        assert moment_curve([tr], 1.0, quantity="average").values[0] == 2.0


class TestFitRate:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2, 1), st.floats(1e-3, 1e3), st.sampled_from([1, 10, 100, 1000]))
    def test_exact_power_law(self, slope, c, burn):
        fit = fit_rate(curve_from(c * TIMES.astype(float) ** slope), burn, theory_slope=slope)
        assert fit.slope == pytest.approx(slope, abs=1e-9)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        assert fit.abs_gap < 1e-9

    def test_flat(self):
        fit = fit_rate(curve_from(np.full(TIMES.size, 2.0)), theory_slope=-0.28)
        assert fit.slope == pytest.approx(0.0, abs=1e-12)
        assert fit.abs_gap == pytest.approx(0.28)
        assert 0 <= fit.r_squared <= 1

    def test_r_squared_range(self):
        v = np.exp(RngStream(2).generator().normal(size=TIMES.size))
        assert 0 <= fit_rate(curve_from(v)).r_squared <= 1

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            fit_rate(curve_from(np.ones(TIMES.size)), burn_in=10**6)
        v = np.ones(TIMES.size)
        v[-1] = 0
        with pytest.raises(LogDomainError):
            fit_rate(curve_from(v))

    def test_fabian_curve_slope(self):
        b = fabian_recursion(1.0, 1.0, 0.5, 0.5, 1.0, 10**6)
        times = np.unique(np.geomspace(1000, 10**6, 40).astype(np.int64))
        fit = fit_rate(MomentCurve(1.0, times, b[times - 1], np.zeros(times.size)), burn_in=1000)
        assert -0.55 <= fit.slope <= -0.45

    def test_theory_exponent(self):
        assert rate_exponent(0.7, 1.2, 1.5) == pytest.approx(-0.28)


class TestFabian:
    def test_unforced_contraction(self):
        b = fabian_recursion(1.0, 0.0, 0.5, 0.5, 1.0, 10**4)
        assert np.all(np.diff(b[1:]) <= 0)  # t^-0.5 < 1 from t = 2 on
        assert b[-1] < 1e-50

    def test_zero(self):
        assert np.all(fabian_recursion(1.5, 0.0, 0.3, 1.0, 0.0, 100) == 0)

    def test_hand_steps(self):
        b = fabian_recursion(0.5, 2.0, 0.5, 1.0, 3.0, 10)
        b2 = 3.0 * (1 - 0.5) + 2.0
        b3 = b2 * (1 - 0.5 * 2**-0.5) + 2.0 * 2**-1.5
        np.testing.assert_allclose(b[:3], [3.0, b2, b3])

    def test_converges_last_decade(self):
        b = fabian_recursion(1.0, 1.0, 0.5, 0.5, 1.0, 10**6)
        s = np.sqrt(np.arange(1, 10**6 + 1)) * b
        assert abs(s[-1] / s[10**5 - 1] - 1) < 0.01
        assert relative_oscillation(b, 0.5, 10**5, 10**6) < 0.01
        assert s[-1] == pytest.approx(1.0, rel=0.01)  # limit B/A

    def test_domain(self):
        with pytest.raises(ParameterError):
            fabian_recursion(1.0, 1.0, 1.0, 0.5, 1.0, 100)
        with pytest.raises(ParameterError):
            fabian_recursion(0.0, 1.0, 0.5, 0.5, 1.0, 100)
        with pytest.raises(ParameterError):
            fabian_recursion(1.0, 1.0, 0.5, 0.5, 1.0, 5)


vec = arrays(float, 4, elements=st.floats(-1e4, 1e4, allow_nan=False))


class TestVecExpand:
    def test_zero_increment(self):
        x = np.array([1.5, -2.0, 0.3])
        lhs, rhs, ok = check_vecexpandp(x, np.zeros(3), 1.4)
        assert lhs == pytest.approx(rhs, rel=1e-15) and ok

    @given(vec, vec)
    def test_p2_is_square_expansion(self, x, y):
        c = check_vecexpandp(x, y, 2.0)
        expanded = x @ x + 2 * y @ x + y @ y
        assert c.lhs == pytest.approx(expanded, rel=1e-9, abs=1e-6)
        assert c.holds

    @given(vec, vec, st.floats(1.0, 2.0))
    def test_property(self, x, y, p):
        assert check_vecexpandp(x, y, p).holds

    def test_sweep(self):
        res = vecexpandp_sweep(20000, RngStream(3))
        assert res.violations == 0

    def test_mutation_canary(self, monkeypatch):
        original = ppd.signed_power
        monkeypatch.setattr(ppd, "signed_power", lambda v, q: -original(v, q))
        assert vecexpandp_sweep(2000, RngStream(4)).violations > 0

    def test_domain(self):
        with pytest.raises(ParameterError):
            check_vecexpandp([1.0], [1.0], 2.5)


def rademacher(gen, size):
    return gen.choice([-1.0, 1.0], size=size)


class TestPExpand:
    def test_single_increment(self):
        r = check_p_expand(NoiseLaw("gaussian").draw, 0.5, 1, 5000, 1, RngStream(5))
        assert r.ratio == pytest.approx(2**-0.5, rel=1e-12)
        assert r.holds

    def test_rademacher_equality(self):
        r = check_p_expand(rademacher, 1.0, 40, 20000, 1, RngStream(6))
        assert r.ratio == pytest.approx(1.0, abs=4 * r.rel_se)
        assert r.holds

    def test_pareto_n3(self):
        r = check_p_expand(NoiseLaw("pareto", 1.8).draw, 0.5, 100, 10**4, 3, RngStream(7))
        assert r.holds

    def test_domain(self):
        with pytest.raises(ParameterError):
            check_p_expand(rademacher, 1.5, 10, 100, 1)


def rho_exp_brute(rho, kappa, lam, g0, T):
    g = gammas(g0, rho, T)
    out = np.zeros(T)
    for t in range(2, T + 1):
        tot = sum(math.exp(-lam * g[j - 1:t - 1].sum()) for j in range(1, t))
        out[t - 1] = t ** -kappa * tot
    return out


class TestRhoExp:
    def test_against_double_sum(self):
        np.testing.assert_allclose(check_rho_exp(0.6, 0.8, 0.7, 1.3, 300), rho_exp_brute(0.6, 0.8, 0.7, 1.3, 300),
                                   rtol=1e-12, atol=1e-15)

    def test_polyak_case(self):
        s = check_rho_exp(0.5, 0.9, 1.0, 1.0, 10**5)
        assert s[-1] < s[10**4 - 1] and s[-1] < 0.05
        assert check_rho_exp(0.5, 1.0, 1.0, 1.0, 10**5)[-1] < 0.05

    def test_large_lambda(self):
        # each summand is at most exp(-lam (t-j) gamma_{t-1}): a geometric bound
        T, lam, kappa = 10**5, 1e3, 0.9
        s = check_rho_exp(0.5, kappa, lam, 1.0, T)
        g_last = (T - 1) ** -0.5
        assert 0 < s[-1] <= T ** -kappa / (1 - math.exp(-lam * g_last))
        assert np.all((s >= 0) & (s < 1))  # early terms underflow to zero

    @pytest.mark.parametrize("rho,kappa", [(0.3, 0.5), (0.5, 0.7), (0.7, 0.9), (0.4, 1.0)])
    def test_eventually_decreasing(self, rho, kappa):
        s = check_rho_exp(rho, kappa, 1.0, 1.0, 10**5)
        assert np.all(np.diff(s[10**4:]) < 0)

    def test_domain(self):
        with pytest.raises(ParameterError):
            check_rho_exp(0.9, 0.5, 1.0)
        with pytest.raises(ParameterError):
            check_rho_exp(0.5, 0.9, 0.0)


def phi_brute(A, rho, kappa, g0, T):
    """Direct evaluation of every X_j^i with numpy products, O(T^3)."""
    g = gammas(g0, rho, T)
    n = A.shape[0]
    Ainv = np.linalg.inv(A)
    out = np.zeros(T)
    for t in range(2, T + 1):
        tot = 0.0
        for j in range(1, t):
            X = np.eye(n)
            S = np.zeros((n, n))
            for i in range(j, t):
                S += X
                X = X - g[i - 1] * A @ X
            tot += np.linalg.norm(Ainv - g[j - 1] * S, 2)
        out[t - 1] = t ** -kappa * tot
    return out


class TestPhiSum:
    def test_two_steps(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        u = check_phi_sum(A, 0.5, 0.9, 0.7, 2)
        expect = 2**-0.9 * np.linalg.norm(np.linalg.inv(A) - 0.7 * np.eye(2), 2)
        assert u[1] == pytest.approx(expect, rel=1e-13)
        assert u[0] == 0

    @pytest.mark.parametrize("A", [np.diag([1.0, 2.0]), np.array([[2.0, 0.5, 0.1], [0.5, 1.5, 0.3], [0.1, 0.3, 1.0]]),
                                   np.diag([1.0, 2.0, 3.0, 4.0]) + 0.1])
    def test_against_direct_products(self, A):
        np.testing.assert_allclose(check_phi_sum(A, 0.5, 0.9, 0.4, 40), phi_brute(A, 0.5, 0.9, 0.4, 40),
                                   rtol=1e-11, atol=1e-14)

    def test_scalar_identity_case(self):
        T = 500
        g = gammas(1.0, 0.5, T)
        u = check_phi_sum(np.eye(1), 0.5, 0.9, 1.0, T)
        # closed form: prod (1 - gamma_k) products, accumulated per j
        t = T
        tot = 0.0
        for j in range(1, t):
            prods = np.concatenate([[1.0], np.cumprod(1 - g[j - 1:t - 2])])
            tot += abs(1 - g[j - 1] * prods.sum())
        assert u[-1] == pytest.approx(t ** -0.9 * tot, rel=1e-10)

    def test_scalar_specialization(self):
        A = np.array([[1.5, 0.4], [0.4, 0.8]])
        np.testing.assert_allclose(check_phi_sum(A, 0.5, 0.9, 1.0, 1500),
                                   check_phi_sum_scalar(A, 0.5, 0.9, 1.0, 1500), rtol=0, atol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (3, 3), elements=st.floats(-10, 10)))
    def test_small_norm_formulas(self, m):
        s = (m + m.T) / 2
        for k in (1, 2, 3):
            sub = np.ascontiguousarray(s[:k, :k])
            assert _sym_spectral_norm(sub) == pytest.approx(np.linalg.norm(sub, 2), rel=1e-9, abs=1e-9)

    def test_domain(self):
        with pytest.raises(ParameterError):
            check_phi_sum(np.array([[1.0, 2.0], [0.0, 1.0]]), 0.5, 0.9)
        with pytest.raises(ParameterError):
            check_phi_sum(-np.eye(2), 0.5, 0.9)
        with pytest.raises(ParameterError):
            check_phi_sum(np.eye(2), 0.5, 0.9, T=6000)


def limit_traces(samples, alpha, t=10**4):
    """Traces whose scaled averaged error at t equals the given samples."""
    scale = t ** (1 - 1 / alpha)
    out = []
    for row in np.atleast_2d(samples):
        av = (row / scale)[None, :]
        out.append(SgdTrace(np.array([t]), av.copy(), av, np.zeros(row.size), np.zeros(row.size)))
    return out


class TestStableDiagnostic:
    def test_gaussian_regime(self):
        x = RngStream(8).generator().normal(size=(2000, 2))
        rep = stable_limit_diagnostic(limit_traces(x, 2.0), 2.0)
        assert all(v.normality_ok for v in rep.verdicts)

    def test_exact_stable(self):
        gen = RngStream(9).generator()
        x = sample_stable(StableParams(1.5), gen, (2000, 2))
        rep = stable_limit_diagnostic(limit_traces(x, 1.5), 1.5)
        axes = rep.verdicts[:2]
        assert all(v.ks_ok for v in axes)
        assert rep.n_self_similar >= 4

    def test_degenerate(self):
        rep = stable_limit_diagnostic(limit_traces(np.ones((600, 2)), 1.5), 1.5)
        assert rep.status == "degenerate"
        assert all(v.status == "degenerate" for v in rep.verdicts)

    def test_too_few(self):
        with pytest.raises(EstimationError):
            stable_limit_diagnostic(limit_traces(np.ones((100, 2)), 1.5), 1.5)

    def test_bad_checkpoint(self):
        x = RngStream(10).generator().normal(size=(600, 1))
        with pytest.raises(ParameterError):
            stable_limit_diagnostic(limit_traces(x, 2.0), 2.0, t_final=5)

    def test_directions(self):
        d = default_directions(3)
        assert d.shape == (7, 3)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
        np.testing.assert_array_equal(d[:3], np.eye(3))
        np.testing.assert_array_equal(default_directions(3), d)

    def test_json(self):
        x = RngStream(11).generator().normal(size=(600, 2))
        rep = stable_limit_diagnostic(limit_traces(x, 2.0), 2.0)
        data = json.loads(dumps(rep))
        assert data["schema_version"] == 1 and len(data["verdicts"]) == 6


class TestEmitters:
    def test_csv_columns(self):
        c = curve_from(3.0 * TIMES.astype(float) ** -0.3)
        fit = fit_rate(c, theory_slope=-0.28)
        rows = list(csv.reader(io.StringIO(curve_csv(c, fit))))
        assert rows[0] == ["t", "value", "stderr_low", "stderr_high", "fit_value", "theory_value"]
        assert len(rows) == TIMES.size + 1
        t, value, _, _, fitv, _ = map(float, rows[-1])
        assert fitv == pytest.approx(value, rel=1e-9)

    def test_json_has_no_nan(self):
        c = MomentCurve(1.2, [1, 2], [1.0, 0.5], [np.nan, np.nan], heavy=True,
                        band_low=np.array([0.9, 0.4]), band_high=np.array([1.1, 0.6]))
        data = json.loads(dumps(c))
        assert data["std_errors"] == [None, None]
