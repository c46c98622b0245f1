"""Monte-Carlo rate estimates, stable-limit diagnostics and numerical lemma oracles."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
from scipy import stats
from scipy.stats import qmc

from . import ppd as _ppd
from ._io import SCHEMA_VERSION, write_atomic
from .errors import (
    DegenerateSampleError,
    EstimationError,
    InsufficientDataError,
    LogDomainError,
    ParameterError,
)
from .stable import (
    RngStream,
    StableParams,
    as_generator,
    hill_tail_index,
    ks_critical_value,
    sample_stable,
    self_similarity_test,
)

BOOTSTRAP_RESAMPLES = 200
DEFAULT_BURN_IN = 100


# ---------------------------------------------------------------------------
# Moment curves and rate fits


@dataclass
class MomentCurve:
    """Monte-Carlo estimates of E|x_t - x*|^p at each checkpoint.

    When ``heavy`` is set the 2p-th moment of the error is not finite, so
    ``std_errors`` is NaN and ``band_low``/``band_high`` hold the
    interquartile range of bootstrap means instead of mean +/- one SE.
    """

    p: float
    times: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    censored: int = 0
    heavy: bool = False
    band_low: Optional[np.ndarray] = None
    band_high: Optional[np.ndarray] = None
    n_replications: int = 0
    quantity: str = "iterate"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.std_errors = np.asarray(self.std_errors, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ParameterError("checkpoint times must be strictly increasing")
        if np.any(self.values < 0):
            raise ParameterError("moment estimates must be non-negative")
        if self.band_low is None:
            se = np.nan_to_num(self.std_errors)
            self.band_low = np.maximum(self.values - se, 0.0)
            self.band_high = self.values + se

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "p": self.p,
            "quantity": self.quantity,
            "times": self.times,
            "values": self.values,
            "std_errors": self.std_errors,
            "band_low": self.band_low,
            "band_high": self.band_high,
            "heavy": self.heavy,
            "censored": self.censored,
            "n_replications": self.n_replications,
        }


def _trace_list(traces):
    censored = getattr(traces, "n_censored", 0)
    return list(traces), censored


def moment_curve(traces, p: float, x_star=None, tail_index: Optional[float] = None,
                 quantity: str = "iterate", bootstrap: int = BOOTSTRAP_RESAMPLES,
                 rng=None) -> MomentCurve:
    """Pointwise sample means of |x_t - x*|^p (or of |x̄_t - x*|^p) across replications.

    ``traces`` is a list of SgdTrace or a Replications object (whose
    censoring count is carried over).  ``tail_index`` is the tail index of
    the error; if omitted it is estimated by Hill at the last checkpoint.
    """
    if not 0 < p < 2:
        raise ParameterError(f"moment order must lie in (0, 2), got {p}")
    if quantity not in ("iterate", "average"):
        raise ParameterError("quantity must be 'iterate' or 'average'")
    runs, censored = _trace_list(traces)
    if not runs:
        raise EstimationError("no uncensored replications")
    times = runs[0].checkpoints
    for tr in runs[1:]:
        if not np.array_equal(tr.checkpoints, times):
            raise ParameterError("all traces must share the checkpoint plan")
    xs = runs[0].x_star if x_star is None else np.asarray(x_star, dtype=float)
    if xs is None:
        raise ParameterError("x_star is required")
    paths = np.stack([tr.iterates if quantity == "iterate" else tr.pr_averages for tr in runs])
    err = np.linalg.norm(paths - xs, axis=2) ** p  # (R, K)
    R = err.shape[0]
    values = err.mean(axis=0)

    if tail_index is None:
        try:
            tail_index = hill_tail_index(np.linalg.norm(paths[:, -1] - xs, axis=1))
        except InsufficientDataError:
            tail_index = math.inf
    heavy = 2.0 * p >= tail_index

    if heavy:
        std_errors = np.full(values.shape, np.nan)
        gen = as_generator(RngStream(0, 1) if rng is None else rng)
        idx = gen.integers(0, R, size=(bootstrap, R))
        boot = err[idx].mean(axis=1)
        band_low, band_high = np.percentile(boot, [25, 75], axis=0)
    else:
        std_errors = err.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.zeros_like(values)
        band_low = band_high = None
    return MomentCurve(p, times, values, std_errors, censored, heavy, band_low, band_high, R, quantity)


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    burn_in: int
    theory_slope: Optional[float]
    abs_gap: Optional[float]
    n_points: int

    def predict(self, t):
        return np.exp(self.intercept) * np.asarray(t, dtype=float) ** self.slope

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, **self.__dict__}


def fit_rate(curve: MomentCurve, burn_in: int = DEFAULT_BURN_IN,
             theory_slope: Optional[float] = None) -> RateFit:
    """Least-squares line through (log t, log value) for t >= burn_in."""
    keep = curve.times >= burn_in
    t, v = curve.times[keep].astype(float), curve.values[keep]
    if t.size < 5:
        raise InsufficientDataError(f"rate fit needs >= 5 points after burn-in, got {t.size}")
    if np.any(v <= 0):
        raise LogDomainError("moment curve has non-positive values after burn-in")
    lx, ly = np.log(t), np.log(v)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    # residuals at rounding level count as a perfect fit, including flat curves
    rounding = ly.size * (1e-12 * (1.0 + float(np.max(np.abs(ly))))) ** 2
    r2 = 1.0 if ss_res <= rounding else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    gap = None if theory_slope is None else abs(slope - theory_slope)
    return RateFit(float(slope), float(intercept), r2, int(burn_in), theory_slope, gap, int(t.size))


def rate_exponent(rho: float, q: float, alpha: float) -> float:
    """Predicted log-log slope -rho q (alpha-1)/alpha of E|x_t - x*|^q."""
    return -rho * q * (alpha - 1.0) / alpha


def curve_csv(curve: MomentCurve, fit: Optional[RateFit] = None) -> str:
    """Plot-ready CSV; the theory line shares the fit's value at the middle of the fitted range."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "value", "stderr_low", "stderr_high", "fit_value", "theory_value"])
    fit_v = theory_v = [None] * curve.times.size
    if fit is not None:
        fit_v = fit.predict(curve.times)
        if fit.theory_slope is not None:
            kept = curve.times[curve.times >= fit.burn_in].astype(float)
            mid = math.exp(0.5 * (math.log(kept[0]) + math.log(kept[-1])))
            anchor = float(fit.predict(mid))
            theory_v = anchor * (curve.times / mid) ** fit.theory_slope
    for row in zip(curve.times, curve.values, curve.band_low, curve.band_high, fit_v, theory_v):
        w.writerow([int(row[0])] + ["" if x is None else f"{float(x):.17g}" for x in row[1:]])
    return buf.getvalue()


def write_curve_csv(path, curve: MomentCurve, fit: Optional[RateFit] = None):
    return write_atomic(path, curve_csv(curve, fit))


# ---------------------------------------------------------------------------
# Deterministic recursion


@numba.njit(cache=True)
def _fabian_kernel(A, B, alpha, beta, b0, T):
    b = np.empty(T)
    b[0] = b0
    for t in range(1, T):
        s = float(t) ** (-alpha)
        b[t] = b[t - 1] * (1.0 - A * s) + B * s * float(t) ** (-beta)
    return b


def fabian_recursion(A: float, B: float, alpha: float, beta: float, b0: float, T: int) -> np.ndarray:
    """b_1, ..., b_T of b_{t+1} = b_t (1 - A t^-alpha) + B t^(-alpha-beta), b_1 = b0."""
    if not A > 0:
        raise ParameterError("A must be > 0")
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    if T < 10:
        raise ParameterError("T must be >= 10")
    return _fabian_kernel(float(A), float(B), float(alpha), float(beta), float(b0), int(T))


def relative_oscillation(b: np.ndarray, beta: float, t_lo: int, t_hi: int) -> float:
    """(max - min) / |mean| of t^beta b_t over t_lo <= t <= t_hi (1-based t)."""
    t = np.arange(t_lo, t_hi + 1, dtype=float)
    s = t**beta * b[t_lo - 1:t_hi]
    return float((s.max() - s.min()) / abs(s.mean()))


FABIAN_GRID = tuple(
    (a, a, al, be) for a in (0.5, 1.0, 2.0) for al in (0.3, 0.5, 0.7) for be in (0.25, 0.5, 1.0)
)


@dataclass
class FabianRow:
    A: float
    B: float
    alpha: float
    beta: float
    oscillation: float
    limit: float
    holds: bool


def fabian_grid(T: int = 10**6, tol: float = 0.02, grid=FABIAN_GRID, b0: float = 1.0) -> list:
    """Relative oscillation of t^beta b_t over the last decade up to T for each grid point."""
    rows = []
    for A, B, al, be in grid:
        b = fabian_recursion(A, B, al, be, b0, T)
        osc = relative_oscillation(b, be, T // 10, T)
        rows.append(FabianRow(A, B, al, be, osc, B / A, osc < tol))
    return rows


# ---------------------------------------------------------------------------
# Inequality oracles


@dataclass
class InequalityCheck:
    lhs: float
    rhs: float
    holds: bool

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.holds))


def check_vecexpandp(x, y, p: float) -> InequalityCheck:
    """||x+y||_p^p <= ||x||_p^p + 4||y||_p^p + p y^T x^<p-1> for p in [1, 2]."""
    if not 1.0 <= p <= 2.0:
        raise ParameterError(f"p must lie in [1, 2], got {p}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lhs = float(np.sum(np.abs(x + y) ** p))
    rhs = float(np.sum(np.abs(x) ** p) + 4.0 * np.sum(np.abs(y) ** p)
                + p * np.dot(y, _ppd.signed_power(x, p - 1.0)))
    return InequalityCheck(lhs, rhs, lhs <= rhs + 1e-12 * (1.0 + abs(rhs)))


@dataclass
class SweepResult:
    trials: int
    violations: int
    worst_excess: float
    worst_case: Optional[tuple] = None

    @property
    def holds(self) -> bool:
        return self.violations == 0


def vecexpandp_sweep(trials: int = 10**5, rng=None, max_dim: int = 6) -> SweepResult:
    """Random (x, y, p) triples; coordinates are Cauchy or Gaussian, p uniform on [1, 2]
    with the endpoints and mixed scales over-represented."""
    gen = as_generator(RngStream(0, 2) if rng is None else rng)
    violations, worst, worst_case = 0, -math.inf, None
    for _ in range(trials):
        n = int(gen.integers(1, max_dim + 1))
        heavy = gen.random() < 0.5
        draw = gen.standard_cauchy if heavy else gen.standard_normal
        x, y = draw(n), draw(n) * 10.0 ** gen.uniform(-3, 3)
        u = gen.random()
        p = 1.0 if u < 0.05 else 2.0 if u < 0.1 else float(gen.uniform(1.0, 2.0))
        c = check_vecexpandp(x, y, p)
        excess = (c.lhs - c.rhs) / (1.0 + abs(c.rhs))
        if excess > worst:
            worst, worst_case = excess, (x, y, p)
        violations += not c.holds
    return SweepResult(trials, violations, float(worst), worst_case)


@dataclass
class PExpandResult:
    ratio: float
    worst_step: int
    lhs: float
    bound: float
    rel_se: float
    holds: bool

    def to_dict(self):
        return dict(self.__dict__)


def check_p_expand(increment_sampler: Callable, p: float, t: int, trials: int, n: int,
                   rng=None) -> PExpandResult:
    """Monte-Carlo check of E|S_s|^(1+p) <= 2^(1-p) n^(1-(1+p)/2) sum_i E|X_i|^(1+p), s <= t.

    ``increment_sampler(gen, size)`` returns i.i.d. mean-zero scalars; each
    increment X_i is an n-vector of them.  The worst ratio over s = 1..t is
    reported; it holds when lhs <= bound (1 + 3 relative SE).
    """
    if not 0 <= p <= 1:
        raise ParameterError(f"p must lie in [0, 1], got {p}")
    if t < 1 or trials < 2 or n < 1:
        raise ParameterError("need t >= 1, trials >= 2, n >= 1")
    gen = as_generator(RngStream(0, 3) if rng is None else rng)
    X = np.asarray(increment_sampler(gen, (trials, t, n)), dtype=float)
    S = np.cumsum(X, axis=1)
    lhs_samples = np.linalg.norm(S, axis=2) ** (1 + p)  # (trials, t)
    inc_samples = np.linalg.norm(X, axis=2).ravel() ** (1 + p)
    const = 2.0 ** (1 - p) * n ** (1 - (1 + p) / 2)
    m_inc = inc_samples.mean()
    se_inc = inc_samples.std(ddof=1) / math.sqrt(inc_samples.size)
    steps = np.arange(1, t + 1)
    lhs = lhs_samples.mean(axis=0)
    se_lhs = lhs_samples.std(axis=0, ddof=1) / math.sqrt(trials)
    bound = const * steps * m_inc
    ratios = lhs / bound
    k = int(np.argmax(ratios))
    rel = math.sqrt((se_lhs[k] / lhs[k]) ** 2 + (se_inc / m_inc) ** 2) if lhs[k] > 0 else 0.0
    return PExpandResult(float(ratios[k]), k + 1, float(lhs[k]), float(bound[k]), rel,
                         bool(lhs[k] <= bound[k] * (1.0 + 3.0 * rel)))


# ---------------------------------------------------------------------------
# Step-size sums


def _gammas(gamma0, rho, T):
    return gamma0 * np.arange(1, T + 1, dtype=float) ** (-rho)


def _check_rho_kappa(rho, kappa):
    if not 0 < rho < kappa <= 1:
        raise ParameterError(f"need 0 < rho < kappa <= 1, got rho={rho}, kappa={kappa}")


@numba.njit(cache=True)
def _rho_exp_kernel(gam, lam, kappa):
    T = gam.size
    s = np.zeros(T)
    E = 0.0
    for t in range(1, T):
        # E_{t+1} = exp(-lam gamma_t) (E_t + 1)
        E = math.exp(-lam * gam[t - 1]) * (E + 1.0)
        s[t] = (t + 1.0) ** (-kappa) * E
    return s


def check_rho_exp(rho: float, kappa: float, lam: float, gamma0: float = 1.0, T: int = 10**5) -> np.ndarray:
    """s_t = t^-kappa sum_{j<t} exp(-lam sum_{i=j}^{t-1} gamma_i) for t = 1..T (s_1 = 0)."""
    _check_rho_kappa(rho, kappa)
    if not lam > 0:
        raise ParameterError("lambda must be > 0")
    return _rho_exp_kernel(_gammas(gamma0, rho, T), float(lam), float(kappa))


@numba.njit(cache=True)
def _sym_spectral_norm(M):
    n = M.shape[0]
    if n == 1:
        return abs(M[0, 0])
    if n == 2:
        a, b, d = M[0, 0], M[0, 1], M[1, 1]
        mid = 0.5 * (a + d)
        rad = math.sqrt(0.25 * (a - d) ** 2 + b * b)
        return max(abs(mid + rad), abs(mid - rad))
    if n == 3:
        # trigonometric eigenvalues of a symmetric 3x3
        p1 = M[0, 1] ** 2 + M[0, 2] ** 2 + M[1, 2] ** 2
        q = (M[0, 0] + M[1, 1] + M[2, 2]) / 3.0
        if p1 == 0.0:
            return max(abs(M[0, 0]), abs(M[1, 1]), abs(M[2, 2]))
        p2 = (M[0, 0] - q) ** 2 + (M[1, 1] - q) ** 2 + (M[2, 2] - q) ** 2 + 2.0 * p1
        pp = math.sqrt(p2 / 6.0)
        B = (M - q * np.eye(3)) / pp
        r = np.linalg.det(B) / 2.0
        r = min(1.0, max(-1.0, r))
        phi = math.acos(r) / 3.0
        e1 = q + 2.0 * pp * math.cos(phi)
        e3 = q + 2.0 * pp * math.cos(phi + 2.0 * math.pi / 3.0)
        e2 = 3.0 * q - e1 - e3
        return max(abs(e1), abs(e2), abs(e3))
    return np.max(np.abs(np.linalg.eigvalsh(M)))


@numba.njit(cache=True)
def _phi_sum_kernel(A, Ainv, gam, kappa):
    T = gam.size
    n = A.shape[0]
    X = np.zeros((T, n, n))
    S = np.zeros((T, n, n))
    u = np.zeros(T)
    tmp = np.empty((n, n))
    for t in range(2, T + 1):
        j_new = t - 2  # 0-based index of j = t-1
        for a in range(n):
            X[j_new, a, a] = 1.0
        g = gam[t - 2]  # gamma_{t-1}
        total = 0.0
        for j in range(j_new + 1):
            # S_j += X_j^{t-1};  X_j^t = X_j^{t-1} - gamma_{t-1} A X_j^{t-1}
            Xj = X[j]
            S[j] += Xj
            for a in range(n):
                for b in range(n):
                    acc = 0.0
                    for c in range(n):
                        acc += A[a, c] * Xj[c, b]
                    tmp[a, b] = acc
            for a in range(n):
                for b in range(n):
                    Xj[a, b] -= g * tmp[a, b]
            total += _sym_spectral_norm(Ainv - gam[j] * S[j])
        u[t - 1] = float(t) ** (-kappa) * total
    return u


@numba.njit(cache=True)
def _phi_sum_scalar_kernel(lams, gam, kappa):
    T = gam.size
    m = lams.size
    X = np.zeros((T, m))
    S = np.zeros((T, m))
    u = np.zeros(T)
    for t in range(2, T + 1):
        j_new = t - 2
        X[j_new, :] = 1.0
        g = gam[t - 2]
        total = 0.0
        for j in range(j_new + 1):
            best = 0.0
            for k in range(m):
                S[j, k] += X[j, k]
                X[j, k] -= g * lams[k] * X[j, k]
                v = abs(1.0 / lams[k] - gam[j] * S[j, k])
                if v > best:
                    best = v
            total += best
        u[t - 1] = float(t) ** (-kappa) * total
    return u


def _check_phi_args(A, rho, kappa, T):
    _check_rho_kappa(rho, kappa)
    mat = np.asarray(A, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12):
        raise ParameterError("A must be a symmetric square matrix")
    if np.linalg.eigvalsh(mat)[0] <= 0:
        raise ParameterError("A must be positive definite")
    if not 2 <= T <= 5000:
        raise ParameterError("T must lie in [2, 5000]")
    return mat


def check_phi_sum(A, rho: float, kappa: float, gamma0: float = 1.0, T: int = 5000) -> np.ndarray:
    """u_t = t^-kappa sum_{j<t} ||A^-1 - X̄_j^t||_2 for t = 1..T, by the matrix recursions.

    X_j^j = I, X_j^{i+1} = X_j^i - gamma_i A X_j^i and
    X̄_j^t = gamma_j sum_{i=j}^{t-1} X_j^i.  Cost is O(T^2 n^3).
    """
    mat = _check_phi_args(A, rho, kappa, T)
    return _phi_sum_kernel(mat, np.linalg.inv(mat), _gammas(gamma0, rho, T), float(kappa))


def check_phi_sum_scalar(A, rho: float, kappa: float, gamma0: float = 1.0, T: int = 5000) -> np.ndarray:
    """Same sequence through the eigenvalues of A: every X_j^i is a polynomial in A,
    so ||Phi_j^t|| = max_k |1/lam_k - gamma_j sum_i prod (1 - gamma lam_k)|."""
    mat = _check_phi_args(A, rho, kappa, T)
    return _phi_sum_scalar_kernel(np.linalg.eigvalsh(mat), _gammas(gamma0, rho, T), float(kappa))


# ---------------------------------------------------------------------------
# Stable-limit diagnostics


def default_directions(n: int, extra: int = 4) -> np.ndarray:
    """The n coordinate axes followed by ``extra`` fixed quasi-random unit vectors."""
    pts = qmc.Halton(d=n, scramble=False).random(extra + 1)[1:]
    w = stats.norm.ppf(pts)
    if n == 1:
        w = np.where(w >= 0, 1.0, -1.0)
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return np.vstack([np.eye(n), w])


@dataclass
class DirectionVerdict:
    direction: np.ndarray
    status: str  # "pass", "fail" or "degenerate"
    hill: Optional[float] = None
    hill_ok: Optional[bool] = None
    self_similarity: Optional[object] = None
    ks_statistic: Optional[float] = None
    ks_threshold: Optional[float] = None
    ks_ok: Optional[bool] = None
    normality_pvalue: Optional[float] = None
    normality_ok: Optional[bool] = None
    location: Optional[float] = None
    scale: Optional[float] = None

    @property
    def self_similar(self) -> Optional[bool]:
        return None if self.self_similarity is None else self.self_similarity.passed

    def to_dict(self):
        d = dict(self.__dict__)
        d["self_similarity"] = None if self.self_similarity is None else self.self_similarity.to_dict()
        return d


@dataclass
class StableLimitReport:
    alpha: float
    t_final: int
    n_samples: int
    censored: int
    level: float
    hill_window: tuple
    verdicts: list = field(default_factory=list)

    @property
    def status(self) -> str:
        if all(v.status == "degenerate" for v in self.verdicts):
            return "degenerate"
        return "pass" if all(v.status == "pass" for v in self.verdicts) else "fail"

    @property
    def n_self_similar(self) -> int:
        return sum(bool(v.self_similar) for v in self.verdicts)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "alpha": self.alpha,
            "t_final": self.t_final,
            "n_samples": self.n_samples,
            "censored": self.censored,
            "level": self.level,
            "hill_window": list(self.hill_window),
            "status": self.status,
            "n_self_similar": self.n_self_similar,
            "verdicts": [v.to_dict() for v in self.verdicts],
        }


def _standard_stable_reference(alpha, size, seed):
    gen = RngStream(seed, 4).generator()
    z = sample_stable(StableParams(alpha), gen, size)
    q25, q75 = np.percentile(z, [25, 75])
    return z, q75 - q25


def stable_limit_diagnostic(traces, alpha: float, x_star=None, directions=None,
                            t_final: Optional[int] = None, level: float = 0.01,
                            hill_window: Optional[tuple] = None, min_samples: int = 500,
                            reference_size: int = 20000, seed: int = 0) -> StableLimitReport:
    """Project t^(1-1/alpha)(x̄_t - x*) on each direction and compare it with S_alpha.

    Per direction: Hill tail index (checked against ``hill_window``, default
    alpha +/- 0.2), the self-similarity test at ``alpha``, and a two-sample KS
    against a symmetric stable sample matched by median and interquartile
    range.  For alpha = 2 the last check is a KS test against the
    quantile-matched Gaussian.
    """
    if not 1.0 < alpha <= 2.0:
        raise ParameterError(f"alpha must lie in (1, 2], got {alpha}")
    runs, censored = _trace_list(traces)
    if len(runs) < min_samples:
        raise EstimationError(f"stable-limit diagnostic needs >= {min_samples} replications, got {len(runs)}")
    times = runs[0].checkpoints
    t_final = int(times[-1]) if t_final is None else int(t_final)
    hits = np.nonzero(times == t_final)[0]
    if hits.size == 0:
        raise ParameterError(f"t_final={t_final} is not a checkpoint")
    k = int(hits[0])
    xs = runs[0].x_star if x_star is None else np.asarray(x_star, dtype=float)
    if xs is None:
        raise ParameterError("x_star is required")
    scaled = t_final ** (1.0 - 1.0 / alpha) * (np.stack([tr.pr_averages[k] for tr in runs]) - xs)
    n = scaled.shape[1]
    dirs = default_directions(n) if directions is None else np.atleast_2d(np.asarray(directions, dtype=float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    if hill_window is None:
        hill_window = (alpha - 0.2, alpha + 0.2)
    m = scaled.shape[0] - scaled.shape[0] % 2  # self-similarity needs an even count
    if alpha < 2:
        ref, ref_iqr = _standard_stable_reference(alpha, reference_size, seed)

    report = StableLimitReport(alpha, t_final, scaled.shape[0], censored, level, tuple(hill_window))
    for d in dirs:
        s = scaled @ d
        q25, med, q75 = np.percentile(s, [25, 50, 75])
        iqr = q75 - q25
        if not np.all(np.isfinite(s)) or iqr <= 0 or np.ptp(s) <= 1e-300:
            report.verdicts.append(DirectionVerdict(d, "degenerate"))
            continue
        v = DirectionVerdict(d, "fail", location=float(med))
        try:
            v.hill = hill_tail_index(s - med)
            v.hill_ok = bool(hill_window[0] <= v.hill <= hill_window[1])
        except DegenerateSampleError:
            v.hill_ok = False
        v.self_similarity = self_similarity_test(s[:m], alpha, level)
        if alpha < 2:
            v.scale = float(iqr / ref_iqr)
            fitted = med + v.scale * ref
            res = stats.ks_2samp(s, fitted)
            v.ks_statistic = float(res.statistic)
            v.ks_threshold = ks_critical_value(s.size, fitted.size, level)
            v.ks_ok = bool(v.ks_statistic < v.ks_threshold)
            ok = v.hill_ok and v.self_similar and v.ks_ok
        else:
            v.scale = float(iqr / (2.0 * stats.norm.ppf(0.75)))
            res = stats.kstest(s, "norm", args=(med, v.scale))
            v.ks_statistic = float(res.statistic)
            v.normality_pvalue = float(res.pvalue)
            v.normality_ok = bool(res.pvalue >= level)
            ok = v.self_similar and v.normality_ok
        v.status = "pass" if ok else "fail"
        report.verdicts.append(v)
    return report


# ---------------------------------------------------------------------------
# Theory conditions


def gclt_exponent_window(alpha: float, rho: float) -> tuple:
    """(lo, hi) with lo = max((alpha + alpha rho)/(1 + alpha rho), alpha rho), hi = alpha."""
    return max((alpha + alpha * rho) / (1.0 + alpha * rho), alpha * rho), alpha


def gclt_condition_holds(alpha: float, rho: float) -> bool:
    """Whether some moment order p satisfies the window for the averaged-iterate limit."""
    lo, hi = gclt_exponent_window(alpha, rho)
    return lo <= hi
