"""Streaming gradient oracles for least squares and ridge-regularized GLMs.

Covariates are Gaussian, z = L g with g ~ N(0, I), so E[zz^T] = L L^T is
exact.  Responses carry heavy-tailed noise eps with E[eps | z] = 0:

    OLS:  y = z^T beta0 + eps
    GLM:  y = psi'(z^T beta0) + eps

Each oracle splits its stochastic gradient as g = grad f(x) + zeta + m with
zeta = E[zy] - z y (i.i.d., heavy-tailed) and m the state-dependent part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np
from scipy.special import expit

from .errors import EstimationError, NonConvergenceError, ParameterError
from .ppd import SymMatrix
from .stable import NoiseLaw, RngStream, as_generator


def _second_moment_bounds(sigma: np.ndarray):
    """(||Sigma||_2, tr Sigma, ||E[|z|^2 z z^T]||_2) for z ~ N(0, Sigma)."""
    op = float(np.linalg.norm(sigma, 2))
    tr = float(np.trace(sigma))
    fourth = sigma * tr + 2.0 * sigma @ sigma
    return op, tr, float(np.linalg.norm(fourth, 2))


def _check_chol(cov_chol, n):
    L = np.array(cov_chol, dtype=float, ndmin=2)
    if L.shape != (n, n):
        raise ParameterError(f"cov_chol must be {n}x{n}, got {L.shape}")
    sigma = L @ L.T
    if np.linalg.eigvalsh(sigma)[0] <= 0:
        raise ParameterError("E[zz^T] must be positive definite")
    return L, sigma


def _draw_covariates(gen, count, L):
    return gen.standard_normal((count, L.shape[0])) @ L.T


# ---------------------------------------------------------------------------
# Ordinary least squares


@dataclass(frozen=True, eq=False)
class LinearModelSpec:
    beta0: np.ndarray
    cov_chol: np.ndarray
    eps: NoiseLaw = field(default_factory=NoiseLaw)

    def __post_init__(self):
        beta0 = np.array(self.beta0, dtype=float, ndmin=1)
        L, sigma = _check_chol(self.cov_chol, beta0.size)
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "cov_chol", L)
        object.__setattr__(self, "_sigma", sigma)

    @property
    def dim(self) -> int:
        return self.beta0.size

    @property
    def second_moment(self) -> np.ndarray:
        return self._sigma

    @property
    def x_star(self) -> np.ndarray:
        return self.beta0

    @property
    def K(self) -> float:
        """Constant in E|m|^2 <= K (1 + |x|^2): 2||Sigma||^2 + 2||E|z|^2 zz^T||."""
        op, _, fourth = _second_moment_bounds(self._sigma)
        return 2.0 * op * op + 2.0 * fourth

    def grad(self, x):
        return self._sigma @ (np.asarray(x, dtype=float) - self.beta0)


def ols_noise_step(spec: LinearModelSpec, x, rng):
    """One streaming gradient z z^T x - z y with its (zeta, m) parts."""
    gen_eps, gen_z = _step_generators(rng)
    eps = float(np.asarray(spec.eps.draw(gen_eps, 1))[0])
    z = _draw_covariates(gen_z, 1, spec.cov_chol)[0]
    y = z @ spec.beta0 + eps
    g, zeta, m = _ols_parts(spec, np.asarray(x, dtype=float)[None, :], z[None, :], np.array([y]))
    return g[0], zeta[0], m[0]


def _step_generators(rng):
    if isinstance(rng, RngStream):
        return rng.generator(0), rng.generator(1)
    gen = as_generator(rng)
    return gen, gen


def _ols_parts(spec, xs, z, y):
    sigma = spec.second_moment
    zx = np.sum(z * xs, axis=1)
    zz_x = z * zx[:, None]
    g = zz_x - z * y[:, None]
    zeta = (sigma @ spec.beta0)[None, :] - z * y[:, None]
    m = zz_x - xs @ sigma.T
    return g, zeta, m


@numba.njit(cache=True, nogil=True)
def _ols_kernel(x, xbar, t_start, gammas, z, y):
    n = x.size
    for k in range(gammas.size):
        t = t_start + k
        for i in range(n):
            xbar[i] += (x[i] - xbar[i]) / t
        zx = 0.0
        for i in range(n):
            zx += z[k, i] * x[i]
        resid = zx - y[k]
        ok = True
        for i in range(n):
            x[i] -= gammas[k] * z[k, i] * resid
            if not np.isfinite(x[i]):
                ok = False
        if not ok:
            return t
    return -1


class OlsOracle:
    """Streaming least squares: x_t = x_{t-1} - gamma_t (z_t z_t^T x_{t-1} - z_t y_t)."""

    def __init__(self, spec: LinearModelSpec):
        self.spec = spec
        self.dim = spec.dim
        self.K = spec.K

    def draw(self, gens, count):
        eps = np.asarray(self.spec.eps.draw(gens[0], count), dtype=float)
        z = _draw_covariates(gens[1], count, self.spec.cov_chol)
        return z, z @ self.spec.beta0 + eps

    def advance(self, x, xbar, t_start, gammas, draws):
        z, y = draws
        return _ols_kernel(x, xbar, t_start, gammas, z, y)

    def decompose(self, xs, draws):
        z, y = draws
        xs = np.broadcast_to(np.asarray(xs, dtype=float), z.shape)
        return _ols_parts(self.spec, xs, z, y)

    def describe(self):
        return {
            "kind": "ols",
            "beta0": self.spec.beta0.tolist(),
            "cov_chol": self.spec.cov_chol.tolist(),
            "eps": dict(self.spec.eps.__dict__),
            "K": self.K,
        }


# ---------------------------------------------------------------------------
# Generalized linear models


@dataclass(frozen=True)
class Cgf:
    """A convex cumulant generating function with |psi'(u)| <= C (1 + |u|)."""

    name: str
    kind: int
    growth: float
    curvature_max: float

    def psi(self, u):
        u = np.asarray(u, dtype=float)
        return 0.5 * u * u if self.kind == 0 else np.logaddexp(0.0, u)

    def dpsi(self, u):
        u = np.asarray(u, dtype=float)
        return u if self.kind == 0 else expit(u)

    def d2psi(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == 0:
            return np.ones_like(u)
        s = expit(u)
        return s * (1.0 - s)

    @property
    def is_linear(self) -> bool:
        return self.kind == 0


LINEAR = Cgf("linear", 0, 1.0, 1.0)
LOGISTIC = Cgf("logistic", 1, 1.0, 0.25)
CGFS = {"linear": LINEAR, "logistic": LOGISTIC}


@dataclass
class GlmOptimum:
    x: np.ndarray
    grad_norm: float
    iterations: int
    tol: float

    def to_dict(self):
        return {"x_star": self.x.tolist(), "grad_norm": self.grad_norm,
                "iterations": self.iterations, "tol": self.tol}


class GlmSpec:
    """Ridge-regularized GLM, f(x) = E[psi(x^T z) - y x^T z] + (lam/2)|x|^2.

    Population expectations without closed form are averages over a fixed
    panel of ``panel_size`` covariate draws (common random numbers), so the
    population gradient is a deterministic function of x.  The linear CGF
    uses exact expectations.  A GlmSpec is immutable once built; ``x_star``
    is solved on first access and cached.
    """

    def __init__(self, cgf: Cgf | str, lam: float, beta0, cov_chol, eps: NoiseLaw = None,
                 panel_size: int = 100_000, panel_seed: int = 0, x_star_tol: float = 1e-10):
        if isinstance(cgf, str):
            if cgf not in CGFS:
                raise ParameterError(f"unknown CGF {cgf!r}; built-ins are {sorted(CGFS)}")
            cgf = CGFS[cgf]
        self.cgf = cgf
        if not lam > 0:
            raise ParameterError(f"ridge weight lambda must be > 0, got {lam}")
        self.lam = float(lam)
        self.beta0 = np.array(beta0, dtype=float, ndmin=1)
        self.cov_chol, self._sigma = _check_chol(cov_chol, self.beta0.size)
        self.eps = eps if eps is not None else NoiseLaw()
        self.panel_size = int(panel_size)
        self.panel_seed = int(panel_seed)
        self.x_star_tol = float(x_star_tol)
        self._panel = None
        self._exy = None
        self._optimum = None

    @property
    def dim(self) -> int:
        return self.beta0.size

    @property
    def second_moment(self) -> np.ndarray:
        return self._sigma

    @property
    def panel(self) -> np.ndarray:
        if self._panel is None:
            gen = RngStream(self.panel_seed, 2**63).generator()
            self._panel = _draw_covariates(gen, self.panel_size, self.cov_chol)
            self._panel.setflags(write=False)
        return self._panel

    def expected_z_dpsi(self, x) -> np.ndarray:
        """E[z psi'(z^T x)]."""
        x = np.asarray(x, dtype=float)
        if self.cgf.is_linear:
            return self._sigma @ x
        z = self.panel
        return z.T @ self.cgf.dpsi(z @ x) / z.shape[0]

    @property
    def exy(self) -> np.ndarray:
        """E[z y] = E[z psi'(z^T beta0)] since E[eps | z] = 0."""
        if self._exy is None:
            self._exy = self.expected_z_dpsi(self.beta0)
        return self._exy

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.expected_z_dpsi(x) - self.exy + self.lam * x

    @property
    def K(self) -> float:
        _, tr, fourth = _second_moment_bounds(self._sigma)
        return 2.0 * self.cgf.growth**2 * max(tr, fourth)

    @property
    def optimum(self) -> GlmOptimum:
        if self._optimum is None:
            self._optimum = find_glm_optimum(self, self.x_star_tol)
        return self._optimum

    @property
    def x_star(self) -> np.ndarray:
        return self.optimum.x

    def describe(self):
        return {
            "cgf": self.cgf.name,
            "lam": self.lam,
            "beta0": self.beta0.tolist(),
            "cov_chol": self.cov_chol.tolist(),
            "eps": dict(self.eps.__dict__),
            "panel_size": self.panel_size,
            "panel_seed": self.panel_seed,
        }


def find_glm_optimum(spec: GlmSpec, tol: float = 1e-10, max_iter: int = 100_000) -> GlmOptimum:
    """Gradient descent on the panel-averaged population objective.

    Step 1/L with L = lam + max psi'' * ||panel second moment||; stops when the
    gradient norm drops below ``tol``.
    """
    if spec.cgf.is_linear:
        smooth = spec.lam + np.linalg.norm(spec.second_moment, 2)
    else:
        z = spec.panel
        smooth = spec.lam + spec.cgf.curvature_max * np.linalg.norm(z.T @ z / z.shape[0], 2)
    step = 1.0 / smooth
    x = np.zeros(spec.dim)
    for it in range(1, max_iter + 1):
        g = spec.grad(x)
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return GlmOptimum(x, gn, it - 1, tol)
        x = x - step * g
    gn = float(np.linalg.norm(spec.grad(x)))
    if gn < tol:
        return GlmOptimum(x, gn, max_iter, tol)
    raise NonConvergenceError(f"GLM optimum not reached: |grad| = {gn:.3g} > tol = {tol:.3g}",
                              achieved=gn, iterations=max_iter)


def _glm_response(spec: GlmSpec, z, eps):
    return spec.cgf.dpsi(z @ spec.beta0) + eps


def _glm_parts(spec: GlmSpec, xs, z, y):
    zdpsi = z * spec.cgf.dpsi(np.sum(z * xs, axis=1))[:, None]
    g = zdpsi - z * y[:, None] + spec.lam * xs
    zeta = spec.exy[None, :] - z * y[:, None]
    if np.all(xs == xs[0]):
        mean_part = np.broadcast_to(spec.expected_z_dpsi(xs[0]), xs.shape)
    else:
        mean_part = np.array([spec.expected_z_dpsi(x) for x in xs])
    return g, zeta, zdpsi - mean_part


def glm_noise_step(spec: GlmSpec, x, rng):
    """One streaming gradient z psi'(z^T x) - z y + lam x with its (zeta, m) parts."""
    gen_eps, gen_z = _step_generators(rng)
    eps = float(np.asarray(spec.eps.draw(gen_eps, 1))[0])
    z = _draw_covariates(gen_z, 1, spec.cov_chol)
    y = _glm_response(spec, z, np.array([eps]))
    g, zeta, m = _glm_parts(spec, np.asarray(x, dtype=float)[None, :], z, y)
    if not np.all(np.isfinite(g)):
        raise EstimationError("non-finite GLM gradient")
    return g[0], zeta[0], m[0]


@numba.njit(cache=True, nogil=True)
def _glm_kernel(x, xbar, t_start, gammas, z, y, lam, kind):
    n = x.size
    for k in range(gammas.size):
        t = t_start + k
        for i in range(n):
            xbar[i] += (x[i] - xbar[i]) / t
        u = 0.0
        for i in range(n):
            u += z[k, i] * x[i]
        if kind == 0:
            d = u
        elif u >= 0:
            d = 1.0 / (1.0 + math.exp(-u))
        else:
            e = math.exp(u)
            d = e / (1.0 + e)
        resid = d - y[k]
        ok = True
        for i in range(n):
            x[i] -= gammas[k] * (z[k, i] * resid + lam * x[i])
            if not np.isfinite(x[i]):
                ok = False
        if not ok:
            return t
    return -1


class GlmOracle:
    """x_t = x_{t-1} - gamma_t (z_t psi'(z_t^T x_{t-1}) - z_t y_t + lam x_{t-1})."""

    def __init__(self, spec: GlmSpec):
        self.spec = spec
        self.dim = spec.dim
        self.K = spec.K

    def draw(self, gens, count):
        eps = np.asarray(self.spec.eps.draw(gens[0], count), dtype=float)
        z = _draw_covariates(gens[1], count, self.spec.cov_chol)
        return z, _glm_response(self.spec, z, eps)

    def advance(self, x, xbar, t_start, gammas, draws):
        z, y = draws
        return _glm_kernel(x, xbar, t_start, gammas, z, y, self.spec.lam, self.spec.cgf.kind)

    def decompose(self, xs, draws):
        z, y = draws
        xs = np.broadcast_to(np.asarray(xs, dtype=float), z.shape)
        return _glm_parts(self.spec, xs, z, y)

    def describe(self):
        return {"kind": "glm", **self.spec.describe(), "K": self.K}


# ---------------------------------------------------------------------------
# Hessians


@dataclass
class HessianEstimate:
    matrix: SymMatrix
    stderr: Optional[np.ndarray] = None

    def __array__(self, dtype=None, copy=None):
        return np.array(self.matrix.entries, dtype=dtype)


def hessian_at(spec, x) -> HessianEstimate:
    """Hessian of the population objective at x.

    OLS: E[zz^T] exactly.  GLM: E[zz^T psi''(z^T x)] + lam I, exact for the
    linear CGF, otherwise a panel average with per-entry standard errors.
    """
    if isinstance(spec, LinearModelSpec):
        return HessianEstimate(SymMatrix(spec.second_moment))
    x = np.asarray(x, dtype=float)
    n = spec.dim
    if spec.cgf.is_linear:
        return HessianEstimate(SymMatrix(spec.second_moment + spec.lam * np.eye(n)))
    z = spec.panel
    w = spec.cgf.d2psi(z @ x)
    outer = z[:, :, None] * z[:, None, :] * w[:, None, None]
    mean = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / math.sqrt(z.shape[0])
    return HessianEstimate(SymMatrix(mean + spec.lam * np.eye(n), atol=1e-9), se)
