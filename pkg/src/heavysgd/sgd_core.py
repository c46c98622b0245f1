"""Stochastic approximation engine.

Runs x_t = x_{t-1} - gamma_t (grad f(x_{t-1}) + xi_t(x_{t-1})) with the noise
split as xi = zeta + m (i.i.d. heavy-tailed part plus state-dependent
martingale difference), keeping the Polyak-Ruppert average
x̄_t = (x_0 + ... + x_{t-1}) / t online.

Anything that produces stochastic gradients is an *oracle*: an object with

    dim                                   dimension n
    K                                     declared bound E|m|^2 <= K (1 + |x|^2), or None
    draw(gens, count) -> tuple            vectorized noise draws for ``count`` steps
    advance(x, xbar, t_start, gammas, draws) -> int
                                          run the recursion in place; return the
                                          first t with a non-finite iterate, or -1
    decompose(xs, draws) -> (g, zeta, m)  per-draw gradient and its noise parts
    describe() -> dict                    manifest entry

``gens`` is a pair of generators: index 0 feeds the heavy-tailed part, index 1
the state-dependent part.  Draws are taken in fixed blocks of ``BLOCK`` steps
so trajectories do not depend on the checkpoint plan.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .errors import DivergenceError, ParameterError
from .stable import NoiseLaw, RngStream

BLOCK = 4096
AUDIT_DRAWS = 256


# ---------------------------------------------------------------------------
# Schedules and checkpoints


@dataclass(frozen=True)
class StepSchedule:
    """gamma_t = gamma0 * (t + t0)^(-rho), t >= 1."""

    gamma0: float = 0.5
    rho: float = 0.7
    t0: int = 0

    def __post_init__(self):
        if not self.gamma0 > 0:
            raise ParameterError(f"gamma0 must be positive, got {self.gamma0}")
        if not 0 < self.rho < 1:
            raise ParameterError(f"step-size index rho must lie in (0, 1), got {self.rho}")
        if int(self.t0) != self.t0 or self.t0 < 0:
            raise ParameterError(f"t0 must be a non-negative integer, got {self.t0}")

    def __call__(self, t):
        return self.gamma0 * (np.asarray(t, dtype=float) + self.t0) ** (-self.rho)

    def gammas(self, t_start: int, count: int) -> np.ndarray:
        return self(np.arange(t_start, t_start + count))


def checkpoint_plan(T: int, ratio: float = 1.25, c: float = 1.0) -> np.ndarray:
    """Geometric checkpoints ceil(c * ratio^k) <= T, always including T."""
    if T < 1:
        raise ParameterError("T must be >= 1")
    if ratio <= 1:
        raise ParameterError("checkpoint ratio must exceed 1")
    kmax = int(math.ceil(math.log(T / c) / math.log(ratio))) + 1 if T > c else 0
    pts = np.ceil(c * ratio ** np.arange(kmax + 1) - 1e-9).astype(np.int64)
    pts = pts[(pts >= 1) & (pts <= T)]
    return np.unique(np.append(pts, T))


# ---------------------------------------------------------------------------
# Noise specification


@dataclass(frozen=True)
class MultiplicativeNoise:
    """m = scale * w ⊙ x with w i.i.d. N(0, 1); E|m|^2 = scale^2 |x|^2."""

    scale: float = 0.5

    @property
    def K(self) -> float:
        return self.scale**2

    def draw(self, gen: np.random.Generator, count: int, n: int) -> np.ndarray:
        return gen.standard_normal((count, n))

    def apply(self, w: np.ndarray, xs: np.ndarray) -> np.ndarray:
        return self.scale * w * xs


@dataclass(frozen=True)
class NoiseSpec:
    """xi = zeta + m: ``zeta`` is drawn i.i.d. per coordinate from a NoiseLaw
    (or anything with ``draw(gen, size)``); ``m_rule`` supplies ``K``,
    ``draw(gen, count, n)`` and ``apply(draws, xs)``."""

    zeta: Optional[NoiseLaw] = None
    m_rule: Optional[MultiplicativeNoise] = None


@dataclass(frozen=True)
class AffineGradient:
    """grad f(x) = A x - b."""

    A: np.ndarray
    b: np.ndarray

    def __call__(self, x):
        return np.asarray(x) @ np.asarray(self.A).T - np.asarray(self.b)


@numba.njit(cache=True, nogil=True)
def _affine_kernel(x, xbar, t_start, gammas, A, b, zeta, mscale, w):
    n = x.size
    g = np.empty(n)
    for k in range(gammas.size):
        t = t_start + k
        for i in range(n):
            xbar[i] += (x[i] - xbar[i]) / t
        for i in range(n):
            acc = -b[i] + zeta[k, i]
            for j in range(n):
                acc += A[i, j] * x[j]
            if mscale != 0.0:
                acc += mscale * w[k, i] * x[i]
            g[i] = acc
        ok = True
        for i in range(n):
            x[i] -= gammas[k] * g[i]
            if not np.isfinite(x[i]):
                ok = False
        if not ok:
            return t
    return -1


class AdditiveNoiseOracle:
    """Oracle for grad f + zeta + m with an explicit gradient map."""

    def __init__(self, grad: Callable, noise: NoiseSpec, dim: int):
        self.grad = grad
        self.noise = noise
        self.dim = int(dim)
        self.K = noise.m_rule.K if noise.m_rule is not None else None
        self._fast = isinstance(grad, AffineGradient) and (
            noise.m_rule is None or isinstance(noise.m_rule, MultiplicativeNoise)
        )
        if isinstance(grad, AffineGradient):
            self._A = np.ascontiguousarray(grad.A, dtype=float).reshape(dim, dim)
            self._b = np.ascontiguousarray(grad.b, dtype=float).reshape(dim)

    def draw(self, gens, count):
        n = self.dim
        if self.noise.zeta is not None:
            zeta = np.asarray(self.noise.zeta.draw(gens[0], count * n), dtype=float).reshape(count, n)
        else:
            zeta = np.zeros((count, n))
        if self.noise.m_rule is not None:
            w = np.asarray(self.noise.m_rule.draw(gens[1], count, n), dtype=float)
        else:
            w = np.zeros((count, n))
        return zeta, w

    def _m(self, w, xs):
        if self.noise.m_rule is None:
            return np.zeros_like(xs)
        return self.noise.m_rule.apply(w, xs)

    def advance(self, x, xbar, t_start, gammas, draws):
        zeta, w = draws
        if self._fast:
            mscale = self.noise.m_rule.scale if self.noise.m_rule is not None else 0.0
            return _affine_kernel(x, xbar, t_start, gammas, self._A, self._b, zeta, mscale, w)
        for k in range(gammas.size):
            t = t_start + k
            xbar += (x - xbar) / t
            m = self._m(w[k : k + 1], x[None, :])[0]
            x -= gammas[k] * (np.asarray(self.grad(x), dtype=float) + zeta[k] + m)
            if not np.all(np.isfinite(x)):
                return t
        return -1

    def decompose(self, xs, draws):
        zeta, w = draws
        xs = np.broadcast_to(np.asarray(xs, dtype=float), zeta.shape)
        grad = np.array([self.grad(x) for x in xs], dtype=float)
        m = self._m(w, xs)
        return grad + zeta + m, zeta.copy(), m

    def describe(self):
        out = {"kind": "additive", "dim": self.dim, "K": self.K}
        if isinstance(self.grad, AffineGradient):
            out["A"] = np.asarray(self.grad.A).tolist()
            out["b"] = np.asarray(self.grad.b).tolist()
        if self.noise.zeta is not None:
            z = self.noise.zeta
            out["zeta"] = dict(z.__dict__) if isinstance(z, NoiseLaw) else repr(z)
        if self.noise.m_rule is not None:
            out["m_rule"] = {"name": type(self.noise.m_rule).__name__, **self.noise.m_rule.__dict__}
        return out


# ---------------------------------------------------------------------------
# Traces


@dataclass
class MBoundAudit:
    """Empirical check of E|m|^2 / (1 + |x|^2) <= K over recorded states."""

    K: float
    mean_ratio: float
    stderr: float
    draws: int

    @property
    def ok(self) -> bool:
        return bool(self.mean_ratio <= self.K + 3.0 * self.stderr)

    def to_dict(self):
        return {"K": self.K, "mean_ratio": self.mean_ratio, "stderr": self.stderr,
                "draws": self.draws, "ok": self.ok}


@dataclass
class SgdTrace:
    checkpoints: np.ndarray
    iterates: np.ndarray
    pr_averages: np.ndarray
    x0: np.ndarray
    x_star: Optional[np.ndarray] = None
    seed: int = 0
    stream_id: int = 0
    audit: Optional[MBoundAudit] = None

    @property
    def dim(self) -> int:
        return self.iterates.shape[1]

    @property
    def errors(self) -> Optional[np.ndarray]:
        if self.x_star is None:
            return None
        return np.linalg.norm(self.iterates - self.x_star, axis=1)

    @property
    def errors_bar(self) -> Optional[np.ndarray]:
        if self.x_star is None:
            return None
        return np.linalg.norm(self.pr_averages - self.x_star, axis=1)

    def at(self, t: int) -> int:
        idx = np.searchsorted(self.checkpoints, t)
        if idx >= self.checkpoints.size or self.checkpoints[idx] != t:
            raise KeyError(f"t={t} is not a checkpoint")
        return int(idx)


def audit_m_bound(oracle, states: np.ndarray, gen: np.random.Generator,
                  draws_per_state: int = AUDIT_DRAWS) -> Optional[MBoundAudit]:
    """Sample |m|^2 / (1 + |x|^2) at the given states with fresh draws."""
    if oracle.K is None:
        return None
    ratios = []
    for x in np.atleast_2d(states):
        draws = oracle.draw((gen, gen), draws_per_state)
        _, _, m = oracle.decompose(x, draws)
        ratios.append(np.sum(m * m, axis=1) / (1.0 + float(x @ x)))
    r = np.concatenate(ratios)
    return MBoundAudit(float(oracle.K), float(r.mean()), float(r.std(ddof=1) / math.sqrt(r.size)), int(r.size))


def sgd_run(grad, noise: Optional[NoiseSpec], x0, schedule: StepSchedule, T: int,
            checkpoints=None, rng: RngStream = RngStream(), x_star=None, audit: bool = True) -> SgdTrace:
    """Run T steps of SGD and record the checkpoint plan.

    ``grad`` is either an oracle (then ``noise`` must be None) or a gradient
    map combined with ``noise``.  ``checkpoints`` defaults to the geometric
    plan; pass ``"all"`` to keep every iterate.
    Raises DivergenceError carrying the first t whose iterate is non-finite.
    """
    x = np.array(x0, dtype=float, ndmin=1)
    if noise is None and hasattr(grad, "advance"):
        oracle = grad
    else:
        oracle = AdditiveNoiseOracle(grad, noise or NoiseSpec(), x.size)
    if oracle.dim != x.size:
        raise ParameterError(f"x0 has dimension {x.size}, oracle expects {oracle.dim}")
    if T < 1:
        raise ParameterError("T must be >= 1")
    if checkpoints is None:
        cps = checkpoint_plan(T)
    elif isinstance(checkpoints, str) and checkpoints == "all":
        cps = np.arange(1, T + 1)
    else:
        cps = np.unique(np.asarray(checkpoints, dtype=np.int64))
        if cps.size == 0 or cps[0] < 1 or cps[-1] > T:
            raise ParameterError("checkpoints must lie in [1, T]")

    gens = (rng.generator(0), rng.generator(1))
    x0 = x.copy()
    xbar = np.zeros_like(x)
    iterates = np.empty((cps.size, x.size))
    averages = np.empty_like(iterates)
    ci = 0
    t = 1
    while t <= T:
        count = min(BLOCK, T - t + 1)
        draws = oracle.draw(gens, BLOCK)
        gam = schedule.gammas(t, count)
        lo = 0
        while lo < count:
            # advance up to the next checkpoint inside this block
            stop = count
            if ci < cps.size and cps[ci] - t < count:
                stop = int(cps[ci] - t) + 1
            part = tuple(d[lo:stop] for d in draws)
            bad = oracle.advance(x, xbar, t + lo, gam[lo:stop], part)
            if bad >= 0:
                raise DivergenceError(bad)
            lo = stop
            if ci < cps.size and cps[ci] == t + lo - 1:
                iterates[ci] = x
                averages[ci] = xbar
                ci += 1
        t += count

    trace = SgdTrace(
        checkpoints=cps,
        iterates=iterates,
        pr_averages=averages,
        x0=x0,
        x_star=None if x_star is None else np.array(x_star, dtype=float, ndmin=1),
        seed=int(rng.seed),
        stream_id=int(rng.stream_id),
    )
    if audit and oracle.K is not None:
        trace.audit = audit_m_bound(oracle, iterates, rng.generator(2))
    return trace


def scaled_pr_error(trace: SgdTrace, alpha: float, x_star=None):
    """(times, t^(1 - 1/alpha) (x̄_t - x*)) at every checkpoint."""
    if not 1.0 < alpha <= 2.0:
        raise ParameterError(f"alpha must lie in (1, 2], got {alpha}")
    xs = trace.x_star if x_star is None else np.asarray(x_star, dtype=float)
    if xs is None:
        raise ParameterError("x_star is required")
    t = trace.checkpoints.astype(float)
    return trace.checkpoints, (t ** (1.0 - 1.0 / alpha))[:, None] * (trace.pr_averages - xs)


# ---------------------------------------------------------------------------
# Replication


@dataclass(frozen=True)
class Experiment:
    """Everything needed to run one replication given a stream."""

    oracle: object
    x0: np.ndarray
    schedule: StepSchedule
    T: int
    checkpoints: Optional[np.ndarray] = None
    x_star: Optional[np.ndarray] = None
    audit: bool = True

    def run(self, rng: RngStream) -> SgdTrace:
        return sgd_run(self.oracle, None, self.x0, self.schedule, self.T,
                       checkpoints=self.checkpoints, rng=rng, x_star=self.x_star, audit=self.audit)


@dataclass
class Replications:
    traces: list
    replication_ids: list
    censored: list = field(default_factory=list)  # (replication, first bad t)
    requested: int = 0

    @property
    def n_censored(self) -> int:
        return len(self.censored)

    @property
    def censored_fraction(self) -> float:
        return self.n_censored / self.requested if self.requested else 0.0

    def __len__(self):
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __getitem__(self, i):
        return self.traces[i]


def replicate(experiment, R: int, base_rng: RngStream = RngStream(), workers: int = 1) -> Replications:
    """Run R replications on stream ids base, base+1, ..., base+R-1.

    ``experiment`` is an :class:`Experiment` or any callable ``rng -> SgdTrace``.
    Results do not depend on ``workers``.  Divergent replications are
    recorded in ``censored`` and dropped from ``traces``.
    """
    if R < 1:
        raise ParameterError("R must be >= 1")
    run = experiment.run if hasattr(experiment, "run") else experiment

    def one(r):
        try:
            return run(base_rng.offset(r))
        except DivergenceError as err:
            err.replication = r
            return err

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]
    out = Replications([], [], [], R)
    for r, res in enumerate(results):
        if isinstance(res, DivergenceError):
            out.censored.append((r, res.index))
        else:
            out.traces.append(res)
            out.replication_ids.append(r)
    return out
