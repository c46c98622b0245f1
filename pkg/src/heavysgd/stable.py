"""Heavy-tailed variates: alpha-stable and Pareto laws, tail-index estimation.

Stable laws use the (sigma, theta, mu) parameterization whose characteristic
function is

    exp(-sigma^a |u|^a (1 - i theta sgn(u) tan(pi a / 2)) + i mu u),   a != 1
    exp(-sigma |u| (1 + i theta (2/pi) sgn(u) log|u|) + i mu u),        a == 1

Note that at ``alpha == 2`` this is a Gaussian with variance ``2 sigma^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import DegenerateSampleError, InsufficientDataError, ParameterError

Sampler = Callable[[np.random.Generator, Optional[int]], np.ndarray]

_UINT64 = 2**64
_OPEN_UNIT_SCALE = 2.0**-53


@dataclass(frozen=True)
class RngStream:
    """A reproducible, independent random stream identified by (seed, stream_id).

    Streams are values: build a fresh generator with :meth:`generator`.  The
    optional ``path`` addresses named sub-streams (e.g. one for the
    heavy-tailed component and one for covariates) that are independent of
    each other and of every other stream_id.
    """

    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= value < _UINT64:
                raise ParameterError(f"{name} must be an integer in [0, 2**64), got {value!r}")

    def seed_sequence(self, *path: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), *map(int, path)))

    def generator(self, *path: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence(*path)))

    def offset(self, k: int) -> "RngStream":
        """The stream with ``stream_id + k`` (used for replications)."""
        return RngStream(self.seed, (int(self.stream_id) + int(k)) % _UINT64)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngStream(0 if rng is None else int(rng)).generator()
    raise TypeError(f"expected Generator or RngStream, got {type(rng).__name__}")


def open_uniform(rng: np.random.Generator, size=None):
    """Uniform draws on the open interval (0, 1), never 0 or 1."""
    k = rng.integers(0, 2**53, size=size, dtype=np.int64)
    return (k + 0.5) * _OPEN_UNIT_SCALE


# ---------------------------------------------------------------------------
# Parameter types


@dataclass(frozen=True)
class StableParams:
    alpha: float
    sigma: float = 1.0
    theta: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0):
            raise ParameterError(f"stable alpha must lie in (0, 2], got {self.alpha}")
        if not self.sigma >= 0.0:
            raise ParameterError(f"stable sigma must be >= 0, got {self.sigma}")
        if not (-1.0 <= self.theta <= 1.0):
            raise ParameterError(f"stable theta must lie in [-1, 1], got {self.theta}")
        if not math.isfinite(self.mu):
            raise ParameterError(f"stable mu must be finite, got {self.mu}")


@dataclass(frozen=True)
class ParetoParams:
    alpha: float
    c: float = 1.0
    centered: bool = False

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ParameterError(f"Pareto alpha must be > 0, got {self.alpha}")
        if not self.c > 0.0:
            raise ParameterError(f"Pareto c must be > 0, got {self.c}")
        if self.centered and self.alpha <= 1.0:
            raise ParameterError("centered Pareto needs alpha > 1 (the mean is infinite otherwise)")

    @property
    def mean(self) -> float:
        if self.alpha <= 1.0:
            return math.inf
        return self.alpha * self.c / (self.alpha - 1.0)


# ---------------------------------------------------------------------------
# Stable law


def stable_char_fn(params: StableParams, u):
    """Exact characteristic function E[exp(iuX)] of ``S_alpha(sigma, theta, mu)``."""
    u = np.asarray(u, dtype=float)
    a, s, th, mu = params.alpha, params.sigma, params.theta, params.mu
    au = np.abs(u)
    sgn = np.sign(u)
    if a == 1.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            logu = np.where(au > 0, np.log(np.where(au > 0, au, 1.0)), 0.0)
        expo = -s * au * (1.0 + 1j * th * (2.0 / np.pi) * sgn * logu) + 1j * mu * u
    else:
        skew = 0.0 if a == 2.0 else th * math.tan(math.pi * a / 2.0)
        expo = -(s**a) * au**a * (1.0 - 1j * skew * sgn) + 1j * mu * u
    out = np.exp(expo)
    return out[()] if out.ndim == 0 else out


def cms_transform(alpha: float, theta: float, v, w):
    """Chambers-Mallows-Stuck map from (V ~ U(-pi/2, pi/2), W ~ Exp(1)) to S_alpha(1, theta, 0)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if alpha == 1.0:
        half_pi = np.pi / 2.0
        shifted = half_pi + theta * v
        return (2.0 / np.pi) * (
            shifted * np.tan(v) - theta * np.log(half_pi * w * np.cos(v) / shifted)
        )
    if alpha == 2.0:
        theta = 0.0
    zeta = theta * math.tan(math.pi * alpha / 2.0)
    b = math.atan(zeta) / alpha
    s = (1.0 + zeta * zeta) ** (1.0 / (2.0 * alpha))
    arg = alpha * (v + b)
    return (
        s
        * np.sin(arg)
        / np.cos(v) ** (1.0 / alpha)
        * (np.cos(v - arg) / w) ** ((1.0 - alpha) / alpha)
    )


def sample_stable(params: StableParams, rng, size=None):
    """Draw from ``S_alpha(sigma, theta, mu)`` via the Chambers-Mallows-Stuck transform.

    ``rng`` may be a Generator (advanced in place) or an RngStream (the
    first ``size`` draws of that stream are returned).
    """
    gen = as_generator(rng)
    if params.sigma == 0.0:
        out = np.full(() if size is None else size, float(params.mu))
        return out[()] if out.ndim == 0 else out
    v = np.pi * (open_uniform(gen, size) - 0.5)
    w = -np.log(open_uniform(gen, size))
    x = cms_transform(params.alpha, params.theta, v, w)
    sigma = params.sigma
    if params.alpha == 1.0:
        x = sigma * x + (2.0 / np.pi) * params.theta * sigma * math.log(sigma)
    else:
        x = sigma * x
    x = x + params.mu
    return x[()] if np.ndim(x) == 0 else x


def stable_sampler(params: StableParams) -> Sampler:
    return partial(sample_stable, params)


# ---------------------------------------------------------------------------
# Pareto law


def pareto_from_uniform(params: ParetoParams, u):
    """Inverse-CDF map c * U^(-1/alpha), minus the mean when ``centered``."""
    x = params.c * np.asarray(u, dtype=float) ** (-1.0 / params.alpha)
    if params.centered:
        x = x - params.mean
    return x[()] if np.ndim(x) == 0 else x


def sample_pareto(params: ParetoParams, rng, size=None):
    gen = as_generator(rng)
    return pareto_from_uniform(params, open_uniform(gen, size))


def pareto_sampler(params: ParetoParams) -> Sampler:
    return partial(sample_pareto, params)


def symmetrize(sampler: Sampler) -> Sampler:
    """Wrap ``sampler`` so its output is multiplied by an independent fair sign."""

    def symmetric(rng, size=None):
        gen = as_generator(rng)
        x = np.asarray(sampler(gen, size), dtype=float)
        sign = 2.0 * gen.integers(0, 2, size=size) - 1.0
        out = x * sign
        return out[()] if np.ndim(out) == 0 else out

    return symmetric


# ---------------------------------------------------------------------------
# Noise-law description used by the SGD engine and the models


_LAWS = ("none", "stable", "pareto", "gaussian")


@dataclass(frozen=True)
class NoiseLaw:
    """Description of a scalar zero-mean noise law.

    law:
        ``"stable"`` (symmetric alpha-stable with scale ``scale``),
        ``"pareto"`` (Pareto tail ``alpha`` with minimum ``scale``),
        ``"gaussian"`` (N(0, scale^2)) or ``"none"``.
    symmetrize:
        For Pareto only: multiply by a fair sign.  Otherwise the Pareto
        draws are mean-centered, which needs ``alpha > 1``.
    """

    law: str = "pareto"
    alpha: float = 1.5
    scale: float = 1.0
    symmetrize: bool = True

    def __post_init__(self):
        if self.law not in _LAWS:
            raise ParameterError(f"unknown noise law {self.law!r}; expected one of {_LAWS}")
        if self.scale < 0:
            raise ParameterError("noise scale must be >= 0")
        if self.law == "stable":
            StableParams(self.alpha, self.scale)
        elif self.law == "pareto":
            ParetoParams(self.alpha, max(self.scale, 1e-300), centered=not self.symmetrize)

    @property
    def tail_index(self) -> float:
        """Tail index of the law (2 for Gaussian, inf for no noise)."""
        if self.law == "none":
            return math.inf
        if self.law == "gaussian":
            return 2.0
        return float(self.alpha)

    def sampler(self) -> Sampler:
        if self.law == "stable":
            return stable_sampler(StableParams(self.alpha, self.scale))
        if self.law == "pareto":
            if self.scale == 0:
                return _zeros
            if self.symmetrize:
                return symmetrize(pareto_sampler(ParetoParams(self.alpha, self.scale)))
            return pareto_sampler(ParetoParams(self.alpha, self.scale, centered=True))
        if self.law == "gaussian":
            return partial(_gaussian, self.scale)
        return _zeros

    def draw(self, rng: np.random.Generator, size=None):
        return self.sampler()(rng, size)


def _zeros(rng, size=None):
    return 0.0 if size is None else np.zeros(size)


def _gaussian(scale, rng, size=None):
    return scale * as_generator(rng).standard_normal(size)


# ---------------------------------------------------------------------------
# Tail and stability diagnostics


def hill_tail_index(samples, k: Optional[int] = None) -> float:
    """Hill estimate of the tail index from the ``k`` largest of ``|samples|``.

    ``k`` defaults to ``floor(sqrt(n))``.  The estimate is
    ``1 / mean(log(X_(i) / X_(k+1)))`` over the top ``k`` order statistics,
    so it is exactly invariant under positive rescaling.
    """
    mags = np.abs(np.asarray(samples, dtype=float).ravel())
    mags = mags[np.isfinite(mags) & (mags > 0)]
    if k is None:
        k = int(math.isqrt(mags.size)) if mags.size else 0
    if k < 2:
        raise InsufficientDataError(f"Hill estimator needs k >= 2, got k={k}")
    if mags.size < k + 1:
        raise InsufficientDataError(
            f"Hill estimator needs at least k+1={k + 1} positive magnitudes, got {mags.size}"
        )
    top = np.sort(mags)[::-1][: k + 1]
    spacing = np.mean(np.log(top[:k] / top[k]))
    if spacing <= 0:
        raise DegenerateSampleError("all top order statistics coincide; tail index undefined")
    return float(1.0 / spacing)


def ks_critical_value(n1: int, n2: int, level: float = 0.01) -> float:
    """Asymptotic critical value of the two-sample Kolmogorov-Smirnov statistic."""
    c = math.sqrt(-0.5 * math.log(level / 2.0))
    return c * math.sqrt((n1 + n2) / (n1 * n2))


@dataclass(frozen=True)
class SelfSimilarityReport:
    statistic: float
    threshold: float
    passed: bool
    pvalue: float
    n_sums: int
    n_singles: int
    alpha: float
    level: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def self_similarity_test(samples, alpha: float, level: float = 0.01, center: bool = True):
    """Check X1 + X2 =d 2^(1/alpha) X on an i.i.d. sample.

    The first half is summed in consecutive pairs and compared, by a
    two-sample KS statistic, with the second half scaled by 2^(1/alpha).
    The two groups share no draws.  With ``center`` the sample median is
    removed first, which makes the check insensitive to a location shift of
    a symmetric law.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 200 or x.size % 2:
        raise InsufficientDataError(f"self-similarity test needs an even sample count >= 200, got {x.size}")
    if not 0 < alpha <= 2:
        raise ParameterError(f"alpha must lie in (0, 2], got {alpha}")
    if center:
        x = x - np.median(x)
    half = x.size // 2
    first, second = x[:half], x[half:]
    sums = first[: 2 * (half // 2)].reshape(-1, 2).sum(axis=1)
    singles = 2.0 ** (1.0 / alpha) * second
    res = stats.ks_2samp(sums, singles)
    threshold = ks_critical_value(sums.size, singles.size, level)
    return SelfSimilarityReport(
        statistic=float(res.statistic),
        threshold=threshold,
        passed=bool(res.statistic < threshold),
        pvalue=float(res.pvalue),
        n_sums=int(sums.size),
        n_singles=int(singles.size),
        alpha=float(alpha),
        level=float(level),
    )
