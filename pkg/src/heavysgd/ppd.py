"""The p-positive-(semi)definite cone of symmetric matrices.

A symmetric Q is p-PD when v^T Q v^<p-1> > 0 for every v on the l_p unit
sphere S_p, where v^<q> is the componentwise signed power.  The cones
interpolate between diagonally dominant matrices (p = 1) and the PSD cone
(p = 2).

Margins (the minimum of v^T Q v^<p-1> over S_p) have closed forms only at
p = 1 (worst row dominance) and p = 2 (smallest eigenvalue).  For interior p
the minimum is found by a deterministic sphere grid followed by compass-search
refinement; the result is an upper bound on the true minimum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, qmc

from .errors import ParameterError

EXACT_TOL = 1e-9
GRID_TOL = 1e-6
MAX_SEARCH_DIM = 8
_P1_FACE_EPS = 1e-12


class SymMatrix:
    """A real symmetric matrix, symmetrized on construction.

    Input farther than ``atol`` from symmetric is rejected.
    """

    __slots__ = ("entries",)

    def __init__(self, entries, atol: float = 1e-12):
        a = np.array(entries, dtype=float, ndmin=2)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ParameterError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ParameterError("matrix entries must be finite")
        asym = np.max(np.abs(a - a.T)) if a.size else 0.0
        if asym > atol:
            raise ParameterError(f"matrix is not symmetric (max |Q - Q^T| = {asym:.3g})")
        self.entries = 0.5 * (a + a.T)
        self.entries.setflags(write=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.array(self.entries, dtype=dtype)

    def __repr__(self):
        return f"SymMatrix({self.entries.tolist()!r})"

    def tolist(self):
        return self.entries.tolist()


def as_sym(q) -> SymMatrix:
    return q if isinstance(q, SymMatrix) else SymMatrix(q)


def signed_power(v, q: float):
    """Componentwise sg(v_i) |v_i|^q, with sg(0) = 0 for every q >= 0."""
    if q < 0:
        raise ParameterError(f"signed power exponent must be >= 0, got {q}")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.abs(v) ** q


def p_norm(v, p: float, axis=-1):
    return np.sum(np.abs(v) ** p, axis=axis) ** (1.0 / p)


def ppd_form(q, v, p: float):
    """v^T Q v^<p-1> for a single vector or a batch of row vectors."""
    mat = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.sum((v @ mat) * signed_power(v, p - 1.0), axis=-1)


def diag_dominance_margin(q) -> float:
    """min_i (q_ii - sum_{j != i} |q_ij|)."""
    a = np.asarray(as_sym(q))
    off = np.sum(np.abs(a), axis=1) - np.abs(np.diag(a))
    return float(np.min(np.diag(a) - off))


# ---------------------------------------------------------------------------
# Sphere search


def _sphere_directions(n: int, resolution: int) -> np.ndarray:
    """Deterministic unit (l_2) directions; antipodes are omitted."""
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        ang = np.pi * np.arange(4 * resolution) / (4 * resolution)
        dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    elif n == 3:
        m = resolution * resolution
        i = np.arange(m) + 0.5
        z = 1.0 - i / m  # upper hemisphere only
        r = np.sqrt(1.0 - z * z)
        phi = np.pi * (3.0 - math.sqrt(5.0)) * i
        dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    else:
        pts = qmc.Halton(d=n, scramble=False).random(64 * resolution + 1)[1:]
        dirs = norm.ppf(np.clip(pts, 1e-12, 1 - 1e-12))
    # Axes and axis pairs: minimizers at p < 2 often sit on low-dimensional faces.
    eye = np.eye(n)
    pairs = [eye[i] + s * eye[j] for i, j in itertools.combinations(range(n), 2) for s in (1.0, -1.0)]
    dirs = np.vstack([dirs, eye] + ([np.array(pairs)] if pairs else []))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _to_sp(w: np.ndarray, p: float) -> np.ndarray:
    return w / p_norm(w, p)[..., None]


def _canonical(v: np.ndarray) -> np.ndarray:
    """Sign-normalize so the first non-zero entry is positive (objectives here are even)."""
    nz = np.flatnonzero(np.abs(v) > 0)
    return -v if nz.size and v[nz[0]] < 0 else v


def _compass(objective, w0: np.ndarray, h0: float, h_min: float = 1e-11, max_evals: int = 20000):
    """Deterministic compass search on an unnormalized direction ``w``."""
    n = w0.size
    w = w0 / np.linalg.norm(w0)
    best = float(objective(w[None, :])[0])
    steps = np.vstack([np.eye(n), -np.eye(n)])
    h, evals = h0, 1
    while h > h_min and evals < max_evals:
        cand = w[None, :] + h * steps
        vals = objective(cand)
        evals += cand.shape[0]
        k = int(np.argmin(vals))
        if vals[k] < best:
            best = float(vals[k])
            w = cand[k] / np.linalg.norm(cand[k])
        else:
            h *= 0.5
    return w, best, evals


def sphere_minimize(objective: Callable[[np.ndarray], np.ndarray], n: int, p: float,
                    resolution: int = 64, starts: int = 5):
    """Minimize ``objective`` (evaluated on batches of S_p points) over S_p.

    Returns (value, witness, evaluations).  Grid first, then compass search
    from the ``starts`` best grid points.  Ties resolve to the
    lexicographically smallest sign-normalized witness.
    """

    def on_sphere(w):
        return objective(_to_sp(w, p))

    dirs = _sphere_directions(n, resolution)
    vals = on_sphere(dirs)
    evals = dirs.shape[0]
    order = np.lexsort((np.arange(vals.size), vals))[:starts]
    spacing = math.pi / (4 * resolution) if n == 2 else 2.0 / resolution
    candidates = []
    for idx in order:
        w, val, used = _compass(on_sphere, dirs[idx], spacing)
        evals += used
        candidates.append((val, _canonical(_to_sp(w[None, :], p)[0])))
    best_val = min(c[0] for c in candidates)
    ties = [c[1] for c in candidates if c[0] <= best_val + 1e-15 * max(1.0, abs(best_val))]
    witness = min(ties, key=lambda v: tuple(v))
    return best_val, witness, evals


# ---------------------------------------------------------------------------
# Margins


@dataclass
class PpdReport:
    p: float
    margin: float
    witness: np.ndarray
    member_pd: bool
    member_psd: bool
    grid_resolution: int
    tol: float
    status: str
    method: str
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "margin": self.margin,
            "witness": [float(x) for x in self.witness],
            "member_pd": self.member_pd,
            "member_psd": self.member_psd,
            "grid_resolution": self.grid_resolution,
            "tol": self.tol,
            "status": self.status,
            "method": self.method,
            "evaluations": self.evaluations,
        }


def _p1_margin(a: np.ndarray):
    """Exact infimum over S_1 by enumerating the faces of the cross-polytope.

    On the open face with sign pattern s the form equals s^T Q v, which is
    linear, so its infimum sits at a vertex: min_{k in supp s} s_k (Q s)_k.
    """
    n = a.shape[0]
    patterns = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=n)))
    patterns = patterns[np.any(patterns != 0, axis=1)]
    qs = patterns @ a
    vertex = np.where(patterns != 0, patterns * qs, np.inf)
    flat = int(np.argmin(vertex))
    row, k = divmod(flat, n)
    s = patterns[row]
    support = np.flatnonzero(s)
    witness = np.zeros(n)
    eps = _P1_FACE_EPS
    witness[support] = eps * s[support]
    witness[k] = s[k] * (1.0 - eps * (support.size - 1))
    return float(vertex[row, k]), _canonical(witness), patterns.shape[0]


def _status(margin: float, tol: float, exact: bool) -> str:
    if margin > tol:
        return "pd"
    if margin < -tol:
        return "not-psd"
    return "psd-boundary" if exact else "undetermined"


def ppd_margin(q, p: float, resolution: int = 64) -> PpdReport:
    """Approximate min of v^T Q v^<p-1> over the l_p unit sphere.

    p = 1 is computed exactly by face enumeration (n <= 8) or the row
    dominance formula.  Other p use the grid + refinement search, limited to
    n <= 8; p = 2 falls back to an eigen-decomposition beyond that.
    """
    mat = as_sym(q)
    a = np.asarray(mat)
    n = mat.n
    if not 1.0 <= p <= 2.0:
        raise ParameterError(f"p must lie in [1, 2], got {p}")
    if resolution < 8:
        raise ParameterError(f"resolution must be >= 8, got {resolution}")
    # the zero matrix has an identically vanishing form, so every p is exact
    exact = p in (1.0, 2.0) or not np.any(a)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    tol = EXACT_TOL if exact else GRID_TOL * scale

    if p == 1.0:
        if n <= MAX_SEARCH_DIM:
            margin, witness, evals = _p1_margin(a)
            method = "face-enumeration"
        else:
            margin = diag_dominance_margin(a)
            i = int(np.argmin(np.diag(a) - (np.sum(np.abs(a), 1) - np.abs(np.diag(a)))))
            witness, evals, method = np.eye(n)[i], 0, "row-dominance"
    elif n > MAX_SEARCH_DIM:
        if p != 2.0:
            raise ParameterError(f"interior-p margins are limited to n <= {MAX_SEARCH_DIM}, got n={n}")
        w, vecs = np.linalg.eigh(a)
        margin, witness, evals, method = float(w[0]), _canonical(vecs[:, 0]), 0, "eigh"
    else:
        margin, witness, evals = sphere_minimize(lambda v: ppd_form(a, v, p), n, p, resolution)
        method = "grid+compass"

    return PpdReport(
        p=float(p),
        margin=float(margin) + 0.0,
        witness=np.asarray(witness, dtype=float),
        member_pd=bool(margin > tol),
        member_psd=bool(margin > -tol),
        grid_resolution=int(resolution),
        tol=tol,
        status=_status(margin, tol, exact),
        method=method,
        evaluations=int(evals),
    )


def operator_p_norm(m, p: float, resolution: int = 64):
    """Operator p-norm of a square matrix, plus whether the value is exact.

    Exact at p = 1 (max column sum) and p = 2 (spectral norm).  Otherwise a
    search over S_p gives a lower bound.
    """
    a = np.asarray(m, dtype=float)
    if p == 1.0:
        return float(np.max(np.sum(np.abs(a), axis=0))), True
    if p == 2.0:
        return float(np.linalg.norm(a, 2)), True
    if a.shape[0] > MAX_SEARCH_DIM:
        raise ParameterError(f"interior-p operator norms are limited to n <= {MAX_SEARCH_DIM}")
    val, _, _ = sphere_minimize(lambda v: -p_norm(v @ a.T, p), a.shape[0], p, resolution)
    return float(-val), False


@dataclass
class ContractionRow:
    t: float
    norm_pow: float
    L: float
    bound: float
    holds: bool


@dataclass
class ContractionReport:
    """Check of ||I - tQ||_p^p <= 1 - L t along a grid of t.

    ``certified`` is False for interior p: the norm is then a search-based
    lower bound, so a passing row is necessary but not proven.
    """

    p: float
    margin: float
    q_norm_pow: float
    certified: bool
    rows: list = field(default_factory=list)

    @property
    def all_hold(self) -> bool:
        return all(r.holds for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "margin": self.margin,
            "q_norm_pow": self.q_norm_pow,
            "certified": self.certified,
            "rows": [r.__dict__ for r in self.rows],
        }


def contraction_check(q, p: float, t_grid: Sequence[float], resolution: int = 64) -> ContractionReport:
    mat = as_sym(q)
    a = np.asarray(mat)
    n = mat.n
    margin = ppd_margin(mat, p, resolution).margin
    q_norm, q_exact = operator_p_norm(a, p, resolution)
    q_norm_pow = q_norm**p
    rows, certified = [], q_exact
    for t in t_grid:
        t = float(t)
        if t <= 0:
            raise ParameterError("t values must be positive")
        step_norm, exact = operator_p_norm(np.eye(n) - t * a, p, resolution)
        certified = certified and exact
        norm_pow = step_norm**p
        lin = max(0.0, p * margin - 4.0 * t ** (p - 1.0) * q_norm_pow)
        bound = 1.0 - lin * t
        rows.append(ContractionRow(t, norm_pow, lin, bound, bool(norm_pow <= bound + 1e-12)))
    return ContractionReport(float(p), margin, q_norm_pow, certified, rows)


# ---------------------------------------------------------------------------
# Cone classification


@dataclass
class ConeRow:
    label: str
    p: float
    margin: float
    member_pd: bool
    member_psd: bool
    status: str
    tol: float
    reference: float | None = None
    agrees: bool | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ConeTable:
    rows: list

    def row(self, p: float) -> ConeRow:
        for r in self.rows:
            if r.p == p:
                return r
        raise KeyError(p)

    def ordering_violations(self) -> list:
        """Pairs contradicting S^1_+ within S^p_+ within S^2_+."""
        first, last = self.rows[0], self.rows[-1]
        bad = []
        for r in self.rows[1:-1]:
            if first.member_psd and not r.member_psd:
                bad.append((first.label, r.label))
            if r.member_psd and r.margin > r.tol and not last.member_psd:
                bad.append((r.label, last.label))
        if first.member_psd and not last.member_psd:
            bad.append((first.label, last.label))
        return bad

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "ordering_violations": self.ordering_violations()}


def _label(p: float) -> str:
    return f"S^{p:g}_+"


def classify_cones(q, p_list: Sequence[float] = (), resolution: int = 64) -> ConeTable:
    """Membership of Q in S^1_+, S^p_+ (p in p_list) and S^2_+.

    p = 1 is cross-checked against the row dominance margin and p = 2 against
    the smallest eigenvalue.
    """
    mat = as_sym(q)
    a = np.asarray(mat)
    ps = sorted({1.0, 2.0, *map(float, p_list)})
    rows = []
    for p in ps:
        rep = ppd_margin(mat, p, resolution)
        reference = agrees = None
        if p == 1.0:
            reference = diag_dominance_margin(a)
            agrees = abs(rep.margin - reference) <= 1e-9 * max(1.0, abs(reference))
        elif p == 2.0:
            reference = float(np.linalg.eigvalsh(a)[0])
            agrees = abs(rep.margin - reference) <= 1e-3 * max(abs(reference), 1e-6)
        rows.append(ConeRow(_label(p), p, rep.margin, rep.member_pd, rep.member_psd,
                            rep.status, rep.tol, reference, agrees))
    return ConeTable(rows)
