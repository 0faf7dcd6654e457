"""Seeded stationary random ellipticity fields.

Three families are provided: a constant field, a random checkerboard with
i.i.d. cell values and a Poisson trap field whose inverse moments are
finite only below a critical exponent.  All randomness is counter based,
so a field can be evaluated lazily on any window and from any number of
workers without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, ParameterError

__all__ = [
    "ConstantParams",
    "CheckerboardParams",
    "TrapFieldParams",
    "EllipticityField",
    "MomentEstimate",
    "sample_field",
    "evaluate",
    "estimate_moment",
    "trap_lambda",
    "rasterize",
]

_DEFAULT_WINDOW = 1.0e6
_TRAP_BLOCK = 16.0

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x):
    z = np.asarray(x, dtype=np.uint64) + _GOLD
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _zigzag(i):
    i = np.asarray(i, dtype=np.int64)
    return ((i << 1) ^ (i >> 63)).astype(np.uint64)


def _cell_uniform(seed, cells):
    """Uniform variates in [0, 1), one per integer cell (rows of ``cells``)."""
    with np.errstate(over="ignore"):
        h = _splitmix(np.full(cells.shape[0], seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
        for j in range(cells.shape[1]):
            h = _splitmix(h ^ _zigzag(cells[:, j]))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class ConstantParams:
    value: float = 1.0

    def validate(self):
        if not np.isfinite(self.value) or self.value <= 0:
            raise ParameterError("constant field value must be positive")


@dataclass(frozen=True)
class CheckerboardParams:
    """I.i.d. cell values with a random offset and optional linear blending.

    ``mollify_width=None`` selects the default ``cell_size / 8``.
    """

    cell_size: float = 1.0
    values: tuple = (1.0, 0.25)
    probs: tuple = (0.5, 0.5)
    mollify_width: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))

    @property
    def width(self):
        return self.cell_size / 8.0 if self.mollify_width is None else float(self.mollify_width)

    def validate(self):
        if not self.cell_size > 0:
            raise ParameterError("cell_size must be positive")
        if len(self.values) == 0:
            raise ParameterError("checkerboard needs at least one value")
        if len(self.values) != len(self.probs):
            raise ParameterError("values and probs must have equal length")
        if any(not v > 0 for v in self.values):
            raise ParameterError("checkerboard values must be positive")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
            raise ParameterError("probs must be nonnegative and sum to 1")
        if not 0 <= self.width <= self.cell_size / 2:
            raise ParameterError("mollify_width must lie in [0, cell_size/2]")


@dataclass(frozen=True)
class TrapFieldParams:
    """Poisson traps of depth lambda_k = 1/(k^(1+alpha) log^3(2+k)).

    ``lambda_star=None`` selects alpha/(2d) once the dimension is known.
    """

    alpha: float = 0.5
    a: float = 3.0
    lambda_star: float | None = None
    k_max: int = 1000

    def star(self, d):
        return self.alpha / (2.0 * d) if self.lambda_star is None else float(self.lambda_star)

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ParameterError("trap alpha must lie in (0, 1)")
        if self.a < 0:
            raise ParameterError("trap intensity a must be nonnegative")
        if self.lambda_star is not None and not self.lambda_star > 0:
            raise ParameterError("lambda_star must be positive")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise ParameterError("k_max must be an integer >= 1")


def trap_lambda(k, alpha):
    """Depth of a trap of index ``k`` (vectorized)."""
    k = np.asarray(k, dtype=float)
    return 1.0 / (k ** (1.0 + alpha) * np.log(2.0 + k) ** 3)


@lru_cache(maxsize=64)
def _trap_index_table(alpha, d, k_max):
    k = np.arange(1, k_max + 1, dtype=float)
    w = k ** (-1.0 - d)
    return w.sum(), np.cumsum(w) / w.sum()


@lru_cache(maxsize=4096)
def _trap_block(seed, alpha, a, d, k_max, block):
    """Traps (centers, indices) of one spatial block, counter seeded."""
    total, cdf = _trap_index_table(alpha, d, k_max)
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, 0x7A9, *(int(_zigzag(b)) for b in block)])
    rng = np.random.default_rng(ss)
    n = rng.poisson(a * _TRAP_BLOCK**d * total)
    lo = np.asarray(block, dtype=float) * _TRAP_BLOCK
    centers = lo + _TRAP_BLOCK * rng.random((n, d))
    ks = np.searchsorted(cdf, rng.random(n), side="right") + 1
    ks = np.minimum(ks, k_max)
    centers.setflags(write=False)
    ks.setflags(write=False)
    return centers, ks


@dataclass(frozen=True)
class EllipticityField:
    """An immutable, seeded sample of a stationary ellipticity field."""

    kind: str
    params: object
    seed: int
    dim: int
    lambda_max: float
    window: tuple = dc_field(default=None)
    offset: tuple = dc_field(default=None, repr=False)

    def __call__(self, y):
        return evaluate(self, y)

    def reseed(self, seed):
        return sample_field(self.params, seed, dim=self.dim, window=self.window,
                            lambda_max=self.lambda_max)

    @property
    def lambda_min(self):
        """Deterministic lower bound of the field."""
        p = self.params
        if self.kind == "constant":
            return p.value
        if self.kind == "checkerboard":
            return min(p.values)
        star = p.star(self.dim)
        if p.a == 0:
            return star
        return float(min(star, trap_lambda(p.k_max, p.alpha)))

    @property
    def is_constant(self):
        p = self.params
        if self.kind == "constant":
            return True
        if self.kind == "checkerboard":
            return len(set(p.values)) == 1
        return p.a == 0

    def traps(self, lo, hi):
        """All traps with center in the box [lo, hi]."""
        if self.kind != "trap":
            raise ParameterError("only trap fields carry traps")
        p = self.params
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        b_lo = np.floor(lo / _TRAP_BLOCK).astype(int)
        b_hi = np.floor(hi / _TRAP_BLOCK).astype(int)
        grids = np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(b_lo, b_hi)], indexing="ij")
        blocks = np.stack([g.ravel() for g in grids], axis=1)
        cs, ks = [], []
        for b in blocks:
            c, k = _trap_block(int(self.seed), float(p.alpha), float(p.a), self.dim,
                               int(p.k_max), tuple(int(v) for v in b))
            if len(k):
                inside = np.all((c >= lo) & (c <= hi), axis=1)
                cs.append(c[inside])
                ks.append(k[inside])
        if not cs:
            return np.zeros((0, self.dim)), np.zeros(0, dtype=int)
        return np.concatenate(cs), np.concatenate(ks)


@dataclass(frozen=True)
class MomentEstimate:
    p: float
    value: float
    stderr: float
    n_samples: int
    sublevel: tuple | None = None


def sample_field(params, seed, dim=2, window=None, lambda_max=None):
    """Build an evaluatable field from a parameter block and a seed."""
    if dim not in (1, 2):
        raise ParameterError("dimension must be 1 or 2")
    params.validate()
    seed = int(seed)
    if window is None:
        window = ((-_DEFAULT_WINDOW,) * dim, (_DEFAULT_WINDOW,) * dim)
    window = (tuple(float(v) for v in window[0]), tuple(float(v) for v in window[1]))
    if isinstance(params, ConstantParams):
        kind, top = "constant", params.value
    elif isinstance(params, CheckerboardParams):
        kind, top = "checkerboard", max(params.values)
    elif isinstance(params, TrapFieldParams):
        kind, top = "trap", params.star(dim)
    else:
        raise ParameterError(f"unknown field parameters {type(params).__name__}")
    if lambda_max is None:
        lambda_max = top
    if top > lambda_max * (1 + 1e-15):
        raise ParameterError("field values exceed lambda_max")
    offset = None
    if kind == "checkerboard":
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0xC4E])
        offset = tuple(rng.uniform(0.0, params.cell_size, dim))
    return EllipticityField(kind, params, seed, dim, float(lambda_max), window, offset)


def _as_points(field, y):
    y = np.asarray(y, dtype=float)
    if field.dim == 1:
        scalar = y.ndim == 0
        y = y.reshape(-1, 1)
    else:
        scalar = y.ndim == 1
        y = y.reshape(-1, field.dim)
    lo, hi = field.window
    if np.any(y < np.asarray(lo)) or np.any(y > np.asarray(hi)):
        raise DomainError("query point outside the field window")
    return y, scalar


def _checkerboard(field, y):
    p = field.params
    c = p.cell_size
    z = (y - np.asarray(field.offset)) / c
    base = np.floor(z).astype(np.int64)
    frac = z - base
    vals = np.asarray(p.values)
    cdf = np.cumsum(p.probs)
    cdf[-1] = 1.0

    def cellval(cells):
        u = _cell_uniform(field.seed, cells)
        return vals[np.minimum(np.searchsorted(cdf, u, side="right"), len(vals) - 1)]

    hw = p.width / (2.0 * c)
    if hw == 0:
        return cellval(base)
    # per-axis linear blend with the neighbouring cell near each face
    nb = np.zeros_like(base)
    wgt = np.zeros_like(frac)
    left = frac < hw
    right = frac > 1.0 - hw
    nb[left] = -1
    wgt[left] = 0.5 * (1.0 - frac[left] / hw)
    nb[right] = 1
    wgt[right] = 0.5 * (1.0 - (1.0 - frac[right]) / hw)
    out = np.zeros(y.shape[0])
    d = y.shape[1]
    for corner in range(2**d):
        bits = [(corner >> j) & 1 for j in range(d)]
        cells = base.copy()
        w = np.ones(y.shape[0])
        for j, b in enumerate(bits):
            if b:
                cells[:, j] += nb[:, j]
                w *= wgt[:, j]
            else:
                w *= 1.0 - wgt[:, j]
        m = w > 0
        if np.any(m):
            out[m] += w[m] * cellval(cells[m])
    return out


def _trapfield(field, y):
    p = field.params
    star = p.star(field.dim)
    out = np.full(y.shape[0], star)
    if p.a == 0 or y.shape[0] == 0:
        return out
    centers, ks = field.traps(y.min(axis=0) - 2.0, y.max(axis=0) + 2.0)
    if len(ks) == 0:
        return out
    depth = np.minimum(trap_lambda(ks, p.alpha), star)
    keep = depth < star
    centers, depth = centers[keep], depth[keep]
    if len(depth) == 0:
        return out
    if y.shape[0] * len(depth) <= 2_000_000:
        dist = np.sqrt(((y[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
        theta = depth[None, :] + (star - depth[None, :]) * np.clip(dist - 1.0, 0.0, 1.0)
        return np.minimum(out, theta.min(axis=1))
    tree = cKDTree(y)
    for c, lk, idx in zip(centers, depth, tree.query_ball_point(centers, 2.0)):
        if idx:
            idx = np.asarray(idx)
            r = np.sqrt(((y[idx] - c) ** 2).sum(axis=1))
            out[idx] = np.minimum(out[idx], lk + (star - lk) * np.clip(r - 1.0, 0.0, 1.0))
    return out


def evaluate(field, y):
    """lambda(y) for one point or an array of points (shape (n, d))."""
    pts, scalar = _as_points(field, y)
    if field.kind == "constant":
        out = np.full(pts.shape[0], field.params.value)
    elif field.kind == "checkerboard":
        out = _checkerboard(field, pts)
    else:
        out = _trapfield(field, pts)
    return float(out[0]) if scalar else out


def _trap_moment_exact(params, d, p, mu=None, n_quad=4000):
    """E[lambda^-p] for the trap field from the Poisson void probability.

    P(lambda(0) < l) = 1 - exp(-a |B_1| sum_k k^(-1-d) rho_k(l)^d) where
    rho_k(l) is the radius of the sublevel ball {theta_k < l}.
    """
    star = params.star(d)
    ks = np.arange(1, params.k_max + 1, dtype=float)
    depth = np.minimum(trap_lambda(ks, params.alpha), star)
    wk = ks ** (-1.0 - d)
    ball = np.pi if d == 2 else 2.0
    top = star if mu is None else min(mu, star)
    lo = depth.min()
    if lo >= top:
        base = star**-p if mu is None or mu > star else 0.0
        return base
    ell = np.geomspace(lo, top, n_quad)

    def cdf(l):
        out = np.empty(len(l))
        for s in range(0, len(l), 100):
            lc = l[s:s + 100, None]
            rho = 1.0 + (lc - depth[None, :]) / np.maximum(star - depth[None, :], 1e-300)
            rho = np.where(depth[None, :] < lc, np.minimum(rho, 2.0), 0.0)
            out[s:s + 100] = 1.0 - np.exp(-params.a * ball * (wk[None, :] * rho**d).sum(axis=1))
        return out

    # E[l^-p 1{l<top}] = top^-p P(<top) + int p l^(-p-1) P(<l) dl
    integrand = p * ell ** (-p - 1.0) * cdf(ell)
    val = top**-p * cdf(np.array([top]))[0] + np.trapezoid(integrand, ell)
    if mu is None or mu > star:
        val += star**-p * (1.0 - cdf(np.array([top]))[0])
    return float(val)


def estimate_moment(params, p, n_samples, seed, dim=2, mu=None, method="mc"):
    """Estimate E[lambda^-p] (and the sublevel part below ``mu``).

    ``method="mc"`` averages over uniform points of a large window;
    ``method="exact"`` (trap fields only) integrates the void probability
    of the Poisson process, which resolves the rare deep traps that a
    Monte Carlo average never sees.
    """
    if not p > 0:
        raise ParameterError("p must be positive")
    if int(n_samples) < 1:
        raise ParameterError("n_samples must be >= 1")
    params.validate()
    if method == "exact":
        if not isinstance(params, TrapFieldParams):
            raise ParameterError("exact moments are only available for trap fields")
        val = _trap_moment_exact(params, dim, p)
        sub = None if mu is None else (mu, _trap_moment_exact(params, dim, p, mu=mu))
        return MomentEstimate(p, val, 0.0, int(n_samples), sub)
    if method != "mc":
        raise ParameterError(f"unknown method {method!r}")
    if isinstance(params, ConstantParams):
        v = params.value**-p
        sub = None if mu is None else (mu, v if params.value < mu else 0.0)
        return MomentEstimate(p, v, 0.0, int(n_samples), sub)
    field = sample_field(params, seed, dim=dim)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x3E7])
    side = 1.0e4
    pts = rng.uniform(-side / 2, side / 2, (int(n_samples), dim))
    vals = np.empty(len(pts))
    if field.kind == "trap":
        # scattered points: evaluate block by block so only nearby traps load
        blk = np.floor(pts / _TRAP_BLOCK).astype(np.int64)
        _, inv = np.unique(blk, axis=0, return_inverse=True)
        order = np.argsort(inv.ravel(), kind="stable")
        bounds = np.flatnonzero(np.diff(inv.ravel()[order])) + 1
        for grp in np.split(order, bounds):
            vals[grp] = evaluate(field, pts[grp])
    else:
        for s in range(0, len(pts), 20000):
            vals[s:s + 20000] = evaluate(field, pts[s:s + 20000])
    x = vals**-p
    se = float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("inf")
    sub = None
    if mu is not None:
        sub = (mu, float(np.mean(np.where(vals < mu, x, 0.0))))
    return MomentEstimate(p, float(x.mean()), se, int(n_samples), sub)


def rasterize(field, lo, hi, n):
    """Sample the field on an n^d lattice; returns (points, values)."""
    axes = [np.linspace(a, b, n) for a, b in zip(np.atleast_1d(lo), np.atleast_1d(hi))]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    return pts, evaluate(field, pts)


def with_params(field, **changes):
    """Copy of ``field`` with modified parameters and the same seed."""
    return sample_field(replace(field.params, **changes), field.seed, dim=field.dim,
                        window=field.window)
