"""Effective operator via contact-set densities of obstacle problems.

For a shift matrix M and level alpha, the obstacle problem for F_M - alpha
on a box of side t has a contact set whose volume fraction is close to a
deterministic density once t is large.  The effective value F̄(M) is the
threshold level where this density drops from positive to zero; it is
located by bisection between the easy bounds essinf F(M, .) and
esssup F(M, .).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import HalfspaceIntersection
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .discretization import DiscreteOperator, FrameSet, GridDomain
from .environment import ConstantParams, sample_field
from .errors import BudgetError, DiagnosticError, ParameterError
from .operators import LinearRule, OperatorSpec, as_sym, sym_eigvals
from .solver import SolveConfig, solve_dirichlet, solve_obstacle

__all__ = [
    "DensityCurve",
    "EffectiveEstimate",
    "CorrectorReport",
    "box_domain",
    "contact_density",
    "estimate_fbar",
    "fbar_property_suite",
    "effective_ellipticity",
    "density_uniformity",
    "corrector_sublinearity",
    "two_scale_convergence",
    "EffectiveOperator",
    "spec_key",
]

DEFAULT_BUDGET = 4_000_000


def spec_key(spec):
    """Deterministic text key of a spec (used for caching)."""
    f = spec.field
    parts = [spec.variant, repr(float(spec.Lambda)), f.kind, repr(f.params), str(f.seed),
             str(f.dim), repr(spec.rules), repr(float(spec.f0)), repr(float(spec.f1)),
             repr(spec.shift_M), repr(float(spec.shift_alpha))]
    if spec.user_map is not None:
        parts.append(f"user:{id(spec.user_map)}")
    return "|".join(parts)


def box_domain(t, h, d):
    """The box [0, t]^d on the lattice hZ^d."""
    n = t / h
    if n**d > DEFAULT_BUDGET * 4:
        raise BudgetError("box exceeds the grid budget")
    return GridDomain(d, h, "box", lo=np.zeros(d), hi=np.full(d, float(t)))


def _check_budget(t, h, d, budget):
    if (t / h) ** d > budget:
        raise BudgetError(f"(t/h)^d = {(t / h) ** d:.3g} exceeds the budget {budget}")


@dataclass
class DensityCurve:
    M: np.ndarray
    t: float
    seeds: list
    alphas: list = dc_field(default_factory=list)
    densities: dict = dc_field(default_factory=dict)
    interior: dict = dc_field(default_factory=dict)

    def mean(self, alpha):
        return float(np.mean(self.densities[alpha]))

    def sorted_alphas(self):
        return sorted(self.densities)


@dataclass
class EffectiveEstimate:
    M: np.ndarray
    fbar_lo: float
    fbar_hi: float
    eta: float
    n_seeds: int
    t: float
    curve: DensityCurve
    easy_lo: float
    easy_hi: float
    drift: float = 0.0
    scheme_error: float = 0.0
    coarse: "EffectiveEstimate | None" = None
    monotone_violations: int = 0

    @property
    def mid(self):
        return 0.5 * (self.fbar_lo + self.fbar_hi)

    @property
    def width(self):
        return self.fbar_hi - self.fbar_lo

    @property
    def error_bar(self):
        return self.width + self.drift


@dataclass
class CorrectorReport:
    M: np.ndarray
    alpha: float
    t_list: list
    ratios: list
    per_seed: list

    @property
    def decreasing(self):
        r = self.ratios
        return all(b < a for a, b in zip(r, r[1:]))

    @property
    def decreasing_with_noise(self):
        r = self.ratios
        return all(b <= 1.1 * a for a, b in zip(r, r[1:]))


class _Cache:
    """In-memory stand-in when no cache is supplied."""

    def __init__(self):
        self.store = {}

    def get(self, key):
        return self.store.get(key)

    def set(self, key, value):
        self.store[key] = value


def _density_pair(spec, M, alpha, t, seed, h, cfg, frames, exclude, cache):
    key = ("density", spec_key(spec.unshifted()), repr(np.asarray(M).tolist()), repr(float(alpha)),
           repr(float(t)), int(seed), repr(float(h)), repr(cfg), repr(frames), repr(float(exclude)))
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    s = spec.reseed(seed).shifted(M, alpha)
    dom = box_domain(t, h, spec.dim)
    sol = solve_obstacle(s, dom, cfg, frames)
    out = (sol.density(), sol.density(exclude) if exclude > 0 else sol.density())
    if cache is not None:
        cache.set(key, out)
    return out


def contact_density(spec, M, alpha, t, seed, h=0.25, cfg=None, frames=None, budget=DEFAULT_BUDGET,
                    interior=False, cache=None):
    """Contact measure / |tV| for the obstacle problem of F_M - alpha on [0, t]^d.

    With ``interior=True`` a pair (density, density away from a margin of
    width sqrt(t)) is returned.
    """
    _check_budget(t, h, spec.dim, budget)
    M = as_sym(M, spec.dim)
    pair = _density_pair(spec, M, alpha, t, seed, h, cfg or SolveConfig(), frames,
                         np.sqrt(t), cache)
    return pair if interior else pair[0]


def _easy_bounds(spec, M, t, h, seeds, frames):
    """Range of the discrete F_h(0) for F_M over all sampled boxes."""
    lo, hi, err = np.inf, -np.inf, 0.0
    dom = box_domain(t, h, spec.dim)
    for s in seeds:
        op = DiscreteOperator(spec.reseed(s).shifted(M), dom, frames)
        r = op.residual(np.zeros(dom.size))
        lo, hi = min(lo, r.min()), max(hi, r.max())
        from .operators import eval_F

        exact = eval_F(spec.reseed(s), M, op.x, op.lam)
        err = max(err, float(np.abs(exact - r).max()))
    return float(lo), float(hi), err


def estimate_fbar(spec, M, t, n_seeds=4, eta=0.02, bisect_tol=1e-3, h=0.25, seeds=None,
                  cfg=None, frames=None, refine=False, budget=DEFAULT_BUDGET, cache=None,
                  check_monotone=True):
    """Bisection bracket for F̄(M) from mean contact densities over seeds."""
    if not 0 < eta < 0.5:
        raise ParameterError("eta must lie in (0, 0.5)")
    if not bisect_tol > 0:
        raise ParameterError("bisect_tol must be positive")
    d = spec.dim
    M = as_sym(M, d)
    _check_budget(t, h, d, budget)
    cfg = cfg or SolveConfig()
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    cache = cache if cache is not None else _Cache()
    lo, hi, scheme_err = _easy_bounds(spec, M, t, h, seeds, frames)
    pad = 1e-12 * max(1.0, abs(lo), abs(hi))
    a_lo, a_hi = lo - pad, hi + pad
    curve = DensityCurve(M, t, seeds)
    excl = np.sqrt(t)

    def mean_density(alpha):
        dens, inner = [], []
        for s in seeds:
            pair = _density_pair(spec, M, alpha, t, s, h, cfg, frames, excl, cache)
            dens.append(pair[0])
            inner.append(pair[1])
        curve.alphas.append(alpha)
        curve.densities[alpha] = dens
        curve.interior[alpha] = inner
        return float(np.mean(dens))

    while a_hi - a_lo > bisect_tol:
        mid = 0.5 * (a_lo + a_hi)
        if mean_density(mid) > eta:
            a_lo = mid
        else:
            a_hi = mid
    est = EffectiveEstimate(M, a_lo, a_hi, eta, len(seeds), t, curve, lo, hi,
                            scheme_error=scheme_err)
    est.monotone_violations = _monotone_violations(curve)
    if check_monotone:
        _check_curve(curve)
    if refine:
        _check_budget(2 * t, h, d, budget)
        fine = estimate_fbar(spec, M, 2 * t, eta=eta, bisect_tol=bisect_tol, h=h, seeds=seeds,
                             cfg=cfg, frames=frames, budget=budget, cache=cache,
                             check_monotone=check_monotone)
        fine.coarse = est
        fine.drift = abs(fine.mid - est.mid)
        return fine
    return est


def _monotone_violations(curve):
    al = curve.sorted_alphas()
    bad = 0
    for j in range(len(curve.seeds)):
        col = [curve.densities[a][j] for a in al]
        bad += sum(1 for x, y in zip(col, col[1:]) if y > x + 1e-12)
    return bad


def _check_curve(curve):
    al = curve.sorted_alphas()
    if len(al) < 2:
        return
    m = np.array([np.mean(curve.densities[a]) for a in al])
    n = len(curve.seeds)
    se = np.array([np.std(curve.densities[a], ddof=1) / np.sqrt(n) if n > 1 else 0.0 for a in al])
    for i in range(len(al) - 1):
        if m[i + 1] > m[i] + 3 * max(se[i], se[i + 1]) + 1e-12:
            raise DiagnosticError(
                f"density increases in alpha: {m[i]:.4g} at {al[i]:.6g} -> {m[i + 1]:.4g} at {al[i + 1]:.6g}")


@dataclass
class PropertyReport:
    checks: int
    failures: list

    @property
    def ok(self):
        return not self.failures


def fbar_property_suite(estimator, spec, pairs, scalings=(0.5, 2.0), other=None):
    """Structural checks of F̄ within bracket widths.

    ``estimator(spec, M)`` returns an EffectiveEstimate (it should memoize).
    ``pairs`` are (M, N) with M <= N.  ``other`` is an optional spec that
    dominates ``spec`` pointwise, used for operator monotonicity.
    """
    fails, checks = [], 0
    Lam = spec.Lambda
    for M, N in pairs:
        M, N = as_sym(M, spec.dim), as_sym(N, spec.dim)
        if sym_eigvals(N - M)[0] < -1e-12:
            raise ParameterError("pairs must satisfy M <= N")
        eM, eN = estimator(spec, M), estimator(spec, N)
        slack = eM.error_bar + eN.error_bar
        lo_diff = eM.fbar_lo - eN.fbar_hi
        hi_diff = eM.fbar_hi - eN.fbar_lo
        checks += 2
        if hi_diff < -slack:
            fails.append(("degenerate ellipticity (lower)", M, N, hi_diff))
        if lo_diff > Lam * np.trace(N - M) + slack:
            fails.append(("degenerate ellipticity (upper)", M, N, lo_diff))
        if spec.homogeneous:
            for s in scalings:
                eS = estimator(spec, s * M)
                checks += 1
                if not _overlap(s * eM.fbar_lo, s * eM.fbar_hi, eS.fbar_lo, eS.fbar_hi,
                                s * eM.error_bar + eS.error_bar):
                    fails.append(("homogeneity", M, s, (eS.mid, s * eM.mid)))
        if spec.odd:
            eNeg = estimator(spec, -M)
            checks += 1
            if not _overlap(-eM.fbar_hi, -eM.fbar_lo, eNeg.fbar_lo, eNeg.fbar_hi,
                            eM.error_bar + eNeg.error_bar):
                fails.append(("oddness", M, None, (eNeg.mid, -eM.mid)))
        if other is not None:
            eO = estimator(other, M)
            checks += 1
            if eM.fbar_lo > eO.fbar_hi + eM.error_bar + eO.error_bar:
                fails.append(("operator monotonicity", M, None, (eM.mid, eO.mid)))
    return PropertyReport(checks, fails)


def _overlap(a_lo, a_hi, b_lo, b_hi, slack):
    return a_lo <= b_hi + slack and b_lo <= a_hi + slack


@dataclass
class EllipticityReport:
    lambda0_est: float
    separations: list
    combined_tol: list
    moment: float | None

    @property
    def product(self):
        return None if self.moment is None else self.lambda0_est * self.moment

    def separated(self, factor=3.0):
        return all(s >= factor * c for s, c in zip(self.separations, self.combined_tol))


def effective_ellipticity(estimator, spec, family, moment=None):
    """min over (N, xi, s) of (F̄(N) - F̄(N + s xi xi^T)) / s, bracket-conservative."""
    vals, seps, tols = [], [], []
    for N, xi, s in family:
        N = as_sym(N, spec.dim)
        xi = np.asarray(xi, dtype=float).reshape(spec.dim)
        P = N + s * np.outer(xi, xi)
        P = 0.5 * (P + P.T)
        e0, e1 = estimator(spec, N), estimator(spec, P)
        sep = e0.fbar_lo - e1.fbar_hi
        vals.append(sep / s)
        seps.append(sep)
        tols.append(e0.width + e1.width)
    return EllipticityReport(float(min(vals)), seps, tols, moment)


@dataclass
class UniformityReport:
    density: float
    sub_densities: list
    max_deviation: float


def density_uniformity(spec, M, alpha, t, subwindows, seed, h=0.25, cfg=None, frames=None):
    """Contact density of one solve restricted to subwindows (fractions of [0,1]^d)."""
    d = spec.dim
    dom = box_domain(t, h, d)
    sol = solve_obstacle(spec.reseed(seed).shifted(as_sym(M, d), alpha), dom, cfg, frames)
    x = dom.points[dom.interior_idx]
    mask = sol.contact_mask[dom.interior_idx]
    out = []
    for lo, hi in subwindows:
        lo = np.asarray(lo, dtype=float) * t
        hi = np.asarray(hi, dtype=float) * t
        inside = np.all((x > lo) & (x < hi), axis=1)
        out.append(float(mask[inside].mean()) if inside.any() else float("nan"))
    g = sol.density()
    dev = float(np.nanmax(np.abs(np.array(out) - g))) if out else 0.0
    return UniformityReport(g, out, dev)


def corrector_sublinearity(spec, M, fbar_est, t_list, seeds=(0,), h=0.25, cfg=None, frames=None):
    """sup |v| / t^2 for the zero-boundary solution of F_M - alpha = 0 on [0, t]^d."""
    alpha = fbar_est.mid if isinstance(fbar_est, EffectiveEstimate) else float(fbar_est)
    d = spec.dim
    M = as_sym(M, d)
    per_seed = []
    for s in seeds:
        row = []
        for t in t_list:
            dom = box_domain(t, h, d)
            v = solve_dirichlet(spec.reseed(s).shifted(M, alpha), dom, 0.0, 0.0, cfg, frames)
            row.append(v.sup_norm() / t**2)
        per_seed.append(row)
    ratios = list(np.mean(np.array(per_seed), axis=0))
    return CorrectorReport(M, alpha, list(t_list), [float(r) for r in ratios], per_seed)


@dataclass
class ConvergenceReport:
    eps_list: list
    hs: list
    u_at_0: list
    cauchy: list
    errors: list
    u_bar_at_0: float | None


def _sup_diff(coarse, fine):
    dc = coarse.domain
    idx = dc.interior_idx
    x = dc.points[idx]
    fi = np.array([fine.domain.locate(p) for p in x])
    ok = fine.domain.interior[fi]
    return float(np.max(np.abs(coarse.values[idx][ok] - fine.values[fi[ok]])))


def two_scale_convergence(spec, effective, g, eps_list, seed=0, radius=1.0, h_ratio=8, cfg=None,
                          frames=None, f=0.0, budget=DEFAULT_BUDGET):
    """Solve F(D^2 u, x/eps) = f on B_radius for each eps and compare.

    ``effective`` is an OperatorSpec (e.g. from EffectiveOperator.to_spec)
    or None to skip the comparison with the effective solution.
    """
    d = spec.dim
    eps_list = sorted(eps_list, reverse=True)
    s = spec.reseed(seed)
    sols, hs = [], []
    for eps in eps_list:
        h = eps / h_ratio
        if (2 * radius / h) ** d > budget:
            raise BudgetError(f"eps = {eps} needs more than {budget} grid points")
        dom = GridDomain(d, h, "ball", radius=radius)
        sols.append(solve_dirichlet(s, dom, f, g, cfg, frames, eps=eps))
        hs.append(h)
    cauchy = [_sup_diff(a, b) for a, b in zip(sols, sols[1:])]
    errors, ubar0 = [], None
    if effective is not None:
        dom = sols[-1].domain
        eff_frames = frames
        ubar = solve_dirichlet(effective, dom, f, g, cfg, eff_frames)
        errors = [_sup_diff(u, ubar) if u.domain != dom else
                  float(np.max(np.abs(u.interior_values - ubar.interior_values))) for u in sols]
        ubar0 = ubar.at(np.zeros(d))
    return ConvergenceReport(eps_list, hs, [u.at(np.zeros(d)) for u in sols], cauchy, errors, ubar0)


class EffectiveOperator(BaseEstimator):
    """Tabulated effective operator with a monotone concave interpolant.

    ``fit`` estimates F̄ at the given matrices (or takes the values from
    ``y``) and builds the polytope of coefficients a with
    -tr(a M_i) + b >= F̄(M_i) and lambda_floor <= a <= Lambda on the
    diagonal.  ``predict`` returns the minimum over its vertices, i.e. the
    smallest concave degenerate-elliptic function through the table.
    """

    def __init__(self, spec=None, t=8.0, n_seeds=4, eta=0.02, bisect_tol=2e-3, h=0.25,
                 lambda_floor=1e-3, Lambda=None, frames=None, homogeneous=None):
        self.spec = spec
        self.t = t
        self.n_seeds = n_seeds
        self.eta = eta
        self.bisect_tol = bisect_tol
        self.h = h
        self.lambda_floor = lambda_floor
        self.Lambda = Lambda
        self.frames = frames
        self.homogeneous = homogeneous

    def _matrices(self, X, d):
        X = check_array(X, ensure_2d=True)
        if X.shape[1] != d * d:
            raise ParameterError(f"expected {d * d} columns (row-major {d}x{d} matrices)")
        Ms = X.reshape(-1, d, d)
        if not np.allclose(Ms, np.swapaxes(Ms, 1, 2), atol=0, rtol=0):
            raise ParameterError("matrices must be symmetric")
        return Ms

    def fit(self, X, y=None):
        d = self.spec.dim if self.spec is not None else int(round(np.sqrt(np.shape(X)[1])))
        Ms = self._matrices(X, d)
        if y is None:
            if self.spec is None:
                raise ParameterError("either a spec or target values are required")
            ests = [estimate_fbar(self.spec, M, self.t, self.n_seeds, self.eta, self.bisect_tol,
                                  self.h, frames=self.frames) for M in Ms]
            vals = np.array([e.mid for e in ests])
            self.estimates_ = ests
        else:
            vals = np.asarray(y, dtype=float)
            if vals.ndim == 2:
                vals = vals.mean(axis=1)
            if vals.shape != (len(Ms),):
                raise ParameterError("y must hold one value (or bracket) per matrix")
        Lam = self.Lambda if self.Lambda is not None else (
            self.spec.Lambda if self.spec is not None else 1.0)
        homog = self.homogeneous if self.homogeneous is not None else (
            self.spec.homogeneous if self.spec is not None else True)
        self.dim_ = d
        self.Lambda_ = float(Lam)
        self.table_ = (Ms.copy(), vals.copy())
        self.vertices_, self.offsets_, self.defect_ = _coefficient_vertices(
            Ms, vals, self.lambda_floor, float(Lam), homog)
        return self

    def predict(self, X):
        check_is_fitted(self, "vertices_")
        Ms = self._matrices(X, self.dim_)
        vals = -np.einsum("vij,nji->nv", self.vertices_, Ms) + self.offsets_[None, :]
        return vals.min(axis=1)

    def to_spec(self):
        """bellman_min spec (constant field) realizing the interpolant."""
        check_is_fitted(self, "vertices_")
        field = sample_field(ConstantParams(1.0), 0, dim=self.dim_)
        rules = tuple(LinearRule(0.5 * (a + a.T), offset=float(b), scale_by_field=False)
                      for a, b in zip(self.vertices_, self.offsets_))
        Lam = max(self.Lambda_, float(max(sym_eigvals(a)[-1] for a in self.vertices_)))
        return OperatorSpec("bellman_min", Lam, field, rules)


def _coefficient_vertices(Ms, vals, floor, Lam, homogeneous):
    d = Ms.shape[1]
    if d == 1:
        m = Ms[:, 0, 0]
        lo, hi = floor, Lam
        neg, pos = m < 0, m > 0
        if neg.any():
            lo = max(lo, float(np.max(vals[neg] / -m[neg])))
        if pos.any():
            hi = min(hi, float(np.min(-vals[pos] / m[pos])))
        defect = max(0.0, lo - hi)
        if lo > hi:
            lo = hi = 0.5 * (lo + hi)
        verts = np.array([[[lo]], [[hi]]]) if hi > lo else np.array([[[lo]]])
        return verts, np.zeros(len(verts)), defect
    # unknowns (a11, a12, a22[, b]); halfspaces  A z + c <= 0
    rows = np.stack([Ms[:, 0, 0], 2 * Ms[:, 0, 1], Ms[:, 1, 1]], axis=1)
    nb = 0 if homogeneous else 1
    if nb:
        rows = np.hstack([rows, -np.ones((len(rows), 1))])
    nz = 3 + nb
    G = [rows]
    c = [vals.copy()]
    box = np.zeros((0, nz))
    lims = []
    for j, (lo, hi) in enumerate([(floor, Lam), (-Lam, Lam), (floor, Lam)]):
        e = np.zeros(nz)
        e[j] = 1
        lims += [(-e, lo), (e, -hi)]
    if nb:
        bmax = float(np.abs(vals).max() + Lam * np.abs(Ms).sum(axis=(1, 2)).max() + 1.0)
        e = np.zeros(nz)
        e[3] = 1
        lims += [(-e, -bmax), (e, -bmax)]
    box = np.array([l[0] for l in lims])
    cb = np.array([l[1] for l in lims])
    # smallest uniform downward shift of the data making the polytope nonempty
    A_ub = np.vstack([np.hstack([rows, -np.ones((len(rows), 1))]), np.hstack([box, np.zeros((len(box), 1))])])
    b_ub = np.concatenate([-vals, -cb])
    cost = np.zeros(nz + 1)
    cost[-1] = 1.0
    lp = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * nz + [(0, None)])
    defect = float(lp.x[-1]) if lp.success else float("inf")
    shifted = vals - defect - 1e-9 * max(1.0, np.abs(vals).max())
    H = np.vstack([np.hstack([rows, shifted[:, None]]), np.hstack([box, cb[:, None]])])
    norm = np.linalg.norm(H[:, :-1], axis=1)
    cheb = np.zeros(nz + 1)
    cheb[-1] = -1.0
    lp2 = linprog(cheb, A_ub=np.hstack([H[:, :-1], norm[:, None]]), b_ub=-H[:, -1],
                  bounds=[(None, None)] * nz + [(0, None)])
    if not lp2.success:
        raise DiagnosticError("effective coefficient polytope is empty")
    interior = lp2.x[:-1]
    if lp2.x[-1] <= 1e-7:
        # the table pins the coefficient down (e.g. exactly linear data)
        pts = interior[None, :]
    else:
        hs = HalfspaceIntersection(H, interior)
        pts = np.unique(np.round(hs.intersections, 12), axis=0)
    verts = np.stack([np.array([[p[0], p[1]], [p[1], p[2]]]) for p in pts])
    offs = pts[:, 3] if nb else np.zeros(len(pts))
    return verts, offs, defect
