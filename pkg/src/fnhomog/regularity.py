"""Unit-scale regularity checks for P^+/P^- with a degenerate lambda(x).

Every check manufactures its sub/supersolutions as exact discrete
solutions of an equation with a controlled right side, then verifies the
inequality on the lattice.  Fields are evaluated at x/eps.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import ConvexHull

from .discretization import FrameSet, GridDomain, GridFunction
from .errors import ParameterError
from .operators import OperatorSpec
from .solver import SolveConfig, convex_envelope, solve_dirichlet

__all__ = [
    "ball_volume",
    "sublevel_integral",
    "lower_envelope",
    "ABPInstance",
    "ABPReport",
    "abp_check",
    "BarrierConstants",
    "BarrierRecord",
    "BarrierReport",
    "barrier_check",
    "SingularProfileReport",
    "singular_profile_check",
    "ContactReport",
    "contact_lowerbound_check",
    "OscillationRecord",
    "OscillationReport",
    "oscillation_decay",
]


def ball_volume(d, r=1.0):
    return (2.0 * r) if d == 1 else np.pi * r * r


def _lam(field, x, eps):
    return np.atleast_1d(field(x / eps)).astype(float)


def sublevel_integral(field, mu, h=1.0 / 128, eps=1.0, radius=1.0):
    """Riemann sum of lambda^{-d} over B_radius intersected with {lambda < mu}."""
    dom = GridDomain(field.dim, h, "ball", radius=radius)
    x = dom.points[dom.interior_idx]
    lam = _lam(field, x, eps)
    low = lam < mu
    return float(np.sum(lam[low] ** (-field.dim)) * h**field.dim)


def _fourier_boundary(rng, d, n_modes=4, amp=1.0):
    """Random smooth boundary data on the unit sphere with values in [-amp, amp]."""
    if d == 1:
        v = rng.uniform(-amp, amp, 2)
        return lambda p: np.where(np.asarray(p)[:, 0] < 0, v[0], v[1])
    a = rng.normal(size=n_modes) / np.arange(1, n_modes + 1)
    b = rng.normal(size=n_modes) / np.arange(1, n_modes + 1)
    norm = np.abs(a).sum() + np.abs(b).sum()
    a, b = amp * a / norm, amp * b / norm
    m = np.arange(1, n_modes + 1)

    def g(p):
        th = np.arctan2(p[:, 1], p[:, 0])[:, None]
        return (a * np.cos(m * th) + b * np.sin(m * th)).sum(axis=1)

    return g


def _bumps(rng, d, n=3, amp=1.0):
    """Nonnegative smooth function made of a few Gaussian bumps, max <= amp."""
    c = rng.uniform(-0.7, 0.7, (n, d))
    w = rng.uniform(0.15, 0.5, n)
    s = rng.uniform(0.2, 1.0, n)
    s = amp * s / s.sum()

    def f(x):
        r2 = ((x[:, None, :] - c[None]) ** 2).sum(axis=2)
        return (s * np.exp(-r2 / (2 * w * w))).sum(axis=1)

    return f


# --- ABP -----------------------------------------------------------------


def lower_envelope(u, method="hull", cfg=None, frames=None):
    """Contact mask of the convex envelope of -u_- (flat lattice boolean).

    ``hull`` takes the vertices and coplanar points of the lower convex hull
    of the graph; ``stencil`` solves the discrete envelope equation.
    """
    dom = u.domain
    act = np.flatnonzero(dom.active)
    w = np.minimum(u.values[act], 0.0)
    mask = np.zeros(dom.size, dtype=bool)
    if method == "stencil":
        g = GridFunction(dom, np.where(dom.active, np.minimum(u.values, 0.0), 0.0))
        gam = convex_envelope(g, cfg, frames)
        tol = 1e-8 * max(1.0, float(np.abs(w).max()))
        mask[act] = gam.values[act] >= w - tol
        return mask & dom.interior
    if not np.any(w < 0):
        mask[dom.interior_idx] = True
        return mask
    pts = np.column_stack([dom.points[act], w])
    hull = ConvexHull(pts, qhull_options="Qc")
    lower = hull.equations[:, -2] < -1e-12
    on = np.zeros(len(act), dtype=bool)
    on[np.unique(hull.simplices[lower])] = True
    if len(hull.coplanar):
        cp = hull.coplanar
        on[cp[lower[cp[:, 1]], 0]] = True
    mask[act[on]] = True
    return mask & dom.interior


@dataclass(frozen=True)
class ABPInstance:
    seed: int
    u_minus_0: float
    bound: float
    slack: float
    contact_points: int

    @property
    def ratio(self):
        return self.u_minus_0 / max(self.bound + self.slack, 1e-300)

    @property
    def ok(self):
        return self.u_minus_0 <= self.bound + self.slack


@dataclass(frozen=True)
class ABPReport:
    instances: tuple
    h: float

    @property
    def n_violations(self):
        return sum(not i.ok for i in self.instances)

    @property
    def worst_ratio(self):
        return max((i.ratio for i in self.instances), default=0.0)


def abp_bound(u, f, lam, method="hull"):
    """(|B_1|^{-1} sum_{contact} h^d lambda^{-d} f_+^d)^{1/d} on the lattice."""
    dom = u.domain
    mask = lower_envelope(u, method)
    idx = np.flatnonzero(mask)
    d = dom.d
    integrand = lam[idx] ** (-d) * np.clip(f[idx], 0.0, None) ** d
    val = (np.sum(integrand) * dom.h**d / ball_volume(d)) ** (1.0 / d)
    return float(val), len(idx)


def abp_check(field, n_instances=50, seed=0, h=1.0 / 128, eps=1.0 / 8, Lambda=1.0,
              f_amp=1.0, g_amp=0.3, C=1.0, method="hull", cfg=None, frames=None):
    """ABP inequality on manufactured solutions of P^+(D^2 u) = -f, f >= 0.

    Boundary data are nonnegative; ``C`` scales the slack C h^{1/2} |u|_inf.
    """
    d = field.dim
    dom = GridDomain(d, h, "ball")
    rng = np.random.default_rng([int(seed), 0xAB9])
    spec = OperatorSpec("pucci_plus", Lambda, field)
    out = []
    for i in range(n_instances):
        s = int(rng.integers(2**31))
        r = np.random.default_rng(s)
        fld = field.reseed(s) if not field.is_constant else field
        sp_i = spec.with_field(fld)
        f = _bumps(r, d, amp=f_amp)
        g0 = _fourier_boundary(r, d, amp=0.5 * g_amp)
        g = lambda p, g0=g0: g0(p) + 0.5 * g_amp
        u = solve_dirichlet(sp_i, dom, lambda x: -f(x), g, cfg=cfg, frames=frames, eps=eps)
        fl = np.zeros(dom.size)
        lam = np.ones(dom.size)
        ii = dom.interior_idx
        fl[ii] = f(dom.points[ii])
        lam[ii] = _lam(fld, dom.points[ii], eps)
        bound, n_c = abp_bound(u, fl, lam, method)
        um0 = max(-u.at(np.zeros(d) if d > 1 else 0.0), 0.0)
        slack = C * np.sqrt(h) * max(u.sup_norm("active"), 1e-300)
        out.append(ABPInstance(s, float(um0), bound, float(slack), n_c))
    return ABPReport(tuple(out), h)


# --- barrier -------------------------------------------------------------


@dataclass(frozen=True)
class BarrierConstants:
    r: float = 0.25
    mu: float = 0.5
    Lambda: float = 1.0
    d: int = 2

    def __post_init__(self):
        if not 0 < self.r < 1:
            raise ParameterError("inner radius must lie in (0, 1)")
        if not 0 < self.mu <= self.Lambda:
            raise ParameterError("need 0 < mu <= Lambda")

    @property
    def alpha_exp(self):
        return (2 * (self.d - 1) * self.Lambda + 2) / self.mu

    @property
    def beta(self):
        return (4.0 / self.r) ** self.alpha_exp

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        rad = np.linalg.norm(x.reshape(-1, self.d), axis=1)
        return 2.0**self.alpha_exp * rad ** (-self.alpha_exp)

    def hessian_eigs(self, x):
        """(radial, tangential) Hessian eigenvalues of phi at x."""
        a = self.alpha_exp
        rad = np.linalg.norm(np.asarray(x, dtype=float).reshape(-1, self.d), axis=1)
        base = a * 2.0**a * rad ** (-a - 2)
        return np.column_stack([(a + 1) * base, -base])

    def hessian(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        rad = np.linalg.norm(x, axis=1)
        xh = x / rad[:, None]
        ev = self.hessian_eigs(x)
        P = xh[:, :, None] * xh[:, None, :]
        return ev[:, 0, None, None] * P + ev[:, 1, None, None] * (np.eye(self.d) - P)


def _frame_pucci_plus(fun, z, h, lam, Lambda, frames):
    """Frame-extremal discrete P^+ of a closed-form function at points z."""
    best = np.full(len(z), -np.inf)
    f0 = fun(z)
    for fr in frames.frames:
        tot = np.zeros(len(z))
        for e in fr:
            e = np.asarray(e, dtype=float)
            s = (fun(z + h * e) - 2 * f0 + fun(z - h * e)) / (h * h * (e @ e))
            tot += -np.where(s > 0, lam, Lambda) * s
        best = np.maximum(best, tot)
    return best


@dataclass(frozen=True)
class BarrierRecord:
    seed: int
    sublevel: float
    gated: bool
    min_u: float
    subsolution_residual: float

    @property
    def positive(self):
        return self.min_u > 0


@dataclass(frozen=True)
class BarrierReport:
    constants: BarrierConstants
    gate: float
    records: tuple
    sweep: dict = dc_field(default_factory=dict)

    @property
    def passing(self):
        return [r for r in self.records if r.gated]

    @property
    def all_positive(self):
        return all(r.positive for r in self.passing)

    @property
    def max_subsolution_residual(self):
        return max((r.subsolution_residual for r in self.passing), default=-np.inf)


def barrier_check(field, consts=None, n_seeds=20, seed=0, h=1.0 / 128, eps=1.0,
                  delta_gate=None, n_centers=4, cfg=None, frames=None, max_draws=None):
    """Barrier positivity on the annulus B_1 minus B_r for gate-passing seeds.

    Seeds are drawn until ``n_seeds`` of them pass the gate (at most
    ``max_draws`` draws, default 10 n_seeds); gate-failing draws are kept
    as records with ``gated=False``.

    ``delta_gate`` defaults to 0.1 |B_1|; a seed passes the gate when its
    sublevel integral is below delta_gate r^d.  For each seed the translated
    singular profile phi(.-y), y in B_{r/2}, is checked to satisfy
    P^+_h(phi) < -1 wherever lambda >= mu and the stencil avoids B_{r/2}(y).
    """
    d = field.dim
    c = consts or BarrierConstants(d=d)
    if c.d != d:
        raise ParameterError("constants and field dimensions differ")
    delta_gate = 0.1 * ball_volume(d) if delta_gate is None else float(delta_gate)
    gate = delta_gate * c.r**d
    frames = FrameSet.default(d) if frames is None else frames
    dom = GridDomain(d, h, "annulus", radius=1.0, inner_radius=c.r)
    mid = 0.5 * (1.0 + c.r)
    g = lambda p: np.where(np.linalg.norm(p, axis=1) < mid, c.beta, 0.0)
    test = dom.interior_idx[np.linalg.norm(dom.points[dom.interior_idx], axis=1) < 1 - c.r]
    reach = h * max(np.abs(np.asarray(e)).max() for e in frames.directions) * np.sqrt(d)
    rng = np.random.default_rng([int(seed), 0xBA5])
    max_draws = 10 * n_seeds if max_draws is None else int(max_draws)
    records, subl = [], []
    while sum(r.gated for r in records) < n_seeds and len(records) < max_draws:
        s = int(rng.integers(2**31))
        fld = field.reseed(s) if not field.is_constant else field
        sl = sublevel_integral(fld, c.mu, h, eps)
        subl.append(sl)
        gated = sl < gate
        spec = OperatorSpec("pucci_plus", c.Lambda, fld)
        u = solve_dirichlet(spec, dom, -1.0, g, cfg=cfg, frames=frames, eps=eps)
        min_u = float(u.values[test].min())
        z = dom.points[dom.interior_idx]
        lam = _lam(fld, z, eps)
        r2 = np.random.default_rng(s)
        worst = -np.inf
        for _ in range(n_centers):
            ang = r2.uniform(0, 2 * np.pi)
            y = r2.uniform(0, c.r / 2) * (np.array([np.cos(ang), np.sin(ang)]) if d == 2
                                          else np.array([np.sign(np.cos(ang))]))
            keep = (np.linalg.norm(z - y, axis=1) > c.r / 2 + reach) & (lam >= c.mu)
            if not keep.any():
                continue
            res = _frame_pucci_plus(lambda p: c.phi(p - y), z[keep], h, lam[keep], c.Lambda, frames)
            worst = max(worst, float((res + 1.0).max()))
        records.append(BarrierRecord(s, sl, bool(gated), min_u, worst))
    sweep = {}
    for dg in (0.02, 0.1, 0.5):
        thr = dg * ball_volume(d) * c.r**d
        sweep[dg] = int(sum(v < thr for v in subl))
    return BarrierReport(c, gate, tuple(records), sweep)


@dataclass(frozen=True)
class SingularProfileReport:
    h_list: tuple
    errors: tuple

    @property
    def orders(self):
        e = np.asarray(self.errors)
        hs = np.asarray(self.h_list)
        return tuple(np.log(e[:-1] / e[1:]) / np.log(hs[:-1] / hs[1:]))


def singular_profile_check(consts=None, h_list=(1 / 32, 1 / 64, 1 / 128), n_points=64,
                           rmin=0.5, rmax=1.5, seed=0, frames=None):
    """Max relative error of D_e phi against e^T D^2 phi e / |e|^2 per h."""
    c = consts or BarrierConstants()
    frames = FrameSet.default(c.d) if frames is None else frames
    rng = np.random.default_rng(seed)
    if c.d == 2:
        th = rng.uniform(0, 2 * np.pi, n_points)
        rad = rng.uniform(rmin, rmax, n_points)
        x = np.column_stack([rad * np.cos(th), rad * np.sin(th)])
    else:
        x = rng.uniform(rmin, rmax, (n_points, 1)) * rng.choice([-1, 1], (n_points, 1))
    H = c.hessian(x)
    errs = []
    for h in h_list:
        worst = 0.0
        for e in frames.directions:
            e = np.asarray(e, dtype=float)
            disc = (c.phi(x + h * e) - 2 * c.phi(x) + c.phi(x - h * e)) / (h * h * (e @ e))
            exact = np.einsum("i,nij,j->n", e, H, e) / (e @ e)
            scale = np.abs(c.hessian_eigs(x)).max(axis=1)
            worst = max(worst, float(np.max(np.abs(disc - exact) / scale)))
        errs.append(worst)
    return SingularProfileReport(tuple(h_list), tuple(errs))


# --- contact lower bound -------------------------------------------------


@dataclass(frozen=True)
class ContactReport:
    ratio: float
    delta_c: float
    n_vertices: int
    n_touch: int
    measure_V: float

    @property
    def ok(self):
        return self.n_vertices == 0 or self.ratio >= self.delta_c


def contact_lowerbound_check(u, lam, a=1.0, vertices=None, cell=None, Lambda=1.0,
                             slack=0.5, chunk=256):
    """Touching points of z -> u(z) + a/2 |z - y|^2 over the vertices y.

    ``lam`` is a lattice array or a callable of the points.  Vertices whose
    minimum sits on the boundary layer are discarded; |V| counts the kept
    ones times ``cell``^d.  The threshold is slack (1/a + Lambda d)^{-d}.
    """
    if a < 1:
        raise ParameterError("opening a must be >= 1")
    dom = u.domain
    d = dom.d
    cell = dom.h if cell is None else float(cell)
    delta = slack * (1.0 / a + Lambda * d) ** (-d)
    if vertices is None or len(vertices) == 0:
        return ContactReport(np.inf, delta, 0, 0, 0.0)
    V = np.asarray(vertices, dtype=float).reshape(-1, d)
    act = np.flatnonzero(dom.active)
    z = dom.points[act]
    uz = u.values[act]
    interior = dom.interior[act]
    touched = np.zeros(len(act), dtype=bool)
    kept = 0
    for i in range(0, len(V), chunk):
        y = V[i:i + chunk]
        val = uz[None, :] + 0.5 * a * ((z[None, :, :] - y[:, None, :]) ** 2).sum(axis=2)
        m = val.min(axis=1, keepdims=True)
        tie = val <= m + 1e-12 * max(1.0, float(np.abs(m).max()))
        good = ~np.any(tie & ~interior[None, :], axis=1)
        kept += int(good.sum())
        touched |= np.any(tie[good], axis=0)
    lam_vals = lam(z[touched]) if callable(lam) else np.asarray(lam)[act[touched]]
    integral = float(np.sum(np.asarray(lam_vals, dtype=float) ** (-d)) * dom.h**d)
    measV = kept * cell**d
    ratio = integral / measV if measV > 0 else np.inf
    return ContactReport(ratio, delta, kept, int(touched.sum()), measV)


# --- decay of oscillation ------------------------------------------------


@dataclass(frozen=True)
class OscillationRecord:
    seed: int
    operator: str
    level: float
    osc_outer: float
    osc_inner: float
    alpha_rhs: float
    gated: bool
    sublevel: float

    @property
    def tau(self):
        """Smallest tau with osc_inner <= tau osc_outer + alpha."""
        return max(self.osc_inner - self.alpha_rhs, 0.0) / max(self.osc_outer, 1e-300)


@dataclass(frozen=True)
class OscillationReport:
    records: tuple
    gate: float

    @property
    def passing(self):
        return [r for r in self.records if r.gated]

    @property
    def excluded(self):
        return sum(1 for r in self.records if not r.gated)

    @property
    def tau(self):
        return max((r.tau for r in self.passing), default=0.0)


def _osc(u, idx):
    v = u.values[idx]
    return float(v.max() - v.min())


def oscillation_decay(field, n_seeds=20, seed=0, h=1.0 / 128, eps=1.0 / 8, mu=0.25,
                      Lambda=1.0, alpha_rhs=0.05, levels=(1.0,), delta_gate=None,
                      operators=("pucci_minus", "pucci_plus"), seeds=None, gate=True,
                      cfg=None, frames=None):
    """Oscillation of F(D^2 u) = g on B_1 with |g| <= alpha_rhs, random boundary data.

    For each level rho the record compares osc over B_rho and B_{rho/8}
    with right-side bound alpha_rhs rho^2.  Seeds whose sublevel integral
    exceeds delta_gate (default 0.1 |B_1|) are kept but flagged.
    """
    d = field.dim
    delta_gate = 0.1 * ball_volume(d) if delta_gate is None else float(delta_gate)
    dom = GridDomain(d, h, "ball")
    act = np.flatnonzero(dom.active)
    rad = np.linalg.norm(dom.points[act], axis=1)
    explicit = seeds is not None
    rng = np.random.default_rng([int(seed), 0x05C])
    seeds = list(seeds) if explicit else []
    out, n_pass, i = [], 0, 0
    while True:
        if explicit:
            if i >= len(seeds):
                break
            s = int(seeds[i])
        else:
            # draw until n_seeds pass the gate, at most 10 n_seeds draws
            if n_pass >= n_seeds or i >= 10 * n_seeds:
                break
            s = int(rng.integers(2**31))
        i += 1
        fld = field.reseed(s) if not field.is_constant else field
        sl = sublevel_integral(fld, mu, h, eps)
        n_pass += int((sl < delta_gate) or not gate)
        r = np.random.default_rng([s, 1])
        gb = _fourier_boundary(r, d, amp=1.0)
        k = r.normal(size=(3, d)) * 3.0
        ph = r.uniform(0, 2 * np.pi, 3)
        rhs = lambda x: alpha_rhs * np.clip(np.cos(x @ k.T + ph).mean(axis=1), -1, 1)
        for op_name in operators:
            spec = OperatorSpec(op_name, Lambda, fld)
            u = solve_dirichlet(spec, dom, rhs, gb, cfg=cfg, frames=frames, eps=eps)
            for rho in levels:
                outer = act[rad <= rho + 1e-12] if rho < 1 else act
                inner = act[rad <= rho / 8 + 1e-12]
                out.append(OscillationRecord(s, op_name, float(rho), _osc(u, outer),
                                             _osc(u, inner), alpha_rhs * rho**2,
                                             (sl < delta_gate) or not gate, sl))
    return OscillationReport(tuple(out), delta_gate)
