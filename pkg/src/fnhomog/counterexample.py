"""Blow-up of u^eps(0) on the heavy-tailed trap field, and the trap certificate.

Problem: P^-_{lambda(x/eps),1}(D^2 u) = 1 in B_1, u = 0 on the boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .discretization import DiscreteOperator, FrameSet, GridDomain
from .environment import EllipticityField, TrapFieldParams, sample_field, trap_lambda
from .errors import BudgetError, ParameterError, PreconditionError
from .operators import OperatorSpec
from .regularity import ball_volume
from .solver import SolveConfig, solve_dirichlet

__all__ = [
    "counterexample_constants",
    "CounterexampleRun",
    "run_counterexample",
    "phi_ce",
    "TrapSubsolutionCert",
    "certify_trap_subsolution",
    "qualifying_traps",
]


def counterexample_constants(alpha, d=2):
    """(lambda_*, beta, a, q) of the explicit trap construction."""
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    lam_star = alpha / (2.0 * d)
    beta = 1.0 - 2.0 * d * lam_star
    return lam_star, beta, (1.0 - beta) / 2.0, 3.0 - (1.0 + alpha) / 2.0


@dataclass(frozen=True)
class CounterexampleRun:
    alpha: float
    d: int
    seed: int
    eps_list: tuple
    u0: tuple
    h: tuple
    traps_found: tuple
    seconds: tuple

    @property
    def lambda_star(self):
        return counterexample_constants(self.alpha, self.d)[0]

    @property
    def beta_ce(self):
        return counterexample_constants(self.alpha, self.d)[1]

    @property
    def q(self):
        return counterexample_constants(self.alpha, self.d)[3]

    def nondecreasing(self, slack=0.02):
        """u^eps(0) never drops by more than ``slack`` (relative) as eps shrinks."""
        u = np.asarray(self.u0)
        return bool(np.all(u[1:] >= (1.0 - slack) * u[:-1]))

    @property
    def growth(self):
        return self.u0[-1] / self.u0[0] - 1.0

    @property
    def exponent(self):
        """Slope of log u^eps(0) against log log(1/eps)."""
        x = np.log(np.log(1.0 / np.asarray(self.eps_list)))
        if len(x) < 2:
            return float("nan")
        return float(np.polyfit(x, np.log(self.u0), 1)[0])

    def rows(self):
        return [dict(seed=self.seed, eps=e, u_eps_at_0=u, h=h, traps_found=n)
                for e, u, h, n in zip(self.eps_list, self.u0, self.h, self.traps_found)]


def _trap_field(params, seed, d):
    if not isinstance(params, TrapFieldParams):
        raise ParameterError("the counterexample needs trap field parameters")
    return sample_field(params, seed, dim=d)


def _count_traps(field, radius):
    p = field.params
    c, k = field.traps(-radius - 2.0 * np.ones(field.dim), radius + 2.0 * np.ones(field.dim))
    deep = np.minimum(trap_lambda(k, p.alpha), p.star(field.dim)) < p.star(field.dim)
    near = np.linalg.norm(c, axis=1) < radius + 2.0
    return int(np.sum(deep & near))


def run_counterexample(params, eps_list=(1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128), seed=0,
                       d=2, h_ratio=8, K=2, budget=2_000_000, cfg=None, log=None):
    """u^eps(0) along a decreasing list of eps with h = eps / h_ratio.

    ``budget`` caps the number of interior unknowns of the finest grid;
    the check happens before any solve.  Peak memory is about 1.6 kB per
    unknown, so the default keeps the finest solve near 3 GB.
    """
    eps_list = tuple(float(e) for e in eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ParameterError("eps_list must be strictly decreasing")
    if h_ratio < 8:
        raise ParameterError("need h <= eps/8 to resolve the traps")
    need = ball_volume(d) / (eps_list[-1] / h_ratio) ** d
    if need > budget:
        raise BudgetError(f"finest grid needs about {need:.3g} unknowns, budget {budget}")
    field = _trap_field(params, seed, d)
    spec = OperatorSpec("pucci_minus", 1.0, field)
    frames = FrameSet.default(d, K)
    cfg = cfg or SolveConfig()
    u0, hs, nt, secs = [], [], [], []
    origin = np.zeros(d) if d > 1 else 0.0
    for eps in eps_list:
        t0 = time.perf_counter()
        h = eps / h_ratio
        dom = GridDomain(d, h, "ball")
        u = solve_dirichlet(DiscreteOperator(spec, dom, frames, eps=eps), dom, 1.0, 0.0, cfg=cfg)
        u0.append(u.at(origin))
        hs.append(h)
        nt.append(_count_traps(field, 1.0 / eps) if params.a > 0 else 0)
        secs.append(time.perf_counter() - t0)
        if log is not None:
            log(f"eps={eps:g} n={dom.n_interior} u0={u0[-1]:.6g} ({secs[-1]:.1f}s)")
    return CounterexampleRun(float(params.alpha), d, int(seed), eps_list, tuple(u0),
                             tuple(hs), tuple(nt), tuple(secs))


# --- the explicit trap subsolution ----------------------------------------


def phi_ce(x, alpha, d=2):
    """-(a + |x|^2)^{beta/2} for points x of shape (n, d)."""
    _, beta, a, _ = counterexample_constants(alpha, d)
    r2 = (np.asarray(x, dtype=float).reshape(-1, d) ** 2).sum(axis=1)
    return -((a + r2) ** (beta / 2))


def _frame_pucci(sign, fun, z, h, lam, Lambda, frames):
    """Frame-extremal discrete P^- (min over frames) or P^+ (max)."""
    f0 = fun(z)
    best = np.full(len(z), np.inf if sign == "-" else -np.inf)
    for fr in frames.frames:
        tot = np.zeros(len(z))
        for e in fr:
            e = np.asarray(e, dtype=float)
            s = (fun(z + h * e) - 2 * f0 + fun(z - h * e)) / (h * h * (e @ e))
            if sign == "-":
                tot += -np.where(s > 0, Lambda, lam) * s
            else:
                tot += -np.where(s > 0, lam, Lambda) * s
        best = np.minimum(best, tot) if sign == "-" else np.maximum(best, tot)
    return best


@dataclass(frozen=True)
class TrapSubsolutionCert:
    center: tuple
    k: int
    t: float
    R: float
    h: float
    c_small: float
    amplitude: float
    max_residual: float
    c_calibrated: float
    max_residual_minus: float
    lower_bound: float
    target: float

    @property
    def tolerance(self):
        return 1.0 + self.h

    @property
    def ok(self):
        return self.max_residual <= self.tolerance


def qualifying_traps(field, t):
    """Traps with index k >= t centred within t (log t)^{1/d} of the origin."""
    d = field.dim
    T = t * np.log(t) ** (1.0 / d)
    c, k = field.traps(-T * np.ones(d), T * np.ones(d))
    keep = (k >= t) & (np.linalg.norm(c, axis=1) < T)
    return c[keep], k[keep]


def certify_trap_subsolution(field, trap, t, c_small=None, n_per_R=256, frames=None,
                             lam_values=None):
    """Discrete check of the explicit subsolution around one trap.

    Works at unit scale on the lattice of spacing R/n_per_R over B_R,
    R = 10 t (log t)^{1/d}.  The residual is the frame-extremal P^+
    of psi with the local lambda; the certificate holds when it is at most
    1 + h.  Since P^- <= P^+, psi is then also a subsolution of the P^-
    problem.  With c_small=None the constant is calibrated as the largest
    c keeping the residual at most 1 (both operators are 1-homogeneous).
    """
    if not isinstance(field, EllipticityField) or field.kind != "trap":
        raise ParameterError("certificate needs a trap field")
    d = field.dim
    x0, k = trap
    x0 = np.asarray(x0, dtype=float).reshape(d)
    if not t > 10:
        raise PreconditionError("need t > 10")
    T = t * np.log(t) ** (1.0 / d)
    if k < t or np.linalg.norm(x0) >= T:
        raise PreconditionError("trap does not satisfy k >= t and |x0| < t (log t)^{1/d}")
    alpha = field.params.alpha
    lam_star, beta, a, q = counterexample_constants(alpha, d)
    if abs(field.params.star(d) - lam_star) > 1e-12:
        raise PreconditionError("the field's lambda_* must equal alpha/(2d)")
    R = 10.0 * T
    h = R / n_per_R
    frames = FrameSet.default(d, 2) if frames is None else frames
    dom = GridDomain(d, h, "ball", radius=R)
    z = dom.points[dom.interior_idx]
    lam = np.atleast_1d(field(z)) if lam_values is None else lam_values
    amp = t ** (1 + alpha) * np.log(t) ** 3 * lam_star ** (2 - beta / 2)
    unit = lambda p: amp * phi_ce(p - x0, alpha, d)
    resp = _frame_pucci("+", unit, z, h, lam, 1.0, frames)
    resm = _frame_pucci("-", unit, z, h, lam, 1.0, frames)
    worst = float(resp.max())
    c_cal = 1.0 / worst if worst > 0 else np.inf
    if c_small is None:
        c_small = c_cal if np.isfinite(c_cal) else 1.0
    elif not c_small > 0:
        raise ParameterError("c_small must be positive")
    bnd = dom.points[dom.boundary_idx]
    psi0 = c_small * amp * phi_ce(-x0, alpha, d)[0]
    psib = c_small * amp * phi_ce(bnd - x0, alpha, d).max()
    return TrapSubsolutionCert(tuple(x0), int(k), float(t), float(R), float(h), float(c_small),
                               float(amp), c_small * worst, float(c_cal),
                               c_small * float(resm.max()), float(psi0 - psib),
                               float(R**2 * np.log(t) ** q))
