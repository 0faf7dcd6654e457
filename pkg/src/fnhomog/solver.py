"""Solvers for the discrete Dirichlet and obstacle problems.

The default method is policy iteration (Howard's algorithm): freeze the
active linear piece of the monotone scheme at every point, solve the
resulting M-matrix system, repeat.  For operators that are a pointwise
minimum (or maximum) of monotone linear pieces the iterates are monotone
and terminate after finitely many steps.  The explicit projected
iteration and a multicolour nonlinear Gauss-Seidel sweep are kept for
cross-validation on small grids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import DiscreteOperator, FrameSet, GridFunction, coloring
from .errors import IterationError, ParameterError

__all__ = [
    "SolveConfig",
    "ObstacleSolution",
    "solve_dirichlet",
    "solve_obstacle",
    "convex_envelope",
    "linear_solve",
]

METHODS = ("policy_iteration", "damped_jacobi", "nonlinear_gauss_seidel")
_DIRECT_LIMIT = 300000


@dataclass(frozen=True)
class SolveConfig:
    tol: float = 1e-8
    max_iters: int = 100
    relaxation: float = 0.9
    method: str = "policy_iteration"
    contact_tol: float | None = None
    linear_solver: str = "auto"
    max_sweeps: int = 2_000_000

    def __post_init__(self):
        if not self.tol > 0:
            raise ParameterError("tol must be positive")
        if not 0 < self.relaxation <= 1:
            raise ParameterError("relaxation must lie in (0, 1]")
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}")
        if self.linear_solver not in ("auto", "direct", "amg"):
            raise ParameterError("linear_solver must be auto, direct or amg")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")


@dataclass
class ObstacleSolution:
    w: GridFunction
    contact_mask: np.ndarray
    contact_measure: float
    contact_tol: float
    residual_free: float
    residual_contact: float
    iterations: int
    history: list

    @property
    def domain(self):
        return self.w.domain

    def density(self, exclude=0.0):
        """Fraction of interior lattice points in the contact set.

        With ``exclude > 0`` only points at distance >= exclude from the
        box faces count.
        """
        dom = self.domain
        mask = self.contact_mask[dom.interior_idx]
        if exclude <= 0:
            return float(mask.mean())
        if dom.shape_kind != "box":
            raise ParameterError("margins are only defined for boxes")
        x = dom.points[dom.interior_idx]
        keep = np.all((x >= dom.lo + exclude) & (x <= dom.hi - exclude), axis=1)
        if not keep.any():
            return float("nan")
        return float(mask[keep].mean())


class _Hierarchy:
    """Multigrid hierarchy reused across nearby matrices of one iteration."""

    def __init__(self):
        self.ml = None
        self.stale = True


def linear_solve(A, b, x0=None, method="auto", d=2, rtol=1e-12, reuse=None):
    """Solve the M-matrix system A x = b (direct or algebraic multigrid).

    ``reuse`` keeps the multigrid hierarchy of an earlier matrix and uses it
    as a preconditioner until the Krylov iteration count degrades.
    """
    n = A.shape[0]
    if method == "direct" or (method == "auto" and (n <= _DIRECT_LIMIT or d == 1)):
        return spla.spsolve(A.tocsc(), b)
    import pyamg

    A = A.tocsr()
    hier = reuse if reuse is not None else _Hierarchy()
    bnorm = max(np.linalg.norm(b), 1e-300)
    target = max(10 * rtol, 1e-10)
    x = x0
    for attempt in range(4):
        if hier.stale or hier.ml is None:
            hier.ml = None
            hier.ml = pyamg.smoothed_aggregation_solver(A, symmetry="nonsymmetric", max_coarse=500)
            hier.stale = False
        res = []
        x, _ = pyamg.krylov.bicgstab(A, b, x0=x, tol=rtol, criteria="rr", maxiter=200,
                                     M=hier.ml.aspreconditioner(), residuals=res)
        if not np.isfinite(x).all():
            x = x0
            hier.stale = True
            continue
        if len(res) > 60:
            hier.stale = True
        if np.linalg.norm(b - A @ x) <= target * bnorm:
            return x
        # restart the Krylov iteration from x; rebuild after a slow pass
    if n <= 4 * _DIRECT_LIMIT:
        return spla.spsolve(A.tocsc(), b)
    raise IterationError("multigrid-preconditioned BiCGSTAB did not reach the tolerance")


def _rhs(domain, op, f):
    if callable(f):
        return np.asarray(f(op.x), dtype=float).reshape(op.n)
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(op.n, float(f))
    if f.shape == (domain.size,):
        return f[op.idx]
    if f.shape == (op.n,):
        return f
    raise ParameterError("rhs must be scalar, callable or an interior/lattice array")


def _scale(op, fvec, bvals):
    g = np.max(np.abs(bvals[op.domain.boundary_idx])) if len(op.domain.boundary_idx) else 0.0
    c = np.max(np.abs(op.c0)) if op.n else 0.0
    return max(1.0, np.max(np.abs(fvec)) if op.n else 0.0, c)


def _tolerance(op, fvec, values, cfg):
    """tol times the data scale, floored at the rounding level of the residual."""
    u = np.max(np.abs(values[op.domain.active])) if op.n else 0.0
    return cfg.tol * _scale(op, fvec, values) + 1e4 * np.finfo(float).eps * op.max_diagonal() * u


def _harmonic_start(op, bvals, cfg):
    """Interior values of the discrete harmonic extension of the boundary data."""
    if not np.any(bvals):
        return np.zeros(op.n)
    W = np.zeros((len(op.dirs), op.n))
    W[op.axis_dirs] = 1.0
    A, b = op.assemble(W, bvals)
    return linear_solve(A, b, method=cfg.linear_solver, d=op.domain.d)


def _howard(op, fvec, values, cfg, frozen=None, label="policy iteration"):
    """Policy iteration for F_h(u) = f; ``frozen`` points are held at their value.

    Stops when the residual is below tolerance or when the policy read off
    the new iterate equals the one it was computed from.  Large systems are
    solved loosely until the policy settles, then to full accuracy.
    """
    bvals = values
    history = []
    u = values[op.idx].copy()
    W, c, res = op.policy(values)
    hier = _Hierarchy()
    loose = op.n > _DIRECT_LIMIT and op.domain.d > 1
    for it in range(cfg.max_iters):
        err = np.abs(res - fvec)
        if frozen is not None:
            err[frozen] = 0.0
        history.append(float(err.max()) if op.n else 0.0)
        if history[-1] <= _tolerance(op, fvec, values, cfg):
            return u, history
        Wf = W.copy()
        if frozen is not None:
            Wf[:, frozen] = 0.0
        A, b = op.assemble(Wf, bvals)
        rhs = fvec - c + b
        if frozen is not None:
            A = A + sp.diags(frozen.astype(float))
            rhs[frozen] = u[frozen]
        rtol = 1e-6 if loose else 1e-12
        u = linear_solve(A, rhs, x0=u, method=cfg.linear_solver, d=op.domain.d, rtol=rtol,
                         reuse=hier)
        values[op.idx] = u
        W2, c2, res = op.policy(values)
        if np.array_equal(W2, W) and np.array_equal(c2, c):
            if loose:
                loose = False
                continue
            err = np.abs(res - fvec)
            if frozen is not None:
                err[frozen] = 0.0
            history.append(float(err.max()) if op.n else 0.0)
            return u, history
        W, c = W2, c2
    raise IterationError(f"{label} did not converge", history)


def _explicit(op, fvec, values, cfg, obstacle=False):
    dt = cfg.relaxation / max(op.max_diagonal(), 1.0)
    tol = _tolerance(op, fvec, values, cfg)
    history = []
    u = values[op.idx].copy()
    for it in range(cfg.max_sweeps):
        values[op.idx] = u
        r = op.residual(values) - fvec
        if obstacle:
            r = np.minimum(r, u)
            u = np.maximum(0.0, u - dt * r)
        else:
            u = u - dt * r
        err = float(np.abs(r).max())
        if it % 100 == 0:
            history.append(err)
        if err <= tol:
            values[op.idx] = u
            return u, history
    raise IterationError("damped iteration did not converge", history)


def _gauss_seidel(op, fvec, values, cfg, obstacle=False):
    colors, m = coloring(op.frames, op.domain)
    col = colors[op.idx]
    groups = [np.flatnonzero(col == k) for k in range(m)]
    tol = _tolerance(op, fvec, values, cfg)
    history = []
    for sweep in range(cfg.max_sweeps):
        for sel in groups:
            if len(sel) == 0:
                continue
            pts = op.idx[sel]
            z = values[pts].copy()
            for _ in range(30):
                W, c, res = op.policy(values, sel)
                g = res - fvec[sel]
                step = g / op.diagonal(W)
                z = z - step
                values[pts] = z
                if np.max(np.abs(step)) <= 1e-3 * tol / max(op.max_diagonal(), 1.0):
                    break
            if obstacle:
                values[pts] = np.maximum(z, 0.0)
        r = op.residual(values) - fvec
        if obstacle:
            r = np.minimum(r, values[op.idx])
        err = float(np.abs(r).max())
        history.append(err)
        if err <= tol:
            return values[op.idx].copy(), history
    raise IterationError("Gauss-Seidel did not converge", history)


def solve_dirichlet(spec, domain, f=0.0, g=0.0, cfg=None, frames=None, eps=1.0,
                    return_history=False, init=None):
    """Solve F_h(u) = f in the interior with u = g on the boundary layer.

    ``init`` is an optional starting guess (GridFunction, lattice array or
    callable of the points); the default is the discrete harmonic extension.
    """
    cfg = cfg or SolveConfig()
    op = spec if isinstance(spec, DiscreteOperator) else DiscreteOperator(spec, domain, frames, eps)
    fvec = _rhs(domain, op, f)
    values = domain.boundary_values(g)
    if init is None:
        values[op.idx] = _harmonic_start(op, values, cfg)
    elif callable(init):
        values[op.idx] = np.asarray(init(op.x), dtype=float).reshape(op.n)
    else:
        vals = init.values if isinstance(init, GridFunction) else np.asarray(init, dtype=float)
        values[op.idx] = vals[op.idx]
    if cfg.method == "policy_iteration":
        u, hist = _howard(op, fvec, values, cfg)
    elif cfg.method == "damped_jacobi":
        u, hist = _explicit(op, fvec, values, cfg)
    else:
        u, hist = _gauss_seidel(op, fvec, values, cfg)
    values[op.idx] = u
    out = GridFunction(domain, values)
    return (out, hist) if return_history else out


def _obstacle_howard(op, cfg):
    n = op.n
    values = np.zeros(op.domain.size)
    zero = np.zeros(n)
    history = []
    w = np.zeros(n)
    contact = None
    W, c, res = op.policy(values)
    for it in range(cfg.max_iters):
        obs = np.minimum(res, w)
        history.append(float(np.abs(obs).max()) if n else 0.0)
        tol = _tolerance(op, zero, values, cfg)
        if history[-1] <= tol and np.all(w >= -tol):
            return w, history, it
        new_contact = w < res
        if contact is not None:
            tie = w == res
            new_contact[tie] = contact[tie]
            if np.array_equal(new_contact, contact) and op.spec.kind == "max":
                # the inner solve was exact for this active set
                return w, history, it
        contact = new_contact
        if op.spec.kind == "min":
            Wf = W.copy()
            Wf[:, contact] = 0.0
            A, b = op.assemble(Wf, values)
            A = A + sp.diags(contact.astype(float))
            rhs = b - c
            rhs[contact] = 0.0
            w = linear_solve(A, rhs, x0=w, method=cfg.linear_solver, d=op.domain.d)
            values[op.idx] = w
            W2, c2, res = op.policy(values)
            same = np.array_equal(W2[:, ~contact], W[:, ~contact]) and np.array_equal(
                c2[~contact], c[~contact])
            W, c = W2, c2
            if same and np.array_equal((w < res) | ((w == res) & contact), contact):
                history.append(float(np.abs(np.minimum(res, w)).max()) if n else 0.0)
                return w, history, it + 1
        else:
            values[op.idx] = np.where(contact, 0.0, w)
            w, _ = _howard(op, zero, values, cfg, frozen=contact, label="inner max iteration")
            values[op.idx] = w
            W, c, res = op.policy(values)
    raise IterationError("obstacle policy iteration did not converge", history)


def solve_obstacle(spec, domain, cfg=None, frames=None, eps=1.0):
    """min{F_h(w), w} = 0 in the interior, w = 0 on the boundary layer."""
    cfg = cfg or SolveConfig()
    op = spec if isinstance(spec, DiscreteOperator) else DiscreteOperator(spec, domain, frames, eps)
    if cfg.method == "policy_iteration":
        w, hist, iters = _obstacle_howard(op, cfg)
    elif cfg.method == "damped_jacobi":
        w, hist = _explicit(op, np.zeros(op.n), np.zeros(domain.size), cfg, obstacle=True)
        iters = len(hist)
    else:
        w, hist = _gauss_seidel(op, np.zeros(op.n), np.zeros(domain.size), cfg, obstacle=True)
        iters = len(hist)
    w = np.maximum(w, 0.0)
    values = np.zeros(domain.size)
    values[op.idx] = w
    res = op.residual(values)
    ctol = cfg.contact_tol
    if ctol is None:
        ctol = 10.0 * cfg.tol * max(1.0, float(w.max()) if op.n else 0.0)
    cm = w <= ctol
    mask = np.zeros(domain.size, dtype=bool)
    mask[op.idx] = cm
    free = np.abs(res[~cm]).max() if np.any(~cm) else 0.0
    cont = -min(res[cm].min(), 0.0) if np.any(cm) else 0.0
    return ObstacleSolution(GridFunction(domain, values), mask,
                            float(cm.sum() * domain.h**domain.d), float(ctol),
                            float(free), float(cont), int(iters), hist)


def convex_envelope(u, cfg=None, frames=None):
    """Largest discretely convex Gamma <= u with Gamma = u on the boundary layer.

    Solves max{max_e(-D_e Gamma), Gamma - u} = 0 by policy iteration over
    the frame directions; returns Gamma as a grid function.
    """
    cfg = cfg or SolveConfig()
    dom = u.domain
    frames = FrameSet.default(dom.d) if frames is None else frames
    from .environment import ConstantParams, sample_field
    from .operators import LinearRule, OperatorSpec

    field = sample_field(ConstantParams(1.0), 0, dim=dom.d)
    spec = OperatorSpec("linear", 1.0, field, (LinearRule(np.eye(dom.d)),))
    op = DiscreteOperator(spec, dom, frames)
    nd, n = len(op.dirs), op.n
    uin = u.values[op.idx]
    values = u.values.copy()
    values[op.idx] = np.minimum(uin, _harmonic_start(op, values, cfg))
    tol = cfg.tol * max(1.0, float(np.abs(u.values[dom.active]).max()) * op.max_diagonal() * 1e-3)
    history = []
    for it in range(cfg.max_iters):
        D = op.second_differences(values)
        D = np.where(op.valid, -D, -np.inf)
        cand = np.vstack([D, (values[op.idx] - uin)[None]])
        best = np.argmax(cand, axis=0)
        r = cand[best, np.arange(n)]
        history.append(float(np.abs(r).max()))
        if history[-1] <= tol:
            break
        W = np.zeros((nd, n))
        pick = best < nd
        W[best[pick], np.flatnonzero(pick)] = 1.0
        A, b = op.assemble(W, values)
        ident = ~pick
        A = A + sp.diags(ident.astype(float))
        rhs = b.copy()
        rhs[ident] = uin[ident]
        x = linear_solve(A, rhs, method=cfg.linear_solver, d=dom.d)
        if it > 2 and np.array_equal(x, values[op.idx]):
            break
        values[op.idx] = x
    else:
        raise IterationError("convex envelope iteration did not converge", history)
    return GridFunction(dom, values)


def with_method(cfg, method):
    return replace(cfg, method=method)
