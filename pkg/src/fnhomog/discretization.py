"""Lattice domains, grid functions and a monotone wide-stencil scheme.

The Pucci operators are discretized in frame-extremal form: for a frame
(e_1, ..., e_d) of orthogonal integer directions let s_i be the second
difference of u along e_i plus e_i.M.e_i for the matrix shift M.  Then

    P^-_h = min over frames of sum_i phi_-(s_i),  phi_-(s) = min(-Lambda s, -lam s)
    P^+_h = max over frames of sum_i phi_+(s_i),  phi_+(s) = max(-lam s, -Lambda s)

Every candidate is a nonincreasing function of the neighbour values, so
the scheme is monotone, and at the eigenframe the candidate equals the
continuum value (Schur-Horn plus concavity of phi_-), so the scheme is
exact on quadratics whose axes belong to the frame set.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import label
from scipy.optimize import nnls

from .errors import DomainError, ParameterError, StencilError
from .operators import as_sym

__all__ = [
    "GridDomain",
    "GridFunction",
    "FrameSet",
    "DiscreteOperator",
    "second_difference",
    "discrete_eigenvalues",
    "discrete_F",
    "decompose_coefficient",
]

_MARGIN = 3


class GridDomain:
    """Lattice h*Z^d masked to a box, ball or annulus.

    The lattice always contains the origin so that lattices with spacings
    h and h/2 are nested.  The boundary layer consists of the lattice
    points outside the shape that are axis neighbours of interior points.
    """

    def __init__(self, d, h, shape="ball", center=None, radius=1.0, inner_radius=None,
                 lo=None, hi=None):
        if d not in (1, 2):
            raise ParameterError("dimension must be 1 or 2")
        if not h > 0:
            raise ParameterError("spacing h must be positive")
        self.d, self.h, self.shape_kind = int(d), float(h), shape
        self.center = np.zeros(d) if center is None else np.asarray(center, dtype=float).reshape(d)
        if shape == "box":
            if lo is None or hi is None:
                raise ParameterError("box domains need lo and hi")
            self.lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,)).copy()
            self.hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,)).copy()
            if np.any(self.hi <= self.lo):
                raise ParameterError("box needs lo < hi")
            blo, bhi = self.lo, self.hi
        elif shape in ("ball", "annulus"):
            if not radius > 0:
                raise ParameterError("radius must be positive")
            self.radius = float(radius)
            self.inner_radius = None
            if shape == "annulus":
                if inner_radius is None or not 0 < inner_radius < radius:
                    raise ParameterError("annulus needs 0 < inner_radius < radius")
                self.inner_radius = float(inner_radius)
            blo, bhi = self.center - radius, self.center + radius
        else:
            raise ParameterError(f"unknown shape {shape!r}")
        i_lo = np.floor(blo / h).astype(int) - _MARGIN
        i_hi = np.ceil(bhi / h).astype(int) + _MARGIN
        self.index_lo = i_lo
        self.dims = tuple(int(v) for v in i_hi - i_lo + 1)
        self.size = int(np.prod(self.dims))
        self.strides = np.array([int(np.prod(self.dims[j + 1:])) for j in range(d)], dtype=np.int64)

        pts = self.points
        self.interior = self._inside(pts)
        if not self.interior.any():
            raise ParameterError("domain has no interior lattice points")
        grid = self.interior.reshape(self.dims)
        layer = np.zeros_like(grid)
        for j in range(d):
            for s in (1, -1):
                layer |= np.roll(grid, s, axis=j)
        self.boundary = layer.ravel() & ~self.interior
        self.active = self.interior | self.boundary
        self.interior_idx = np.flatnonzero(self.interior)
        self.boundary_idx = np.flatnonzero(self.boundary)
        self.n_interior = len(self.interior_idx)

    @property
    def key(self):
        geo = (tuple(self.lo), tuple(self.hi)) if self.shape_kind == "box" else (
            tuple(self.center), self.radius, self.inner_radius)
        return (self.d, self.h, self.shape_kind, geo)

    def __eq__(self, other):
        return isinstance(other, GridDomain) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    @cached_property
    def points(self):
        axes = [self.h * (self.index_lo[j] + np.arange(self.dims[j])) for j in range(self.d)]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @cached_property
    def unknown_index(self):
        """Map flat lattice index -> interior unknown number (-1 elsewhere)."""
        m = -np.ones(self.size, dtype=np.int64)
        m[self.interior_idx] = np.arange(self.n_interior)
        return m

    def _inside(self, x):
        tol = 1e-9 * self.h
        if self.shape_kind == "box":
            return np.all((x > self.lo + tol) & (x < self.hi - tol), axis=1)
        r = np.linalg.norm(x - self.center, axis=1)
        ok = r < self.radius - tol
        if self.shape_kind == "annulus":
            ok &= r > self.inner_radius + tol
        return ok

    def project(self, x):
        """Nearest boundary point of the continuum shape (radial for balls)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.shape_kind == "box":
            return np.clip(x, self.lo, self.hi)
        v = x - self.center
        r = np.linalg.norm(v, axis=1)
        safe = np.where(r > 0, r, 1.0)
        unit = np.where(r[:, None] > 0, v / safe[:, None], np.eye(self.d)[0])
        target = np.full(len(r), self.radius)
        if self.shape_kind == "annulus":
            mid = 0.5 * (self.radius + self.inner_radius)
            target = np.where(r < mid, self.inner_radius, self.radius)
        return self.center + unit * target[:, None]

    def is_connected(self):
        _, n = label(self.interior.reshape(self.dims))
        return n == 1

    def locate(self, x):
        """Flat index of the lattice point at physical location ``x``."""
        x = np.asarray(x, dtype=float).reshape(self.d)
        i = np.rint(x / self.h).astype(int)
        if np.max(np.abs(i * self.h - x)) > 1e-9 * self.h:
            raise DomainError("point is not a lattice point")
        rel = i - self.index_lo
        if np.any(rel < 0) or np.any(rel >= np.asarray(self.dims)):
            raise DomainError("point outside the lattice")
        return int(rel @ self.strides)

    def offset(self, e):
        return int(np.asarray(e, dtype=np.int64) @ self.strides)

    def volume(self):
        """Measure of the continuum shape."""
        if self.shape_kind == "box":
            return float(np.prod(self.hi - self.lo))
        ball = 2.0 * self.radius if self.d == 1 else np.pi * self.radius**2
        if self.shape_kind == "annulus":
            ball -= 2.0 * self.inner_radius if self.d == 1 else np.pi * self.inner_radius**2
        return float(ball)

    def boundary_values(self, g):
        """Lattice array holding g at the projections of boundary-layer points."""
        vals = np.zeros(self.size)
        if callable(g):
            p = self.project(self.points[self.boundary_idx])
            vals[self.boundary_idx] = np.asarray(g(p), dtype=float).reshape(-1)
        else:
            vals[self.boundary_idx] = float(g)
        return vals


class GridFunction:
    """Values on the active lattice points of a GridDomain (flat storage)."""

    __slots__ = ("domain", "values")

    def __init__(self, domain, values):
        v = np.asarray(values, dtype=float)
        if v.shape != (domain.size,):
            raise ParameterError("values must cover the full lattice")
        if not np.all(np.isfinite(v[domain.active])):
            raise ParameterError("grid function has non-finite values")
        self.domain = domain
        self.values = v

    @classmethod
    def from_callable(cls, domain, f):
        vals = np.zeros(domain.size)
        idx = np.flatnonzero(domain.active)
        vals[idx] = np.asarray(f(domain.points[idx]), dtype=float).reshape(-1)
        return cls(domain, vals)

    @classmethod
    def zeros(cls, domain):
        return cls(domain, np.zeros(domain.size))

    def _other(self, other):
        if isinstance(other, GridFunction):
            if other.domain != self.domain:
                raise ParameterError("grid functions live on different domains")
            return other.values
        return float(other)

    def __add__(self, other):
        return GridFunction(self.domain, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return GridFunction(self.domain, self.values - self._other(other))

    def __rsub__(self, other):
        return GridFunction(self.domain, self._other(other) - self.values)

    def __mul__(self, other):
        return GridFunction(self.domain, self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.domain, -self.values)

    @property
    def interior_values(self):
        return self.values[self.domain.interior_idx]

    def at(self, x):
        return float(self.values[self.domain.locate(x)])

    def interpolate(self, x):
        """Multilinear interpolation at arbitrary points (inactive points read as 0)."""
        from scipy.interpolate import RegularGridInterpolator

        dom = self.domain
        axes = [dom.h * (dom.index_lo[j] + np.arange(dom.dims[j])) for j in range(dom.d)]
        vals = np.where(dom.active, self.values, 0.0).reshape(dom.dims)
        interp = RegularGridInterpolator(axes, vals, bounds_error=False, fill_value=0.0)
        return interp(np.asarray(x, dtype=float).reshape(-1, dom.d))

    def sup_norm(self, where="interior"):
        idx = self.domain.interior_idx if where == "interior" else np.flatnonzero(self.domain.active)
        return float(np.max(np.abs(self.values[idx]))) if len(idx) else 0.0


def _best_direction(theta, radius):
    best, err = None, np.inf
    for p in range(-radius, radius + 1):
        for q in range(0, radius + 1):
            if (p, q) == (0, 0) or np.gcd(p, q) != 1:
                continue
            a = np.arctan2(q, p)
            e = abs(a - theta)
            if e < err - 1e-12:
                best, err = (p, q), e
    return best


@dataclass(frozen=True)
class FrameSet:
    """Orthogonal frames of integer directions; the axis frame comes first."""

    frames: tuple
    K: int

    @classmethod
    def default(cls, d=2, K=4):
        if d == 1:
            return cls((((1,),),), 1)
        if K < 1:
            raise ParameterError("K must be >= 1")
        table = {
            1: [((1, 0), (0, 1))],
            2: [((1, 0), (0, 1)), ((1, 1), (1, -1))],
            4: [((1, 0), (0, 1)), ((2, 1), (-1, 2)), ((1, 1), (1, -1)), ((1, 2), (-2, 1))],
        }
        if K in table:
            return cls(tuple(table[K]), K)
        frames = []
        for k in range(K):
            p, q = _best_direction(k * np.pi / (2 * K), radius=max(2, K // 2))
            f = ((p, q), (-q, p)) if p >= 0 else ((q, -p), (p, q))
            if f not in frames:
                frames.append(f)
        return cls(tuple(frames), K)

    @cached_property
    def directions(self):
        out = []
        for f in self.frames:
            for e in f:
                if tuple(e) not in out and tuple(-v for v in e) not in out:
                    out.append(tuple(e))
        return tuple(out)

    @cached_property
    def frame_index(self):
        """For each frame, indices of its directions in ``directions``."""
        dirs = self.directions
        idx = []
        for f in self.frames:
            row = []
            for e in f:
                ne = tuple(-v for v in e)
                row.append(dirs.index(tuple(e)) if tuple(e) in dirs else dirs.index(ne))
            idx.append(row)
        return np.array(idx, dtype=int)

    @property
    def dim(self):
        return len(self.frames[0][0])

    def max_gap(self):
        """Largest angular gap (radians) between consecutive frame axes."""
        ang = []
        for f in self.frames:
            for e in f:
                a = np.arctan2(e[1], e[0]) % (np.pi / 2) if self.dim == 2 else 0.0
                ang.append(a)
        ang = np.unique(np.round(np.array(ang), 14))
        if len(ang) == 0:
            return np.pi / 2
        gaps = np.diff(np.concatenate([ang, [ang[0] + np.pi / 2]]))
        return float(gaps.max())


def decompose_coefficient(a, directions):
    """Nonnegative weights w with sum_e w_e (e e^T)/|e|^2 = a.

    Diagonally dominant matrices use the classical axis plus diagonal
    split; anything else falls back to nonnegative least squares.
    Returns (weights, residual norm).
    """
    a = as_sym(a)
    dirs = np.asarray(directions, dtype=float)
    w = np.zeros(len(dirs))
    if a.shape[0] == 1:
        w[0] = a[0, 0]
        return w, 0.0
    p, r, q = a[0, 0], a[0, 1], a[1, 1]
    keys = [tuple(int(v) for v in e) for e in dirs]
    diag = (1, 1) if r > 0 else (1, -1)
    if abs(r) <= min(p, q) and (1, 0) in keys and (0, 1) in keys and (
            r == 0 or diag in keys):
        w[keys.index((1, 0))] = p - abs(r)
        w[keys.index((0, 1))] = q - abs(r)
        if r != 0:
            w[keys.index(diag)] = 2.0 * abs(r)
        return w, 0.0
    n2 = (dirs**2).sum(axis=1)
    B = np.stack([dirs[:, 0] ** 2 / n2, dirs[:, 0] * dirs[:, 1] / n2, dirs[:, 1] ** 2 / n2])
    w, res = nnls(B, np.array([p, r, q]))
    return w, float(res)


class DiscreteOperator:
    """The monotone scheme for one spec on one domain.

    ``eps`` rescales the environment: the field is evaluated at x/eps.
    Pointwise the residual is written through a *policy* (weights W >= 0
    per direction and a constant c) as  -sum_e W_e D_e u + c.
    """

    def __init__(self, spec, domain, frames=None, eps=1.0):
        if spec.dim != domain.d:
            raise ParameterError("spec and domain dimensions differ")
        self.spec, self.domain = spec, domain
        self.frames = FrameSet.default(domain.d) if frames is None else frames
        if self.frames.dim != domain.d:
            raise ParameterError("frame set dimension does not match the domain")
        self.eps = float(eps)
        dom = domain
        self.idx = dom.interior_idx
        n = len(self.idx)
        dirs = np.array(self.frames.directions, dtype=np.int64)
        self.dirs = dirs
        self.offsets = np.array([dom.offset(e) for e in dirs], dtype=np.int64)
        self.scale = 1.0 / (dom.h**2 * (dirs**2).sum(axis=1).astype(float))
        ok = np.ones((len(dirs), n), dtype=bool)
        for k, off in enumerate(self.offsets):
            ok[k] = dom.active[self.idx + off] & dom.active[self.idx - off]
        self.valid = ok
        self.axis_dirs = np.array([k for k, e in enumerate(dirs) if np.count_nonzero(e) == 1])
        if not np.all(ok[self.axis_dirs]):
            raise StencilError("axis stencil leaves the domain")
        fi = self.frames.frame_index
        self.frame_ok = np.stack([ok[row].all(axis=0) for row in fi])
        self.fallback = ~self.frame_ok.all(axis=0)
        x = dom.points[self.idx]
        self.x = x
        self.lam = np.atleast_1d(spec.field(x / self.eps)).astype(float)
        unit = dirs / np.sqrt((dirs**2).sum(axis=1))[:, None]
        S = spec.shift_matrix
        self.q = np.einsum("ki,ij,kj->k", unit, S, unit)
        self.c0 = np.broadcast_to(spec.zero_order(self.lam), (n,)).astype(float)
        if spec.variant in ("linear", "bellman_min"):
            self._setup_linear(unit, S)

    @property
    def n(self):
        return len(self.idx)

    def _setup_linear(self, unit, S):
        spec, n, nd = self.spec, self.n, len(self.dirs)
        coefs = spec.coefficients(self.x / self.eps, self.lam)
        m = coefs.shape[0]
        W = np.zeros((m, nd, n))
        err = 0.0
        if spec.user_map is None:
            for j, rule in enumerate(spec.rules):
                wA, eA = decompose_coefficient(np.asarray(rule.A), self.dirs)
                if rule.scale_by_field:
                    wI, eI = decompose_coefficient(rule.a0 * np.eye(self.domain.d), self.dirs)
                    W[j] = self.lam[None, :] * wA[:, None] + (1 - self.lam)[None, :] * wI[:, None]
                    err = max(err, eA + eI)
                else:
                    W[j] = wA[:, None]
                    err = max(err, eA)
        else:
            flat = coefs[0].reshape(n, -1)
            uniq, inv = np.unique(flat, axis=0, return_inverse=True)
            for u_i, row in enumerate(uniq):
                w, e = decompose_coefficient(row.reshape(self.domain.d, self.domain.d), self.dirs)
                W[0][:, inv.ravel() == u_i] = w[:, None]
                err = max(err, e)
        self.decomposition_error = err
        fb = self.fallback
        if fb.any():
            axis = self.axis_dirs
            W[:, :, fb] = 0.0
            for j in range(m):
                for k in axis:
                    i = int(np.flatnonzero(self.dirs[k])[0])
                    W[j, k, fb] = coefs[j, fb, i, i]
        self.lin_W = W
        self.lin_c = (self.c0[None, :] + spec.offsets()[:, None]
                      - np.einsum("mnij,ji->mn", coefs, S))

    def second_differences(self, values, sel=None):
        """Array (n_dirs, n_sel) of D_e u; entries for invalid stencils are 0."""
        idx = self.idx if sel is None else self.idx[sel]
        u0 = values[idx]
        D = np.empty((len(self.dirs), len(idx)))
        for k, off in enumerate(self.offsets):
            ip, im = idx + off, idx - off
            ok = self.valid[k] if sel is None else self.valid[k, sel]
            ip = np.where(ok, ip, idx)
            im = np.where(ok, im, idx)
            D[k] = (values[ip] - 2.0 * u0 + values[im]) * self.scale[k]
        return D

    def policy(self, values, sel=None):
        """Active policy (W, c) and residual at the interior points ``sel``."""
        D = self.second_differences(values, sel)
        sl = slice(None) if sel is None else sel
        spec = self.spec
        lam, c0 = self.lam[sl], self.c0[sl]
        nsel = D.shape[1]
        if spec.variant in ("pucci_minus", "pucci_plus"):
            fi = self.frames.frame_index
            s = D[fi] + self.q[fi][:, :, None]
            Lam = spec.Lambda
            if spec.variant == "pucci_minus":
                coef = np.where(s > 0, Lam, lam[None, None, :])
                sgn = 1.0
            else:
                coef = np.where(s > 0, lam[None, None, :], Lam)
                sgn = -1.0
            vals = -(coef * s).sum(axis=1)
            vals = np.where(self.frame_ok[:, sl], sgn * vals, np.inf)
            best = np.argmin(vals, axis=0)
            cols = np.arange(nsel)
            res = sgn * vals[best, cols] + c0
            W = np.zeros((len(self.dirs), nsel))
            bc = coef[best, :, cols]
            bdir = fi[best]
            for i in range(fi.shape[1]):
                W[bdir[:, i], cols] = bc[:, i]
            c = c0 - (W * self.q[:, None]).sum(axis=0)
            return W, c, res
        Wm = self.lin_W[:, :, sl]
        cm = self.lin_c[:, sl]
        vals = -(Wm * D[None]).sum(axis=1) + cm
        best = np.argmin(vals, axis=0)
        cols = np.arange(nsel)
        return Wm[best, :, cols].T, cm[best, cols], vals[best, cols]

    def residual(self, values, sel=None):
        return self.policy(values, sel)[2]

    def diagonal(self, W):
        """d(residual)/du(x) for the policy weights W."""
        return 2.0 * (W * self.scale[:, None]).sum(axis=0)

    def assemble(self, W, boundary_values):
        """Sparse A and boundary vector b with residual = A u_int - b + c."""
        dom, n = self.domain, self.n
        unk = dom.unknown_index
        rows = [np.arange(n)]
        cols = [np.arange(n)]
        vals = [self.diagonal(W)]
        b = np.zeros(n)
        for k, off in enumerate(self.offsets):
            w = W[k] * self.scale[k]
            nz = np.flatnonzero(w)
            if len(nz) == 0:
                continue
            for nb in (self.idx[nz] + off, self.idx[nz] - off):
                j = unk[nb]
                inner = j >= 0
                rows.append(nz[inner])
                cols.append(j[inner])
                vals.append(-w[nz[inner]])
                np.add.at(b, nz[~inner], w[nz[~inner]] * boundary_values[nb[~inner]])
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
        return A, b

    def max_diagonal(self):
        """Upper bound of d(residual)/du(x) over all policies."""
        if self.spec.variant in ("pucci_minus", "pucci_plus"):
            fi = self.frames.frame_index
            per = np.array([self.scale[row].sum() for row in fi])
            return 2.0 * self.spec.Lambda * per.max()
        return float(self.diagonal(self.lin_W.max(axis=0)).max())


def _as_index(domain, x):
    x = np.asarray(x)
    if np.issubdtype(x.dtype, np.integer) and x.ndim == 0:
        return int(x)
    return domain.locate(x)


def second_difference(u, x, e):
    """(u(x+e) - 2u(x) + u(x-e)) / |e h|^2 at the lattice point x."""
    dom = u.domain
    i = _as_index(dom, x)
    if not dom.interior[i]:
        raise StencilError("x is not an interior point")
    off = dom.offset(e)
    if not (dom.active[i + off] and dom.active[i - off]):
        raise StencilError("stencil leaves the domain")
    e = np.asarray(e, dtype=float)
    return float((u.values[i + off] - 2 * u.values[i] + u.values[i - off]) / (dom.h**2 * (e @ e)))


def discrete_eigenvalues(u, x, frames=None):
    """Smallest second difference over all frames, then its frame partners."""
    dom = u.domain
    frames = FrameSet.default(dom.d) if frames is None else frames
    i = _as_index(dom, x)
    best = None
    for f in frames.frames:
        vals = [second_difference(u, i, e) for e in f]
        m = min(vals)
        if best is None or m < best[0]:
            best = (m, vals)
    return sorted(best[1])


def discrete_F(spec, u, frames=None, eps=1.0):
    """Residual F_h(u) as a grid function (zero off the interior)."""
    op = DiscreteOperator(spec, u.domain, frames, eps)
    out = np.zeros(u.domain.size)
    out[op.idx] = op.residual(u.values)
    return GridFunction(u.domain, out)


def coloring(frames, domain):
    """Colour map (flat lattice) with no two stencil-coupled points alike."""
    offs = [np.asarray(e) for e in frames.directions]
    d = domain.d
    for m in range(2, 64):
        for coeffs in product(range(m), repeat=d):
            if all(int(np.dot(coeffs, e)) % m != 0 for e in offs):
                idx = (domain.points / domain.h).round().astype(np.int64)
                return (idx @ np.asarray(coeffs)) % m, m
    raise ParameterError("no linear colouring found")
