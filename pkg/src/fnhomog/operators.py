"""Nonlinearities F(M, y) acting on symmetric matrices.

Sign convention: every operator is nonincreasing in M, so that the
Laplacian corresponds to F(M) = -tr(M).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError

__all__ = [
    "as_sym",
    "sym_eigvals",
    "pucci",
    "LinearRule",
    "OperatorSpec",
    "eval_F",
    "SandwichReport",
    "ellipticity_sandwich_check",
]

VARIANTS = ("pucci_minus", "pucci_plus", "linear", "bellman_min")


def as_sym(M, d=None):
    """Coerce scalars, nested lists or arrays to a symmetric (d, d) array."""
    A = np.asarray(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    elif A.ndim == 1:
        n = int(round(np.sqrt(A.size)))
        if n * n != A.size:
            raise ParameterError("flat matrix must have a square number of entries")
        A = A.reshape(n, n)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ParameterError(f"expected a square matrix, got shape {A.shape}")
    if d is not None and A.shape[0] != d:
        raise ParameterError(f"expected a {d}x{d} matrix, got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ParameterError("matrix is not symmetric")
    return A


def sym_eigvals(M):
    """Ascending eigenvalues of symmetric 1x1 or 2x2 matrices (batched)."""
    M = np.asarray(M, dtype=float)
    d = M.shape[-1]
    if d == 1:
        return M[..., 0, :].copy()
    if d != 2:
        raise ParameterError("only d = 1, 2 are supported")
    a, b, c = M[..., 0, 0], M[..., 0, 1], M[..., 1, 1]
    half = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return np.stack([half - rad, half + rad], axis=-1)


def _pucci_eig(sign, mu, Lambda, ev):
    pos = np.clip(ev, 0.0, None).sum(axis=-1)
    neg = -np.clip(ev, None, 0.0).sum(axis=-1)
    if sign == "+":
        return -mu * pos + Lambda * neg
    return -Lambda * pos + mu * neg


def pucci(sign, mu, Lambda, M):
    """Pucci extremal operator P^+ or P^- with ellipticity bounds mu <= Lambda."""
    if sign not in ("+", "-"):
        raise ParameterError("sign must be '+' or '-'")
    mu_a = np.asarray(mu, dtype=float)
    if np.any(mu_a <= 0) or np.any(mu_a > Lambda):
        raise ParameterError("need 0 < mu <= Lambda")
    M = np.asarray(M, dtype=float)
    if M.ndim < 2:
        M = as_sym(M)
    out = _pucci_eig(sign, mu_a, Lambda, sym_eigvals(M))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class LinearRule:
    """Coefficient a(y) = lam(y) A + (1 - lam(y)) a0 I plus a constant ``offset``.

    With ``scale_by_field=False`` the coefficient is the fixed matrix A.
    """

    A: tuple
    a0: float = 0.0
    offset: float = 0.0
    scale_by_field: bool = True

    def __post_init__(self):
        A = as_sym(self.A)
        object.__setattr__(self, "A", tuple(map(tuple, A.tolist())))

    @property
    def dim(self):
        return len(self.A)

    def matrix(self, lam):
        lam = np.asarray(lam, dtype=float)
        A = np.asarray(self.A)
        if not self.scale_by_field:
            return np.broadcast_to(A, lam.shape + A.shape).copy()
        eye = np.eye(A.shape[0])
        return lam[..., None, None] * A + (1.0 - lam)[..., None, None] * self.a0 * eye


@dataclass(frozen=True)
class OperatorSpec:
    """Symbolic F(M, y) = G(M + shift_M, lam(y)) + f0 + f1 lam(y) - shift_alpha.

    ``rules`` holds one LinearRule for ``linear`` and several for
    ``bellman_min``.  ``user_map(y, lam) -> (n, d, d)`` may replace the rule
    of a linear spec.
    """

    variant: str
    Lambda: float
    field: object
    rules: tuple = ()
    f0: float = 0.0
    f1: float = 0.0
    shift_M: tuple | None = None
    shift_alpha: float = 0.0
    user_map: object = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}")
        if not self.Lambda > 0:
            raise ParameterError("Lambda must be positive")
        object.__setattr__(self, "rules", tuple(self.rules))
        if self.variant == "linear" and len(self.rules) != 1 and self.user_map is None:
            raise ParameterError("linear spec needs exactly one rule or a user map")
        if self.variant == "bellman_min" and len(self.rules) < 1:
            raise ParameterError("bellman_min needs at least one rule")
        for r in self.rules:
            if r.dim != self.dim:
                raise ParameterError("rule dimension does not match the field")
        if self.shift_M is not None:
            S = as_sym(self.shift_M, self.dim)
            object.__setattr__(self, "shift_M", tuple(map(tuple, S.tolist())))

    @property
    def dim(self):
        return self.field.dim

    @property
    def shift_matrix(self):
        if self.shift_M is None:
            return np.zeros((self.dim, self.dim))
        return np.asarray(self.shift_M, dtype=float)

    @property
    def kind(self):
        """'max' for the convex P^+, 'min' for the concave variants."""
        if self.variant == "pucci_plus":
            return "max"
        return "min"

    @property
    def homogeneous(self):
        """True when M -> F(M, y) is positively homogeneous (no shift, F(0)=0)."""
        offsets = all(r.offset == 0 for r in self.rules)
        return (self.f0 == 0 and self.f1 == 0 and offsets and self.shift_alpha == 0
                and not np.any(self.shift_matrix))

    @property
    def odd(self):
        return self.variant == "linear" and self.homogeneous

    def shifted(self, M=None, alpha=0.0):
        """F_M - alpha, composed with any existing shift."""
        S = self.shift_matrix
        if M is not None:
            S = S + as_sym(M, self.dim)
        return replace(self, shift_M=S, shift_alpha=self.shift_alpha + float(alpha))

    def unshifted(self):
        return replace(self, shift_M=None, shift_alpha=0.0)

    def with_field(self, field):
        return replace(self, field=field)

    def reseed(self, seed):
        return replace(self, field=self.field.reseed(seed))

    def zero_order(self, lam):
        return self.f0 + self.f1 * np.asarray(lam, dtype=float) - self.shift_alpha

    def coefficients(self, y, lam):
        """Coefficient matrices of each linear member, shape (m, n, d, d)."""
        if self.user_map is not None:
            return np.asarray(self.user_map(y, lam), dtype=float)[None]
        return np.stack([r.matrix(lam) for r in self.rules])

    def offsets(self):
        return np.array([r.offset for r in self.rules] or [0.0])


def _apply(spec, M, lam, y):
    """G(M, lam) without zero-order terms; M has shape (n, d, d)."""
    if spec.variant == "pucci_minus":
        return _pucci_eig("-", lam, spec.Lambda, sym_eigvals(M))
    if spec.variant == "pucci_plus":
        return _pucci_eig("+", lam, spec.Lambda, sym_eigvals(M))
    a = spec.coefficients(y, lam)
    vals = -np.einsum("mnij,nji->mn", a, M) + spec.offsets()[:, None]
    return vals.min(axis=0)


def eval_F(spec, M, y, lam=None):
    """F(M + shift_M, y) - shift_alpha at one point or at an array of points."""
    d = spec.dim
    y_arr = np.asarray(y, dtype=float)
    scalar = y_arr.ndim == (0 if d == 1 else 1)
    pts = y_arr.reshape(-1, d)
    n = pts.shape[0]
    Ma = np.asarray(M, dtype=float)
    if Ma.ndim == 3:
        Mb = Ma
    else:
        Mb = np.broadcast_to(as_sym(Ma, d), (n, d, d))
    Mb = Mb + spec.shift_matrix
    if lam is None:
        lam = np.atleast_1d(spec.field(pts))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (n,))
    out = _apply(spec, Mb, lam, pts) + spec.zero_order(lam)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class SandwichReport:
    n_trials: int
    n_violations: int
    max_violation: float


def ellipticity_sandwich_check(spec, n_trials=1000, seed=0, box=10.0, slack=1e-12):
    """Spot-check P^-(M-N) <= F(M) - F(N) <= P^+(M-N) on random M >= N."""
    rng = np.random.default_rng(seed)
    d = spec.dim
    y = rng.uniform(-box, box, (n_trials, d))
    G = rng.normal(size=(n_trials, d, d))
    N = 0.5 * (G + np.swapaxes(G, 1, 2)) * rng.exponential(2.0, (n_trials, 1, 1))
    B = rng.normal(size=(n_trials, d, d)) * rng.exponential(1.0, (n_trials, 1, 1))
    P = B @ np.swapaxes(B, 1, 2)
    M = N + P
    lam = np.atleast_1d(spec.field(y))
    diff = eval_F(spec, M, y, lam) - eval_F(spec, N, y, lam)
    ev = sym_eigvals(P)
    lo = _pucci_eig("-", lam, spec.Lambda, ev)
    hi = _pucci_eig("+", lam, spec.Lambda, ev)
    scale = 1.0 + np.abs(ev).sum(axis=-1)
    viol = np.maximum(lo - diff, diff - hi) / scale
    bad = viol > slack
    return SandwichReport(int(n_trials), int(bad.sum()), float(max(viol.max(), 0.0)))
