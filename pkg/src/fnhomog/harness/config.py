"""Flat ``section.key = value`` experiment configuration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..errors import ParameterError

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "KINDS", "SCHEMA", "default_text"]

KINDS = ("solve", "obstacle", "fbar", "regularity", "corrector", "convergence", "counterexample")


class ConfigError(ParameterError):
    """All problems found in one configuration text."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _strs(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _frac(s):
    """Float that also accepts ``p/q``."""
    s = s.strip()
    if "/" in s:
        p, q = s.split("/", 1)
        return float(p) / float(q)
    return float(s)


def _fracs(s):
    return tuple(_frac(v) for v in s.split(",") if v.strip())


def _opt_float(s):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


# key -> (parser, default, check or None, message)
SCHEMA = {
    "experiment.kind": (str, None, lambda v: v in KINDS, f"must be one of {', '.join(KINDS)}"),
    "experiment.dim": (int, 2, lambda v: v in (1, 2), "must be 1 or 2"),
    "field.kind": (str, "checkerboard", lambda v: v in ("constant", "checkerboard", "trap"),
                   "must be constant, checkerboard or trap"),
    "field.value": (float, 1.0, lambda v: v > 0, "must be positive"),
    "field.cell_size": (float, 1.0, lambda v: v > 0, "must be positive"),
    "field.values": (_floats, (1.0, 0.25), lambda v: len(v) > 0 and min(v) > 0,
                     "must be positive"),
    "field.probs": (_floats, (0.5, 0.5), lambda v: abs(sum(v) - 1) < 1e-12 and min(v) >= 0,
                    "must be nonnegative and sum to 1"),
    "field.mollify_width": (_opt_float, None, None, ""),
    "field.alpha": (float, 0.5, lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "field.a": (float, 3.0, lambda v: v >= 0, "must be nonnegative"),
    "field.lambda_star": (_opt_float, None, None, ""),
    "field.k_max": (int, 1000, lambda v: v >= 1, "must be >= 1"),
    "operator.variant": (str, "pucci_minus",
                         lambda v: v in ("pucci_minus", "pucci_plus", "linear"),
                         "must be pucci_minus, pucci_plus or linear"),
    "operator.Lambda": (float, 1.0, lambda v: v > 0, "must be positive"),
    "operator.A": (_floats, (), None, ""),
    "operator.a0": (float, 0.0, None, ""),
    "operator.f0": (float, 0.0, None, ""),
    "operator.f1": (float, 0.0, None, ""),
    "numerical.h": (_frac, 0.25, lambda v: v > 0, "must be positive"),
    "numerical.h_ratio": (int, 8, lambda v: v >= 1, "must be >= 1"),
    "numerical.K": (int, 4, lambda v: v >= 1, "must be >= 1"),
    "numerical.tol": (float, 1e-8, lambda v: v > 0, "must be positive"),
    "numerical.contact_tol": (_opt_float, None, None, ""),
    "numerical.eta": (float, 0.02, lambda v: 0 < v < 0.5, "must lie in (0, 0.5)"),
    "numerical.bisect_tol": (float, 1e-3, lambda v: v > 0, "must be positive"),
    "numerical.method": (str, "policy_iteration",
                         lambda v: v in ("policy_iteration", "damped_jacobi",
                                         "nonlinear_gauss_seidel"), "unknown method"),
    "numerical.budget": (int, 2_000_000, lambda v: v > 0, "must be positive"),
    "schedule.t": (_floats, (8.0,), lambda v: len(v) > 0 and min(v) > 0, "must be positive"),
    "schedule.eps": (_fracs, (0.25, 0.125), lambda v: len(v) > 0 and min(v) > 0,
                     "must be positive"),
    "schedule.alpha": (_floats, (), None, ""),
    "schedule.seeds": (_ints, (0,), lambda v: len(v) > 0, "needs at least one seed"),
    "schedule.M": (_floats, (1.0, 0.0, 0.0, 1.0), None, ""),
    "schedule.cert_t": (float, 0.0, lambda v: v == 0 or v > 10, "must be 0 (off) or > 10"),
    "schedule.p": (_floats, (1.0, 2.0), lambda v: len(v) > 0, "needs at least one exponent"),
    "regularity.checks": (_strs, ("abp", "barrier", "oscillation"),
                          lambda v: set(v) <= {"abp", "barrier", "oscillation"},
                          "must be among abp, barrier, oscillation"),
    "regularity.n_instances": (int, 5, lambda v: v >= 1, "must be >= 1"),
    "regularity.eps": (_frac, 0.125, lambda v: v > 0, "must be positive"),
    "rhs.f": (float, 1.0, None, ""),
    "output.dir": (str, "results", None, ""),
    "output.plots": (_bool, False, None, ""),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def kind(self):
        return self.values["experiment.kind"]

    def canonical(self):
        """Sorted key = repr(value) lines (output directory excluded)."""
        lines = [f"{k} = {self.values[k]!r}" for k in sorted(self.values) if k != "output.dir"]
        return "\n".join(lines)

    @property
    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def subhash(self, prefixes):
        lines = [l for l in self.canonical().splitlines() if l.split(".", 1)[0] in prefixes]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def replace(self, **updates):
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return ExperimentConfig(vals)


def parse_config(text, overrides=None):
    """Parse configuration text; raise ConfigError listing every problem."""
    errors, seen, raw = [], {}, {}
    for ln, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            errors.append(f"line {ln}: expected 'section.key = value'")
            continue
        key, val = (p.strip() for p in s.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"line {ln}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"line {ln}: duplicate key {key!r} (first on line {seen[key]})")
            continue
        seen[key] = ln
        raw[key] = (ln, val)
    for key, val in (overrides or {}).items():
        raw[key] = (0, val)
    values = {}
    for key, (parser, default, check, msg) in SCHEMA.items():
        if key in raw:
            ln, val = raw[key]
            where = f"line {ln}" if ln else "override"
            try:
                v = parser(val) if isinstance(val, str) else val
            except ValueError:
                errors.append(f"{where}: {key} has the wrong type ({val!r})")
                continue
            if check is not None and not check(v):
                errors.append(f"{where}: {key} {msg}")
                continue
            values[key] = v
        elif default is None and key == "experiment.kind":
            errors.append(f"missing required key {key!r}")
        else:
            values[key] = default
    if not errors:
        errors += _cross_check(values)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(values)


def _cross_check(v):
    errs = []
    if len(v["field.values"]) != len(v["field.probs"]):
        errs.append("field.values and field.probs must have equal length")
    d = v["experiment.dim"]
    if len(v["schedule.M"]) != d * d:
        errs.append(f"schedule.M needs {d * d} entries")
    if v["operator.variant"] == "linear" and len(v["operator.A"]) != d * d:
        errs.append(f"operator.A needs {d * d} entries for a linear operator")
    eps = v["schedule.eps"]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        errs.append("schedule.eps must be strictly decreasing")
    return errs


def default_text(kind):
    return f"experiment.kind = {kind}\n"
