"""Execute one configured experiment and write its CSV tables."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..counterexample import certify_trap_subsolution, qualifying_traps, run_counterexample
from ..discretization import FrameSet, GridDomain
from ..errors import BudgetError
from ..environment import (CheckerboardParams, ConstantParams, TrapFieldParams, estimate_moment,
                           sample_field)
from ..homogenization import corrector_sublinearity, estimate_fbar, two_scale_convergence
from ..operators import LinearRule, OperatorSpec
from ..regularity import abp_check, barrier_check, oscillation_decay
from ..homogenization import box_domain
from ..solver import SolveConfig, solve_dirichlet, solve_obstacle
from .cache import DiskCache, NullCache
from .csvio import load_schema, write_csv

__all__ = ["RunRecord", "run", "field_params", "build_spec", "solver_config"]


@dataclass
class RunRecord:
    config_hash: str
    version: str
    kind: str
    wall_time: float = 0.0
    outputs: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self):
        return self.error is None and all(self.verdicts.values())


def field_params(cfg):
    kind = cfg["field.kind"]
    if kind == "constant":
        return ConstantParams(cfg["field.value"])
    if kind == "checkerboard":
        return CheckerboardParams(cfg["field.cell_size"], tuple(cfg["field.values"]),
                                  tuple(cfg["field.probs"]), cfg["field.mollify_width"])
    return TrapFieldParams(cfg["field.alpha"], cfg["field.a"], cfg["field.lambda_star"],
                           cfg["field.k_max"])


def build_spec(cfg, seed=0):
    d = cfg["experiment.dim"]
    fld = sample_field(field_params(cfg), seed, dim=d)
    rules = ()
    if cfg["operator.variant"] == "linear":
        A = np.asarray(cfg["operator.A"]).reshape(d, d)
        rules = (LinearRule(A, cfg["operator.a0"]),)
    Lam = max(cfg["operator.Lambda"], fld.lambda_max)
    return OperatorSpec(cfg["operator.variant"], Lam, fld, rules, cfg["operator.f0"],
                        cfg["operator.f1"])


def solver_config(cfg):
    return SolveConfig(tol=cfg["numerical.tol"], method=cfg["numerical.method"],
                       contact_tol=cfg["numerical.contact_tol"])


def _frames(cfg):
    return FrameSet.default(cfg["experiment.dim"], cfg["numerical.K"])


def _matrix(cfg):
    d = cfg["experiment.dim"]
    return np.asarray(cfg["schedule.M"], dtype=float).reshape(d, d)


# --- tasks (top level so that worker processes can import them) ----------


def _task_solve(cfg, seed, eps):
    spec = build_spec(cfg, seed)
    d = cfg["experiment.dim"]
    h = eps / cfg["numerical.h_ratio"]
    if (2 / h) ** d > cfg["numerical.budget"]:
        raise BudgetError(f"eps = {eps} needs more than {cfg['numerical.budget']} grid points")
    dom = GridDomain(d, h, "ball")
    u, hist = solve_dirichlet(spec, dom, cfg["rhs.f"], 0.0, solver_config(cfg), _frames(cfg),
                              eps=eps, return_history=True)
    return dict(seed=seed, eps=eps, h=h, n_unknowns=dom.n_interior,
                u_at_0=u.at(np.zeros(d) if d > 1 else 0.0), sup_norm=u.sup_norm(),
                iterations=len(hist))


def _task_obstacle(cfg, seed, t, alpha):
    spec = build_spec(cfg, seed).shifted(_matrix(cfg), alpha)
    dom = box_domain(t, cfg["numerical.h"], cfg["experiment.dim"])
    sol = solve_obstacle(spec, dom, solver_config(cfg), _frames(cfg))
    return dict(seed=seed, t=t, alpha=alpha, density=sol.density(),
                contact_measure=sol.contact_measure, iterations=sol.iterations)


def _task_counterexample(cfg, seed):
    p = field_params(cfg)
    r = run_counterexample(p, cfg["schedule.eps"], seed=seed, d=cfg["experiment.dim"],
                           h_ratio=cfg["numerical.h_ratio"], K=cfg["numerical.K"],
                           budget=cfg["numerical.budget"], cfg=solver_config(cfg))
    return r.rows()


def _task_certificate(cfg, seed, t, n_per_R=256):
    fld = sample_field(field_params(cfg), seed, dim=cfg["experiment.dim"])
    rows = []
    centers, ks = qualifying_traps(fld, t)
    for x0, k in zip(centers, ks):
        c = certify_trap_subsolution(fld, (x0, k), t, n_per_R=n_per_R)
        rows.append(dict(seed=seed, t=t, x0=" ".join(format(float(v), ".17g") for v in x0),
                         k=int(k), n_per_R=n_per_R, h=c.h, c_calibrated=c.c_calibrated,
                         max_residual=c.max_residual, tolerance=c.tolerance, ok=c.ok,
                         max_residual_minus=c.max_residual_minus, lower_bound=c.lower_bound,
                         target=c.target))
    return rows


def _map(fn, jobs, workers, cache, keyfn):
    """Run ``fn(*job)`` for each job, via the cache, returning results in job order."""
    out = [None] * len(jobs)
    todo = []
    for i, job in enumerate(jobs):
        hit = cache.get(keyfn(job))
        if hit is not None:
            out[i] = hit
        else:
            todo.append(i)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {i: ex.submit(fn, *jobs[i]) for i in todo}
            for i in todo:
                out[i] = futs[i].result()
                cache.set(keyfn(jobs[i]), out[i])
    else:
        for i in todo:
            out[i] = fn(*jobs[i])
            cache.set(keyfn(jobs[i]), out[i])
    return out


# --- experiments ---------------------------------------------------------


def _exp_solve(cfg, rec, cache, workers):
    jobs = [(cfg, s, e) for s in cfg["schedule.seeds"] for e in cfg["schedule.eps"]]
    sub = cfg.subhash({"experiment", "field", "operator", "numerical", "rhs"})
    rows = _map(_task_solve, jobs, workers, cache, lambda j: ("solve", sub, j[1], j[2]))
    rec.verdicts["finite"] = all(np.isfinite(r["u_at_0"]) for r in rows)
    return {"solve": rows}


def _exp_obstacle(cfg, rec, cache, workers):
    alphas = cfg["schedule.alpha"] or (0.0,)
    jobs = [(cfg, s, t, a) for s in cfg["schedule.seeds"] for t in cfg["schedule.t"]
            for a in sorted(alphas)]
    sub = cfg.subhash({"experiment", "field", "operator", "numerical", "schedule"})
    rows = _map(_task_obstacle, jobs, workers, cache,
                lambda j: ("obstacle", sub, j[1], j[2], j[3]))
    ok = all(0 <= r["density"] <= 1 for r in rows)
    for s in cfg["schedule.seeds"]:
        for t in cfg["schedule.t"]:
            col = [r["density"] for r in rows if r["seed"] == s and r["t"] == t]
            ok &= all(b <= a + 1e-12 for a, b in zip(col, col[1:]))
    rec.verdicts["density_monotone"] = bool(ok)
    return {"obstacle": rows}


def _exp_fbar(cfg, rec, cache, workers):
    M = _matrix(cfg)
    spec = build_spec(cfg, 0)
    curve_rows, fbar_rows = [], []
    ok = True
    for t in cfg["schedule.t"]:
        est = estimate_fbar(spec, M, t, eta=cfg["numerical.eta"],
                            bisect_tol=cfg["numerical.bisect_tol"], h=cfg["numerical.h"],
                            seeds=cfg["schedule.seeds"], cfg=solver_config(cfg),
                            frames=_frames(cfg), cache=cache, budget=cfg["numerical.budget"],
                            check_monotone=False)
        for a in est.curve.sorted_alphas():
            for s, dv, di in zip(est.curve.seeds, est.curve.densities[a], est.curve.interior[a]):
                curve_rows.append(dict(t=t, alpha=a, seed=s, density=dv, density_interior=di))
        fbar_rows.append(dict(t=t, M=" ".join(format(v, ".17g") for v in M.ravel()),
                              fbar_lo=est.fbar_lo, fbar_hi=est.fbar_hi, fbar_mid=est.mid,
                              easy_lo=est.easy_lo, easy_hi=est.easy_hi, eta=est.eta,
                              n_seeds=est.n_seeds, monotone_violations=est.monotone_violations))
        ok &= est.easy_lo - 1e-9 <= est.fbar_lo <= est.fbar_hi <= est.easy_hi + 1e-9
        if est.monotone_violations:
            rec.warnings.append(f"t={t}: {est.monotone_violations} non-monotone density steps")
    rec.verdicts["bracket_within_bounds"] = bool(ok)
    return {"density_curve": curve_rows, "fbar": fbar_rows}


def _exp_regularity(cfg, rec, cache, workers):
    d = cfg["experiment.dim"]
    fld = sample_field(field_params(cfg), 0, dim=d)
    seed = cfg["schedule.seeds"][0]
    n = cfg["regularity.n_instances"]
    h = cfg["numerical.h"]
    eps = cfg["regularity.eps"]
    scfg = solver_config(cfg)
    rows = []
    if "abp" in cfg["regularity.checks"]:
        rep = abp_check(fld, n, seed, h=h, eps=eps, cfg=scfg)
        for i in rep.instances:
            rows.append(dict(check="abp", seed=i.seed, gated=True, measured=i.u_minus_0,
                             bound=i.bound + i.slack, ok=i.ok))
        rec.verdicts["abp"] = rep.n_violations == 0
    if "barrier" in cfg["regularity.checks"] and d == 2:
        rep = barrier_check(fld, n_seeds=n, seed=seed, h=h, eps=eps, cfg=scfg)
        for r in rep.records:
            rows.append(dict(check="barrier", seed=r.seed, gated=r.gated, measured=r.min_u,
                             bound=0.0, ok=r.positive))
        rec.verdicts["barrier"] = rep.all_positive
        rec.warnings.append(f"barrier: {len(rep.records) - len(rep.passing)} seeds failed the gate")
    if "oscillation" in cfg["regularity.checks"]:
        rep = oscillation_decay(fld, n_seeds=n, seed=seed, h=h, eps=eps, cfg=scfg)
        for r in rep.records:
            rows.append(dict(check=f"oscillation:{r.operator}", seed=r.seed, gated=r.gated,
                             measured=r.tau, bound=1.0, ok=r.tau < 1))
        rec.verdicts["oscillation"] = rep.tau < 1
        rec.warnings.append(f"oscillation: {rep.excluded} records failed the gate")
    return {"regularity": rows}


def _exp_corrector(cfg, rec, cache, workers):
    spec = build_spec(cfg, 0)
    M = _matrix(cfg)
    alphas = cfg["schedule.alpha"] or (0.0,)
    rows = []
    ok = True
    for a in alphas:
        key = ("corrector", cfg.subhash({"experiment", "field", "operator", "numerical",
                                         "schedule"}), a)
        rep = cache.memo(key, lambda: corrector_sublinearity(
            spec, M, a, cfg["schedule.t"], cfg["schedule.seeds"], cfg["numerical.h"],
            solver_config(cfg), _frames(cfg)))
        for t, r in zip(rep.t_list, rep.ratios):
            rows.append(dict(t=t, alpha=a, sup_over_t2=r))
        ok &= rep.decreasing_with_noise
    rec.verdicts["sublinear"] = bool(ok)
    return {"corrector": rows}


def _exp_convergence(cfg, rec, cache, workers):
    spec = build_spec(cfg, 0)
    seed = cfg["schedule.seeds"][0]
    d = cfg["experiment.dim"]
    g = (lambda x: 0.5 * (x**2).sum(axis=1))
    key = ("convergence", cfg.subhash({"experiment", "field", "operator", "numerical",
                                       "schedule", "rhs"}))
    rep = cache.memo(key, lambda: two_scale_convergence(
        spec, None, g, cfg["schedule.eps"], seed, h_ratio=cfg["numerical.h_ratio"],
        cfg=solver_config(cfg), frames=_frames(cfg), f=cfg["rhs.f"],
        budget=cfg["numerical.budget"]))
    rows = []
    for i, (e, h, u0) in enumerate(zip(rep.eps_list, rep.hs, rep.u_at_0)):
        rows.append(dict(eps=e, h=h, u_at_0=u0,
                         cauchy_next=rep.cauchy[i] if i < len(rep.cauchy) else None))
    c = rep.cauchy
    rec.verdicts["cauchy_decreasing"] = all(b < a for a, b in zip(c, c[1:]))
    return {"convergence": rows}


def _exp_counterexample(cfg, rec, cache, workers):
    jobs = [(cfg, s) for s in cfg["schedule.seeds"]]
    sub = cfg.subhash({"experiment", "field", "numerical", "schedule"})
    res = _map(_task_counterexample, jobs, workers, cache,
               lambda j: ("counterexample", sub, j[1]))
    rows = [r for block in res for r in block]
    ok = True
    for block in res:
        u = [r["u_eps_at_0"] for r in block]
        ok &= all(b >= 0.98 * a for a, b in zip(u, u[1:]))
    rec.verdicts["nondecreasing"] = bool(ok)
    tables = {"counterexample": rows}
    t = cfg["schedule.cert_t"]
    if t > 0 and cfg["field.kind"] == "trap":
        jobs = [(cfg, s, t) for s in cfg["schedule.seeds"]]
        sub = cfg.subhash({"experiment", "field"})
        res = _map(_task_certificate, jobs, workers, cache,
                   lambda j: ("certificate", sub, j[1], repr(j[2])))
        tables["certificate"] = [r for block in res for r in block]
        rec.verdicts["certificates"] = all(r["ok"] for r in tables["certificate"])
    return tables


def run_moments(cfg, out=None, n_samples=20000):
    """E[lambda^-p] table for the configured field."""
    p_list = cfg["schedule.p"]
    rows = []
    for p in p_list:
        for method in ("exact", "mc") if cfg["field.kind"] == "trap" else ("mc",):
            m = estimate_moment(field_params(cfg), p, n_samples, cfg["schedule.seeds"][0],
                                dim=cfg["experiment.dim"], method=method)
            rows.append(dict(p=p, method=method, value=m.value, stderr=m.stderr,
                             n_samples=m.n_samples))
    if out is not None:
        write_csv(Path(out) / load_schema()["moments"]["file"], "moments", rows)
    return rows


_EXPERIMENTS = {
    "solve": _exp_solve,
    "obstacle": _exp_obstacle,
    "fbar": _exp_fbar,
    "regularity": _exp_regularity,
    "corrector": _exp_corrector,
    "convergence": _exp_convergence,
    "counterexample": _exp_counterexample,
}


def _plot(kind, tables, out):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if kind == "fbar":
        rows = tables["density_curve"]
        for t in sorted({r["t"] for r in rows}):
            al = sorted({r["alpha"] for r in rows if r["t"] == t})
            m = [np.mean([r["density"] for r in rows if r["t"] == t and r["alpha"] == a])
                 for a in al]
            ax.plot(al, m, "o-", label=f"t={t:g}")
        ax.set_xlabel("alpha")
        ax.set_ylabel("contact density")
    elif kind == "convergence":
        rows = tables["convergence"]
        xs = [r["eps"] for r in rows if r["cauchy_next"] is not None]
        ys = [r["cauchy_next"] for r in rows if r["cauchy_next"] is not None]
        ax.loglog(xs, ys, "o-")
        ax.set_xlabel("eps")
        ax.set_ylabel("sup |u^eps - u^eps/2|")
    elif kind == "counterexample":
        rows = tables["counterexample"]
        for s in sorted({r["seed"] for r in rows}):
            sel = [r for r in rows if r["seed"] == s]
            ax.plot([np.log(1 / r["eps"]) for r in sel], [r["u_eps_at_0"] for r in sel], "o-",
                    label=f"seed {s}")
        ax.set_xlabel("log(1/eps)")
        ax.set_ylabel("u^eps(0)")
    else:
        plt.close(fig)
        return None
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    path = Path(out) / f"{kind}.svg"
    fig.savefig(path)
    plt.close(fig)
    return path


def run(cfg, out=None, workers=1, use_cache=True, cache_dir=None):
    """Run the experiment described by ``cfg`` and write its CSV tables."""
    out = Path(out if out is not None else cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    cache = DiskCache(cache_dir) if use_cache else NullCache()
    rec = RunRecord(cfg.hash, __version__, cfg.kind)
    schema = load_schema()
    t0 = time.perf_counter()
    tables = {}
    try:
        tables = _EXPERIMENTS[cfg.kind](cfg, rec, cache, max(1, int(workers)))
    except Exception as exc:  # recorded, partial tables still flushed
        rec.error = f"{type(exc).__name__}: {exc}"
    for name, rows in tables.items():
        path = write_csv(out / schema[name]["file"], name, rows)
        rec.outputs[name] = str(path)
    if cfg["output.plots"] and tables:
        p = _plot(cfg.kind, tables, out)
        if p is not None:
            rec.outputs["plot"] = str(p)
    rec.wall_time = time.perf_counter() - t0
    with open(out / "run_record.json", "w") as fh:
        json.dump(asdict(rec), fh, indent=2, default=str)
    return rec
