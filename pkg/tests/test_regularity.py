import numpy as np
import pytest
import sympy as sp

from fnhomog.discretization import GridDomain, GridFunction
from fnhomog.environment import CheckerboardParams, ConstantParams, TrapFieldParams, sample_field
from fnhomog.errors import ParameterError
from fnhomog.operators import LinearRule, OperatorSpec
from fnhomog.regularity import (BarrierConstants, abp_bound, abp_check, ball_volume,
                                barrier_check, contact_lowerbound_check, lower_envelope,
                                oscillation_decay, singular_profile_check, sublevel_integral)
from fnhomog.solver import solve_dirichlet


def const(lam=1.0, d=2):
    return sample_field(ConstantParams(lam), 0, dim=d)


def test_barrier_constants():
    c = BarrierConstants(r=0.25, mu=0.5, Lambda=1.0, d=2)
    assert c.alpha_exp == 8.0
    assert c.beta == 16.0**8
    assert c.phi(np.array([[2.0, 0.0]]))[0] == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        BarrierConstants(r=1.5)
    with pytest.raises(ParameterError):
        BarrierConstants(mu=2.0)


def test_barrier_hessian_symbolic():
    c = BarrierConstants()
    x, y = sp.symbols("x y", real=True)
    a = sp.Integer(8)
    phi = 2**a * (x**2 + y**2) ** (-a / 2)
    H = sp.hessian(phi, (x, y))
    Hf = sp.lambdify((x, y), H, "numpy")
    for p in np.random.default_rng(0).uniform(-1.5, 1.5, (20, 2)):
        if np.linalg.norm(p) < 0.3:
            continue
        exact = np.array(Hf(*p), dtype=float)
        assert np.allclose(c.hessian(p)[0], exact, rtol=1e-10)
        ev = np.sort(c.hessian_eigs(p)[0])
        assert np.allclose(ev, np.linalg.eigvalsh(exact), rtol=1e-10)
        assert ev[1] / -ev[0] == pytest.approx(9.0)


def test_singular_profile_second_order():
    rep = singular_profile_check()
    assert all(1.8 <= o <= 2.2 for o in rep.orders), rep.orders
    assert rep.errors[0] > rep.errors[1] > rep.errors[2]


def test_sublevel_integral():
    assert sublevel_integral(const(1.0), 0.5) == 0.0
    # lambda = 0.25 < mu everywhere: |B_1| / 0.25^2 up to lattice error
    v = sublevel_integral(const(0.25), 0.5, h=1 / 64)
    assert v == pytest.approx(16 * np.pi, rel=0.02)


def test_abp_parabola_1d():
    dom = GridDomain(1, 1 / 64, "ball")
    spec = OperatorSpec("pucci_plus", 1.0, const(1.0, d=1))
    u = solve_dirichlet(spec, dom, -1.0, 0.0)
    assert u.at(0.0) == pytest.approx(-0.5, abs=1e-10)
    x = dom.points[:, 0]
    assert np.allclose(u.interior_values, (x[dom.interior_idx] ** 2 - 1) / 2, atol=1e-10)
    f = np.ones(dom.size)
    lam = np.ones(dom.size)
    bound, n_c = abp_bound(u, f, lam)
    assert n_c == dom.n_interior
    assert bound >= 0.5
    assert bound == pytest.approx(1.0, abs=2 / 64)


def test_abp_nonnegative_u():
    dom = GridDomain(2, 1 / 32, "ball")
    u = GridFunction(dom, np.where(dom.active, 1.0 + dom.points[:, 0] ** 2, 0.0))
    bound, _ = abp_bound(u, np.zeros(dom.size), np.ones(dom.size))
    assert bound == 0.0
    assert max(-u.at([0.0, 0.0]), 0.0) == 0.0


def test_envelope_methods_agree():
    dom = GridDomain(2, 1 / 16, "ball")
    spec = OperatorSpec("pucci_plus", 1.0, const(0.5))
    f = lambda x: 1.0 + 0.5 * np.cos(3 * x[:, 0])
    u = solve_dirichlet(spec, dom, lambda x: -f(x), 0.1)
    a = lower_envelope(u, "hull")
    b = lower_envelope(u, "stencil")
    # the stencil envelope is only supported on frame directions, so it touches at least the
    # hull contact set
    assert a.sum() > 0
    assert np.all(b[a])
    assert b.sum() <= 1.2 * a.sum()


@pytest.mark.parametrize("kind", ["constant", "checkerboard"])
def test_abp_instances(kind):
    fld = const(0.5) if kind == "constant" else sample_field(CheckerboardParams(), 0)
    rep = abp_check(fld, n_instances=4, h=1 / 32)
    assert rep.n_violations == 0
    assert all(i.contact_points > 0 for i in rep.instances)


def test_abp_deep_trap():
    # seed 2 has a trap with lambda ~ 0.012 inside B_1 at eps = 1/8
    eps, h = 1 / 8, 1 / 64
    fld = sample_field(TrapFieldParams(alpha=0.5, a=0.05, k_max=1000), 2)
    dom = GridDomain(2, h, "ball")
    ii = dom.interior_idx
    lam = np.ones(dom.size)
    lam[ii] = fld(dom.points[ii] / eps)
    assert lam[ii].min() < 0.02
    spec = OperatorSpec("pucci_plus", 1.0, fld)
    f = np.zeros(dom.size)
    f[ii] = 1.0
    u = solve_dirichlet(spec, dom, -1.0, 0.0, eps=eps)
    bound, _ = abp_bound(u, f, lam)
    flat, _ = abp_bound(u, f, np.ones(dom.size))
    assert -u.at([0.0, 0.0]) <= bound
    assert bound > flat


def test_abp_slack_shrinks_with_h():
    fld = const(0.5)
    a = abp_check(fld, n_instances=2, h=1 / 16)
    b = abp_check(fld, n_instances=2, h=1 / 64)
    for x, y in zip(a.instances, b.instances):
        assert y.slack < x.slack


def test_barrier_uniform_field():
    rep = barrier_check(const(1.0), n_seeds=1, h=1 / 64)
    assert len(rep.passing) == 1
    assert rep.all_positive
    assert rep.max_subsolution_residual < 0


def test_barrier_negative_control_gated_out():
    fld = sample_field(CheckerboardParams(1.0, (1.0, 0.01), (0.5, 0.5)), 0)
    rep = barrier_check(fld, n_seeds=1, h=1 / 32, eps=1 / 4, max_draws=2)
    assert len(rep.records) == 2
    assert not rep.passing
    assert all(r.sublevel > rep.gate for r in rep.records)


def test_barrier_dimension_mismatch():
    with pytest.raises(ParameterError):
        barrier_check(const(1.0), consts=BarrierConstants(d=1), n_seeds=1)


def test_contact_quadratic():
    """u = |z|^2/2 and opening 1: vertex y touches at y/2, so |W| = |V|/4."""
    h = 1 / 64
    dom = GridDomain(2, h, "ball")
    u = GridFunction.from_callable(dom, lambda x: 0.5 * (x**2).sum(axis=1))
    ii = dom.interior_idx
    V = dom.points[ii][np.linalg.norm(dom.points[ii], axis=1) < 0.5]
    rep = contact_lowerbound_check(u, np.ones(dom.size), a=1.0, vertices=V)
    assert rep.delta_c == pytest.approx(0.5 / 9)
    assert rep.n_vertices == len(V)
    assert rep.ratio == pytest.approx(0.25, rel=0.15)
    assert rep.ok


def test_contact_empty_and_invalid():
    dom = GridDomain(2, 1 / 16, "ball")
    u = GridFunction.zeros(dom)
    assert contact_lowerbound_check(u, np.ones(dom.size), vertices=[]).ok
    with pytest.raises(ParameterError):
        contact_lowerbound_check(u, np.ones(dom.size), a=0.5)


def test_contact_supersolutions_checkerboard():
    ratios = []
    for seed in range(5):
        fld = sample_field(CheckerboardParams(), seed)
        dom = GridDomain(2, 1 / 32, "ball")
        spec = OperatorSpec("pucci_plus", 1.0, fld)
        u = solve_dirichlet(spec, dom, -1.0, 0.0, eps=1 / 4)
        ii = dom.interior_idx
        V = dom.points[ii][np.linalg.norm(dom.points[ii], axis=1) < 0.25]
        rep = contact_lowerbound_check(u, lambda z: fld(z / 0.25), a=4.0, vertices=V)
        ratios.append(rep.ratio)
    assert min(ratios) > 0


def test_oscillation_harmonic_control():
    rep = oscillation_decay(const(1.0), n_seeds=2, h=1 / 64, operators=("pucci_minus",),
                            alpha_rhs=0.0)
    assert rep.excluded == 0
    assert rep.tau < 0.5


def test_oscillation_affine():
    h = 1 / 64
    dom = GridDomain(2, h, "ball")
    spec = OperatorSpec("linear", 1.0, const(1.0), (LinearRule(np.eye(2), scale_by_field=False),))
    u = solve_dirichlet(spec, dom, 0.0, lambda p: 0.3 * p[:, 0] - 0.7 * p[:, 1])
    act = np.flatnonzero(dom.active)
    rad = np.linalg.norm(dom.points[act], axis=1)
    osc = lambda idx: np.ptp(u.values[idx])
    ratio = osc(act[rad <= 1 / 8]) / osc(act[rad <= 1.0])
    assert 0.1 <= ratio <= 0.126


def test_oscillation_records_fields():
    fld = sample_field(CheckerboardParams(), 0)
    rep = oscillation_decay(fld, seeds=[3, 4], h=1 / 32, levels=(1.0, 0.5))
    assert len(rep.records) == 2 * 2 * 2
    assert {r.operator for r in rep.records} == {"pucci_minus", "pucci_plus"}
    assert all(r.osc_inner <= r.osc_outer + 1e-12 for r in rep.records)
    assert rep.tau < 1


def test_ball_volume():
    assert ball_volume(1) == 2.0
    assert ball_volume(2, 0.5) == pytest.approx(np.pi / 4)
