import numpy as np
import pytest

from optproxy.grid import Generator, Line, Network
from optproxy.instances import Instance, nominal_instance
from optproxy.solver.lp import Infeasible
from optproxy.solver.models import (
    DEFAULT_PENALTIES,
    Penalties,
    build_dcopf_lp,
    get_sens,
    penalized_objective,
    projection_repair,
    solve_dcopf,
    solve_ed,
    thermal_slack,
)


def two_gen(fmax=100.0, r_max=(4.0, 4.0), loads=(0.0, 8.0)):
    gens = [
        Generator("a", 1, 0.0, 10.0, r_max[0], 1.0, 0.0),
        Generator("b", 2, 0.0, 5.0, r_max[1], 2.0, 0.0),
    ]
    return Network(buses=[1, 2], slack_bus=1, generators=gens, lines=[Line("l", 1, 2, 10.0, fmax)], loads=loads)


def inst_for(net, reserve=0.0, loads=None):
    base = nominal_instance(net, reserve)
    return base if loads is None else Instance(np.asarray(loads, float), reserve, base.cost_scale, base.pmax_scale)


def test_cheapest_generator_first():
    net = two_gen()
    d = solve_ed(net, inst_for(net))
    np.testing.assert_allclose(d.p, [8.0, 0.0], atol=1e-9)
    assert d.objective == pytest.approx(8.0)
    assert np.all(d.xi_th == 0)


def test_reserve_binds():
    net = two_gen()
    d = solve_ed(net, inst_for(net, reserve=6.0))
    assert d.r.sum() == pytest.approx(6.0)
    assert np.all(d.p + d.r <= np.array([10.0, 5.0]) + 1e-9)
    assert d.p.sum() == pytest.approx(8.0)
    # 2 MW of headroom on the cheap unit plus 4 on the dear one cover R exactly
    np.testing.assert_allclose(d.p, [8.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(d.r, [2.0, 4.0], atol=1e-9)
    # one more MW of reserve forces the cheap unit down
    d = solve_ed(net, inst_for(net, reserve=7.0))
    np.testing.assert_allclose(d.p, [7.0, 1.0], atol=1e-9)


def test_load_at_capacity():
    net = two_gen()
    full = inst_for(net, loads=[0.0, 15.0])
    np.testing.assert_allclose(solve_ed(net, full).p, [10.0, 5.0])
    with pytest.raises(Infeasible):
        solve_ed(net, inst_for(net, reserve=0.5, loads=[0.0, 15.0]))
    with pytest.raises(Infeasible):
        solve_ed(net, inst_for(net, loads=[0.0, 16.0]))


def test_congested_ed_pays_slack():
    net = two_gen(fmax=5.0)
    d = solve_ed(net, inst_for(net))
    # shipping 8 MW over a 5 MW line costs 1500/MW of overload; the local unit is cheaper
    np.testing.assert_allclose(d.p, [5.0, 3.0], atol=1e-9)
    assert np.all(d.xi_th < 1e-9)


def test_ed_equals_dcopf_when_uncongested(case30):
    inst = nominal_instance(case30)
    ed, dc = solve_ed(case30, inst), solve_dcopf(case30, inst)
    assert ed.objective == pytest.approx(dc.objective, rel=1e-9)
    assert np.all(ed.xi_th < 1e-9)


def test_dcopf_without_transfer_capacity():
    net = two_gen(fmax=1e-9)
    # bus 2 has 5 MW locally but needs 8
    with pytest.raises(Infeasible):
        solve_dcopf(net, inst_for(net))


def test_dcopf_strong_duality(case30):
    from optproxy.instances import SamplerConfig, build_dataset
    from optproxy.solver.lp import simplex_solve

    ds = build_dataset(case30, 15, SamplerConfig.for_kind("dcopf"), 2, "dcopf")
    for inst in ds.instances:
        lp = build_dcopf_lp(case30, inst)
        sol = simplex_solve(lp)
        dual = lp.dual_objective(sol.z, sol.z_l, sol.z_u)
        assert abs(sol.objective - dual) <= 1e-7 * (1 + abs(sol.objective))


def test_projection_fixed_point(case30):
    inst = nominal_instance(case30, 50.0)
    p = solve_ed(case30, inst).p
    proj = projection_repair(case30, inst, p)
    np.testing.assert_allclose(proj.p, p, atol=1e-9)
    assert proj.extra["distance"] == pytest.approx(0.0, abs=1e-9)


def test_projection_from_zero(case30):
    inst = nominal_instance(case30, 50.0)
    proj = projection_repair(case30, inst, np.zeros(case30.n_gen))
    assert proj.p.sum() == pytest.approx(inst.total_load, abs=1e-8)
    assert proj.extra["distance"] == pytest.approx(inst.total_load, abs=1e-8)


def test_projection_no_farther_than_optimum(case30):
    rng = np.random.default_rng(4)
    inst = nominal_instance(case30, 50.0)
    p_star = solve_ed(case30, inst).p
    for _ in range(5):
        p_hat = rng.uniform(0, case30.p_max)
        proj = projection_repair(case30, inst, p_hat)
        assert proj.extra["distance"] <= np.abs(p_star - p_hat).sum() + 1e-8


def test_projection_rejects_nan(case30):
    with pytest.raises(ValueError):
        projection_repair(case30, nominal_instance(case30), np.full(case30.n_gen, np.nan))


def test_penalized_objective_prices_violations():
    net = two_gen()
    inst = inst_for(net, reserve=6.0)
    sens = get_sens(net)
    # 1 MW short on balance and (10-7)+(5-0) = 8 >= 6 reserve: only the balance term applies
    val = penalized_objective(net, sens, inst, np.array([7.0, 0.0]))
    assert val == pytest.approx(7.0 + DEFAULT_PENALTIES.balance)
    # full output leaves no headroom: 6 MW reserve shortfall
    val = penalized_objective(net, sens, inst, np.array([10.0, 5.0]))
    assert val == pytest.approx(20.0 + 7 * DEFAULT_PENALTIES.balance + 6 * DEFAULT_PENALTIES.reserve)


def test_zero_cost_fleet_objective_is_thermal():
    net = two_gen(fmax=5.0)
    zero = Instance(np.array([0.0, 8.0]), 0.0, np.zeros(2), np.ones(2))
    sens = get_sens(net)
    p = np.array([8.0, 0.0])
    assert penalized_objective(net, sens, zero, p) == pytest.approx(3.0 * Penalties().thermal)
    np.testing.assert_allclose(thermal_slack(net, sens, zero, p), [3.0])
