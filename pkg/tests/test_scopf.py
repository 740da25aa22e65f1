from dataclasses import replace

import numpy as np
import pytest

from optproxy.grid import Generator, Line, Network
from optproxy.instances import Instance, nominal_instance
from optproxy.pdl import bs_layer
from optproxy.solver import scopf
from optproxy.solver.lp import Infeasible
from optproxy.solver.models import get_sens, solve_ed
from optproxy.solver.scopf import BudgetExceeded, apr_ramp, line_contingency_ptdf, solve_scopf_bruteforce


def pair(fmax=100.0):
    gens = [Generator("cheap", 1, 0.0, 10.0, 10.0, 1.0, 1.0), Generator("dear", 2, 0.0, 10.0, 10.0, 2.0, 1.0)]
    return Network(buses=[1, 2], slack_bus=1, generators=gens, lines=[Line("l", 1, 2, 10.0, fmax)], loads=(0.0, 10.0))


def rerated(net, fmax):
    return net.with_lines([replace(ln, f_max=f) for ln, f in zip(net.lines, fmax)])


def test_no_contingencies_reduces_to_ed(scopf3):
    inst = nominal_instance(scopf3)
    d = solve_scopf_bruteforce(scopf3, inst, gen_ks=[], line_ks=[])
    ed = solve_ed(scopf3, inst)
    assert d.objective == pytest.approx(ed.objective, rel=1e-10)
    np.testing.assert_allclose(d.p, ed.p, atol=1e-8)


def test_surviving_unit_covers_the_outage():
    net = pair()
    inst = nominal_instance(net)
    d = solve_scopf_bruteforce(net, inst, gen_ks=[0], line_ks=[])
    np.testing.assert_allclose(d.p, [10.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(d.extra["p_k"][0], [0.0, 10.0], atol=1e-9)
    n_oracle = d.extra["n_k"][0]
    _, n_bs, _, e, _ = bs_layer(d.p, 0, net.gamma, apr_ramp(net, inst), inst.p_max(net), inst.total_load)
    assert abs(n_bs - n_oracle) <= 2.0**-18
    assert abs(e) < 1e-4


def test_outage_forces_cheap_unit_down_when_ramp_is_short():
    net = pair()
    gens = [replace(g, gamma=0.5) for g in net.generators]
    net = net.with_generators(gens)
    d = solve_scopf_bruteforce(net, nominal_instance(net), gen_ks=[0], line_ks=[])
    # the dear unit can only add 5 MW, so it has to run at 5 MW in the base case
    np.testing.assert_allclose(d.p, [5.0, 5.0], atol=1e-9)
    assert d.objective == pytest.approx(15.0)


def test_infeasible_when_no_response_can_cover(scopf3):
    net = scopf3.with_generators([replace(g, gamma=0.0) for g in scopf3.generators])
    # with no droop response every unit must idle to survive its own outage
    with pytest.raises(Infeasible):
        solve_scopf_bruteforce(net, nominal_instance(net), gen_ks=[0, 1, 2], line_ks=[])


def test_slack_only_under_congestion(scopf3):
    inst = nominal_instance(scopf3)
    clear = solve_scopf_bruteforce(scopf3, inst)
    assert np.all(np.asarray(clear.extra["xi_gen"]) == 0) and np.all(np.asarray(clear.extra["xi_line"]) == 0)
    tight = rerated(scopf3, [100.0, 100.0, 20.0])
    d = solve_scopf_bruteforce(tight, inst)
    sens = get_sens(tight)
    xi_gen = np.asarray(d.extra["xi_gen"])
    assert xi_gen.sum() > 0
    # recompute every post-outage flow from the returned dispatch and compare excesses
    for a, k in enumerate(d.extra["gen_contingencies"]):
        f = sens.ptdf @ (tight.gen_bus @ np.asarray(d.extra["p_k"][a]) - inst.loads)
        excess = np.maximum(np.abs(f) - tight.f_max, 0.0)
        np.testing.assert_allclose(xi_gen[a], excess, atol=1e-7)
    xi_line = np.asarray(d.extra["xi_line"])
    for a, k in enumerate(d.extra["line_contingencies"]):
        f = line_contingency_ptdf(sens, k) @ (tight.gen_bus @ d.p - inst.loads)
        excess = np.delete(np.maximum(np.abs(f) - tight.f_max, 0.0), k)
        np.testing.assert_allclose(xi_line[a], excess, atol=1e-7)
    base = np.maximum(np.abs(sens.ptdf @ (tight.gen_bus @ d.p - inst.loads)) - tight.f_max, 0.0)
    total = inst.cost(tight) @ d.p + 1500.0 * (base.sum() + xi_gen.sum() + xi_line.sum())
    assert d.objective == pytest.approx(total, rel=1e-9)


def test_oracle_beats_every_fixed_pattern(scopf3):
    inst = Instance(scopf3.base_loads * 1.1, 0.0, np.ones(3), np.ones(3))
    d = solve_scopf_bruteforce(scopf3, inst)
    # a dispatch that ignores security is never more expensive
    assert solve_ed(scopf3, inst).objective <= d.objective + 1e-9


def test_budget(scopf3, monkeypatch):
    monkeypatch.setattr(scopf, "MAX_PATTERNS", 8)
    with pytest.raises(BudgetExceeded):
        solve_scopf_bruteforce(scopf3, nominal_instance(scopf3))
