"""Extensive N-1 SCOPF solved exactly by enumerating the APR binaries.

For a fixed assignment of the response indicators rho the model is an LP:
rho[k, i] = 0 pins p[k, i] = p[i] + n[k] * gamma[i] * ramp[i] and
rho[k, i] = 1 pins p[k, i] to its upper limit with p[i] + n[k] * gamma[i] *
ramp[i] >= p_max[i]. The best LP over all assignments is the MIP optimum.
"""

from __future__ import annotations

import itertools

import numpy as np

from optproxy.solver.lp import Infeasible, SolverError, simplex_solve
from optproxy.solver.models import (
    DEFAULT_PENALTIES,
    Dispatch,
    _add_soft_flow_rows,
    _Builder,
    _flow_bound,
    get_sens,
)

MAX_PATTERNS = 2**16


class BudgetExceeded(SolverError):
    pass


def apr_ramp(net, inst):
    """Droop capacity p_max - p_min, using the instance's effective p_max."""
    return inst.p_max(net) - net.p_min


def line_contingency_ptdf(sens, k):
    """PTDF seen by post-outage flows of line k: f + f_k * LODF[:, k]."""
    return sens.ptdf + np.outer(sens.lodf[:, k], sens.ptdf[k])


def default_contingencies(net, sens=None):
    sens = sens or get_sens(net)
    return list(range(net.n_gen)), list(sens.outages)


def _build(net, inst, sens, gen_ks, line_ks, rho, penalties):
    G = net.n_gen
    pmax, pmin = inst.p_max(net), net.p_min
    ramp = apr_ramp(net, inst)
    slope = net.gamma * ramp
    bound = _flow_bound(net, inst)
    M = penalties.scopf_slack
    load_flow = sens.ptdf @ inst.loads
    bld = _Builder()
    p = [bld.var(f"p[{g}]", pmin[g], pmax[g], inst.cost(net)[g]) for g in range(G)]
    bld.row("balance", [(j, 1.0) for j in p], inst.total_load)
    _add_soft_flow_rows(bld, net, sens.ptdf, p, load_flow, "0", M, bound)
    for a, k in enumerate(gen_ks):
        n = bld.var(f"n[{k}]", 0.0, 1.0)
        pk = [None] * G
        for i in range(G):
            if i == k:
                continue
            if rho[a][i]:
                pk[i] = bld.var(f"pk[{k},{i}]", pmax[i], pmax[i])
                s = bld.var(f"apr[{k},{i}]", 0.0, ramp[i])
                bld.row(f"apr[{k},{i}]", [(p[i], 1.0), (n, slope[i]), (s, -1.0)], pmax[i])
            else:
                pk[i] = bld.var(f"pk[{k},{i}]", pmin[i], pmax[i])
                bld.row(f"apr[{k},{i}]", [(pk[i], 1.0), (p[i], -1.0), (n, -slope[i])], 0.0)
        bld.row(f"balance[{k}]", [(j, 1.0) for j in pk if j is not None], inst.total_load)
        _add_soft_flow_rows(bld, net, sens.ptdf, pk, load_flow, f"g{k}", M, bound)
    for k in line_ks:
        ptdf_k = line_contingency_ptdf(sens, k)
        _add_soft_flow_rows(bld, net, ptdf_k, p, ptdf_k @ inst.loads, f"e{k}", M, bound, skip={k})
    return bld.build()


def _slack(lp, y, tag):
    return y[lp.cols(f"xp{tag}[")] + y[lp.cols(f"xm{tag}[")]


def solve_scopf_bruteforce(net, inst, gen_ks=None, line_ks=None, sens=None, penalties=DEFAULT_PENALTIES):
    """Optimal extensive SCOPF dispatch by enumeration of the APR indicators.

    ``gen_ks`` and ``line_ks`` default to every generator and every
    non-radial line. Raises BudgetExceeded when the number of indicator
    patterns passes MAX_PATTERNS and Infeasible when no pattern is feasible.
    """
    sens = sens or get_sens(net)
    dg, dl = default_contingencies(net, sens)
    gen_ks = dg if gen_ks is None else list(gen_ks)
    line_ks = dl if line_ks is None else list(line_ks)
    G = net.n_gen
    n_bits = len(gen_ks) * (G - 1)
    if 2**n_bits > MAX_PATTERNS:
        raise BudgetExceeded(f"{2 ** n_bits} indicator patterns exceed budget {MAX_PATTERNS}")
    best = None
    for bits in itertools.product((0, 1), repeat=n_bits):
        it = iter(bits)
        rho = [[0 if i == k else next(it) for i in range(G)] for k in gen_ks]
        lp = _build(net, inst, sens, gen_ks, line_ks, rho, penalties)
        sol = simplex_solve(lp)
        if sol.optimal and (best is None or sol.objective < best[2].objective - 1e-9):
            best = (lp, rho, sol)
    if best is None:
        raise Infeasible("no APR pattern admits a feasible SCOPF dispatch")
    lp, rho, sol = best
    y = sol.y
    p_k = np.zeros((len(gen_ks), G))
    n_k = np.zeros(len(gen_ks))
    for a, k in enumerate(gen_ks):
        n_k[a] = y[lp.col(f"n[{k}]")]
        for i in range(G):
            if i != k:
                p_k[a, i] = y[lp.col(f"pk[{k},{i}]")]
    return Dispatch(
        p=y[:G].copy(),
        r=np.zeros(G),
        xi_th=_slack(lp, y, "0"),
        objective=sol.objective,
        extra={
            "gen_contingencies": list(gen_ks),
            "line_contingencies": list(line_ks),
            "p_k": p_k.tolist(),
            "n_k": n_k.tolist(),
            "rho_k": rho,
            "xi_gen": [_slack(lp, y, f"g{k}").tolist() for k in gen_ks],
            "xi_line": [_slack(lp, y, f"e{k}").tolist() for k in line_ks],
        },
    )
