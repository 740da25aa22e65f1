"""Economic dispatch and DC-OPF as standard-form LPs, solved exactly."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from optproxy.grid import sensitivities
from optproxy.solver.lp import Infeasible, StandardLp, simplex_solve


@dataclass(frozen=True)
class Penalties:
    """Penalty prices in $/MWh. Repository defaults, configurable."""

    thermal: float = 1500.0
    balance: float = 10000.0
    reserve: float = 1100.0
    scopf: float | None = None

    @property
    def scopf_slack(self):
        return self.thermal if self.scopf is None else self.scopf


DEFAULT_PENALTIES = Penalties()


@lru_cache(maxsize=32)
def get_sens(net):
    return sensitivities(net)


@dataclass
class Dispatch:
    p: np.ndarray
    r: np.ndarray
    xi_th: np.ndarray
    objective: float
    status: str = "Optimal"
    extra: dict = field(default_factory=dict)

    @property
    def feasible(self):
        return self.status == "Optimal"

    def to_dict(self):
        out = {
            "status": self.status,
            "objective": float(self.objective),
            "p": [float(v) for v in self.p],
            "r": [float(v) for v in self.r],
            "xi_th": [float(v) for v in self.xi_th],
        }
        for k, v in self.extra.items():
            out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d):
        core = {"status", "objective", "p", "r", "xi_th"}
        extra = {k: v for k, v in d.items() if k not in core}
        return cls(
            p=np.asarray(d["p"], dtype=float),
            r=np.asarray(d["r"], dtype=float),
            xi_th=np.asarray(d["xi_th"], dtype=float),
            objective=float(d["objective"]),
            status=d.get("status", "Optimal"),
            extra=extra,
        )


# -- evaluation helpers shared with the proxies ------------------------------


def injections(net, inst, p):
    """Nodal injections (batched on axis 0) for dispatch ``p``."""
    return np.asarray(p) @ net.gen_bus.T - inst.loads


def line_flows(net, sens, inst, p):
    return injections(net, inst, p) @ sens.ptdf.T


def thermal_slack(net, sens, inst, p):
    """Smallest thermal slack making ``p`` satisfy the soft flow limits."""
    f = line_flows(net, sens, inst, p)
    return np.maximum(0.0, f - net.f_max) + np.maximum(0.0, -net.f_max - f)


def max_reserve(net, inst, p):
    return np.minimum(inst.r_max(net), inst.p_max(net) - np.asarray(p))


def reserve_shortfall(net, inst, p):
    return np.maximum(0.0, inst.reserve_req - np.sum(max_reserve(net, inst, p), axis=-1))


def ed_objective(net, sens, inst, p, penalties=DEFAULT_PENALTIES):
    xi = thermal_slack(net, sens, inst, p)
    return float(inst.cost(net) @ p + penalties.thermal * xi.sum())


def penalized_objective(net, sens, inst, p, penalties=DEFAULT_PENALTIES):
    """Objective of a possibly infeasible dispatch with violations priced in."""
    p = np.asarray(p)
    return (
        ed_objective(net, sens, inst, p, penalties)
        + penalties.balance * abs(p.sum() - inst.total_load)
        + penalties.reserve * float(reserve_shortfall(net, inst, p))
    )


# -- LP builders -------------------------------------------------------------


class _Builder:
    def __init__(self):
        self.cols, self.lo, self.hi, self.cost = [], [], [], []
        self.rows, self.rhs, self.entries = [], [], []

    def var(self, name, lo, hi, cost=0.0):
        self.cols.append(name)
        self.lo.append(lo)
        self.hi.append(hi)
        self.cost.append(cost)
        return len(self.cols) - 1

    def row(self, name, coeffs, rhs):
        r = len(self.rows)
        self.rows.append(name)
        self.rhs.append(rhs)
        for j, a in coeffs:
            if a != 0.0:
                self.entries.append((r, j, a))
        return r

    def build(self):
        A = np.zeros((len(self.rows), len(self.cols)))
        for r, j, a in self.entries:
            A[r, j] += a
        return StandardLp(A, self.rhs, self.cost, self.lo, self.hi, list(self.rows), list(self.cols))


def _flow_bound(net, inst):
    return float(np.sum(inst.p_max(net)) + inst.total_load + 1.0)


def _add_soft_flow_rows(bld, net, ptdf_rows, gen_cols, base_rhs, tag, slack_cost, bound, skip=()):
    """Rows ``ptdf_g p - f - xp + xm = ptdf d`` with f inside thermal limits.

    A ``None`` entry in ``gen_cols`` marks a generator held at zero output.
    """
    ptdf_gen = ptdf_rows @ net.gen_bus
    for k in range(net.n_line):
        if k in skip:
            continue
        fmax = net.f_max[k]
        f = bld.var(f"f{tag}[{k}]", -fmax, fmax)
        xp = bld.var(f"xp{tag}[{k}]", 0.0, bound, slack_cost)
        xm = bld.var(f"xm{tag}[{k}]", 0.0, bound, slack_cost)
        coeffs = [(gen_cols[g], ptdf_gen[k, g]) for g in range(net.n_gen) if gen_cols[g] is not None]
        coeffs += [(f, -1.0), (xp, -1.0), (xm, 1.0)]
        bld.row(f"flow{tag}[{k}]", coeffs, base_rhs[k])


def build_ed_lp(net, inst, sens=None, penalties=DEFAULT_PENALTIES):
    sens = sens or get_sens(net)
    pmax, rmax = inst.p_max(net), inst.r_max(net)
    c = inst.cost(net)
    bld = _Builder()
    p = [bld.var(f"p[{g}]", net.p_min[g], pmax[g], c[g]) for g in range(net.n_gen)]
    r = [bld.var(f"r[{g}]", 0.0, rmax[g]) for g in range(net.n_gen)]
    s = [bld.var(f"scap[{g}]", 0.0, pmax[g]) for g in range(net.n_gen)]
    sres = bld.var("sres", 0.0, float(rmax.sum()) + 1.0)
    bld.row("balance", [(j, 1.0) for j in p], inst.total_load)
    bld.row("reserve", [(j, 1.0) for j in r] + [(sres, -1.0)], inst.reserve_req)
    for g in range(net.n_gen):
        bld.row(f"cap[{g}]", [(p[g], 1.0), (r[g], 1.0), (s[g], 1.0)], pmax[g])
    _add_soft_flow_rows(
        bld, net, sens.ptdf, p, sens.ptdf @ inst.loads, "", penalties.thermal, _flow_bound(net, inst)
    )
    return bld.build()


def _ed_dispatch(net, lp, sol):
    G = net.n_gen
    y = sol.y
    xi = y[lp.cols("xp[")] + y[lp.cols("xm[")]
    return Dispatch(
        p=y[:G].copy(),
        r=y[G : 2 * G].copy(),
        xi_th=xi,
        objective=sol.objective,
        extra={"z": sol.z.tolist(), "z_l": sol.z_l.tolist(), "z_u": sol.z_u.tolist()},
    )


def solve_ed(net, inst, sens=None, penalties=DEFAULT_PENALTIES):
    lp = build_ed_lp(net, inst, sens, penalties)
    sol = simplex_solve(lp)
    if not sol.optimal:
        raise Infeasible(f"economic dispatch is {sol.status.value}")
    return _ed_dispatch(net, lp, sol)


def build_dcopf_lp(net, inst, sens=None):
    """DC-OPF with hard flow limits; columns are ``p`` then ``f``."""
    sens = sens or get_sens(net)
    pmax, c = inst.p_max(net), inst.cost(net)
    bld = _Builder()
    p = [bld.var(f"p[{g}]", net.p_min[g], pmax[g], c[g]) for g in range(net.n_gen)]
    bld.row("balance", [(j, 1.0) for j in p], inst.total_load)
    ptdf_gen = sens.ptdf @ net.gen_bus
    rhs = -(sens.ptdf @ inst.loads)
    for k in range(net.n_line):
        f = bld.var(f"f[{k}]", -net.f_max[k], net.f_max[k])
        coeffs = [(p[g], -ptdf_gen[k, g]) for g in range(net.n_gen)] + [(f, 1.0)]
        bld.row(f"flow[{k}]", coeffs, rhs[k])
    return bld.build()


def solve_dcopf(net, inst, sens=None):
    lp = build_dcopf_lp(net, inst, sens)
    sol = simplex_solve(lp)
    if not sol.optimal:
        raise Infeasible(f"DC-OPF is {sol.status.value}")
    G = net.n_gen
    return Dispatch(
        p=sol.y[:G].copy(),
        r=np.zeros(G),
        xi_th=np.zeros(net.n_line),
        objective=sol.objective,
        extra={"z": sol.z.tolist(), "z_l": sol.z_l.tolist(), "z_u": sol.z_u.tolist()},
    )


def projection_repair(net, inst, p_hat, sens=None, penalties=DEFAULT_PENALTIES):
    """Closest (in L1) dispatch to ``p_hat`` satisfying the dispatch constraints.

    Thermal limits are soft in the dispatch model, so they do not restrict the
    projection; the returned slack is the minimal one for the projected ``p``.
    """
    p_hat = np.asarray(p_hat, dtype=float)
    if not np.all(np.isfinite(p_hat)):
        raise ValueError("p_hat must be finite")
    sens = sens or get_sens(net)
    pmax, rmax = inst.p_max(net), inst.r_max(net)
    big = float(np.abs(p_hat).sum() + pmax.sum() + 1.0)
    bld = _Builder()
    G = net.n_gen
    p = [bld.var(f"p[{g}]", net.p_min[g], pmax[g]) for g in range(G)]
    r = [bld.var(f"r[{g}]", 0.0, rmax[g]) for g in range(G)]
    s = [bld.var(f"scap[{g}]", 0.0, pmax[g]) for g in range(G)]
    sres = bld.var("sres", 0.0, float(rmax.sum()) + 1.0)
    tp = [bld.var(f"tp[{g}]", 0.0, big, 1.0) for g in range(G)]
    tm = [bld.var(f"tm[{g}]", 0.0, big, 1.0) for g in range(G)]
    bld.row("balance", [(j, 1.0) for j in p], inst.total_load)
    bld.row("reserve", [(j, 1.0) for j in r] + [(sres, -1.0)], inst.reserve_req)
    for g in range(G):
        bld.row(f"cap[{g}]", [(p[g], 1.0), (r[g], 1.0), (s[g], 1.0)], pmax[g])
        bld.row(f"dist[{g}]", [(p[g], 1.0), (tp[g], -1.0), (tm[g], 1.0)], p_hat[g])
    lp = bld.build()
    sol = simplex_solve(lp)
    if not sol.optimal:
        raise Infeasible("dispatch feasible set is empty")
    pp = sol.y[:G].copy()
    xi = thermal_slack(net, sens, inst, pp)
    return Dispatch(
        p=pp,
        r=max_reserve(net, inst, pp),
        xi_th=xi,
        objective=ed_objective(net, sens, inst, pp, penalties),
        extra={"distance": float(sol.objective)},
    )


def label_solver(kind):
    if kind == "ed":
        return solve_ed
    if kind == "dcopf":
        return solve_dcopf
    if kind == "scopf":
        from optproxy.solver.scopf import solve_scopf_bruteforce

        return solve_scopf_bruteforce
    raise ValueError(f"unknown dataset kind {kind!r}")
