"""Monte-Carlo risk assessment over a day of five-minute economic dispatches.

Each scenario is a load trajectory; an engine turns every step into a
dispatch and the step is flagged when the dispatch misses power balance or
overloads a line. Event probabilities are scenario frequencies per step.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from optproxy.instances import Instance
from optproxy.primal import EdBatch, ed_terms, forward_proxy
from optproxy.solver.models import get_sens, solve_ed

HORIZON = 288
BALANCE_EPS = 1e-4  # times total load
THERMAL_EPS = 1e-3  # times line rating
ENGINES = ("oracle", "model", "replay")


@dataclass(frozen=True)
class ScenarioConfig:
    n_scenarios: int = 20
    horizon: int = HORIZON
    seed: int = 0
    level_range: tuple = (0.9, 1.1)
    noise_sd: float = 0.03
    reserve_range: tuple = (1.0, 2.0)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def daily_profile(horizon=HORIZON):
    """Load multiplier over one day: overnight trough, broad daytime rise, evening peak."""
    h = np.arange(horizon) * 24.0 / horizon
    return 0.9 - 0.1 * np.cos(2 * np.pi * (h - 3.0) / 24.0) + 0.05 * np.exp(-(((h - 19.0) / 2.0) ** 2))


@dataclass
class ScenarioSet:
    loads: np.ndarray  # (scenarios, horizon, buses)
    reserve: np.ndarray  # (scenarios,)
    config: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.loads.shape[:2]

    def instances(self, net, s):
        ones = np.ones(net.n_gen)
        return [Instance(row, float(self.reserve[s]), ones, ones) for row in self.loads[s]]

    def save(self, path):
        Path(path).write_text(
            json.dumps({"config": self.config, "loads": self.loads.tolist(), "reserve": self.reserve.tolist()})
        )

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        loads = np.asarray(d["loads"], dtype=float)
        if loads.ndim != 3:
            raise ValueError("scenario loads must be scenarios x horizon x buses")
        return cls(loads, np.asarray(d["reserve"], dtype=float), d.get("config", {}))


def generate_scenarios(net, cfg=None):
    cfg = cfg or ScenarioConfig()
    rng = np.random.default_rng(cfg.seed)
    s, t = cfg.n_scenarios, cfg.horizon
    level = rng.uniform(*cfg.level_range, size=(s, 1, 1))
    noise = np.exp(rng.normal(-0.5 * cfg.noise_sd**2, cfg.noise_sd, size=(s, t, net.n_bus)))
    loads = level * daily_profile(t)[None, :, None] * noise * net.base_loads
    reserve = rng.uniform(*cfg.reserve_range, size=s) * float(np.max(net.p_max))
    return ScenarioSet(loads, reserve, cfg.to_dict())


def congested_network(net, line, f_max):
    """Copy of ``net`` with one line re-rated, used to force thermal events."""
    lines = list(net.lines)
    lines[line] = replace(lines[line], f_max=float(f_max))
    return net.with_lines(lines)


# -- engines -------------------------------------------------------------------


def oracle_engine(net, instances):
    sens = get_sens(net)
    return np.array([solve_ed(net, inst, sens).p for inst in instances])


def model_engine(model):
    def run(net, instances):
        p, _ = forward_proxy(model, EdBatch.from_instances(net, instances))
        return p

    return run


def replay_engine(dispatch):
    """Engine that returns recorded set points, shaped (scenarios, horizon, gens)."""
    dispatch = np.asarray(dispatch, dtype=float)

    def run(net, instances, s):
        return dispatch[s]

    run.indexed = True
    return run


def scenario_events(net, scen, s, engine):
    """Balance flags (T,), thermal flags (T, L) and wall time for scenario ``s``."""
    insts = scen.instances(net, s)
    t0 = time.perf_counter()
    p = engine(net, insts, s) if getattr(engine, "indexed", False) else engine(net, insts)
    seconds = time.perf_counter() - t0
    batch = EdBatch.from_instances(net, insts)
    terms = ed_terms(net, batch, p)
    f = terms.flows
    xi = np.maximum(0.0, np.abs(f) - net.f_max)
    balance = np.abs(terms.balance) > BALANCE_EPS * batch.total_load
    thermal = xi > THERMAL_EPS * net.f_max
    return balance, thermal, seconds


def _oracle_job(args):
    net, scen, s = args
    return scenario_events(net, scen, s, oracle_engine)


@dataclass
class RiskReport:
    engine: str
    scenarios: int
    horizon: int
    balance: np.ndarray  # (T,) event probability
    thermal: np.ndarray  # (T, L)
    seconds: np.ndarray  # per scenario
    oracle_balance: np.ndarray | None = None
    oracle_thermal: np.ndarray | None = None
    oracle_seconds: np.ndarray | None = None

    @property
    def has_oracle(self):
        return self.oracle_balance is not None

    def columns(self, line_names):
        cols = ["t", "balance"] + [f"thermal_{n}" for n in line_names]
        if self.has_oracle:
            cols += ["oracle_balance"] + [f"oracle_thermal_{n}" for n in line_names]
        return cols

    def rows(self):
        for t in range(self.horizon):
            row = [t, float(self.balance[t]), *map(float, self.thermal[t])]
            if self.has_oracle:
                row += [float(self.oracle_balance[t]), *map(float, self.oracle_thermal[t])]
            yield row

    def summary(self):
        out = {
            "engine": self.engine,
            "scenarios": self.scenarios,
            "horizon": self.horizon,
            "max_balance_probability": float(self.balance.max(initial=0.0)),
            "max_thermal_probability": float(self.thermal.max(initial=0.0)),
            "seconds_per_scenario": float(np.mean(self.seconds)),
        }
        if self.has_oracle:
            out["oracle_max_balance_probability"] = float(self.oracle_balance.max(initial=0.0))
            out["oracle_seconds_per_scenario"] = float(np.mean(self.oracle_seconds))
            out["max_thermal_disagreement"] = float(np.max(np.abs(self.thermal - self.oracle_thermal), initial=0.0))
        return out


def _collect(results):
    bal = np.mean([r[0] for r in results], axis=0)
    th = np.mean([r[1] for r in results], axis=0)
    return bal, th, np.array([r[2] for r in results])


def _run_oracle(net, scen, workers):
    jobs = [(net, scen, s) for s in range(scen.shape[0])]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_oracle_job, jobs))
    return [_oracle_job(j) for j in jobs]


def run_risk(net, scen, engine="oracle", model=None, dispatch=None, compare_oracle=False, workers=1):
    """Event probabilities per step for ``engine``; optional oracle columns alongside."""
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}")
    n_s, horizon = scen.shape
    if engine == "oracle":
        results = _run_oracle(net, scen, workers)
    else:
        if engine == "model":
            if model is None:
                raise ValueError("model engine needs a trained model")
            fn = model_engine(model)
        else:
            if dispatch is None:
                raise ValueError("replay engine needs recorded dispatches")
            fn = replay_engine(dispatch)
        results = [scenario_events(net, scen, s, fn) for s in range(n_s)]
    bal, th, sec = _collect(results)
    report = RiskReport(engine, n_s, horizon, bal, th, sec)
    if compare_oracle and engine != "oracle":
        ob, ot, osec = _collect(_run_oracle(net, scen, workers))
        report.oracle_balance, report.oracle_thermal, report.oracle_seconds = ob, ot, osec
    return report
