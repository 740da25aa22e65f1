"""Sampling of parametric dispatch instances and labeled datasets."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DegenerateFleet(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    loads: np.ndarray
    reserve_req: float
    cost_scale: np.ndarray
    pmax_scale: np.ndarray
    rng_seed: int = 0

    @property
    def total_load(self):
        return float(np.sum(self.loads))

    def cost(self, net):
        return net.cost * self.cost_scale

    def p_max(self, net):
        return net.p_max * self.pmax_scale

    def r_max(self, net):
        return np.minimum(net.r_max, self.p_max(net) - net.p_min)

    def to_dict(self):
        return {
            "loads": [float(v) for v in self.loads],
            "reserve_req": float(self.reserve_req),
            "cost_scale": [float(v) for v in self.cost_scale],
            "pmax_scale": [float(v) for v in self.pmax_scale],
            "rng_seed": int(self.rng_seed),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            loads=np.asarray(d["loads"], dtype=float),
            reserve_req=float(d["reserve_req"]),
            cost_scale=np.asarray(d["cost_scale"], dtype=float),
            pmax_scale=np.asarray(d["pmax_scale"], dtype=float),
            rng_seed=int(d.get("rng_seed", 0)),
        )


def nominal_instance(net, reserve_req=0.0):
    return Instance(
        loads=net.base_loads.copy(),
        reserve_req=float(reserve_req),
        cost_scale=np.ones(net.n_gen),
        pmax_scale=np.ones(net.n_gen),
    )


@dataclass(frozen=True)
class SamplerConfig:
    gamma_range: tuple = (0.8, 1.2)
    eta_sd: float = 0.05
    reserve_range: tuple | None = (1.0, 2.0)
    cost_range: tuple | None = None
    pmax_range: tuple | None = None
    split: tuple = (0.8, 0.1, 0.1)

    @classmethod
    def for_kind(cls, kind, **overrides):
        if kind == "ed":
            base = cls()
        elif kind == "dcopf":
            base = cls(reserve_range=None)
        elif kind == "scopf":
            base = cls(reserve_range=None, cost_range=(0.9, 1.1), pmax_range=(0.9, 1.1))
        else:
            raise ValueError(f"unknown instance kind {kind!r}")
        return replace(base, **overrides)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(**kw)


def lognormal_params(mean, sd):
    """(mu, sigma) of the underlying normal giving the requested mean and sd."""
    sigma2 = np.log1p((sd / mean) ** 2)
    return np.log(mean) - sigma2 / 2.0, np.sqrt(sigma2)


def draw_parameters(net, base_loads, cfg, rng, n):
    """Stacked loads, reserve requirements, cost and capacity multipliers for ``n`` draws."""
    base_loads = np.asarray(base_loads, dtype=float)
    g = net.n_gen
    gamma = rng.uniform(*cfg.gamma_range, size=(n, 1))
    if cfg.eta_sd > 0:
        mu, sigma = lognormal_params(1.0, cfg.eta_sd)
        eta = rng.lognormal(mu, sigma, size=(n, base_loads.size))
    else:
        eta = np.ones((n, base_loads.size))
    loads = gamma * eta * base_loads
    reserve = np.zeros(n)
    if cfg.reserve_range is not None:
        reserve = rng.uniform(*cfg.reserve_range, size=n) * float(np.max(net.p_max))
    cost_scale = rng.uniform(*cfg.cost_range, size=(n, g)) if cfg.cost_range else np.ones((n, g))
    pmax_scale = rng.uniform(*cfg.pmax_range, size=(n, g)) if cfg.pmax_range else np.ones((n, g))
    return loads, reserve, cost_scale, pmax_scale


def sample_instance(net, base_loads, cfg, seed):
    rng = np.random.default_rng(seed)
    loads, reserve, cost_scale, pmax_scale = draw_parameters(net, base_loads, cfg, rng, 1)
    return Instance(loads[0], float(reserve[0]), cost_scale[0], pmax_scale[0], int(seed))


def derive_seeds(master, n):
    """Independent per-instance seeds derived from one master seed."""
    ss = np.random.SeedSequence(master)
    return [int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(n)]


def reserve_factor(p_max):
    p_max = np.asarray(p_max, dtype=float)
    total = np.sum(np.abs(p_max))
    if total == 0:
        raise DegenerateFleet("fleet has zero total capacity")
    return min(1.0, 5.0 * np.max(np.abs(p_max)) / total)


def set_reserve_capacities(net):
    """Set reserve capacities so the fleet holds 5x its largest unit in reserve.

    The factor is clipped to 1 so that no unit reserves more than its
    capacity; small fleets hit the clip.
    """
    alpha = reserve_factor(net.p_max)
    gens = [replace(g, r_max=min(alpha * g.p_max, g.p_max - g.p_min)) for g in net.generators]
    return net.with_generators(gens)


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    network_ref: str
    kind: str
    instances: list
    split: dict
    config: dict = field(default_factory=dict)
    labels: list | None = None

    def subset(self, name):
        idx = self.split[name]
        labels = None if self.labels is None else [self.labels[i] for i in idx]
        return [self.instances[i] for i in idx], labels

    def __len__(self):
        return len(self.instances)


def split_counts(n, fractions):
    fr = np.asarray(fractions, dtype=float)
    fr = fr / fr.sum()
    counts = np.floor(fr * n).astype(int)
    # leftovers go to the largest split
    counts[int(np.argmax(fr))] += n - counts.sum()
    return counts


def _make_split(n, fractions):
    counts = split_counts(n, fractions)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return {name: list(range(bounds[i], bounds[i + 1])) for i, name in enumerate(SPLITS)}


def build_dataset(net, n, cfg, seed, kind="ed"):
    if n < 1:
        raise ValueError("dataset needs at least one instance")
    seeds = derive_seeds(seed, n)
    instances = [sample_instance(net, net.base_loads, cfg, s) for s in seeds]
    return Dataset(
        network_ref=net.digest(),
        kind=kind,
        instances=instances,
        split=_make_split(n, cfg.split),
        config={"sampler": cfg.to_dict(), "seed": int(seed), "n_instances": int(n)},
    )


def label_dataset(ds, net, solver=None, **solver_kw):
    """Attach oracle labels; instances the oracle reports infeasible are dropped."""
    from optproxy.solver.lp import Infeasible
    from optproxy.solver.models import label_solver

    solve = solver or label_solver(ds.kind)
    keep, labels = [], []
    for i, inst in enumerate(ds.instances):
        try:
            disp = solve(net, inst, **solver_kw)
        except Infeasible:
            log.info("dropping infeasible instance %d (seed %d)", i, inst.rng_seed)
            continue
        keep.append(i)
        labels.append(disp.to_dict())
    remap = {old: new for new, old in enumerate(keep)}
    split = {name: [remap[i] for i in idx if i in remap] for name, idx in ds.split.items()}
    return Dataset(
        network_ref=ds.network_ref,
        kind=ds.kind,
        instances=[ds.instances[i] for i in keep],
        split=split,
        config={**ds.config, "dropped": len(ds.instances) - len(keep)},
        labels=labels,
    )


def save_dataset(ds, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        header = {
            "header": {
                "network": ds.network_ref,
                "kind": ds.kind,
                "split": name,
                "config": ds.config,
                "count": len(ds.split[name]),
            }
        }
        lines = [json.dumps(header, sort_keys=True)]
        for i in ds.split[name]:
            rec = {"instance": ds.instances[i].to_dict()}
            if ds.labels is not None:
                rec["label"] = ds.labels[i]
            lines.append(json.dumps(rec, sort_keys=True))
        path = outdir / f"{name}.jsonl"
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def load_dataset(indir):
    indir = Path(indir)
    instances, labels, split = [], [], {}
    header = None
    for name in SPLITS:
        path = indir / f"{name}.jsonl"
        rows = [json.loads(s) for s in path.read_text().splitlines() if s.strip()]
        if not rows or "header" not in rows[0]:
            raise ValueError(f"{path}: missing header record")
        header = rows[0]["header"]
        split[name] = []
        for rec in rows[1:]:
            split[name].append(len(instances))
            instances.append(Instance.from_dict(rec["instance"]))
            labels.append(rec.get("label"))
    has_labels = bool(labels) and all(lb is not None for lb in labels)
    return Dataset(
        network_ref=header["network"],
        kind=header["kind"],
        instances=instances,
        split=split,
        config=header["config"],
        labels=labels if has_labels else None,
    )
