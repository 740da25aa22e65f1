"""Primal proxies for economic dispatch: architectures, losses, training, evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from optproxy import repair
from optproxy.instances import SamplerConfig, derive_seeds, sample_instance
from optproxy.metrics import GAP_SHIFT, VIOLATION_SHIFT, shifted_geomean
from optproxy.nn import (
    Adam,
    DivergenceDetected,
    Mlp,
    adam_step,
    backward,
    bound_map,
    bound_map_backward,
    forward,
)
from optproxy.solver.models import DEFAULT_PENALTIES, Dispatch, get_sens

log = logging.getLogger(__name__)

ARCHITECTURES = ("naive", "deepopf", "dc3", "e2elr")
REGIMES = ("sl", "ld", "ssl")
DC3_TRAIN_STEPS = 50
DC3_INFER_STEPS = 200


@dataclass
class EdBatch:
    """Instance parameters stacked along axis 0."""

    loads: np.ndarray
    cost: np.ndarray
    p_max: np.ndarray
    r_max: np.ndarray
    R: np.ndarray

    @classmethod
    def from_instances(cls, net, instances):
        return cls(
            loads=np.array([i.loads for i in instances]),
            cost=np.array([i.cost(net) for i in instances]),
            p_max=np.array([i.p_max(net) for i in instances]),
            r_max=np.array([i.r_max(net) for i in instances]),
            R=np.array([i.reserve_req for i in instances]),
        )

    def __len__(self):
        return self.loads.shape[0]

    @property
    def total_load(self):
        return self.loads.sum(axis=1)

    def context(self, net):
        return repair.RepairContext.make(
            np.broadcast_to(net.p_min, self.p_max.shape), self.p_max, self.r_max, self.total_load, self.R
        )


# -- objective pieces ----------------------------------------------------------


@dataclass
class EdTerms:
    cost: np.ndarray
    thermal: np.ndarray  # sum of thermal slack per instance
    balance: np.ndarray  # signed 1'p - 1'd
    shortfall: np.ndarray
    flows: np.ndarray

    def model_objective(self, pen):
        return self.cost + pen.thermal * self.thermal

    def penalized(self, pen):
        return self.model_objective(pen) + pen.balance * np.abs(self.balance) + pen.reserve * self.shortfall


def ed_terms(net, batch, p, sens=None):
    sens = sens or get_sens(net)
    f = (p @ net.gen_bus.T - batch.loads) @ sens.ptdf.T
    xi = np.maximum(0.0, f - net.f_max) + np.maximum(0.0, -net.f_max - f)
    r = np.minimum(batch.r_max, batch.p_max - p)
    return EdTerms(
        cost=np.sum(batch.cost * p, axis=1),
        thermal=xi.sum(axis=1),
        balance=p.sum(axis=1) - batch.total_load,
        shortfall=np.maximum(0.0, batch.R - r.sum(axis=1)),
        flows=f,
    )


def penalized_objective_grad(net, batch, p, pen=DEFAULT_PENALTIES, sens=None):
    """Per-instance penalized objective and its gradient with respect to ``p``."""
    sens = sens or get_sens(net)
    t = ed_terms(net, batch, p, sens)
    over = (t.flows > net.f_max).astype(float) - (t.flows < -net.f_max)
    ptdf_gen = sens.ptdf @ net.gen_bus
    grad = batch.cost + pen.thermal * over @ ptdf_gen
    grad += pen.balance * np.sign(t.balance)[:, None]
    short_mask = (batch.p_max - p < batch.r_max).astype(float)
    grad += pen.reserve * (t.shortfall > 0)[:, None] * short_mask
    return t.penalized(pen), grad


# -- proxy ---------------------------------------------------------------------


@dataclass
class FeatureMap:
    """Centered load ratios to the base case, plus the reserve requirement over the largest unit."""

    load_buses: np.ndarray
    base: np.ndarray
    reserve_scale: float

    @classmethod
    def for_network(cls, net):
        idx = np.flatnonzero(net.base_loads)
        return cls(idx, net.base_loads[idx], float(np.max(net.p_max)))

    @property
    def dim(self):
        return self.load_buses.size + 1

    def __call__(self, batch):
        rel = batch.loads[:, self.load_buses] / self.base - 1.0
        return np.column_stack([rel, batch.R / self.reserve_scale - 1.5])


class ProxyModel:
    def __init__(self, net, arch="e2elr", mlp=None, n_hidden=3, width=None, seed=0):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}")
        self.net = net
        self.arch = arch
        self.features = FeatureMap.for_network(net)
        self.mlp = mlp or Mlp.build(self.features.dim, net.n_gen, n_hidden, width, out_act="sigmoid", seed=seed)
        self.dc3_steps = DC3_INFER_STEPS

    def to_dict(self, config=None):
        return {"arch": self.arch, "network": self.net.digest(), "mlp": self.mlp.to_dict(config)}

    @classmethod
    def from_dict(cls, net, d):
        if d.get("network") not in (None, net.digest()):
            raise ValueError("checkpoint was trained on a different network")
        return cls(net, d["arch"], Mlp.from_dict(d["mlp"]))


def forward_proxy(model, batch, dc3_steps=None):
    """Dispatch for every instance in ``batch`` plus a closure for backprop."""
    net = model.net
    ctx = batch.context(net)
    s, tape = forward(model.mlp, model.features(batch))
    lo, hi = ctx.glb, ctx.gub
    p_hat = bound_map(s, lo, hi)
    steps = []
    if model.arch == "naive":
        p = p_hat
    elif model.arch == "deepopf":
        p, tr = repair.equality_completion(p_hat, ctx)
        steps.append(lambda g, tr=tr: repair.equality_completion_backward(tr, g))
    elif model.arch == "dc3":
        k = model.dc3_steps if dc3_steps is None else dc3_steps
        p, tr = repair.unrolled_correction(p_hat, ctx, k)
        steps.append(lambda g, tr=tr: repair.unrolled_correction_backward(tr, g))
    else:
        p_t, tb = repair.power_balance_repair(p_hat, ctx)
        p, _, tr = repair.reserve_repair(p_t, ctx)
        steps.append(lambda g, tr=tr: repair.reserve_repair_backward(tr, g))
        steps.append(lambda g, tb=tb: repair.power_balance_repair_backward(tb, g))

    def back(g):
        for step in steps:
            g = step(g)
        return backward(model.mlp, tape, bound_map_backward(g, lo, hi))

    return p, back


def predict(model, instances, sens=None):
    """Dispatches (one per instance) with reserves read out from the final set points."""
    net = model.net
    sens = sens or get_sens(net)
    batch = EdBatch.from_instances(net, instances)
    p, _ = forward_proxy(model, batch)
    t = ed_terms(net, batch, p, sens)
    f = t.flows
    xi = np.maximum(0.0, f - net.f_max) + np.maximum(0.0, -net.f_max - f)
    r = np.maximum(0.0, np.minimum(batch.r_max, batch.p_max - p))
    obj = t.model_objective(DEFAULT_PENALTIES)
    return [Dispatch(p[i], r[i], xi[i], float(obj[i]), extra={"arch": model.arch}) for i in range(len(batch))]


# -- losses --------------------------------------------------------------------


def loss_supervised(p, p_star):
    """Mean squared L2 distance and its gradient."""
    diff = np.atleast_2d(p) - np.atleast_2d(p_star)
    n = diff.shape[0]
    return float(np.sum(diff**2) / n), 2.0 * diff / n


@dataclass
class LdState:
    lam: float = 0.0
    nu: float = 0.0
    step: float = 0.1

    def to_dict(self):
        return asdict(self)


def ld_violations(net, batch, p):
    t = ed_terms(net, batch, p)
    return np.abs(t.balance), t.shortfall, t


def loss_lagrangian(p, p_star, ld, net, batch):
    """Supervised loss plus multiplier-weighted balance and reserve violations."""
    sl, g = loss_supervised(p, p_star)
    bal, short, t = ld_violations(net, batch, p)
    n = p.shape[0]
    loss = sl + (ld.lam * bal.sum() + ld.nu * short.sum()) / n
    g = g + ld.lam * np.sign(t.balance)[:, None] / n
    mask = (batch.p_max - p < batch.r_max).astype(float)
    g = g + ld.nu * (short > 0)[:, None] * mask / n
    return float(loss), g


def ld_update(ld, bal_violation, reserve_violation):
    return LdState(
        lam=ld.lam + ld.step * float(np.mean(bal_violation)),
        nu=max(0.0, ld.nu + ld.step * float(np.mean(reserve_violation))),
        step=ld.step,
    )


def loss_selfsup(net, batch, p, pen=DEFAULT_PENALTIES, scale=1.0):
    """Mean penalized objective; equals the dispatch objective when ``p`` is feasible."""
    val, grad = penalized_objective_grad(net, batch, p, pen)
    n = p.shape[0]
    return float(val.sum() / (n * scale)), grad / (n * scale)


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    regime: str = "ssl"
    epochs: int = 200
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    fresh_samples: bool = False  # SSL only: draw new instances each minibatch
    ld_step: float = 0.1
    penalties: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")


def _cost_scale(net, batch):
    return float(np.mean(batch.total_load) * np.mean(batch.cost))


def train(model, instances=None, labels=None, cfg=None, sampler=None):
    """Train ``model`` in place; returns the per-epoch history.

    SL and LD need labels. SSL uses ``instances`` as a fixed pool, or with
    ``cfg.fresh_samples`` draws new instances from ``sampler`` every step.
    """
    from optproxy.solver.models import Penalties

    cfg = cfg or TrainConfig()
    net = model.net
    pen = Penalties(**cfg.penalties) if cfg.penalties else DEFAULT_PENALTIES
    if cfg.regime in ("sl", "ld") and labels is None:
        raise ValueError(f"regime {cfg.regime} needs labeled instances")
    if cfg.fresh_samples and sampler is None:
        sampler = SamplerConfig.for_kind("ed")
    if instances is None and not cfg.fresh_samples:
        raise ValueError("no training instances")
    full = EdBatch.from_instances(net, instances) if instances is not None else None
    targets = np.array([lb["p"] for lb in labels]) if labels is not None else None
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.mlp.flat().size, lr=cfg.lr)
    ld = LdState(step=cfg.ld_step)
    scale = _cost_scale(net, full) if full is not None else float(net.base_loads.sum() * net.cost.mean())
    if model.arch == "dc3":
        model.dc3_steps = DC3_TRAIN_STEPS
    n = len(full) if full is not None else cfg.batch * 8
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, bal_v, res_v = [], [], []
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            if cfg.fresh_samples:
                seeds = rng.integers(0, 2**63 - 1, size=len(idx))
                insts = [sample_instance(net, net.base_loads, sampler, int(s)) for s in seeds]
                batch = EdBatch.from_instances(net, insts)
            else:
                batch = EdBatch(*(a[idx] for a in (full.loads, full.cost, full.p_max, full.r_max, full.R)))
            p, back = forward_proxy(model, batch)
            if cfg.regime == "sl":
                loss, g = loss_supervised(p, targets[idx])
            elif cfg.regime == "ld":
                loss, g = loss_lagrangian(p, targets[idx], ld, net, batch)
                bv, rv, _ = ld_violations(net, batch, p)
                bal_v.append(bv)
                res_v.append(rv)
            else:
                loss, g = loss_selfsup(net, batch, p, pen, scale)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} at epoch {epoch}")
            adam_step(opt, model.mlp, back(g))
            losses.append(loss)
        if cfg.regime == "ld":
            ld = ld_update(ld, np.concatenate(bal_v), np.concatenate(res_v))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), **({"ld": ld.to_dict()} if cfg.regime == "ld" else {})})
    model.dc3_steps = DC3_INFER_STEPS
    return history


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    arch: str
    gaps: np.ndarray
    balance: np.ndarray
    reserve: np.ndarray
    thermal: np.ndarray
    box: np.ndarray

    @property
    def mean_gap(self):
        return float(np.mean(self.gaps))

    @property
    def feasibility_rate(self):
        tol = 1e-6
        ok = (self.balance <= tol) & (self.reserve <= tol) & (self.box <= tol)
        return float(np.mean(ok))

    def summary(self):
        return {
            "arch": self.arch,
            "n": int(self.gaps.size),
            "mean_gap": self.mean_gap,
            "geomean_gap": shifted_geomean(self.gaps, GAP_SHIFT),
            "max_gap": float(np.max(self.gaps)),
            "feasibility_rate": self.feasibility_rate,
            "balance_violation": shifted_geomean(self.balance, VIOLATION_SHIFT),
            "reserve_violation": shifted_geomean(self.reserve, VIOLATION_SHIFT),
            "thermal_violation": shifted_geomean(self.thermal, VIOLATION_SHIFT),
        }


def evaluate_dispatch(net, instances, labels, p, arch="replay", pen=DEFAULT_PENALTIES):
    batch = EdBatch.from_instances(net, instances)
    t = ed_terms(net, batch, p)
    z_star = np.array([lb["objective"] for lb in labels])
    z_hat = t.penalized(pen)
    box = np.maximum(0.0, net.p_min - p).sum(axis=1) + np.maximum(0.0, p - batch.p_max).sum(axis=1)
    return EvalReport(arch, (z_hat - z_star) / np.abs(z_star), np.abs(t.balance), t.shortfall, t.thermal, box)


def evaluate(model, instances, labels, pen=DEFAULT_PENALTIES):
    batch = EdBatch.from_instances(model.net, instances)
    p, _ = forward_proxy(model, batch)
    return evaluate_dispatch(model.net, instances, labels, p, model.arch, pen)


def sample_stream(net, n, seed, cfg=None):
    cfg = cfg or SamplerConfig.for_kind("ed")
    return [sample_instance(net, net.base_loads, cfg, s) for s in derive_seeds(seed, n)]
