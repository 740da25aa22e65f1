"""Dual optimization proxies for parametric LPs, applied to DC-OPF.

A network predicts the equality duals z; the bound duals then follow in
closed form, z_l = (c - A'z)^+ and z_u = (c - A'z)^-, which makes every
prediction dual feasible and its objective a valid lower bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from optproxy.metrics import GAP_SHIFT, shifted_geomean
from optproxy.nn import Adam, DivergenceDetected, Mlp, adam_step, backward, forward
from optproxy.solver.models import build_dcopf_lp, get_sens


@dataclass
class DualSolution:
    z: np.ndarray
    z_l: np.ndarray
    z_u: np.ndarray
    dual_objective: float

    def residual(self, lp):
        """Largest entry of |A'z + z_l - z_u - c|."""
        return float(np.max(np.abs(lp.A.T @ self.z + self.z_l - self.z_u - lp.c), initial=0.0))


def completion_lp(z_hat, lp):
    z = np.asarray(z_hat, dtype=float).ravel()
    r = lp.c - lp.A.T @ z
    z_l = np.maximum(r, 0.0)
    z_u = np.maximum(-r, 0.0)
    return DualSolution(z, z_l, z_u, lp.dual_objective(z, z_l, z_u))


def completion_grad(z_hat, lp):
    """Subgradient of the completed dual objective in z; r = 0 counts as z_l active."""
    r = lp.c - lp.A.T @ np.asarray(z_hat, dtype=float).ravel()
    y = np.where(r >= 0.0, lp.l, lp.u)
    return lp.b - lp.A @ y


def completion_backward(z_hat, lp, cotangent=1.0):
    return cotangent * completion_grad(z_hat, lp)


# -- batched DC-OPF form -------------------------------------------------------


@dataclass
class LpBatch:
    """DC-OPF LPs that differ only in the right-hand side b."""

    A: np.ndarray
    b: np.ndarray  # (batch, m)
    c: np.ndarray
    l: np.ndarray
    u: np.ndarray

    @classmethod
    def from_instances(cls, net, instances, sens=None):
        sens = sens or get_sens(net)
        lps = [build_dcopf_lp(net, inst, sens) for inst in instances]
        first = lps[0]
        for lp in lps[1:]:
            if not (np.array_equal(lp.A, first.A) and np.array_equal(lp.c, first.c) and np.array_equal(lp.u, first.u)):
                raise ValueError("batched dual evaluation needs LPs that differ only in b")
        return cls(first.A, np.array([lp.b for lp in lps]), first.c, first.l, first.u)

    def dual(self, z):
        r = self.c - z @ self.A
        return np.sum(self.b * z, axis=1) + np.maximum(r, 0.0) @ self.l - np.maximum(-r, 0.0) @ self.u

    def dual_grad(self, z):
        r = self.c - z @ self.A
        y = np.where(r >= 0.0, self.l, self.u)
        return self.b - y @ self.A.T


class DualProxy:
    """Loads (relative to base) to scaled equality duals."""

    def __init__(self, net, mlp=None, n_hidden=3, width=None, seed=0):
        self.net = net
        self.load_buses = np.flatnonzero(net.base_loads)
        self.base = net.base_loads[self.load_buses]
        self.z_scale = float(np.max(np.abs(net.cost)))
        n_out = 1 + net.n_line
        self.mlp = mlp or Mlp.build(self.load_buses.size, n_out, n_hidden, width, out_act="identity", seed=seed)

    def features(self, instances):
        return np.array([inst.loads[self.load_buses] / self.base - 1.0 for inst in instances])

    def __call__(self, instances):
        return self.z_scale * forward(self.mlp, self.features(instances))[0]

    def to_dict(self, config=None):
        return {"arch": "doplp", "network": self.net.digest(), "mlp": self.mlp.to_dict(config)}

    @classmethod
    def from_dict(cls, net, d):
        return cls(net, Mlp.from_dict(d["mlp"]))


@dataclass
class DualTrainConfig:
    epochs: int = 200
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0


def train_doplp(model, instances, cfg=None, sens=None):
    """Maximize the mean completed dual objective over ``instances``; no labels used."""
    cfg = cfg or DualTrainConfig()
    net = model.net
    full = LpBatch.from_instances(net, instances, sens)
    feats = model.features(instances)
    scale = float(np.mean(np.abs(full.b[:, 0])) * model.z_scale)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.mlp.flat().size, lr=cfg.lr)
    n = len(instances)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        vals = []
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            out, tape = forward(model.mlp, feats[idx])
            z = model.z_scale * out
            sub = LpBatch(full.A, full.b[idx], full.c, full.l, full.u)
            d = sub.dual(z)
            if not np.all(np.isfinite(d)):
                raise DivergenceDetected(f"non-finite dual objective at epoch {epoch}")
            # minimize -mean(dual)/scale
            g = -sub.dual_grad(z) * model.z_scale / (len(idx) * scale)
            adam_step(opt, model.mlp, backward(model.mlp, tape, g))
            vals.append(d)
        history.append({"epoch": epoch, "mean_dual": float(np.mean(np.concatenate(vals)))})
    return history


def eval_dual_gap(model, instances, labels, sens=None):
    batch = LpBatch.from_instances(model.net, instances, sens)
    z = model(instances)
    d_hat = batch.dual(z)
    z_star = np.array([lb["objective"] for lb in labels])
    ratio = (z_star - d_hat) / np.abs(z_star)
    resid = np.abs(z @ batch.A + np.maximum(batch.c - z @ batch.A, 0) - np.maximum(z @ batch.A - batch.c, 0) - batch.c).max(axis=1)
    return {
        "n": int(ratio.size),
        "min": float(ratio.min()),
        "geomean": shifted_geomean(np.maximum(ratio, 0.0), GAP_SHIFT),
        "p99": float(np.percentile(ratio, 99)),
        "max": float(ratio.max()),
        "mean": float(ratio.mean()),
        "dual_infeasible": float(np.mean(resid > 1e-9 * (1 + np.abs(batch.c).max()))),
        "ratios": ratio.tolist(),
    }
