"""Primal-dual learning, the binary-search contingency layer, and PDL for SCOPF.

A problem handed to ``pdl_train`` provides

* ``n_in``, ``n_out``, ``n_h`` and ``primal_act`` (output activation),
* ``sample(rng, n)`` returning an opaque batch,
* ``features(batch)``,
* ``evaluate(batch, out)`` returning per-instance objective values ``f``
  (B,), equality residuals ``h`` (B, n_h) and a cache,
* ``backward(cache, gf, gh)`` returning the cotangent of the network output.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from optproxy import repair
from optproxy.instances import SamplerConfig, draw_parameters
from optproxy.nn import Adam, DivergenceDetected, Mlp, adam_step, backward, bound_map, bound_map_backward, forward
from optproxy.solver.models import DEFAULT_PENALTIES, get_sens
from optproxy.solver.scopf import apr_ramp, default_contingencies, line_contingency_ptdf

log = logging.getLogger(__name__)


class NonFiniteViolation(FloatingPointError):
    pass


@dataclass
class PdlConfig:
    rho: float = 1.0
    rho_max: float = 1e4
    alpha: float = 10.0
    tau: float = 0.5
    T: int = 20
    inner_steps: int = 2000
    minibatch: int = 8
    lr: float = 1e-3
    dual_lr: float = 1e-3
    eval_batch: int = 256
    n_hidden: int = 4
    width: int | None = None

    def __post_init__(self):
        if not (self.alpha > 1 and 0 < self.tau < 1 and 0 < self.rho <= self.rho_max):
            raise ValueError("need alpha > 1, 0 < tau < 1 and 0 < rho <= rho_max")

    def to_dict(self):
        return asdict(self)


@dataclass
class PdlState:
    primal: Mlp
    dual: Mlp | None
    rho: float
    v: float
    history: list = field(default_factory=list)


def alm_loss(f, h, lam, rho):
    """Mean of f + lam'h + rho/2 |h|^2 over the batch, with gradients in f and h."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), h.shape)
    n = h.shape[0]
    val = f + np.sum(lam * h, axis=1) + 0.5 * rho * np.sum(h**2, axis=1)
    return float(val.mean()), np.full(n, 1.0 / n), (lam + rho * h) / n


def penalty_loss(f, h, rho):
    """Mean of f + rho 1'|h|."""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    h = np.atleast_2d(np.asarray(h, dtype=float))
    n = h.shape[0]
    return float((f + rho * np.abs(h).sum(axis=1)).mean()), np.full(n, 1.0 / n), rho * np.sign(h) / n


def max_violation(h):
    h = np.asarray(h, dtype=float)
    if not np.all(np.isfinite(h)):
        raise NonFiniteViolation("constraint residuals are not finite")
    return float(np.max(np.abs(h), initial=0.0))


def _primal_step(problem, primal, opt, batch, lam, rho, loss_fn):
    out, tape = forward(primal, problem.features(batch))
    f, h, cache = problem.evaluate(batch, out)
    loss, gf, gh = loss_fn(f, h, lam, rho)
    if not np.isfinite(loss):
        raise DivergenceDetected(f"primal loss became {loss}")
    adam_step(opt, primal, backward(primal, tape, problem.backward(cache, gf, gh)))
    return loss


def _violation(problem, primal, batch):
    out, _ = forward(primal, problem.features(batch))
    return problem.evaluate(batch, out)[1]


def _make_nets(problem, cfg, seed):
    width = cfg.width
    primal = Mlp.build(problem.n_in, problem.n_out, cfg.n_hidden, width, out_act=problem.primal_act,
                       layernorm=getattr(problem, "primal_layernorm", False), seed=seed)
    dual = Mlp.build(problem.n_in, problem.n_h, cfg.n_hidden, width, out_act="identity", seed=seed + 1)
    # start from zero multipliers; hidden layers keep their random draw
    dual.params[-1][0][:] = 0.0
    return primal, dual


def pdl_train(problem, cfg=None, seed=0, log_every=0):
    """Alternate primal ALM steps and dual regression steps, raising rho on stalls."""
    cfg = cfg or PdlConfig()
    rng = np.random.default_rng(seed)
    primal, dual = _make_nets(problem, cfg, seed)
    p_opt = Adam(primal.flat().size, lr=cfg.lr)
    d_opt = Adam(dual.flat().size, lr=cfg.dual_lr)
    eval_batch = problem.sample(np.random.default_rng(seed + 10_000), cfg.eval_batch)
    rho = cfg.rho
    v = max_violation(_violation(problem, primal, eval_batch))
    state = PdlState(primal, dual, rho, v)

    def lam_of(batch, net):
        return forward(net, problem.features(batch))[0]

    for t in range(cfg.T):
        t0 = time.perf_counter()
        losses = []
        for _ in range(cfg.inner_steps):
            batch = problem.sample(rng, cfg.minibatch)
            lam = lam_of(batch, dual)
            losses.append(_primal_step(problem, primal, p_opt, batch, lam, rho, alm_loss))
        old = dual.copy()
        d_losses = []
        for _ in range(cfg.inner_steps):
            batch = problem.sample(rng, cfg.minibatch)
            h = _violation(problem, primal, batch)
            target = lam_of(batch, old) + rho * h
            out, tape = forward(dual, problem.features(batch))
            diff = out - target
            d_losses.append(float(np.mean(np.sum(diff**2, axis=1))))
            adam_step(d_opt, dual, backward(dual, tape, 2.0 * diff / diff.shape[0]))
        v_new = max_violation(_violation(problem, primal, eval_batch))
        increased = v_new > cfg.tau * v
        rho_new = float(min(cfg.alpha * rho, cfg.rho_max)) if increased else rho
        state.history.append(
            {
                "t": t,
                "rho": rho,
                "rho_next": rho_new,
                "v": v,
                "v_next": v_new,
                "primal_loss": float(np.mean(losses[-100:])),
                "dual_loss": float(np.mean(d_losses[-100:])),
                "seconds": time.perf_counter() - t0,
            }
        )
        if log_every and t % log_every == 0:
            log.info("pdl t=%d rho=%g v=%.3e loss=%.4f", t, rho, v_new, state.history[-1]["primal_loss"])
        rho, v = rho_new, v_new
    state.rho, state.v = rho, v
    return state


def penalty_baseline_train(problem, cfg=None, seed=0, rho=None):
    """Same decoder trained on f + rho 1'|h| with rho fixed and no dual network."""
    cfg = cfg or PdlConfig()
    rho = cfg.rho if rho is None else rho
    rng = np.random.default_rng(seed)
    primal, _ = _make_nets(problem, cfg, seed)
    opt = Adam(primal.flat().size, lr=cfg.lr)
    history = []
    for t in range(cfg.T):
        losses = [
            _primal_step(problem, primal, opt, problem.sample(rng, cfg.minibatch), None, rho,
                         lambda f, h, lam, r: penalty_loss(f, h, r))
            for _ in range(cfg.inner_steps)
        ]
        history.append({"t": t, "rho": rho, "primal_loss": float(np.mean(losses[-100:]))})
    return PdlState(primal, None, rho, float("nan"), history)


def audit_rho_schedule(history, cfg):
    """Problems with a recorded rho schedule; an empty list means it is consistent."""
    issues = []
    for i, rec in enumerate(history):
        if rec["rho_next"] < rec["rho"]:
            issues.append(f"step {i}: rho decreased")
        if rec["rho_next"] > cfg.rho_max or rec["rho"] > cfg.rho_max:
            issues.append(f"step {i}: rho above rho_max")
        grew = rec["rho_next"] > rec["rho"]
        if grew and not rec["v_next"] > cfg.tau * rec["v"]:
            issues.append(f"step {i}: rho grew without a violation stall")
        if not grew and rec["v_next"] > cfg.tau * rec["v"] and rec["rho"] < cfg.rho_max:
            issues.append(f"step {i}: violation stalled but rho was not raised")
        if i and rec["rho"] != history[i - 1]["rho_next"]:
            issues.append(f"step {i}: rho does not continue from the previous step")
    return issues


# -- toy problem ---------------------------------------------------------------


class ToyProblem:
    """min y^2 s.t. y = x with x ~ U[0, 1]; y* = x and the multiplier is -2x."""

    n_in = n_out = n_h = 1
    primal_act = "identity"

    def sample(self, rng, n):
        return rng.uniform(0.0, 1.0, size=(n, 1))

    def features(self, batch):
        return batch

    def evaluate(self, batch, out):
        return out[:, 0] ** 2, out - batch, out

    def backward(self, cache, gf, gh):
        return 2.0 * cache * gf[:, None] + gh


# -- binary search layer -------------------------------------------------------


@dataclass
class BsTrace:
    k: int | list
    n: np.ndarray
    free: np.ndarray  # generators on the unsaturated branch of the min
    slope: np.ndarray | None = None
    interior: np.ndarray | None = None  # search ended strictly inside (0, 1)


def bs_layer(p, k, gamma, ramp, p_max, total_load, t=20):
    """Contingency dispatch after losing generator k (batched over rows of ``p``).

    Bisects the system signal n on [0, 1] for j = 0..t, then reads out
    p_k = min(p + n gamma ramp, p_max) with p_k[k] = 0 at the final n.
    Returns (p_k, n, rho, e, trace) where e is the remaining imbalance.
    """
    pk, n, rho, e, tr = bs_layer_multi(p, [k], gamma, ramp, p_max, total_load, t)
    return pk[:, 0], n[:, 0], rho[:, 0], e[:, 0], BsTrace(k, n[:, 0], tr.free[:, 0], tr.slope[:, 0], tr.interior[:, 0])


def bs_layer_multi(p, ks, gamma, ramp, p_max, total_load, t=20):
    """``bs_layer`` for several outages at once; outputs gain an axis after the batch axis."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    B, G = p.shape
    K = len(ks)
    alive = np.ones((K, G), dtype=bool)
    alive[np.arange(K), ks] = False
    slope = np.broadcast_to(gamma * ramp, p.shape)[:, None, :]
    cap = np.broadcast_to(p_max, p.shape)[:, None, :]
    base = p[:, None, :]
    d = np.broadcast_to(total_load, (B,))[:, None]
    n = np.full((B, K), 0.5)
    lo, hi = np.zeros((B, K)), np.ones((B, K))
    for _ in range(t + 1):
        pk = np.minimum(base + n[..., None] * slope, cap) * alive
        over = pk.sum(axis=2) - d > 0
        hi = np.where(over, n, hi)
        lo = np.where(over, lo, n)
        n = 0.5 * (lo + hi)
    raw = base + n[..., None] * slope
    pk = np.minimum(raw, cap) * alive
    rho = (raw > cap) & alive
    free = ~rho & alive
    e = pk.sum(axis=2) - d
    tol = 2.0 ** -(t + 1)
    interior = (n > tol) & (n < 1.0 - tol) & (np.sum(free * slope, axis=2) > 0)
    return pk, n, rho, e, BsTrace(list(ks), n, free, np.broadcast_to(slope, pk.shape), interior)


def bs_layer_backward(trace, g, implicit=False):
    """Cotangent for the base dispatch.

    By default n is held at its forward value. With ``implicit`` set, n is
    differentiated as the root of the contingency balance wherever the
    search ended strictly inside (0, 1): n moves by -1/S per MW on a free
    unit, S being the total free droop slope, so the balance residual has a
    zero gradient there. For a multi-outage trace ``g`` is (B, K, G) and the
    result is summed over K.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim < trace.free.ndim:
        g = np.atleast_2d(g)
    out = np.where(trace.free, g, 0.0)
    if implicit:
        s = np.where(trace.free, trace.slope, 0.0)
        S = s.sum(axis=-1, keepdims=True)
        gn = np.sum(out * s, axis=-1, keepdims=True) / np.where(S > 0, S, 1.0)
        out = out - np.where(trace.interior[..., None], trace.free * gn, 0.0)
    return out.sum(axis=1) if trace.free.ndim == 3 else out


# -- SCOPF ---------------------------------------------------------------------


@dataclass
class ScopfBatch:
    loads: np.ndarray
    cost: np.ndarray
    p_max: np.ndarray
    ramp: np.ndarray

    @classmethod
    def from_instances(cls, net, instances):
        return cls(
            np.array([i.loads for i in instances]),
            np.array([i.cost(net) for i in instances]),
            np.array([i.p_max(net) for i in instances]),
            np.array([apr_ramp(net, i) for i in instances]),
        )

    @property
    def total_load(self):
        return self.loads.sum(axis=1)


def _soft_slack(f, fmax):
    xi = np.maximum(0.0, f - fmax) + np.maximum(0.0, -fmax - f)
    sign = (f > fmax).astype(float) - (f < -fmax)
    return xi, sign


def scopf_slacks(net, sens, loads, p, p_k, gen_ks, line_ks, skip_diag=True):
    """Thermal slacks for the base case, each generator outage and each line outage.

    Returns a dict with arrays ``base`` (B, L), ``gen`` (B, |Kg|, L) and
    ``line`` (B, |Ke|, L); the outaged line of a line contingency gets zero.
    """
    p = np.atleast_2d(p)
    inj = p @ net.gen_bus.T - loads
    base = _soft_slack(inj @ sens.ptdf.T, net.f_max)[0]
    gen = np.zeros((p.shape[0], len(gen_ks), net.n_line))
    for a, _ in enumerate(gen_ks):
        gen[:, a] = _soft_slack((p_k[:, a] @ net.gen_bus.T - loads) @ sens.ptdf.T, net.f_max)[0]
    line = np.zeros((p.shape[0], len(line_ks), net.n_line))
    for a, k in enumerate(line_ks):
        xi = _soft_slack(inj @ line_contingency_ptdf(sens, k).T, net.f_max)[0]
        xi[:, k] = 0.0
        line[:, a] = xi
    return {"base": base, "gen": gen, "line": line}


class ScopfProblem:
    """PDL encoding of the N-1 SCOPF: h is the balance residual (p.u.) of each generator outage."""

    primal_act = "sigmoid"
    primal_layernorm = True

    def __init__(self, net, sampler=None, penalties=DEFAULT_PENALTIES, gen_ks=None, line_ks=None, bs_iters=20,
                 bs_grad="frozen"):
        if bs_grad not in ("frozen", "implicit"):
            raise ValueError(f"unknown BS gradient mode {bs_grad!r}")
        self.bs_grad = bs_grad
        self.net = net
        self.sens = get_sens(net)
        dg, dl = default_contingencies(net, self.sens)
        self.gen_ks = dg if gen_ks is None else list(gen_ks)
        self.line_ks = dl if line_ks is None else list(line_ks)
        self.sampler = sampler or SamplerConfig.for_kind("scopf")
        self.M = penalties.scopf_slack
        self.balance_price = penalties.balance
        self.bs_iters = bs_iters
        self.load_buses = np.flatnonzero(net.base_loads)
        self.cost_scale = float(net.base_loads.sum() * np.mean(net.cost))
        self.n_in = self.load_buses.size + 2 * net.n_gen
        self.n_out = net.n_gen
        self.n_h = len(self.gen_ks)
        self.ptdf_gen = self.sens.ptdf @ net.gen_bus
        self.line_ptdf = [line_contingency_ptdf(self.sens, k) for k in self.line_ks]
        self.line_ptdf_gen = [m @ net.gen_bus for m in self.line_ptdf]

    def sample(self, rng, n):
        loads, _, cost_scale, pmax_scale = draw_parameters(self.net, self.net.base_loads, self.sampler, rng, n)
        p_max = self.net.p_max * pmax_scale
        return ScopfBatch(loads, self.net.cost * cost_scale, p_max, p_max - self.net.p_min)

    def batch(self, instances):
        return ScopfBatch.from_instances(self.net, instances)

    def features(self, b):
        net = self.net
        return np.column_stack(
            [
                b.loads[:, self.load_buses] / net.base_loads[self.load_buses] - 1.0,
                b.cost / net.cost - 1.0,
                b.p_max / net.p_max - 1.0,
            ]
        )

    def decode(self, b, out):
        """Base dispatch, contingency dispatches and the traces needed for backprop."""
        net = self.net
        lo = np.broadcast_to(net.p_min, b.p_max.shape)
        ctx = repair.RepairContext.make(lo, b.p_max, np.zeros_like(b.p_max), b.total_load)
        p_hat = bound_map(out, lo, b.p_max)
        p, tb = repair.power_balance_repair(p_hat, ctx)
        pk, n, _, e, tr = bs_layer_multi(p, self.gen_ks, net.gamma, b.ramp, b.p_max, b.total_load, self.bs_iters)
        return p, pk, n, e, (lo, b.p_max, tb, tr)

    def evaluate(self, b, out):
        net = self.net
        p, p_k, n, e, dec = self.decode(b, out)
        inj = p @ net.gen_bus.T - b.loads
        xi0, s0 = _soft_slack(inj @ self.sens.ptdf.T, net.f_max)
        g_p = b.cost + self.M * s0 @ self.ptdf_gen
        total = np.sum(b.cost * p, axis=1) + self.M * xi0.sum(axis=1)
        g_pk = np.zeros_like(p_k)
        for a, _ in enumerate(self.gen_ks):
            xi, s = _soft_slack((p_k[:, a] @ net.gen_bus.T - b.loads) @ self.sens.ptdf.T, net.f_max)
            total += self.M * xi.sum(axis=1)
            g_pk[:, a] = self.M * s @ self.ptdf_gen
        for a, k in enumerate(self.line_ks):
            xi, s = _soft_slack(inj @ self.line_ptdf[a].T, net.f_max)
            xi[:, k] = 0.0
            s[:, k] = 0.0
            total += self.M * xi.sum(axis=1)
            g_p = g_p + self.M * s @ self.line_ptdf_gen[a]
        h = e / net.base_mva
        cache = (dec, g_p / self.cost_scale, g_pk / self.cost_scale)
        return total / self.cost_scale, h, cache

    def backward(self, cache, gf, gh):
        (lo, hi, tb, trace), g_p, g_pk = cache
        net = self.net
        g = g_p * gf[:, None]
        g_k = g_pk * gf[:, None, None] + gh[:, :, None] / net.base_mva
        g = g + bs_layer_backward(trace, g_k, implicit=self.bs_grad == "implicit")
        g = repair.power_balance_repair_backward(tb, g)
        return bound_map_backward(g, lo, hi)

    # -- evaluation helpers --

    def predict(self, primal, instances):
        b = self.batch(instances)
        out = forward(primal, self.features(b))[0]
        p, p_k, n, e, _ = self.decode(b, out)
        return b, p, p_k, n, e

    def penalized_objective(self, b, p, p_k, e):
        sl = scopf_slacks(self.net, self.sens, b.loads, p, p_k, self.gen_ks, self.line_ks)
        xi = sl["base"].sum(axis=1) + sl["gen"].sum(axis=(1, 2)) + sl["line"].sum(axis=(1, 2))
        return np.sum(b.cost * p, axis=1) + self.M * xi + self.balance_price * np.abs(e).sum(axis=1)


def pdl_scopf_train(net, cfg=None, seed=0, sampler=None, penalties=DEFAULT_PENALTIES):
    problem = ScopfProblem(net, sampler, penalties)
    return pdl_train(problem, cfg, seed), problem


def pdl_scopf_eval(problem, primal, instances, labels):
    """Gap against oracle labels (violations priced in) and contingency balance residuals."""
    t0 = time.perf_counter()
    b, p, p_k, n, e = problem.predict(primal, instances)
    seconds = time.perf_counter() - t0
    z_hat = problem.penalized_objective(b, p, p_k, e)
    z_star = np.array([lb["objective"] for lb in labels])
    gaps = (z_hat - z_star) / np.abs(z_star)
    viol = np.abs(e) / problem.net.base_mva
    return {
        "n": len(instances),
        "mean_gap": float(gaps.mean()),
        "max_gap": float(gaps.max()),
        "max_violation_pu": float(viol.max(initial=0.0)),
        "max_violation_by_contingency": {str(k): float(viol[:, a].max()) for a, k in enumerate(problem.gen_ks)},
        "base_balance_max": float(np.max(np.abs(p.sum(axis=1) - b.total_load))),
        "inference_seconds": seconds,
        "gaps": gaps.tolist(),
    }
