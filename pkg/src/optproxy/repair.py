"""Differentiable feasibility layers for dispatch proxies.

All layers work on batches: dispatch arrays are (batch, n_gen) and the
context arrays broadcast against them. Each forward returns a trace that
the matching backward consumes; branch decisions are taken from the trace,
so at a kink the backward follows whatever the forward did.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InfeasibleLoad(ValueError):
    pass


@dataclass(frozen=True)
class RepairContext:
    glb: np.ndarray
    gub: np.ndarray
    rbar: np.ndarray
    total_load: np.ndarray
    R: np.ndarray

    @classmethod
    def make(cls, glb, gub, rbar, total_load, R=0.0):
        glb, gub = np.atleast_2d(glb).astype(float), np.atleast_2d(gub).astype(float)
        rbar = np.atleast_2d(rbar).astype(float)
        total_load = np.atleast_1d(np.asarray(total_load, dtype=float))
        R = np.broadcast_to(np.asarray(R, dtype=float), total_load.shape).copy()
        if np.any(glb > gub):
            raise ValueError("lower generation bound above upper bound")
        return cls(glb, gub, rbar, total_load, R)

    @classmethod
    def from_instances(cls, net, instances):
        return cls.make(
            np.broadcast_to(net.p_min, (len(instances), net.n_gen)),
            np.array([inst.p_max(net) for inst in instances]),
            np.array([inst.r_max(net) for inst in instances]),
            np.array([inst.total_load for inst in instances]),
            np.array([inst.reserve_req for inst in instances]),
        )


def _lo_hi(p, ctx):
    return np.broadcast_to(ctx.glb, p.shape), np.broadcast_to(ctx.gub, p.shape)


# -- power balance -------------------------------------------------------------


@dataclass
class BalanceTrace:
    p_hat: np.ndarray
    up: np.ndarray  # True where the upward rule was taken
    zeta: np.ndarray
    denom: np.ndarray  # 1'gub - 1'p_hat (up) or 1'p_hat - 1'glb (down)
    target: np.ndarray  # gub or glb per row


def power_balance_repair(p_hat, ctx):
    """Scale generators towards their upper or lower bounds until supply meets load."""
    p_hat = np.atleast_2d(np.asarray(p_hat, dtype=float))
    lo, hi = _lo_hi(p_hat, ctx)
    d = np.broadcast_to(ctx.total_load, p_hat.shape[:1])
    s_lo, s_hi = lo.sum(axis=1), hi.sum(axis=1)
    tol = 1e-9 * (1.0 + np.abs(d))
    if np.any(d < s_lo - tol) or np.any(d > s_hi + tol):
        raise InfeasibleLoad("total load outside the fleet's generation range")
    s = p_hat.sum(axis=1)
    up = s < d
    denom = np.where(up, s_hi - s, s - s_lo)
    num = np.where(up, d - s, s - d)
    zeta = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    target = np.where(up[:, None], hi, lo)
    p_tilde = (1.0 - zeta)[:, None] * p_hat + zeta[:, None] * target
    return p_tilde, BalanceTrace(p_hat, up, zeta, denom, target)


def power_balance_repair_backward(trace, g):
    g = np.atleast_2d(np.asarray(g, dtype=float))
    zeta = trace.zeta
    # d zeta / d(1'p_hat) is -(1 - zeta)/denom going up and +(1 - zeta)/denom going down
    sign = np.where(trace.up, -1.0, 1.0)
    dzeta = np.divide(sign * (1.0 - zeta), trace.denom, out=np.zeros_like(zeta), where=trace.denom > 0)
    through = np.sum(g * (trace.target - trace.p_hat), axis=1)
    return (1.0 - zeta)[:, None] * g + (through * dzeta)[:, None]


# -- reserves ------------------------------------------------------------------


@dataclass
class ReserveTrace:
    p_tilde: np.ndarray
    up_set: np.ndarray  # G-up membership mask
    anchor: np.ndarray  # p_max - r_max
    delta: np.ndarray
    delta_r: np.ndarray
    delta_up: np.ndarray
    delta_down: np.ndarray
    alpha_up: np.ndarray
    alpha_down: np.ndarray
    active: np.ndarray  # 0 none, 1 reserve shortage, 2 up capacity, 3 down capacity
    shortfall: np.ndarray


def max_reserve(p, ctx):
    return np.minimum(ctx.rbar, ctx.gub - p)


def reserve_repair(p_tilde, ctx):
    """Shift output from units short on headroom to units with spare room.

    Returns (p_check, r_check, trace); reserves are read out as the largest
    amount each unit can hold at its new set point.
    """
    p = np.atleast_2d(np.asarray(p_tilde, dtype=float))
    anchor = np.broadcast_to(ctx.gub - ctx.rbar, p.shape)
    up_set = p <= anchor
    gap = anchor - p
    d_up = np.sum(np.where(up_set, gap, 0.0), axis=1)
    d_down = np.sum(np.where(up_set, 0.0, -gap), axis=1)
    d_r = ctx.R - max_reserve(p, ctx).sum(axis=1)
    stacked = np.stack([d_r, d_up, d_down], axis=1)
    low = stacked.min(axis=1)
    delta = np.maximum(0.0, low)
    active = np.where(low > 0.0, 1 + stacked.argmin(axis=1), 0)
    a_up = np.divide(delta, d_up, out=np.zeros_like(delta), where=d_up > 0)
    a_down = np.divide(delta, d_down, out=np.zeros_like(delta), where=d_down > 0)
    alpha = np.where(up_set, a_up[:, None], a_down[:, None])
    p_check = p + alpha * gap
    r_check = max_reserve(p_check, ctx)
    shortfall = np.maximum(0.0, ctx.R - r_check.sum(axis=1))
    trace = ReserveTrace(p, up_set, anchor, delta, d_r, d_up, d_down, a_up, a_down, active, shortfall)
    return p_check, r_check, trace


def reserve_repair_backward(trace, g):
    """Gradient through the dispatch output, with the unit partition and active branch held at their forward values."""
    g = np.atleast_2d(np.asarray(g, dtype=float))
    U = trace.up_set
    gap = trace.anchor - trace.p_tilde
    alpha = np.where(U, trace.alpha_up[:, None], trace.alpha_down[:, None])
    out = g * (1.0 - alpha)
    live = trace.delta > 0.0
    if not np.any(live):
        return out
    safe_up = np.where(live, trace.delta_up, 1.0)
    safe_down = np.where(live, trace.delta_down, 1.0)
    s_up = np.sum(np.where(U, g * gap, 0.0), axis=1)
    s_down = np.sum(np.where(U, 0.0, g * gap), axis=1)
    g_delta = np.where(live, s_up / safe_up + s_down / safe_down, 0.0)
    g_up = np.where(live, -trace.delta * s_up / safe_up**2, 0.0)
    g_down = np.where(live, -trace.delta * s_down / safe_down**2, 0.0)
    g_up = g_up + np.where(trace.active == 2, g_delta, 0.0)
    g_down = g_down + np.where(trace.active == 3, g_delta, 0.0)
    g_r = np.where(trace.active == 1, g_delta, 0.0)
    # d(delta_up)/dp = -1 on U; d(delta_down)/dp = +1 and d(delta_r)/dp = +1 off U
    out += np.where(U, -g_up[:, None], (g_down + g_r)[:, None])
    return out


# -- baselines -----------------------------------------------------------------


@dataclass
class CompletionTrace:
    residual: int
    violation: np.ndarray


def default_residual(ctx):
    return int(np.argmax(np.atleast_2d(ctx.gub)[0]))


def equality_completion(p_hat, ctx, residual=None):
    """Let one generator absorb the balance mismatch, ignoring its limits."""
    p = np.atleast_2d(np.asarray(p_hat, dtype=float)).copy()
    k = default_residual(ctx) if residual is None else int(residual)
    others = p.sum(axis=1) - p[:, k]
    p[:, k] = ctx.total_load - others
    lo, hi = _lo_hi(p, ctx)
    viol = np.maximum(0.0, p[:, k] - hi[:, k]) + np.maximum(0.0, lo[:, k] - p[:, k])
    return p, CompletionTrace(k, viol)


def equality_completion_backward(trace, g):
    g = np.atleast_2d(np.asarray(g, dtype=float))
    k = trace.residual
    out = g - g[:, [k]]
    out[:, k] = 0.0
    return out


def _violation_parts(p, ctx):
    bal = p.sum(axis=1) - ctx.total_load
    short_mask = ctx.gub - p < ctx.rbar
    short = np.maximum(0.0, ctx.R - max_reserve(p, ctx).sum(axis=1))
    return bal, short, short_mask


def violation(p, ctx):
    """Squared violation of balance plus squared reserve shortfall, halved."""
    bal, short, _ = _violation_parts(np.atleast_2d(p), ctx)
    return 0.5 * (bal**2 + short**2)


@dataclass
class UnrollTrace:
    steps: list  # (inside-box mask, reserve-active mask, shortfall>0) per step
    step_size: float


def default_step(n_gen):
    # the violation Hessian is at most 11' + mm', whose norm is <= 2 n_gen
    return 1.0 / (2.0 * n_gen)


def unrolled_correction(p_hat, ctx, steps=50, step_size=None):
    """Projected gradient descent on the balance and reserve violation."""
    p = np.atleast_2d(np.asarray(p_hat, dtype=float)).copy()
    eta = default_step(p.shape[1]) if step_size is None else float(step_size)
    lo, hi = _lo_hi(p, ctx)
    trace = UnrollTrace([], eta)
    for _ in range(int(steps)):
        bal, short, mask = _violation_parts(p, ctx)
        grad = bal[:, None] + (short[:, None] * mask)
        raw = p - eta * grad
        p = np.clip(raw, lo, hi)
        inside = (raw > lo) & (raw < hi)
        trace.steps.append((inside, mask, short > 0))
    return p, trace


def unrolled_correction_backward(trace, g):
    g = np.atleast_2d(np.asarray(g, dtype=float)).copy()
    eta = trace.step_size
    for inside, mask, active in reversed(trace.steps):
        g = g * inside
        # (I - eta H)^T g with H = 11' + [short>0] m m'
        hg = g.sum(axis=1, keepdims=True) + np.where(active[:, None], mask * np.sum(g * mask, axis=1, keepdims=True), 0.0)
        g = g - eta * hg
    return g
