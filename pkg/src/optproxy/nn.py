"""Small feedforward networks with hand-written backprop, plus the Adam optimizer.

Finite-difference gradient checks live here too.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class TapeReused(RuntimeError):
    pass


class DivergenceDetected(FloatingPointError):
    pass


def hidden_width(dim_x):
    return int(math.ceil(1.5 * dim_x))


class Mlp:
    """Affine layers with relu in between and a sigmoid or identity output.

    With ``layernorm`` set, the input of every fully connected layer after
    the first is normalized (no affine parameters). The raw features are
    left alone so the network still sees their scale.
    """

    def __init__(self, dims, out_act="sigmoid", layernorm=False, seed=0):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeMismatch(f"bad layer dims {dims}")
        if out_act not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {out_act!r}")
        self.dims = dims
        self.out_act = out_act
        self.layernorm = bool(layernorm)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / fan_in)
            self.params.append([rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)])

    @classmethod
    def build(cls, dim_in, dim_out, n_hidden=3, width=None, **kw):
        width = width or hidden_width(dim_in)
        return cls([dim_in] + [width] * n_hidden + [dim_out], **kw)

    @property
    def n_layers(self):
        return len(self.params)

    def flat(self):
        return np.concatenate([a.ravel() for layer in self.params for a in layer])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        pos = 0
        for layer in self.params:
            for j, a in enumerate(layer):
                layer[j] = theta[pos : pos + a.size].reshape(a.shape).copy()
                pos += a.size
        if pos != theta.size:
            raise ShapeMismatch(f"expected {pos} parameters, got {theta.size}")

    def copy(self):
        other = Mlp(self.dims, self.out_act, self.layernorm, self.seed)
        other.set_flat(self.flat())
        return other

    def __call__(self, x):
        return forward(self, x)[0]

    def to_dict(self, config=None):
        cfg = json.dumps(config or {}, sort_keys=True)
        return {
            "version": CHECKPOINT_VERSION,
            "dims": self.dims,
            "out_act": self.out_act,
            "layernorm": self.layernorm,
            "seed": self.seed,
            "config_hash": hashlib.sha256(cfg.encode()).hexdigest()[:16],
            "params": self.flat().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        m = cls(d["dims"], d["out_act"], d["layernorm"], d["seed"])
        m.set_flat(d["params"])
        return m


def save_model(mlp, path, config=None):
    Path(path).write_text(json.dumps(mlp.to_dict(config)) + "\n")


def load_model(path):
    return Mlp.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Tape:
    inputs: list = field(default_factory=list)  # input to each FC layer (after norm)
    norms: list = field(default_factory=list)  # (x_hat, inv_std) or None
    pre: list = field(default_factory=list)  # pre-activations
    out: np.ndarray | None = None
    used: bool = False


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _ln_forward(h):
    mu = h.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(h.var(axis=-1, keepdims=True) + LN_EPS)
    xh = (h - mu) * inv
    return xh, inv


def _ln_backward(g, xh, inv):
    return inv * (g - g.mean(axis=-1, keepdims=True) - xh * (g * xh).mean(axis=-1, keepdims=True))


def forward(mlp, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != mlp.dims[0]:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, network expects {mlp.dims[0]}")
    tape = Tape()
    h = x
    for i, (W, b) in enumerate(mlp.params):
        if mlp.layernorm and i > 0:
            xh, inv = _ln_forward(h)
            tape.norms.append((xh, inv))
            h = xh
        else:
            tape.norms.append(None)
        tape.inputs.append(h)
        a = h @ W + b
        tape.pre.append(a)
        last = i == mlp.n_layers - 1
        if not last:
            h = np.maximum(a, 0.0)
        elif mlp.out_act == "sigmoid":
            h = sigmoid(a)
        else:
            h = a
    tape.out = h
    return h, tape


def backward(mlp, tape, dy):
    """Parameter gradients for cotangent ``dy``; the input gradient is ``tape.dx``."""
    if tape.used:
        raise TapeReused("tape already consumed by a backward pass")
    tape.used = True
    g = np.asarray(dy, dtype=float).reshape(tape.out.shape)
    if mlp.out_act == "sigmoid":
        g = g * tape.out * (1.0 - tape.out)
    grads = [None] * mlp.n_layers
    for i in reversed(range(mlp.n_layers)):
        W, _ = mlp.params[i]
        if i < mlp.n_layers - 1:
            g = g * (tape.pre[i] > 0.0)
        grads[i] = [tape.inputs[i].T @ g, g.sum(axis=0)]
        g = g @ W.T
        if tape.norms[i] is not None:
            g = _ln_backward(g, *tape.norms[i])
    tape.dx = g
    return grads


def flatten_grads(grads):
    return np.concatenate([a.ravel() for layer in grads for a in layer])


class Adam:
    def __init__(self, size, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, grad):
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.m.shape or np.shape(theta) != self.m.shape:
            raise ShapeMismatch("parameter and gradient shapes must match the optimizer state")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state, mlp, grads):
    """Apply one Adam update to ``mlp`` in place."""
    g = flatten_grads(grads)
    if not np.all(np.isfinite(g)):
        raise DivergenceDetected("non-finite gradient")
    mlp.set_flat(state.step(mlp.flat(), g))


def bound_map(s, lo, hi):
    """Map (0, 1) outputs onto the box [lo, hi]."""
    return lo + (hi - lo) * s


def bound_map_backward(g, lo, hi):
    return g * (hi - lo)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradReport:
    max_rel_err: float
    offending: list
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self):
        return not self.offending


def jacobian_fd(fun, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    y0 = np.asarray(fun(x), dtype=float)
    J = np.zeros((y0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        J[:, j] = (np.ravel(fun(x + e)) - np.ravel(fun(x - e))) / (2 * h)
    return J


def jacobian_vjp(vjp, x, n_out):
    """Analytic Jacobian assembled row by row from a vector-Jacobian product."""
    rows = []
    for i in range(n_out):
        e = np.zeros(n_out)
        e[i] = 1.0
        rows.append(np.ravel(vjp(x, e)))
    return np.array(rows)


def grad_check(fun, vjp, x, h=1e-5, tol=1e-5):
    """Compare ``vjp`` against central differences of ``fun`` at ``x``.

    Errors are relative per entry, with a floor proportional to the largest
    Jacobian entry so that exact zeros do not blow up the ratio.
    """
    x = np.asarray(x, dtype=float)
    num = jacobian_fd(fun, x, h)
    ana = jacobian_vjp(vjp, x, num.shape[0])
    floor = 1e-3 * max(1.0, float(np.abs(num).max(initial=0.0)))
    err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    bad = [tuple(int(v) for v in ij) for ij in np.argwhere(err > tol)]
    return GradReport(float(err.max(initial=0.0)), bad, ana, num)
