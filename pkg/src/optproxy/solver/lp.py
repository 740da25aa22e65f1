"""Box-constrained standard-form LPs and their exact primal/dual solutions.

The primal is ``min c'y  s.t.  A y = b,  l <= y <= u`` and the dual is
``max b'z + l'z_l - u'z_u  s.t.  A'z + z_l - z_u = c,  z_l, z_u >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import linprog

FEAS_TOL = 1e-8
DUAL_TOL = 1e-7


class SolverError(Exception):
    pass


class Infeasible(SolverError):
    pass


class Unbounded(SolverError):
    pass


class NumericalFailure(SolverError):
    pass


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass
class StandardLp:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    l: np.ndarray
    u: np.ndarray
    row_names: list = field(default_factory=list)
    col_names: list = field(default_factory=list)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        m, n = self.A.shape
        if self.b.shape != (m,) or not (self.c.shape == self.l.shape == self.u.shape == (n,)):
            raise ValueError(f"inconsistent LP shapes: A {self.A.shape}, b {self.b.shape}, c {self.c.shape}")
        if not (np.all(np.isfinite(self.l)) and np.all(np.isfinite(self.u))):
            raise ValueError("bounds must be finite")
        if np.any(self.l > self.u):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def shape(self):
        return self.A.shape

    def col(self, name):
        return self.col_names.index(name)

    def cols(self, prefix):
        return [i for i, n in enumerate(self.col_names) if n.startswith(prefix)]

    def dual_objective(self, z, z_l, z_u):
        return float(self.b @ z + self.l @ z_l - self.u @ z_u)


@dataclass
class LpSolution:
    status: Status
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    z_l: np.ndarray | None = None
    z_u: np.ndarray | None = None
    objective: float = float("nan")

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL

    def duality_residual(self, lp):
        dual = lp.dual_objective(self.z, self.z_l, self.z_u)
        return abs(self.objective - dual) / (1.0 + abs(self.objective))


def simplex_solve(lp, check=True):
    """Solve ``lp`` to a basic optimal solution with bound and row duals.

    Uses the HiGHS dual simplex. Returns an ``LpSolution`` whose status is
    Infeasible or Unbounded when no optimum exists; raises NumericalFailure
    if the solver gives up or the returned pair violates the optimality
    certificate.
    """
    res = linprog(
        lp.c,
        A_eq=lp.A if lp.A.shape[0] else None,
        b_eq=lp.b if lp.A.shape[0] else None,
        bounds=np.column_stack([lp.l, lp.u]),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        return LpSolution(Status.INFEASIBLE)
    if res.status == 3:
        return LpSolution(Status.UNBOUNDED)
    if res.status != 0:
        raise NumericalFailure(res.message)
    m = lp.A.shape[0]
    z = np.asarray(res.eqlin.marginals) if m else np.zeros(0)
    z_l = np.maximum(np.asarray(res.lower.marginals), 0.0)
    z_u = np.maximum(-np.asarray(res.upper.marginals), 0.0)
    sol = LpSolution(Status.OPTIMAL, y=np.asarray(res.x), z=z, z_l=z_l, z_u=z_u, objective=float(res.fun))
    if check:
        _certify(lp, sol)
    return sol


def _certify(lp, sol):
    scale = 1.0 + np.abs(lp.b).max(initial=0.0)
    if np.abs(lp.A @ sol.y - lp.b).max(initial=0.0) > FEAS_TOL * scale:
        raise NumericalFailure("primal residual above tolerance")
    if sol.duality_residual(lp) > DUAL_TOL:
        raise NumericalFailure(f"duality gap {sol.duality_residual(lp):.2e} above tolerance")

