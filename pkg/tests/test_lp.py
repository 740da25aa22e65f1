import numpy as np
import pytest

from oracles import random_box_lp, vertex_enumeration
from optproxy.solver.lp import Status, StandardLp, simplex_solve


def small_lp(total=8.0):
    return StandardLp(A=[[1.0, 1.0]], b=[total], c=[1.0, 2.0], l=[0.0, 0.0], u=[10.0, 5.0])


def test_two_variable_example():
    sol = simplex_solve(small_lp())
    np.testing.assert_allclose(sol.y, [8.0, 0.0], atol=1e-12)
    assert sol.objective == pytest.approx(8.0)
    assert sol.z[0] == pytest.approx(1.0)
    # x2 sits at its lower bound with reduced cost 2 - 1
    assert sol.z_l[1] == pytest.approx(1.0)


def test_vertex_oracle_agrees_on_example():
    lp = small_lp()
    val, y = vertex_enumeration(lp.A, lp.b, lp.c, lp.l, lp.u)
    assert val == pytest.approx(8.0)
    np.testing.assert_allclose(y, [8.0, 0.0])


def test_infeasible_by_capacity():
    assert simplex_solve(small_lp(30.0)).status is Status.INFEASIBLE


def test_random_five_variable_lps():
    rng = np.random.default_rng(5)
    for _ in range(40):
        A, b, c, l, u = random_box_lp(rng, 5, int(rng.integers(1, 4)))
        sol = simplex_solve(StandardLp(A, b, c, l, u))
        ref, _ = vertex_enumeration(A, b, c, l, u)
        assert sol.objective == pytest.approx(ref, abs=1e-8)


def test_dual_feasibility_and_complementarity():
    rng = np.random.default_rng(9)
    for _ in range(20):
        lp = StandardLp(*random_box_lp(rng, 6, 3))
        sol = simplex_solve(lp)
        np.testing.assert_allclose(lp.A.T @ sol.z + sol.z_l - sol.z_u, lp.c, atol=1e-8)
        assert np.all(sol.z_l >= 0) and np.all(sol.z_u >= 0)
        assert np.max(sol.z_l * (sol.y - lp.l)) < 1e-7
        assert np.max(sol.z_u * (lp.u - sol.y)) < 1e-7
        assert sol.duality_residual(lp) < 1e-7


def test_no_rows():
    lp = StandardLp(A=np.zeros((0, 3)), b=[], c=[1.0, -1.0, 0.0], l=[0, 0, 0], u=[1, 2, 3])
    sol = simplex_solve(lp)
    np.testing.assert_allclose(sol.y[:2], [0.0, 2.0])
    assert sol.objective == pytest.approx(-2.0)


@pytest.mark.parametrize(
    "kw",
    [
        {"b": [1.0, 2.0]},
        {"l": [0.0, np.inf]},
        {"l": [6.0, 0.0], "u": [5.0, 5.0]},
    ],
)
def test_malformed_lp_rejected(kw):
    args = {"A": [[1.0, 1.0]], "b": [1.0], "c": [1.0, 1.0], "l": [0.0, 0.0], "u": [5.0, 5.0], **kw}
    with pytest.raises(ValueError):
        StandardLp(**args)
