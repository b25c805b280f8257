import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from riskmpc.model import LinearStochasticSystem, QuadCost, RiskConstraints, synthesize
from riskmpc.ocp_solver import OpenLoopProblem, ParametricOCP, condense, evaluate_open_loop_cost, solve_open_loop
from riskmpc.qp import kkt_residuals, solve_qp
from riskmpc.risk import RiskSpec
from riskmpc.tightening import ErrorProcess, gaussian_schedule

from conftest import HORIZON, X0, dcdc_problem


def problem(kind="cvar", N=HORIZON, x=X0, z=X0, j=0, exact=False, K=None):
    sys, cost, cons = dcdc_problem(kind, K=K)
    sched = gaussian_schedule(ErrorProcess.from_system(sys), cons, N + 60)
    P = synthesize(sys, cost).P
    return OpenLoopProblem(sys, cost, cons, sched, P, N, np.asarray(x, float), np.asarray(z, float), j, exact)


def nominal_path(prob, v):
    sys = prob.sys
    z = prob.z.copy()
    out = [z.copy()]
    for k in range(prob.N):
        z = sys.Acl @ z + sys.B @ v[k * sys.l:(k + 1) * sys.l] + sys.mu_W
        out.append(z.copy())
    return np.array(out)


@pytest.mark.parametrize("exact", [False, True])
def test_condensed_objective_matches_forward_simulation(exact):
    rng = np.random.default_rng(0)
    prob = problem(x=[0.3, -1.2], z=[0.5, 0.1], exact=exact)
    qp = condense(prob)
    for _ in range(5):
        v = rng.standard_normal(qp.nv)
        assert qp.objective(v) + qp.offset == pytest.approx(evaluate_open_loop_cost(prob, v), rel=1e-11)


def test_scalar_horizon_one_by_hand():
    # x+ = a x + b u + w, u = k x + v; N = 1: J = (q + r k^2)(x^2) + r v^2 + p ((a+bk) x + b v)^2 + p sw
    a, b, k, q, r, sw = 0.9, 0.5, -0.4, 1.0, 2.0, 0.3
    sys = LinearStochasticSystem([[a]], [[b]], [[sw]], [[k]])
    cost = QuadCost([[q]], [[r]])
    P = synthesize(sys, cost).P
    p = P[0, 0]
    cons = RiskConstraints(np.array([[1.0]]), [10.0], np.zeros((0, 1)), [], RiskSpec("cvar"))
    sched = gaussian_schedule(ErrorProcess.from_system(sys), cons, 5)
    x = 1.7
    par = ParametricOCP.build(sys, cost, cons, P, 1)
    qp = par.instantiate([x], [0.0], sched)
    acl = a + b * k
    assert qp.H[0, 0] == pytest.approx(2 * (r + p * b * b))
    assert qp.g[0] == pytest.approx(2 * p * acl * b * x)
    assert qp.offset == pytest.approx((q + r * k * k) * x * x + p * acl * acl * x * x + p * sw)
    # Terminal equality on z: acl * 0 + b v = 0.
    np.testing.assert_allclose(qp.A_eq, [[b]])
    np.testing.assert_allclose(qp.b_eq, [0.0])


def test_rows_encode_tightened_nominal_constraints():
    rng = np.random.default_rng(2)
    prob = problem(z=[0.4, -0.3], j=3)
    qp = condense(prob)
    for _ in range(5):
        v = rng.standard_normal(qp.nv) * 0.1
        zs = nominal_path(prob, v)
        back = prob.schedule.state_window(prob.j, prob.N)[0]
        expected = zs[: prob.N, 0] - (2.0 - back)
        np.testing.assert_allclose(qp.A_in @ v - qp.b_in, expected, atol=1e-12)
        np.testing.assert_allclose(qp.A_eq @ v - qp.b_eq, zs[prob.N], atol=1e-12)


@pytest.mark.parametrize("kind", ["e", "var", "cvar", "evar"])
def test_dcdc_initial_problem_solvable(kind):
    prob = problem(kind)
    qp, sol = solve_open_loop(prob)
    assert sol.ok
    res = kkt_residuals(qp, sol)
    assert res["stationarity"] <= 1e-8 and res["primal"] <= 1e-9
    assert sol.objective + qp.offset == pytest.approx(evaluate_open_loop_cost(prob, sol.v), rel=1e-10)


def test_short_horizon_evar_initial_problem_infeasible():
    prob = problem("evar", N=11)
    qp, sol = solve_open_loop(prob)
    lp = linprog(np.zeros(qp.nv), A_ub=qp.A_in, b_ub=qp.b_in, A_eq=qp.A_eq, b_eq=qp.b_eq,
                 bounds=[(None, None)] * qp.nv, method="highs")
    assert lp.status == 2
    assert not sol.ok


def test_variance_terms_do_not_move_the_optimizer():
    sys, cost, cons = dcdc_problem()
    P = synthesize(sys, cost).P
    quiet = LinearStochasticSystem(sys.A, sys.B, 1e-3 * sys.Sigma_W, sys.K)
    a = ParametricOCP.build(sys, cost, cons, P, 8)
    b = ParametricOCP.build(quiet, cost, cons, P, 8)
    np.testing.assert_array_equal(a.H, b.H)
    np.testing.assert_array_equal(a.Gx, b.Gx)
    assert a.sigma_offset > b.sigma_offset


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-3, 3), st.floats(-3, 3),
       st.sampled_from(["e", "var", "cvar", "evar"]), st.integers(0, 30))
def test_shifted_solution_stays_feasible(z1, z2, x1, x2, kind, j):
    prob = problem(kind, x=[x1, x2], z=[z1, z2], j=j)
    qp, sol = solve_open_loop(prob)
    if not sol.ok:
        return
    sys = prob.sys
    l = sys.l
    z_next = sys.Acl @ prob.z + sys.B @ sol.v[:l]
    shifted = np.concatenate([sol.v[l:], np.zeros(l)])
    nxt = OpenLoopProblem(prob.sys, prob.cost, prob.constraints, prob.schedule, prob.P, prob.N,
                          np.zeros(2), z_next, j + 1)
    assert condense(nxt).max_violation(shifted) <= 1e-9
    assert solve_qp(condense(nxt)).ok
