import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskmpc import matrix_kernels as mk
from riskmpc.errors import DimensionMismatch
from riskmpc.model import (LinearStochasticSystem, QuadCost, RiskConstraints, check_stationary_admissible,
                           stage_cost_moments, synthesize)
from riskmpc.risk import RiskSpec
from riskmpc.simharness import performance_bounds

from conftest import A_DCDC, B_DCDC, Q_DCDC, R_DCDC, SIGMA_W, dcdc_gain, dcdc_problem


def test_system_validation():
    K = dcdc_gain()
    with pytest.raises(ValueError, match="controllable"):
        LinearStochasticSystem(np.diag([0.5, 0.7]), [[1.0], [0.0]], np.eye(2), [[0.0, 0.0]])
    with pytest.raises(ValueError, match="stable"):
        LinearStochasticSystem(A_DCDC, B_DCDC, SIGMA_W, [[1.0, 1.0]])
    with pytest.raises(ValueError, match="semidefinite"):
        LinearStochasticSystem(A_DCDC, B_DCDC, -SIGMA_W, K)
    with pytest.raises(DimensionMismatch):
        LinearStochasticSystem(A_DCDC, B_DCDC, SIGMA_W, K, mu_W=[0.0, 0.0, 0.0])
    sys = LinearStochasticSystem(A_DCDC, B_DCDC, SIGMA_W, K)
    assert sys.n == 2 and sys.l == 1
    np.testing.assert_array_equal(sys.mu_W, 0.0)


def test_cost_validation():
    with pytest.raises(ValueError):
        QuadCost(np.eye(2), [[0.0]])
    with pytest.raises(ValueError):
        QuadCost(-np.eye(2), [[1.0]])


def test_constraint_validation():
    with pytest.raises(DimensionMismatch):
        RiskConstraints(np.ones((1, 2)), [1.0, 2.0], np.zeros((0, 1)), [], RiskSpec("cvar"))
    with pytest.raises(ValueError):
        RiskConstraints(np.zeros((0, 2)), [], np.zeros((0, 1)), [], RiskSpec("cvar"), v_lower=[1.0], v_upper=[0.0])
    empty = RiskConstraints.empty(2, 1)
    assert empty.m_x == 0 and empty.m_u == 0


def test_synthesize_dcdc_kstar():
    sys, cost, _ = dcdc_problem()
    syn = synthesize(sys, cost)
    assert abs(syn.C_f) <= 1e-9
    np.testing.assert_allclose(syn.P, syn.Pstar, atol=1e-9)
    assert syn.stationary_cost == pytest.approx(float(np.trace(syn.Pstar @ SIGMA_W)), rel=1e-12)
    assert syn.stationary_cost == pytest.approx(4.277087, abs=1e-6)
    # With K = K* the error and the optimal state covariances coincide.
    np.testing.assert_allclose(syn.Sigma_E_s, syn.Sigma_X_s, atol=1e-12)
    acl = sys.Acl
    assert np.linalg.norm(acl @ syn.Sigma_E_s @ acl.T + SIGMA_W - syn.Sigma_E_s) <= 1e-12


def test_synthesize_dcdc_ktilde_gap():
    sys, cost, _ = dcdc_problem(K=dcdc_gain(0.01, 200.0))
    syn = synthesize(sys, cost)
    # Independent evaluation by substitution into the Lyapunov sum.
    acl = sys.Acl
    Qk = Q_DCDC + sys.K.T @ R_DCDC @ sys.K
    P_sum = np.zeros((2, 2))
    T = np.eye(2)
    for _ in range(5000):
        P_sum += T.T @ Qk @ T
        T = acl @ T
    np.testing.assert_allclose(syn.P, P_sum, rtol=1e-9)
    assert syn.C_f == pytest.approx(float(np.trace((P_sum - syn.Pstar) @ SIGMA_W)), rel=1e-8)
    assert syn.C_f > 20.0
    lower, upper = performance_bounds(syn)
    assert upper - lower == pytest.approx(syn.C_f)


def test_stationary_cost_identity():
    sys, cost, _ = dcdc_problem()
    syn = synthesize(sys, cost)
    Qk = Q_DCDC + syn.Kstar.T @ R_DCDC @ syn.Kstar
    assert float(np.trace(Qk @ syn.Sigma_X_s)) == pytest.approx(syn.stationary_cost, rel=1e-9)


def test_scalar_stationary_cost():
    sys = LinearStochasticSystem([[1.0]], [[1.0]], [[0.3]], mk.solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])[1])
    syn = synthesize(sys, QuadCost([[1.0]], [[1.0]]))
    assert syn.stationary_cost == pytest.approx((1 + math.sqrt(5)) / 2 * 0.3, abs=1e-12)


def test_performance_bounds_noiseless():
    sys = LinearStochasticSystem(A_DCDC, B_DCDC, np.zeros((2, 2)), dcdc_gain(0.01, 200.0))
    assert performance_bounds(synthesize(sys, QuadCost(Q_DCDC, R_DCDC))) == (0.0, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cf_nonnegative_for_random_stable_gains(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    l = int(rng.integers(1, n + 1))
    A = rng.standard_normal((n, n))
    B = rng.standard_normal((n, l))
    M = rng.standard_normal((n, n))
    Q = M @ M.T + 0.01 * np.eye(n)
    R = np.eye(l) * rng.uniform(0.1, 5)
    # A random stabilizing gain: LQR for randomly perturbed weights.
    Mq = rng.standard_normal((n, n))
    K = mk.solve_dare(A, B, Mq @ Mq.T + 0.01 * np.eye(n), np.eye(l) * rng.uniform(0.01, 100))[1]
    if mk.spectral_radius(A + B @ K) > 0.999:
        return
    F = rng.standard_normal((n, n))
    sys = LinearStochasticSystem(A, B, F @ F.T, K)
    syn = synthesize(sys, QuadCost(Q, R))
    assert syn.C_f >= -1e-9 * (1 + abs(syn.stationary_cost))
    scale = 1 + np.abs(syn.P).max()
    mk.chol(syn.P - syn.Pstar + 1e-9 * scale * np.eye(n))


def test_stationary_admissibility():
    sys, cost, cons = dcdc_problem("cvar")
    syn = synthesize(sys, cost)
    rep = check_stationary_admissible(sys, cons, syn)
    sigma = math.sqrt(syn.Sigma_X_s[0, 0])
    assert rep.ok and rep.rows[0].required == pytest.approx(sigma * 0.9658563337421511)
    bad = RiskConstraints(np.array([[1.0, 0.0]]), [-1e6], np.zeros((0, 1)), [], RiskSpec("cvar"))
    assert not check_stationary_admissible(sys, bad, syn).ok
    assert check_stationary_admissible(sys, RiskConstraints.empty(2, 1), syn).ok


def test_stage_cost_moments_examples():
    cost = QuadCost(np.diag([1.0, 2.0]), [[3.0]])
    K = np.zeros((1, 2))
    assert stage_cost_moments(cost, [0, 0], np.zeros((2, 2)), K, [0.0]) == 0.0
    assert stage_cost_moments(cost, [0, 0], np.eye(2), K, [0.0]) == pytest.approx(3.0)
    scalar = QuadCost([[1.0]], [[1.0]])
    assert stage_cost_moments(scalar, [2.0], [[3.0]], [[-0.5]], [1.0]) == pytest.approx(9.75)


def test_stage_cost_exact_mode_matches_monte_carlo():
    rng = np.random.default_rng(0)
    cost = QuadCost(Q_DCDC, R_DCDC)
    K = dcdc_gain()
    mu, S, v = np.array([1.0, -0.5]), np.array([[0.5, 0.1], [0.1, 0.2]]), np.array([0.7])
    X = rng.multivariate_normal(mu, S, size=400_000)
    U = X @ K.T + v
    mc = cost.stage(X, U).mean()
    exact = stage_cost_moments(cost, mu, S, K, v, exact=True)
    printed = stage_cost_moments(cost, mu, S, K, v)
    assert mc == pytest.approx(exact, rel=5e-3)
    assert exact - printed == pytest.approx(2 * v @ R_DCDC @ K @ mu)
