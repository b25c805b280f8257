import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from riskmpc import matrix_kernels as mk
from riskmpc.errors import NotPSD, NotStabilizable, NotStable

from conftest import A_DCDC, B_DCDC, Q_DCDC, R_DCDC, SIGMA_W, random_stabilizable


def rel_dare_residual(A, B, Q, R, P):
    return np.linalg.norm(mk.dare_residual(A, B, Q, R, P)) / np.linalg.norm(P)


def test_scalar_golden_ratio():
    P, K = mk.solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert abs(P[0, 0] - (1 + math.sqrt(5)) / 2) <= 1e-12
    # K = -P/(1+P) = -1/phi
    assert K[0, 0] == pytest.approx(-2 / (1 + math.sqrt(5)), abs=1e-12)


def test_dcdc_riccati_matches_scipy():
    P, K = mk.solve_dare(A_DCDC, B_DCDC, Q_DCDC, R_DCDC)
    P_ref = sla.solve_discrete_are(A_DCDC, B_DCDC, Q_DCDC, R_DCDC)
    assert np.allclose(P, P_ref, rtol=1e-9, atol=1e-10)
    assert rel_dare_residual(A_DCDC, B_DCDC, Q_DCDC, R_DCDC, P) <= 1e-10
    assert mk.spectral_radius(A_DCDC + B_DCDC @ K) < 1
    np.testing.assert_allclose(K, [[-0.26118848, 0.43708717]], atol=1e-7)


def test_dcdc_lyapunov_cost_of_kstar_equals_pstar():
    P, K = mk.solve_dare(A_DCDC, B_DCDC, Q_DCDC, R_DCDC)
    acl = A_DCDC + B_DCDC @ K
    Pk = mk.solve_dlyap(acl, Q_DCDC + K.T @ R_DCDC @ K, transpose=True)
    assert np.linalg.norm(Pk - P) <= 1e-9 * np.linalg.norm(P)
    S = mk.solve_dlyap(acl, SIGMA_W)
    res = acl @ S @ acl.T + SIGMA_W - S
    assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(S)


def test_random_systems_residuals():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        l = int(rng.integers(1, n + 1))
        A, B, Q, R = random_stabilizable(rng, n, l)
        P, K = mk.solve_dare(A, B, Q, R)
        assert rel_dare_residual(A, B, Q, R, P) <= 1e-10
        acl = A + B @ K
        assert mk.spectral_radius(acl) < 1
        Pk = mk.solve_dlyap(acl, Q + K.T @ R @ K, transpose=True)
        res = acl.T @ Pk @ acl + Q + K.T @ R @ K - Pk
        assert np.linalg.norm(res) <= 1e-10 * np.linalg.norm(Pk)


def test_random_systems_agree_with_scipy():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        A, B, Q, R = random_stabilizable(rng, n, 1)
        P, _ = mk.solve_dare(A, B, Q, R)
        np.testing.assert_allclose(P, sla.solve_discrete_are(A, B, Q, R), rtol=1e-7, atol=1e-9)


def test_dlyap_matches_scipy_both_forms():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((4, 4))
    A *= 0.9 / mk.spectral_radius(A)
    M = rng.standard_normal((4, 4))
    Q = M @ M.T
    np.testing.assert_allclose(mk.solve_dlyap(A, Q), sla.solve_discrete_lyapunov(A, Q), rtol=1e-9)
    np.testing.assert_allclose(mk.solve_dlyap(A, Q, transpose=True), sla.solve_discrete_lyapunov(A.T, Q), rtol=1e-9)


def test_dlyap_rejects_unstable():
    with pytest.raises(NotStable):
        mk.solve_dlyap(np.diag([1.01, 0.2]), np.eye(2))


def test_dare_rejects_unstabilizable():
    # The unstable mode 2.0 is not reached by the input.
    with pytest.raises(NotStabilizable):
        mk.solve_dare(np.diag([0.5, 2.0]), np.array([[1.0], [0.0]]), np.eye(2), np.eye(1))


def test_dare_without_inputs_is_lyapunov():
    A = np.diag([0.5, -0.3])
    P, K = mk.solve_dare(A, np.zeros((2, 0)), np.eye(2), np.zeros((0, 0)))
    assert K.shape == (0, 2)
    np.testing.assert_allclose(P, np.diag([1 / (1 - 0.25), 1 / (1 - 0.09)]), rtol=1e-12)


def test_zero_dynamics_riccati_is_q():
    P, K = mk.solve_dare(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
    np.testing.assert_allclose(P, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(K, 0, atol=1e-14)


def test_controllability_rank():
    assert mk.controllability_rank(A_DCDC, B_DCDC) == 2
    assert mk.controllability_rank(np.diag([0.5, 2.0]), np.array([[1.0], [0.0]])) == 1


@st.composite
def psd_matrices(draw):
    n = draw(st.integers(1, 5))
    r = draw(st.integers(0, n))
    seed = draw(st.integers(0, 2**32 - 1))
    F = np.random.default_rng(seed).standard_normal((n, r))
    return F @ F.T


@settings(max_examples=60, deadline=None)
@given(psd_matrices())
def test_chol_reconstructs_psd(S):
    L = mk.chol(S)
    assert np.allclose(np.tril(L), L)
    assert np.allclose(L @ L.T, S, atol=1e-10 * (1 + np.abs(S).max()))


def test_chol_rejects_indefinite():
    with pytest.raises(NotPSD):
        mk.chol(np.array([[1.0, 0.0], [0.0, -1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_psd_order_of_covariance_propagation(seed, n):
    # Starting below the stationary covariance keeps every iterate below it.
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= rng.uniform(0.1, 0.95) / max(mk.spectral_radius(A), 1e-12)
    F = rng.standard_normal((n, n))
    W = F @ F.T
    S_inf = mk.solve_dlyap(A, W)
    S = np.zeros((n, n))
    for _ in range(20):
        S_next = A @ S @ A.T + W
        assert mk.psd_leq(S, S_next, tol=1e-8 * (1 + np.abs(S_inf).max()))
        assert mk.psd_leq(S_next, S_inf, tol=1e-8 * (1 + np.abs(S_inf).max()))
        S = S_next
