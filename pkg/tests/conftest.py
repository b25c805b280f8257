import itertools

import numpy as np
import pytest

from riskmpc.config import ScenarioConfig
from riskmpc.matrix_kernels import solve_dare
from riskmpc.model import LinearStochasticSystem, QuadCost, RiskConstraints
from riskmpc.risk import RiskKind, RiskSpec

A_DCDC = np.array([[1.0, 0.0075], [-0.143, 0.996]])
B_DCDC = np.array([[4.798], [0.115]])
SIGMA_W = 0.1 * np.eye(2)
Q_DCDC = np.diag([1.0, 10.0])
R_DCDC = np.array([[5.0]])
X0 = np.array([1.8, 1.5])
HORIZON = 15


def dcdc_gain(q_scale=1.0, r_scale=1.0):
    return solve_dare(A_DCDC, B_DCDC, q_scale * Q_DCDC, r_scale * R_DCDC)[1]


def dcdc_problem(kind="cvar", K=None, alpha=0.4):
    sys = LinearStochasticSystem(A_DCDC, B_DCDC, SIGMA_W, dcdc_gain() if K is None else K)
    cons = RiskConstraints(np.array([[1.0, 0.0]]), [2.0], np.zeros((0, 1)), [], RiskSpec(RiskKind.parse(kind), alpha))
    return sys, QuadCost(Q_DCDC, R_DCDC), cons


def random_stabilizable(rng, n, l):
    """Generic (hence controllable) pair with spectral radius of A in [0.5, 1.5]."""
    A = rng.standard_normal((n, n))
    A *= rng.uniform(0.5, 1.5) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    B = rng.standard_normal((n, l))
    M = rng.standard_normal((n, n))
    N = rng.standard_normal((l, l))
    return A, B, M @ M.T + 0.1 * np.eye(n), N @ N.T + 0.1 * np.eye(l)


@pytest.fixture
def dcdc():
    return dcdc_problem()


@pytest.fixture
def dcdc_config():
    return ScenarioConfig.builtin("dcdc")


def brute_force(H, g, A, b, E, e, tol=1e-9):
    """Enumerate active sets; return the KKT point or None when no subset certifies one."""
    n = H.shape[0]
    m = A.shape[0]
    for size in range(0, min(m, n - E.shape[0]) + 1):
        for S in itertools.combinations(range(m), size):
            S = list(S)
            C = np.vstack([E, A[S]]) if S or E.shape[0] else np.zeros((0, n))
            d = np.concatenate([e, b[S]])
            k = C.shape[0]
            K = np.block([[H, C.T], [C, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-g, d]))
            except np.linalg.LinAlgError:
                continue
            if np.linalg.cond(K) > 1e12:
                continue
            v = sol[:n]
            lam = sol[n + E.shape[0]:]
            if (m == 0 or np.all(A @ v <= b + tol)) and np.all(lam >= -tol):
                return v
    return None


def random_qp(rng):
    n = int(rng.integers(1, 7))
    m = int(rng.integers(0, 9))
    me = int(rng.integers(0, min(2, n - 1) + 1))
    F = rng.standard_normal((n, n))
    H = F @ F.T + 0.1 * np.eye(n)
    g = rng.standard_normal(n) * 3
    A = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    E = rng.standard_normal((me, n))
    e = rng.standard_normal(me)
    return H, g, A, b, E, e


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
