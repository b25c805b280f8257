"""Moment-based open-loop problem condensed into a dense QP over ``v``.

Decision variable: stacked input corrections ``v = (v_0, ..., v_{N-1})``
with ``U(k) = K X(k) + v_k``. The mean ``mu_X`` starts at the measurement
``x_j`` and the nominal ``z`` at ``z_j``; both follow
``(A+BK) s + B v_k + mu_W``, so they share one prediction map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionMismatch
from .model import LinearStochasticSystem, QuadCost, RiskConstraints
from .qp import CondensedQP, QpSolution, solve_qp
from .tightening import TighteningSchedule


@dataclass(frozen=True, eq=False)
class Prediction:
    """``s(k) = Phi[k] s0 + Gamma[k] v + omega[k]`` for ``k = 0..N``."""

    Phi: NDArray    # (N+1, n, n)
    Gamma: NDArray  # (N+1, n, N*l)
    omega: NDArray  # (N+1, n)

    @classmethod
    def build(cls, Acl: NDArray, B: NDArray, mu_W: NDArray, N: int) -> "Prediction":
        n, l = B.shape
        Phi = np.empty((N + 1, n, n))
        Gamma = np.zeros((N + 1, n, N * l))
        omega = np.zeros((N + 1, n))
        Phi[0] = np.eye(n)
        for k in range(N):
            Phi[k + 1] = Acl @ Phi[k]
            Gamma[k + 1] = Acl @ Gamma[k]
            Gamma[k + 1][:, k * l : (k + 1) * l] = B
            omega[k + 1] = Acl @ omega[k] + mu_W
        return cls(Phi, Gamma, omega)


@dataclass(eq=False)
class ParametricOCP:
    """Everything about the condensed QP that does not depend on ``(x_j, z_j, j)``.

    For a measurement ``x`` and nominal ``z`` at absolute step ``j``::

        g    = Gx @ x + g0
        b_in = b_const(j) - Bz @ z
        b_eq = -Phi_N @ z - omega_N
    """

    sys: LinearStochasticSystem
    cost: QuadCost
    constraints: RiskConstraints
    P: NDArray
    N: int
    exact_cost: bool
    pred: Prediction
    H: NDArray
    Gx: NDArray
    g0: NDArray
    Qbar: NDArray
    Mbar: NDArray
    A_in: NDArray
    Bz: NDArray
    row_kind: list[tuple[str, int, int]]
    A_eq: NDArray
    sigma_offset: float

    @classmethod
    def build(cls, sys: LinearStochasticSystem, cost: QuadCost, constraints: RiskConstraints,
              P: NDArray, N: int, exact_cost: bool = False) -> "ParametricOCP":
        if N < 1:
            raise ValueError("horizon N must be >= 1")
        n, l = sys.n, sys.l
        if cost.Q.shape != (n, n) or cost.R.shape != (l, l) or np.shape(P) != (n, n):
            raise DimensionMismatch("cost or terminal weight does not match the system")
        constraints.check_dims(n, l)
        K, R = sys.K, cost.R
        Acl = sys.Acl
        pred = Prediction.build(Acl, sys.B, sys.mu_W, N)
        Qk = cost.Q + K.T @ R @ K
        nv = N * l

        # Stacked mean mu = Phi_s x + Gamma_s v + omega_s over k = 0..N.
        Phi_s = pred.Phi.reshape((N + 1) * n, n)
        Gam_s = pred.Gamma.reshape((N + 1) * n, nv)
        om_s = pred.omega.reshape(-1)
        Qbar = np.zeros(((N + 1) * n, (N + 1) * n))
        for k in range(N):
            Qbar[k * n : (k + 1) * n, k * n : (k + 1) * n] = Qk
        Qbar[N * n :, N * n :] = P
        Rbar = np.kron(np.eye(N), R)
        # Cross term 2 v_k' R K mu_k, present only in the exact-expectation objective.
        Mbar = np.zeros((nv, (N + 1) * n))
        if exact_cost:
            for k in range(N):
                Mbar[k * l : (k + 1) * l, k * n : (k + 1) * n] = R @ K
        half_H = Gam_s.T @ Qbar @ Gam_s + Rbar + Mbar @ Gam_s + Gam_s.T @ Mbar.T
        H = half_H + half_H.T
        Gx = 2.0 * (Gam_s.T @ Qbar + Mbar) @ Phi_s
        g0 = 2.0 * (Gam_s.T @ Qbar + Mbar) @ om_s

        # Variance terms: Sigma_X(0) = 0, Sigma_X(k+1) = Acl Sigma_X Acl' + Sigma_W.
        S = np.zeros((n, n))
        sigma_offset = 0.0
        for k in range(N + 1):
            sigma_offset += float(np.trace((Qk if k < N else P) @ S))
            S = Acl @ S @ Acl.T + sys.Sigma_W

        rows_A, rows_Bz, kinds = [], [], []
        for k in range(N):
            for i in range(constraints.m_x):
                c = constraints.C[i]
                rows_A.append(c @ pred.Gamma[k])
                rows_Bz.append(c @ pred.Phi[k])
                kinds.append(("state", i, k))
        for k in range(N):
            for i in range(constraints.m_u):
                d = constraints.D[i]
                a = d @ K @ pred.Gamma[k]
                a[k * l : (k + 1) * l] += d
                rows_A.append(a)
                rows_Bz.append(d @ K @ pred.Phi[k])
                kinds.append(("input", i, k))
        for k in range(N):
            for r in range(l):
                e = np.zeros(nv)
                e[k * l + r] = 1.0
                if constraints.v_upper is not None and np.isfinite(constraints.v_upper[r]):
                    rows_A.append(e)
                    rows_Bz.append(np.zeros(n))
                    kinds.append(("v_upper", r, k))
                if constraints.v_lower is not None and np.isfinite(constraints.v_lower[r]):
                    rows_A.append(-e)
                    rows_Bz.append(np.zeros(n))
                    kinds.append(("v_lower", r, k))
        A_in = np.array(rows_A).reshape(-1, nv)
        Bz = np.array(rows_Bz).reshape(-1, n)
        A_eq = pred.Gamma[N]
        return cls(sys, cost, constraints, np.asarray(P, dtype=float), N, exact_cost, pred, H, Gx, g0,
                   Qbar, Mbar, A_in, Bz, kinds, A_eq, sigma_offset)

    @property
    def nv(self) -> int:
        return self.N * self.sys.l

    def b_const(self, schedule: TighteningSchedule, j: int) -> NDArray:
        """Inequality right-hand side before the ``-Bz z`` shift, for absolute step ``j``."""
        N = self.N
        cons = self.constraints
        sx = schedule.state_window(j, N) if cons.m_x else np.zeros((0, N))
        su = schedule.input_window(j, N) if cons.m_u else np.zeros((0, N))
        out = np.empty(len(self.row_kind))
        om = self.pred.omega
        K = self.sys.K
        for r, (kind, i, k) in enumerate(self.row_kind):
            if kind == "state":
                out[r] = cons.p[i] - sx[i, k] - cons.C[i] @ om[k]
            elif kind == "input":
                out[r] = cons.q[i] - su[i, k] - cons.D[i] @ K @ om[k]
            elif kind == "v_upper":
                out[r] = cons.v_upper[i]
            else:
                out[r] = -cons.v_lower[i]
        return out

    def constant(self, x: NDArray) -> float:
        mu0 = self.pred.Phi.reshape(-1, self.sys.n) @ x + self.pred.omega.reshape(-1)
        return float(mu0 @ self.Qbar @ mu0) + self.sigma_offset

    def instantiate(self, x: NDArray, z: NDArray, schedule: TighteningSchedule, j: int = 0) -> CondensedQP:
        x = np.asarray(x, dtype=float).reshape(self.sys.n)
        z = np.asarray(z, dtype=float).reshape(self.sys.n)
        g = self.Gx @ x + self.g0
        b_in = self.b_const(schedule, j) - self.Bz @ z
        b_eq = -self.pred.Phi[self.N] @ z - self.pred.omega[self.N]
        return CondensedQP(self.H, g, self.A_in, b_in, self.A_eq, b_eq, self.constant(x))


@dataclass(eq=False)
class OpenLoopProblem:
    """One instance of the open-loop problem at closed-loop step ``j``.

    The schedule is indexed by absolute time, so stage ``k`` uses the
    back-off of step ``j + k``.
    """

    sys: LinearStochasticSystem
    cost: QuadCost
    constraints: RiskConstraints
    schedule: TighteningSchedule
    P: NDArray
    N: int
    x: NDArray
    z: NDArray
    j: int = 0
    exact_cost: bool = False

    def parametric(self) -> ParametricOCP:
        return ParametricOCP.build(self.sys, self.cost, self.constraints, self.P, self.N, self.exact_cost)


def condense(prob: OpenLoopProblem, parametric: ParametricOCP | None = None) -> CondensedQP:
    par = parametric or prob.parametric()
    if np.size(prob.x) != prob.sys.n or np.size(prob.z) != prob.sys.n:
        raise DimensionMismatch("x and z must have the state dimension")
    return par.instantiate(prob.x, prob.z, prob.schedule, prob.j)


def solve_open_loop(prob: OpenLoopProblem, **kwargs) -> tuple[CondensedQP, QpSolution]:
    qp = condense(prob)
    return qp, solve_qp(qp, **kwargs)


def evaluate_open_loop_cost(prob: OpenLoopProblem, v: NDArray) -> float:
    """Moment objective by direct forward simulation of mean and covariance."""
    sys, cost = prob.sys, prob.cost
    n, l, N = sys.n, sys.l, prob.N
    v = np.asarray(v, dtype=float).reshape(N, l)
    K, R = sys.K, cost.R
    Acl = sys.Acl
    Qk = cost.Q + K.T @ R @ K
    mu = np.asarray(prob.x, dtype=float).reshape(n).copy()
    S = np.zeros((n, n))
    total = 0.0
    for k in range(N):
        total += mu @ Qk @ mu + v[k] @ R @ v[k] + np.trace(Qk @ S)
        if prob.exact_cost:
            total += 2.0 * v[k] @ R @ K @ mu
        mu = Acl @ mu + sys.B @ v[k] + sys.mu_W
        S = Acl @ S @ Acl.T + sys.Sigma_W
    total += mu @ prob.P @ mu + np.trace(prob.P @ S)
    return float(total)
