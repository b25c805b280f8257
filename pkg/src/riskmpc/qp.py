"""Dense strictly convex QP: primal active-set method with a phase-1 start.

Problem form::

    minimize    0.5 v'Hv + g'v
    subject to  A_in v <= b_in,   A_eq v = b_eq

Equalities are removed by null-space elimination before the active-set
loop; infeasibility is decided by a phase-1 LP minimizing the largest
violation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linprog

from .errors import DimensionMismatch

FEAS_TOL = 1e-9
PHASE1_TOL = 1e-8


class QpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITER_LIMIT = "IterLimit"


@dataclass(eq=False)
class CondensedQP:
    H: NDArray
    g: NDArray
    A_in: NDArray
    b_in: NDArray
    A_eq: NDArray
    b_eq: NDArray
    offset: float = 0.0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        nv = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(nv)
        self.A_in = np.asarray(self.A_in, dtype=float).reshape(-1, nv)
        self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, nv)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.H.shape != (nv, nv):
            raise DimensionMismatch("H must be square")
        if self.b_in.size != self.A_in.shape[0] or self.b_eq.size != self.A_eq.shape[0]:
            raise DimensionMismatch("constraint rows and right-hand sides disagree")

    @property
    def nv(self) -> int:
        return self.H.shape[0]

    def objective(self, v: NDArray) -> float:
        return float(0.5 * v @ self.H @ v + self.g @ v)

    def max_violation(self, v: NDArray) -> float:
        viol = 0.0
        if self.b_in.size:
            viol = max(viol, float(np.max(self.A_in @ v - self.b_in)))
        if self.b_eq.size:
            viol = max(viol, float(np.max(np.abs(self.A_eq @ v - self.b_eq))))
        return viol


@dataclass(eq=False)
class QpSolution:
    v: NDArray | None
    objective: float
    status: QpStatus
    active_set: tuple[int, ...] = ()
    multipliers: NDArray | None = None
    eq_multipliers: NDArray | None = None
    iterations: int = 0
    phase1_value: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass(eq=False)
class NullSpace:
    """``v = v_p + Z y`` parametrizes ``A_eq v = b_eq``."""

    Z: NDArray
    pinv: NDArray
    consistent_tol: float = 1e-9

    @classmethod
    def of(cls, A_eq: NDArray, nv: int) -> "NullSpace":
        if A_eq.shape[0] == 0:
            return cls(np.eye(nv), np.zeros((nv, 0)))
        U, s, Vt = np.linalg.svd(A_eq)
        rank = int(np.sum(s > 1e-12 * max(1.0, s[0])))
        Z = Vt[rank:].T
        pinv = Vt[:rank].T @ np.diag(1.0 / s[:rank]) @ U[:, :rank].T
        return cls(Z, pinv)

    def particular(self, A_eq: NDArray, b_eq: NDArray) -> NDArray | None:
        vp = self.pinv @ b_eq
        if b_eq.size and np.max(np.abs(A_eq @ vp - b_eq)) > self.consistent_tol * (1.0 + np.max(np.abs(b_eq))):
            return None
        return vp


def phase1(A: NDArray, b: NDArray, nvar: int) -> tuple[float, NDArray | None]:
    """Minimize ``t`` s.t. ``A y - t <= b``, ``t >= 0``; returns ``(t*, y*)``."""
    if A.shape[0] == 0:
        return 0.0, np.zeros(nvar)
    c = np.zeros(nvar + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A, -np.ones((A.shape[0], 1))])
    bounds = [(None, None)] * nvar + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        return float("inf"), None
    return float(res.x[-1]), res.x[:-1]


def _independent_subset(rows: NDArray, candidates: list[int]) -> list[int]:
    chosen: list[int] = []
    for i in candidates:
        trial = rows[chosen + [i]]
        if np.linalg.matrix_rank(trial, tol=1e-10 * max(1.0, np.abs(trial).max())) == len(chosen) + 1:
            chosen.append(i)
    return chosen


def _face_kkt(G: NDArray, c: NDArray, A: NDArray, b: NDArray, W: list[int]) -> tuple[NDArray, NDArray]:
    d = G.shape[0]
    if not W:
        return np.linalg.solve(G, -c), np.zeros(0)
    Aw = A[W]
    m = len(W)
    kkt = np.zeros((d + m, d + m))
    kkt[:d, :d] = G
    kkt[:d, d:] = Aw.T
    kkt[d:, :d] = Aw
    rhs = np.concatenate([-c, b[W]])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:d], sol[d:]


def active_set_solve(G: NDArray, c: NDArray, A: NDArray, b: NDArray, y0: NDArray,
                     working: list[int] | None = None, max_iter: int | None = None):
    """Primal active-set loop from a feasible ``y0``.

    Returns ``(y, W, lam, status, iterations)``. Each iteration moves toward
    the minimizer of the current face; a blocking constraint joins the
    working set, a negative multiplier leaves it.
    """
    d = G.shape[0]
    m = A.shape[0]
    max_iter = max_iter or 200 * (m + d)
    y = y0.copy()
    scale = 1.0 + np.abs(b).max(initial=0.0)
    slack = b - A @ y if m else np.zeros(0)
    if working:
        near = [i for i in working if 0 <= i < m and abs(slack[i]) <= 1e-7 * scale]
        W = _independent_subset(A, near)
    else:
        W = []
    lam = np.zeros(0)
    for it in range(1, max_iter + 1):
        y_face, lam = _face_kkt(G, c, A, b, W)
        p = y_face - y
        if np.linalg.norm(p) <= 1e-12 * (1.0 + np.linalg.norm(y)):
            y = y_face
            if lam.size == 0 or lam.min() >= -1e-10 * (1.0 + np.abs(lam).max()):
                return y, W, lam, QpStatus.OPTIMAL, it
            W.pop(int(np.argmin(lam)))
            continue
        step = 1.0
        block = -1
        if m:
            Ap = A @ p
            slack = b - A @ y
            inW = np.zeros(m, dtype=bool)
            inW[W] = True
            cand = np.where(~inW & (Ap > 1e-14 * (1.0 + np.abs(p).max())))[0]
            if cand.size:
                ratios = np.maximum(slack[cand], 0.0) / Ap[cand]
                j = int(np.argmin(ratios))
                if ratios[j] < 1.0:
                    step = float(ratios[j])
                    block = int(cand[j])
        y = y + step * p
        if block >= 0:
            W.append(block)
        else:
            y = y_face
    return y, W, lam, QpStatus.ITER_LIMIT, max_iter


def solve_qp(qp: CondensedQP, v0: NDArray | None = None, working: tuple[int, ...] | list[int] | None = None,
             max_iter: int | None = None) -> QpSolution:
    """Solve a :class:`CondensedQP`.

    ``v0`` is an optional warm start; it is used directly when feasible
    (within ``1e-9``) and otherwise replaced by a phase-1 point. ``working``
    seeds the working set with inequality rows expected to be active.
    """
    nv = qp.nv
    ns = NullSpace.of(qp.A_eq, nv)
    vp = ns.particular(qp.A_eq, qp.b_eq)
    if vp is None:
        return QpSolution(None, np.inf, QpStatus.INFEASIBLE, info={"reason": "inconsistent equalities"})
    Z = ns.Z
    G = Z.T @ qp.H @ Z
    c = Z.T @ (qp.g + qp.H @ vp)
    A = qp.A_in @ Z
    b = qp.b_in - qp.A_in @ vp
    d = Z.shape[1]
    max_iter = max_iter or 200 * (qp.A_in.shape[0] + nv)

    y0 = None
    p1 = None
    if v0 is not None:
        y_try = Z.T @ (np.asarray(v0, dtype=float) - vp)
        if A.shape[0] == 0 or np.max(A @ y_try - b) <= FEAS_TOL:
            y0 = y_try
    if y0 is None:
        if A.shape[0] == 0:
            y0 = np.zeros(d)
        else:
            # Cheap attempt first: the unconstrained minimizer is often feasible.
            y_free = np.linalg.solve(G, -c) if d else np.zeros(0)
            if np.max(A @ y_free - b) <= FEAS_TOL:
                y0 = y_free
            else:
                p1, y0 = phase1(A, b, d)
                if y0 is None or p1 > PHASE1_TOL:
                    return QpSolution(None, np.inf, QpStatus.INFEASIBLE, phase1_value=p1)
    if d == 0:
        v = vp
        return _finish(qp, v, [], np.zeros(0), QpStatus.OPTIMAL, 0, p1)

    y, W, lam, status, its = active_set_solve(G, c, A, b, y0, list(working or []), max_iter)
    v = vp + Z @ y
    return _finish(qp, v, W, lam, status, its, p1)


def _finish(qp: CondensedQP, v: NDArray, W: list[int], lam: NDArray, status: QpStatus,
            its: int, p1: float | None) -> QpSolution:
    mult = np.zeros(qp.A_in.shape[0])
    if W:
        mult[W] = lam
    nu = None
    if qp.A_eq.shape[0]:
        # Equality multipliers from stationarity: H v + g + A_in' mult + A_eq' nu = 0.
        r = qp.H @ v + qp.g + qp.A_in.T @ mult
        nu = np.linalg.lstsq(qp.A_eq.T, -r, rcond=None)[0]
    order = sorted(W)
    return QpSolution(v, qp.objective(v), status, tuple(order), mult, nu, its, p1)


def kkt_residuals(qp: CondensedQP, sol: QpSolution) -> dict[str, float]:
    """Stationarity, primal and dual feasibility and complementarity residuals."""
    v, mult = sol.v, sol.multipliers
    r = qp.H @ v + qp.g + qp.A_in.T @ mult
    if sol.eq_multipliers is not None:
        r = r + qp.A_eq.T @ sol.eq_multipliers
    slack = qp.b_in - qp.A_in @ v
    return {
        "stationarity": float(np.linalg.norm(r)),
        "primal": qp.max_violation(v),
        "dual": float(max(0.0, -mult.min(initial=0.0))),
        "complementarity": float(np.abs(mult * slack).max(initial=0.0)),
    }
