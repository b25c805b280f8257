"""Plant, cost and constraint containers plus offline synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import matrix_kernels as mk
from .errors import DimensionMismatch
from .risk import RiskKind, RiskSpec, risk_coefficient


def _vector(v, size: int, name: str) -> NDArray:
    arr = np.array(v, dtype=float).reshape(-1)
    if arr.size != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {arr.size}")
    return arr


@dataclass(frozen=True, eq=False)
class LinearStochasticSystem:
    """``X(k+1) = A X(k) + B U(k) + W(k)`` with fixed tube gain ``K``.

    ``W`` has mean ``mu_W`` and covariance ``Sigma_W``; Gaussian unless a
    custom sampler is supplied to the sample-based tools.
    """

    A: NDArray
    B: NDArray
    Sigma_W: NDArray
    K: NDArray
    mu_W: NDArray = None

    def __post_init__(self):
        A = mk.as_matrix(self.A, name="A")
        n = A.shape[0]
        if A.shape[1] != n:
            raise DimensionMismatch("A must be square")
        B = np.array(self.B, dtype=float).reshape(n, -1)
        l = B.shape[1]
        K = np.array(self.K, dtype=float).reshape(l, n)
        Sigma_W = mk.as_matrix(self.Sigma_W, n, n, name="Sigma_W")
        mu_W = np.zeros(n) if self.mu_W is None else _vector(self.mu_W, n, "mu_W")
        for name, val in [("A", A), ("B", B), ("K", K), ("Sigma_W", Sigma_W), ("mu_W", mu_W)]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        if mk.controllability_rank(A, B) < n:
            raise ValueError("(A, B) is not controllable")
        if not mk.is_symmetric(Sigma_W, 1e-12) or not mk.is_psd(Sigma_W):
            raise ValueError("Sigma_W must be symmetric positive semidefinite")
        rho = mk.spectral_radius(A + B @ K)
        if rho >= 1.0:
            raise ValueError(f"A + BK is not stable (spectral radius {rho:.6g})")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:
        return self.B.shape[1]

    @property
    def Acl(self) -> NDArray:
        return self.A + self.B @ self.K

    def with_gain(self, K: ArrayLike) -> "LinearStochasticSystem":
        return LinearStochasticSystem(self.A, self.B, self.Sigma_W, K, self.mu_W)


@dataclass(frozen=True, eq=False)
class QuadCost:
    Q: NDArray
    R: NDArray

    def __post_init__(self):
        Q = mk.as_matrix(self.Q, name="Q")
        R = mk.as_matrix(self.R, name="R")
        if Q.shape[0] != Q.shape[1] or R.shape[0] != R.shape[1]:
            raise DimensionMismatch("Q and R must be square")
        if not mk.is_symmetric(Q) or not mk.is_psd(Q):
            raise ValueError("Q must be symmetric positive semidefinite")
        if not mk.is_symmetric(R) or mk.min_eig(R) <= 0:
            raise ValueError("R must be symmetric positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    def stage(self, x: NDArray, u: NDArray) -> NDArray:
        """``x'Qx + u'Ru`` row-wise for batches of states and inputs."""
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + np.einsum("...i,ij,...j->...", u, self.R, u)


@dataclass(frozen=True, eq=False)
class RiskConstraints:
    """Rows ``rho(c_i' X) <= p_i`` and ``rho(d_i' U) <= q_i`` plus an optional box on ``v``."""

    C: NDArray
    p: NDArray
    D: NDArray
    q: NDArray
    spec: RiskSpec
    v_lower: NDArray | None = None
    v_upper: NDArray | None = None

    def __post_init__(self):
        C = np.array(self.C, dtype=float)
        D = np.array(self.D, dtype=float)
        if C.ndim != 2 or D.ndim != 2:
            raise DimensionMismatch("C and D must be 2-D (use shape (0, n) for no rows)")
        p = np.array(self.p, dtype=float).reshape(-1)
        q = np.array(self.q, dtype=float).reshape(-1)
        if p.size != C.shape[0] or q.size != D.shape[0]:
            raise DimensionMismatch("bound vectors must match the number of rows")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        for name in ("v_lower", "v_upper"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.array(val, dtype=float).reshape(-1))
        if self.v_lower is not None and self.v_upper is not None:
            if np.any(self.v_lower > self.v_upper):
                raise ValueError("input box has lower > upper")

    @classmethod
    def empty(cls, n: int, l: int, spec: RiskSpec | None = None) -> "RiskConstraints":
        return cls(np.zeros((0, n)), [], np.zeros((0, l)), [], spec or RiskSpec(RiskKind.EXPECTATION))

    @property
    def m_x(self) -> int:
        return self.C.shape[0]

    @property
    def m_u(self) -> int:
        return self.D.shape[0]

    def check_dims(self, n: int, l: int) -> None:
        if self.m_x and self.C.shape[1] != n:
            raise DimensionMismatch(f"state rows need {n} columns")
        if self.m_u and self.D.shape[1] != l:
            raise DimensionMismatch(f"input rows need {l} columns")
        for name in ("v_lower", "v_upper"):
            val = getattr(self, name)
            if val is not None and val.size != l:
                raise DimensionMismatch(f"{name} must have length {l}")

    def box_contains_zero(self) -> bool:
        lo_ok = self.v_lower is None or np.all(self.v_lower <= 0.0)
        hi_ok = self.v_upper is None or np.all(self.v_upper >= 0.0)
        return bool(lo_ok and hi_ok)

    def with_spec(self, spec: RiskSpec) -> "RiskConstraints":
        return RiskConstraints(self.C, self.p, self.D, self.q, spec, self.v_lower, self.v_upper)


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    P: NDArray
    Pstar: NDArray
    Kstar: NDArray
    Sigma_E_s: NDArray
    Sigma_X_s: NDArray
    stationary_cost: float
    C_f: float

    @property
    def upper_cost(self) -> float:
        return self.stationary_cost + self.C_f


def synthesize(sys: LinearStochasticSystem, cost: QuadCost) -> SynthesisResult:
    """Offline ingredients for the moment-based controller.

    ``P`` is the cost-to-go of the tube gain ``K``; ``(P*, K*)`` the LQR pair;
    ``Sigma_E_s`` the stationary error covariance under ``A + BK`` and
    ``Sigma_X_s`` the stationary state covariance under ``A + BK*``.
    """
    n, l = sys.n, sys.l
    if cost.Q.shape != (n, n) or cost.R.shape != (l, l):
        raise DimensionMismatch("cost weights do not match the system")
    K = sys.K
    P = mk.solve_dlyap(sys.Acl, cost.Q + K.T @ cost.R @ K, transpose=True)
    Pstar, Kstar = mk.solve_dare(sys.A, sys.B, cost.Q, cost.R)
    Sigma_E_s = mk.solve_dlyap(sys.Acl, sys.Sigma_W)
    Sigma_X_s = mk.solve_dlyap(sys.A + sys.B @ Kstar, sys.Sigma_W)
    stationary_cost = float(np.trace(Pstar @ sys.Sigma_W))
    C_f = float(np.trace((P - Pstar) @ sys.Sigma_W))
    return SynthesisResult(P, Pstar, Kstar, Sigma_E_s, Sigma_X_s, stationary_cost, C_f)


@dataclass
class RowCheck:
    kind: str
    row: int
    bound: float
    required: float

    @property
    def ok(self) -> bool:
        return self.bound >= self.required - 1e-12

    @property
    def margin(self) -> float:
        return self.bound - self.required


@dataclass
class AdmissibilityReport:
    rows: list[RowCheck] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows) and not self.notes


def _std_along(cov: NDArray, rows: NDArray) -> NDArray:
    if rows.shape[0] == 0:
        return np.zeros(0)
    var = np.einsum("ij,jk,ik->i", rows, cov, rows)
    return np.sqrt(np.maximum(var, 0.0))


def check_stationary_admissible(sys: LinearStochasticSystem, constraints: RiskConstraints,
                                synth: SynthesisResult) -> AdmissibilityReport:
    """Does the optimal stationary pair ``X ~ N(0, Sigma_X_s)``, ``U = K*X`` meet every row?"""
    coef = risk_coefficient(constraints.spec)
    rep = AdmissibilityReport()
    sx = _std_along(synth.Sigma_X_s, constraints.C) * coef
    su = _std_along(synth.Kstar @ synth.Sigma_X_s @ synth.Kstar.T, constraints.D) * coef
    rep.rows += [RowCheck("state", i, float(constraints.p[i]), float(sx[i])) for i in range(constraints.m_x)]
    rep.rows += [RowCheck("input", i, float(constraints.q[i]), float(su[i])) for i in range(constraints.m_u)]
    return rep


def stage_cost_moments(cost: QuadCost, mu_X: ArrayLike, Sigma_X: ArrayLike, K: ArrayLike,
                       v: ArrayLike, exact: bool = False) -> float:
    """Expected stage cost of ``U = K X + v`` for ``X`` with the given moments.

    By default this omits the cross term ``2 v'R K mu`` to match the
    moment objective used by the open-loop problem; ``exact=True`` adds it
    back and returns ``E[X'QX + U'RU]``.
    """
    mu = np.asarray(mu_X, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    K = np.asarray(K, dtype=float).reshape(v.size, mu.size)
    S = np.asarray(Sigma_X, dtype=float)
    Qk = cost.Q + K.T @ cost.R @ K
    val = mu @ Qk @ mu + v @ cost.R @ v + np.trace(Qk @ S)
    if exact:
        val += 2.0 * v @ cost.R @ K @ mu
    return float(val)
