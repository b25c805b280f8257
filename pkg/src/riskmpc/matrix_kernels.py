"""Dense matrix primitives: Lyapunov and Riccati solvers, semidefinite Cholesky.

All routines take and return plain ``numpy`` arrays. Matrices are small
(state dimension in the single digits), so everything here is dense and
favours robustness over asymptotic speed.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import NonConvergence, NotPSD, NotStabilizable, NotStable

MAX_ITER = 10_000
STEP_RTOL = 1e-13
RESIDUAL_RTOL = 1e-10


def as_matrix(a: ArrayLike, rows: int | None = None, cols: int | None = None, name: str = "matrix") -> NDArray:
    """Convert to a finite 2-D float array, optionally checking its shape."""
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"{name} must have {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def symmetrize(m: NDArray) -> NDArray:
    return 0.5 * (m + m.T)


def is_symmetric(m: NDArray, rtol: float = 1e-12) -> bool:
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    return bool(np.max(np.abs(m - m.T), initial=0.0) <= rtol * scale)


def spectral_radius(m: NDArray) -> float:
    if m.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(m))))


def min_eig(s: NDArray) -> float:
    if s.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(symmetrize(s))[0])


def is_psd(s: NDArray, tol: float = 1e-9) -> bool:
    """Eigenvalue-floor PSD test, ``tol`` scaled by the matrix magnitude."""
    scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
    return min_eig(s) >= -tol * scale


def psd_leq(a: NDArray, b: NDArray, tol: float = 1e-9) -> bool:
    """True if ``a`` is below ``b`` in the semidefinite order, up to ``tol * I``."""
    return min_eig(b - a) >= -tol


def chol(s: ArrayLike) -> NDArray:
    """Lower-triangular factor ``L`` with ``L @ L.T == s`` for PSD ``s``.

    Positive definite input goes through LAPACK. Singular input falls back
    to an outer-product Cholesky that zeroes a column whenever its pivot
    is numerically zero, so rank-deficient covariances are accepted.

    Raises
    ------
    NotPSD
        If a pivot drops below ``-1e-10 * trace(s)``.
    """
    s = symmetrize(as_matrix(s, name="S"))
    n = s.shape[0]
    if n == 0:
        return s.copy()
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    tr = float(np.trace(s))
    neg_tol = 1e-10 * max(tr, 0.0)
    zero_tol = 1e-14 * max(tr, 1e-300)
    work = s.copy()
    L = np.zeros_like(s)
    for j in range(n):
        d = work[j, j]
        if d < -neg_tol:
            raise NotPSD(f"pivot {j} is {d:.3e}, below -1e-10*trace")
        if d <= zero_tol:
            # Semidefinite pivot: the rest of this column must vanish too.
            if np.any(np.abs(work[j + 1 :, j]) > 1e-7 * np.sqrt(max(tr, 1e-300))):
                raise NotPSD(f"zero pivot {j} with nonzero off-diagonal column")
            continue
        col = work[j:, j] / np.sqrt(d)
        L[j:, j] = col
        work[j:, j:] -= np.outer(col, col)
    return L


def _check_stable(acl: NDArray) -> None:
    rho = spectral_radius(acl)
    if rho >= 1.0:
        raise NotStable(f"spectral radius {rho:.6g} >= 1")


def lyap_residual(acl: NDArray, qrhs: NDArray, x: NDArray, transpose: bool = False) -> NDArray:
    if transpose:
        return acl.T @ x @ acl + qrhs - x
    return acl @ x @ acl.T + qrhs - x


def _dlyap_doubling(acl: NDArray, qrhs: NDArray) -> NDArray:
    # X = sum_k A^k Q A'^k, accumulated as X <- X + A_k X A_k', A_k <- A_k^2
    x = qrhs.copy()
    a = acl.copy()
    for _ in range(MAX_ITER):
        inc = a @ x @ a.T
        x_new = symmetrize(x + inc)
        a = a @ a
        if np.linalg.norm(x_new - x) <= STEP_RTOL * max(1.0, np.linalg.norm(x_new)):
            return x_new
        x = x_new
    raise NonConvergence("Lyapunov doubling exceeded iteration cap")


def solve_dlyap(acl: ArrayLike, qrhs: ArrayLike, transpose: bool = False) -> NDArray:
    """Solve the discrete Lyapunov equation.

    ``transpose=False`` solves ``X = Acl X Acl' + Q`` (covariance form);
    ``transpose=True`` solves ``X = Acl' X Acl + Q`` (cost-to-go form).

    Raises
    ------
    NotStable
        If ``Acl`` has spectral radius >= 1.
    NonConvergence
        If the doubling iteration or the residual refinement fails.
    """
    acl = as_matrix(acl, name="Acl")
    n = acl.shape[0]
    qrhs = as_matrix(qrhs, n, n, name="Qrhs")
    if acl.shape != (n, n):
        raise ValueError("Acl must be square")
    if not is_symmetric(qrhs, 1e-10):
        raise ValueError("Qrhs must be symmetric")
    _check_stable(acl)
    a = acl.T if transpose else acl
    qrhs = symmetrize(qrhs)
    x = _dlyap_doubling(a, qrhs)
    # Iterative refinement: the correction solves the same equation with the residual.
    for _ in range(3):
        res = symmetrize(lyap_residual(a, qrhs, x))
        if np.linalg.norm(res) <= 1e-2 * RESIDUAL_RTOL * (1.0 + np.linalg.norm(x)):
            break
        x = symmetrize(x + _dlyap_doubling(a, res))
    res = lyap_residual(a, qrhs, x)
    if np.linalg.norm(res) > RESIDUAL_RTOL * (1.0 + np.linalg.norm(x)):
        raise NonConvergence(f"Lyapunov residual {np.linalg.norm(res):.3e} above tolerance")
    return x


def riccati_gain(a: NDArray, b: NDArray, r: NDArray, p: NDArray) -> NDArray:
    """``K = -(R + B'PB)^{-1} B'PA``; the control convention is ``u = Kx``."""
    if b.shape[1] == 0:
        return np.zeros((0, a.shape[0]))
    return -np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)


def dare_residual(a: NDArray, b: NDArray, q: NDArray, r: NDArray, p: NDArray) -> NDArray:
    res = a.T @ p @ a - p + q
    if b.shape[1]:
        res -= a.T @ p @ b @ np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a)
    return res


def solve_dare(a: ArrayLike, b: ArrayLike, q: ArrayLike, r: ArrayLike) -> tuple[NDArray, NDArray]:
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Uses the structure-preserving doubling algorithm, followed by Hewer
    (Newton-Kleinman) refinement steps when the residual is not yet at
    working precision.

    Returns
    -------
    P, K
        ``P`` solves ``P = A'PA - A'PB (R + B'PB)^{-1} B'PA + Q`` and
        ``K = -(R + B'PB)^{-1} B'PA`` makes ``A + BK`` Schur stable.
    """
    a = as_matrix(a, name="A")
    n = a.shape[0]
    b = np.array(b, dtype=float).reshape(n, -1)
    l = b.shape[1]
    q = as_matrix(q, n, n, name="Q")
    r = as_matrix(r, l, l, name="R") if l else np.zeros((0, 0))
    if l and min_eig(r) <= 0:
        raise ValueError("R must be positive definite")
    if not is_psd(q):
        raise ValueError("Q must be positive semidefinite")
    q = symmetrize(q)
    if l == 0:
        try:
            p = solve_dlyap(a, q, transpose=True)
        except NotStable as exc:
            raise NotStabilizable("no inputs and A is not stable") from exc
        return p, np.zeros((0, n))

    eye = np.eye(n)
    ak = a.copy()
    gk = symmetrize(b @ np.linalg.solve(r, b.T))
    hk = q.copy()
    converged = False
    for _ in range(MAX_ITER):
        w = eye + gk @ hk
        try:
            w_ak = np.linalg.solve(w, ak)
            w_gk = np.linalg.solve(w, gk)
        except np.linalg.LinAlgError as exc:
            raise NotStabilizable("singular doubling step") from exc
        h_new = symmetrize(hk + ak.T @ hk @ w_ak)
        gk = symmetrize(gk + ak @ w_gk @ ak.T)
        ak = ak @ w_ak
        if not np.all(np.isfinite(h_new)) or np.linalg.norm(h_new) > 1e200:
            raise NotStabilizable("Riccati iterates diverge")
        if np.linalg.norm(h_new - hk) <= STEP_RTOL * max(1.0, np.linalg.norm(h_new)):
            hk = h_new
            converged = True
            break
        hk = h_new
    if not converged:
        raise NonConvergence("Riccati doubling exceeded iteration cap")

    p = hk
    k = riccati_gain(a, b, r, p)
    if spectral_radius(a + b @ k) >= 1.0:
        raise NotStabilizable("Riccati solution is not stabilizing")
    for _ in range(5):
        if np.linalg.norm(dare_residual(a, b, q, r, p)) <= 1e-2 * RESIDUAL_RTOL * (1.0 + np.linalg.norm(p)):
            break
        # Hewer step: cost of the current gain, then the greedy gain update.
        acl = a + b @ k
        p = solve_dlyap(acl, q + k.T @ r @ k, transpose=True)
        k = riccati_gain(a, b, r, p)
    res = dare_residual(a, b, q, r, p)
    if np.linalg.norm(res) > RESIDUAL_RTOL * (1.0 + np.linalg.norm(p)):
        raise NonConvergence(f"Riccati residual {np.linalg.norm(res):.3e} above tolerance")
    return p, k


def controllability_rank(a: NDArray, b: NDArray) -> int:
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    ctrb = np.hstack(blocks) if b.shape[1] else np.zeros((n, 0))
    if ctrb.size == 0:
        return 0
    sv = np.linalg.svd(ctrb, compute_uv=False)
    return int(np.sum(sv > 1e-10 * sv[0])) if sv[0] > 0 else 0
