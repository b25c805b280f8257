"""Offline constraint back-offs for the error process ``E = X - z``.

The error obeys ``E(k+1) = (A+BK) E(k) + W(k) - E[W]`` regardless of the
optimized inputs, so the back-offs ``rho(c_i' E(k))`` and
``rho(d_i' K E(k))`` are computed once, before closed-loop operation.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from . import matrix_kernels as mk
from .errors import ScheduleError
from .model import LinearStochasticSystem, RiskConstraints, _std_along
from .risk import empirical_risk, risk_coefficient

# sampler(rng, size) -> array (size, n) of disturbance draws W(k)
Sampler = Callable[[np.random.Generator, int], NDArray]


class ScheduleMode(str, enum.Enum):
    GAUSSIAN = "gaussian_exact"
    MONTE_CARLO = "monte_carlo"
    USER = "user_bound"


@dataclass(frozen=True, eq=False)
class ErrorProcess:
    Acl: NDArray
    Sigma_E0: NDArray
    Sigma_W: NDArray
    K: NDArray
    mu_W: NDArray | None = None
    gaussian: bool = True

    @classmethod
    def from_system(cls, sys: LinearStochasticSystem, Sigma_E0=None, gaussian: bool = True) -> "ErrorProcess":
        S0 = np.zeros((sys.n, sys.n)) if Sigma_E0 is None else mk.as_matrix(Sigma_E0, sys.n, sys.n, "Sigma_E0")
        return cls(sys.Acl, S0, sys.Sigma_W, sys.K, sys.mu_W, gaussian)

    @property
    def n(self) -> int:
        return self.Acl.shape[0]

    def steady_state_cov(self) -> NDArray:
        return mk.solve_dlyap(self.Acl, self.Sigma_W)


@dataclass(eq=False)
class TighteningSchedule:
    """Per-row, per-step back-offs.

    ``state_backoffs`` has shape ``(m_x, N+1)``, ``input_backoffs`` shape
    ``(m_u, N)``. Lookups past the stored horizon return the steady-state
    bound, which dominates every entry when ``Sigma_E0 <= Sigma_E_s``.
    """

    state_backoffs: NDArray
    input_backoffs: NDArray
    steady_state_backoffs: NDArray
    mode: ScheduleMode
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.state_backoffs.shape[1] - 1

    @property
    def m_x(self) -> int:
        return self.state_backoffs.shape[0]

    @property
    def m_u(self) -> int:
        return self.input_backoffs.shape[0]

    def state_window(self, start: int, length: int) -> NDArray:
        """Back-offs for steps ``start .. start+length-1``, shape ``(m_x, length)``."""
        return _window(self.state_backoffs, self.steady_state_backoffs[: self.m_x], start, length)

    def input_window(self, start: int, length: int) -> NDArray:
        return _window(self.input_backoffs, self.steady_state_backoffs[self.m_x :], start, length)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# mode={self.mode.value} horizon={self.horizon}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "row", "steady_state"] + [str(k) for k in range(self.horizon + 1)])
        for i in range(self.m_x):
            w.writerow(["state", i, _fmt(self.steady_state_backoffs[i])] + [_fmt(x) for x in self.state_backoffs[i]])
        for i in range(self.m_u):
            w.writerow(["input", i, _fmt(self.steady_state_backoffs[self.m_x + i])]
                       + [_fmt(x) for x in self.input_backoffs[i]] + [""])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "TighteningSchedule":
        text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ScheduleError("schedule CSV must start with a '# mode=...' line")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        mode = ScheduleMode(meta["mode"])
        horizon = int(meta["horizon"])
        rows = list(csv.reader(lines[1:]))[1:]
        state, inputs, ss_x, ss_u = [], [], [], []
        for r in rows:
            if r[0] == "state":
                ss_x.append(float(r[2]))
                state.append([float(x) for x in r[3 : 3 + horizon + 1]])
            elif r[0] == "input":
                ss_u.append(float(r[2]))
                inputs.append([float(x) for x in r[3 : 3 + horizon]])
            else:
                raise ScheduleError(f"unknown row kind {r[0]!r}")
        return cls(np.array(state).reshape(len(state), horizon + 1),
                   np.array(inputs).reshape(len(inputs), horizon),
                   np.array(ss_x + ss_u), mode)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _window(table: NDArray, steady: NDArray, start: int, length: int) -> NDArray:
    m, avail = table.shape
    out = np.empty((m, length))
    for j in range(length):
        k = start + j
        out[:, j] = table[:, k] if k < avail else steady
    return out


def propagate_error_cov(ep: ErrorProcess, N: int) -> list[NDArray]:
    covs = [mk.symmetrize(ep.Sigma_E0.copy())]
    for _ in range(N):
        covs.append(mk.symmetrize(ep.Acl @ covs[-1] @ ep.Acl.T + ep.Sigma_W))
    return covs


def _rows(ep: ErrorProcess, constraints: RiskConstraints) -> tuple[NDArray, NDArray]:
    constraints.check_dims(ep.n, ep.K.shape[0])
    return constraints.C, constraints.D @ ep.K


def gaussian_schedule(ep: ErrorProcess, constraints: RiskConstraints, N: int) -> TighteningSchedule:
    """Exact Gaussian back-offs ``sqrt(c' Sigma_E(k) c) * R(alpha)``."""
    if not ep.gaussian:
        raise ScheduleError("gaussian_exact mode needs Gaussian disturbances and initial error")
    c_rows, dk_rows = _rows(ep, constraints)
    coef = risk_coefficient(constraints.spec)
    covs = propagate_error_cov(ep, N)
    state = np.stack([_std_along(S, c_rows) for S in covs], axis=1) * coef if c_rows.shape[0] else np.zeros((0, N + 1))
    inputs = np.stack([_std_along(S, dk_rows) for S in covs[:N]], axis=1) * coef if dk_rows.shape[0] else np.zeros((0, N))
    S_s = ep.steady_state_cov()
    steady = np.concatenate([_std_along(S_s, c_rows), _std_along(S_s, dk_rows)]) * coef
    return TighteningSchedule(state.reshape(c_rows.shape[0], N + 1), inputs.reshape(dk_rows.shape[0], N),
                              steady, ScheduleMode.GAUSSIAN, {"coefficient": coef})


def gaussian_sampler(Sigma_W: NDArray, mu_W: NDArray | None = None) -> Sampler:
    L = mk.chol(Sigma_W)
    mu = np.zeros(L.shape[0]) if mu_W is None else np.asarray(mu_W, dtype=float)

    def draw(rng: np.random.Generator, size: int) -> NDArray:
        return mu + rng.standard_normal((size, L.shape[0])) @ L.T

    return draw


def uniform_sampler(Sigma_W: NDArray, mu_W: NDArray | None = None) -> Sampler:
    """Non-Gaussian draws with the given moments: ``mu + L u``, ``u`` uniform on ``[-sqrt 3, sqrt 3]``."""
    L = mk.chol(Sigma_W)
    mu = np.zeros(L.shape[0]) if mu_W is None else np.asarray(mu_W, dtype=float)
    h = math.sqrt(3.0)

    def draw(rng: np.random.Generator, size: int) -> NDArray:
        return mu + rng.uniform(-h, h, (size, L.shape[0])) @ L.T

    return draw


def _burn_in_steps(acl: NDArray, tol: float = 1e-12) -> int:
    rho = mk.spectral_radius(acl)
    if rho == 0.0:
        return 1
    return int(min(10_000, math.ceil(math.log(tol) / math.log(rho)) + 1))


def monte_carlo_schedule(ep: ErrorProcess, constraints: RiskConstraints, N: int, paths: int, seed: int,
                         sampler: Sampler | None = None, e0_sampler: Sampler | None = None,
                         steady_state: bool = True) -> TighteningSchedule:
    """Back-offs as empirical risks over ``paths`` simulated error trajectories.

    ``sampler`` draws ``W(k)`` (Gaussian with the process moments by
    default); its sample-free mean ``mu_W`` is removed so ``E`` stays
    centred. ``e0_sampler`` draws ``E(0)``; by default ``N(0, Sigma_E0)``.
    The steady-state entries come from continuing the same ensemble until
    the closed-loop transient has decayed below ``1e-12``.
    """
    if paths < 1:
        raise ValueError("paths must be >= 1")
    c_rows, dk_rows = _rows(ep, constraints)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draw = sampler or gaussian_sampler(ep.Sigma_W, ep.mu_W)
    mu_W = np.zeros(ep.n) if ep.mu_W is None else ep.mu_W
    if e0_sampler is not None:
        E = np.array(e0_sampler(rng, paths), dtype=float).reshape(paths, ep.n)
    else:
        E = rng.standard_normal((paths, ep.n)) @ mk.chol(ep.Sigma_E0).T
    spec = constraints.spec
    state = np.zeros((c_rows.shape[0], N + 1))
    inputs = np.zeros((dk_rows.shape[0], N))

    def risks(E: NDArray, rows: NDArray) -> NDArray:
        if rows.shape[0] == 0:
            return np.zeros(0)
        return np.atleast_1d(empirical_risk(spec, rows @ E.T))

    for k in range(N + 1):
        state[:, k] = risks(E, c_rows)
        if k < N:
            inputs[:, k] = risks(E, dk_rows)
            E = E @ ep.Acl.T + draw(rng, paths) - mu_W
    if steady_state:
        for _ in range(max(_burn_in_steps(ep.Acl) - N, 0)):
            E = E @ ep.Acl.T + draw(rng, paths) - mu_W
        steady = np.concatenate([risks(E, c_rows), risks(E, dk_rows)])
    else:
        steady = np.concatenate([state.max(axis=1, initial=0.0), inputs.max(axis=1, initial=0.0)])
    return TighteningSchedule(state, inputs, steady, ScheduleMode.MONTE_CARLO,
                              {"paths": paths, "seed": seed})


def user_schedule(state_backoffs, input_backoffs, steady_state_backoffs,
                  reference: TighteningSchedule | None = None, tol: float = 1e-12) -> TighteningSchedule:
    """Wrap externally supplied upper bounds on the back-offs.

    When a ``reference`` schedule (e.g. the exact Gaussian one) is given,
    every supplied entry must dominate it.
    """
    state = np.atleast_2d(np.asarray(state_backoffs, dtype=float))
    N = state.shape[1] - 1
    inputs = np.asarray(input_backoffs, dtype=float).reshape(-1, N)
    sched = TighteningSchedule(state, inputs, np.asarray(steady_state_backoffs, dtype=float).reshape(-1),
                               ScheduleMode.USER)
    if reference is not None:
        h = min(sched.horizon, reference.horizon)
        ok = (np.all(sched.state_backoffs[:, : h + 1] >= reference.state_backoffs[:, : h + 1] - tol)
              and np.all(sched.input_backoffs[:, :h] >= reference.input_backoffs[:, :h] - tol)
              and np.all(sched.steady_state_backoffs >= reference.steady_state_backoffs - tol))
        if not ok:
            raise ScheduleError("user-supplied back-offs do not dominate the reference schedule")
    return sched


@dataclass
class TerminalReport:
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows) and not self.notes


def validate_terminal_set(constraints: RiskConstraints, schedule: TighteningSchedule,
                          sys: LinearStochasticSystem) -> TerminalReport:
    """Check that ``Z_f = {0}`` with ``v_f = 0`` satisfies the terminal conditions."""
    rep = TerminalReport()
    # sup over all j: stored entries, plus the steady-state value used past the horizon
    ss = schedule.steady_state_backoffs
    sup_x = np.maximum(ss[: schedule.m_x], schedule.state_backoffs.max(axis=1, initial=-np.inf))
    sup_u = np.maximum(ss[schedule.m_x :], schedule.input_backoffs.max(axis=1, initial=-np.inf))
    for i in range(constraints.m_x):
        rep.rows.append({"kind": "state", "row": i, "bound": float(constraints.p[i]),
                         "backoff": float(sup_x[i]), "ok": bool(constraints.p[i] >= sup_x[i])})
    for i in range(constraints.m_u):
        rep.rows.append({"kind": "input", "row": i, "bound": float(constraints.q[i]),
                         "backoff": float(sup_u[i]), "ok": bool(constraints.q[i] >= sup_u[i])})
    if np.any(sys.mu_W != 0.0):
        rep.notes.append("z = 0 is not an equilibrium of the nominal dynamics when mu_W != 0")
    if not constraints.box_contains_zero():
        rep.notes.append("input box does not contain v_f = 0")
    return rep
