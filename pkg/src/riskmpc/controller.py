"""Indirect-feedback SMPC controller for a single closed-loop path.

The optimizer sees the measured state through the cost, while the
tightened constraints act on a deterministic nominal state ``z`` that is
advanced with the first optimal correction ``v0`` only, never with the
measurement. The applied input is ``u = K x + v0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from . import matrix_kernels as mk
from .errors import InitCovTooLarge, InitInfeasible, QpInfeasible
from .model import LinearStochasticSystem, QuadCost, RiskConstraints, SynthesisResult, synthesize
from .ocp_solver import ParametricOCP
from .qp import QpStatus, solve_qp
from .tightening import (ErrorProcess, Sampler, ScheduleMode, TighteningSchedule, gaussian_sampler,
                         gaussian_schedule)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ControllerState:
    step: int
    z: NDArray
    Sigma_E: NDArray | None = None
    ensemble: NDArray | None = None
    v_prev: NDArray | None = None
    active_set: tuple[int, ...] = ()
    feasibility_log: tuple[tuple[int, str], ...] = ()
    rng: np.random.Generator | None = None


@dataclass(frozen=True, eq=False)
class StepResult:
    u: NDArray
    v0: NDArray
    z_next: NDArray
    qp_status: QpStatus
    open_loop_objective: float
    v: NDArray | None = None


@dataclass(eq=False)
class IndirectFeedbackMPC:
    """Moment-based (Gaussian) or sample-based indirect-feedback SMPC.

    Parameters
    ----------
    sys, cost, constraints
        Plant with tube gain ``sys.K``, quadratic cost, risk constraints.
    N
        Prediction horizon.
    schedule
        Monte-Carlo or user schedule for the sample-based path. The
        moment path derives its back-offs from ``Sigma_E`` on every step.
    sampler
        Disturbance sampler used to advance the error ensemble in the
        sample-based path.
    strict
        Raise :class:`QpInfeasible` on an infeasible step (test mode). With
        ``strict=False`` the controller applies ``u = K x`` and logs it.
    terminal_check
        Require ``Sigma_X0 <= Sigma_E_s`` at initialisation.
    exact_cost
        Include the ``2 v'RK mu`` cross term in the open-loop objective.
    """

    sys: LinearStochasticSystem
    cost: QuadCost
    constraints: RiskConstraints
    N: int
    schedule: TighteningSchedule | None = None
    sampler: Sampler | None = None
    strict: bool = True
    terminal_check: bool = True
    exact_cost: bool = False
    ensemble_size: int = 1000
    synth: SynthesisResult | None = None
    par: ParametricOCP = field(init=False)

    def __post_init__(self):
        if self.synth is None:
            self.synth = synthesize(self.sys, self.cost)
        self.par = ParametricOCP.build(self.sys, self.cost, self.constraints, self.synth.P, self.N,
                                       self.exact_cost)

    # -- initialisation -------------------------------------------------
    def init(self, mu_X0, Sigma_X0=None, x0=None, seed: int | None = None) -> ControllerState:
        n = self.sys.n
        mu = np.asarray(mu_X0, dtype=float).reshape(n)
        S0 = np.zeros((n, n)) if Sigma_X0 is None else mk.as_matrix(Sigma_X0, n, n, "Sigma_X0")
        if self.terminal_check and not mk.psd_leq(S0, self.synth.Sigma_E_s):
            raise InitCovTooLarge("Sigma_X0 is not below the stationary error covariance")
        rng = np.random.default_rng(seed)
        ensemble = None
        if self.schedule is not None and self.schedule.mode is not ScheduleMode.GAUSSIAN:
            ensemble = rng.standard_normal((self.ensemble_size, n)) @ mk.chol(S0).T
        state = ControllerState(0, mu, S0, ensemble, rng=rng)
        x = mu if x0 is None else np.asarray(x0, dtype=float).reshape(n)
        sched = self._schedule(state)
        qp = self.par.instantiate(x, mu, sched, self._offset(state))
        if not solve_qp(qp).ok:
            raise InitInfeasible("open-loop problem infeasible at the initial nominal state")
        return state

    def _offset(self, state: ControllerState) -> int:
        # Moment schedules are rebuilt from Sigma_E(j); stored schedules use absolute time.
        return 0 if self.schedule is None else state.step

    def _schedule(self, state: ControllerState) -> TighteningSchedule:
        if self.schedule is not None:
            return self.schedule
        ep = ErrorProcess(self.sys.Acl, state.Sigma_E, self.sys.Sigma_W, self.sys.K, self.sys.mu_W)
        return gaussian_schedule(ep, self.constraints, self.N)

    # -- closed-loop steps ----------------------------------------------
    def _solve(self, state: ControllerState, x: NDArray):
        sched = self._schedule(state)
        qp = self.par.instantiate(x, state.z, sched, self._offset(state))
        warm = None
        if state.v_prev is not None:
            l = self.sys.l
            warm = np.concatenate([state.v_prev[l:], np.zeros(l)])
        sol = solve_qp(qp, v0=warm, working=state.active_set)
        return qp, sol

    def _advance(self, state: ControllerState, x: NDArray, qp, sol, ensemble=None):
        sys = self.sys
        l = sys.l
        entry = (state.step, sol.status.value)
        if sol.ok:
            v0 = sol.v[:l]
            objective = sol.objective + qp.offset
            v_prev, active = sol.v, sol.active_set
        else:
            if self.strict:
                raise QpInfeasible(state.step)
            log.warning("open-loop problem %s at step %d; applying u = Kx", sol.status.value, state.step)
            v0 = np.zeros(l)
            objective = float("nan")
            v_prev, active = None, ()
        u = sys.K @ x + v0
        z_next = sys.Acl @ state.z + sys.B @ v0 + sys.mu_W
        S_next = None
        if state.Sigma_E is not None:
            S_next = mk.symmetrize(sys.Acl @ state.Sigma_E @ sys.Acl.T + sys.Sigma_W)
        new_state = replace(state, step=state.step + 1, z=z_next, Sigma_E=S_next, ensemble=ensemble,
                            v_prev=v_prev, active_set=active, feasibility_log=state.feasibility_log + (entry,))
        return StepResult(u, v0, z_next, sol.status, objective, sol.v), new_state

    def step(self, state: ControllerState, x) -> tuple[StepResult, ControllerState]:
        """One step of the moment-based scheme from measurement ``x``."""
        x = np.asarray(x, dtype=float).reshape(self.sys.n)
        qp, sol = self._solve(state, x)
        return self._advance(state, x, qp, sol, state.ensemble)

    def step_sample_based(self, state: ControllerState, x) -> tuple[StepResult, ControllerState]:
        """One step with back-offs from the stored sample-based schedule.

        The error ensemble is advanced with fresh disturbance draws.
        """
        if self.schedule is None:
            raise ValueError("sample-based stepping needs a Monte-Carlo or user schedule")
        x = np.asarray(x, dtype=float).reshape(self.sys.n)
        qp, sol = self._solve(state, x)
        ens = state.ensemble
        if ens is not None:
            draw = self.sampler or gaussian_sampler(self.sys.Sigma_W, self.sys.mu_W)
            ens = ens @ self.sys.Acl.T + draw(state.rng, ens.shape[0]) - self.sys.mu_W
        return self._advance(state, x, qp, sol, ens)
