import logging

import numpy as np
import pytest
from dataclasses import replace

from riskmpc import matrix_kernels as mk
from riskmpc.controller import IndirectFeedbackMPC
from riskmpc.errors import InitCovTooLarge, InitInfeasible, QpInfeasible
from riskmpc.model import LinearStochasticSystem
from riskmpc.qp import QpStatus
from riskmpc.tightening import ErrorProcess, gaussian_schedule, monte_carlo_schedule

from conftest import HORIZON, X0, dcdc_problem


def controller(kind="cvar", N=HORIZON, **kw):
    sys, cost, cons = dcdc_problem(kind)
    return IndirectFeedbackMPC(sys, cost, cons, N, **kw)


def run(ctrl, x0, steps, seed, Sigma_X0=None):
    sys = ctrl.sys
    rng = np.random.default_rng(seed)
    L = mk.chol(sys.Sigma_W)
    state = ctrl.init(x0, Sigma_X0)
    x = np.asarray(x0, float)
    log = []
    for _ in range(steps):
        z = state.z
        res, state = ctrl.step(state, x)
        w = L @ rng.standard_normal(sys.n)
        log.append((x, z, res, w))
        x = sys.A @ x + sys.B @ res.u + w
    return log, state


def test_applied_input_and_error_splitting():
    ctrl = controller()
    log, _ = run(ctrl, X0, 40, seed=1)
    sys = ctrl.sys
    e = np.zeros(2)
    for x, z, res, w in log:
        np.testing.assert_allclose(x - z, e, atol=1e-12)
        np.testing.assert_allclose(res.u, sys.K @ x + res.v0, atol=1e-14)
        assert res.qp_status is QpStatus.OPTIMAL
        e = sys.Acl @ e + w


def test_nominal_ignores_measurements():
    ctrl = controller()
    state = ctrl.init(X0)
    _, a = ctrl.step(state, X0)
    _, b = ctrl.step(state, np.array(X0) + [0.3, -0.4])
    # The correction v0 depends on x through the cost, so z+ may move; the
    # nominal recursion itself only uses z and v0.
    sys = ctrl.sys
    ra, _ = ctrl.step(state, X0)
    np.testing.assert_allclose(a.z, sys.Acl @ state.z + sys.B @ ra.v0, atol=1e-14)


def test_noiseless_run_tracks_nominal_and_cost_decreases():
    sys, cost, cons = dcdc_problem()
    quiet = LinearStochasticSystem(sys.A, sys.B, np.zeros((2, 2)), sys.K)
    ctrl = IndirectFeedbackMPC(quiet, cost, cons, HORIZON)
    log, _ = run(ctrl, X0, 30, seed=0)
    objs = [res.open_loop_objective for _, _, res, _ in log]
    for x, z, _, _ in log:
        np.testing.assert_allclose(x, z, atol=1e-12)
    assert all(b <= a + 1e-9 for a, b in zip(objs, objs[1:]))
    assert objs[-1] < 1e-6 * objs[0]


def test_moment_covariance_recursion():
    ctrl = controller()
    S0 = 0.2 * ctrl.synth.Sigma_E_s
    log, state = run(ctrl, [0.5, 0.0], 5, seed=2, Sigma_X0=S0)
    S = S0
    for _ in range(5):
        S = ctrl.sys.Acl @ S @ ctrl.sys.Acl.T + ctrl.sys.Sigma_W
    np.testing.assert_allclose(state.Sigma_E, S, rtol=1e-12)


def test_moment_path_matches_stored_gaussian_schedule():
    sys, cost, cons = dcdc_problem("evar")
    sched = gaussian_schedule(ErrorProcess.from_system(sys), cons, 40 + HORIZON)
    a = IndirectFeedbackMPC(sys, cost, cons, HORIZON)
    b = IndirectFeedbackMPC(sys, cost, cons, HORIZON, schedule=sched)
    la, _ = run(a, X0, 40, seed=3)
    lb, _ = run(b, X0, 40, seed=3)
    for (_, _, ra, _), (_, _, rb, _) in zip(la, lb):
        np.testing.assert_allclose(ra.u, rb.u, atol=1e-10)


def test_init_cov_too_large():
    ctrl = controller()
    inside = [0.2, 0.0]
    with pytest.raises(InitCovTooLarge):
        ctrl.init(inside, 2 * ctrl.synth.Sigma_E_s)
    ctrl.init(inside, ctrl.synth.Sigma_E_s)
    IndirectFeedbackMPC(ctrl.sys, ctrl.cost, ctrl.constraints, HORIZON, terminal_check=False).init(
        inside, 2 * ctrl.synth.Sigma_E_s)


def test_initial_covariance_tightens_first_step():
    # Full stationary back-off from step 0 excludes the DC-DC starting point.
    with pytest.raises(InitInfeasible):
        controller().init(X0, controller().synth.Sigma_E_s)


def test_init_infeasible():
    with pytest.raises(InitInfeasible):
        controller("evar", N=11).init(X0)


def test_strict_and_lenient_infeasible_step(caplog):
    far = np.array([40.0, 0.0])
    strict = controller()
    state = replace(strict.init(X0), z=far)
    with pytest.raises(QpInfeasible) as err:
        strict.step(state, far)
    assert err.value.step == 0
    lenient = controller(strict=False)
    state = replace(lenient.init(X0), z=far)
    with caplog.at_level(logging.WARNING):
        res, nxt = lenient.step(state, far)
    assert res.qp_status is QpStatus.INFEASIBLE
    np.testing.assert_allclose(res.u, lenient.sys.K @ far)
    np.testing.assert_allclose(res.v0, 0.0)
    assert np.isnan(res.open_loop_objective)
    assert nxt.feasibility_log == ((0, QpStatus.INFEASIBLE.value),)
    assert "infeasible" in caplog.text.lower()


def test_sample_based_stepping():
    sys, cost, cons = dcdc_problem()
    sched = monte_carlo_schedule(ErrorProcess.from_system(sys), cons, 30 + HORIZON, paths=20000, seed=4)
    ctrl = IndirectFeedbackMPC(sys, cost, cons, HORIZON, schedule=sched, ensemble_size=500)
    state = ctrl.init(X0, seed=9)
    assert state.ensemble.shape == (500, 2)
    x = np.asarray(X0)
    rng = np.random.default_rng(5)
    for _ in range(30):
        res, state = ctrl.step_sample_based(state, x)
        assert res.qp_status is QpStatus.OPTIMAL
        x = sys.A @ x + sys.B @ res.u + rng.standard_normal(2) * np.sqrt(0.1)
    cov = np.cov(state.ensemble.T)
    np.testing.assert_allclose(cov, ctrl.synth.Sigma_E_s, rtol=0.25)
    with pytest.raises(ValueError):
        controller().step_sample_based(controller().init(X0), X0)
