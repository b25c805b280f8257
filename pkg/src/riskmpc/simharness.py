"""Monte-Carlo closed-loop engine and report generation.

Paths are simulated in fixed-size blocks. Each block owns an RNG stream
derived from ``(seed, block index)``, so results do not depend on the
worker count and two runs with the same seed see identical noise (common
random numbers across gains).

Inside a block all paths advance together. The open-loop QPs of one step
share ``H`` and the constraint matrix and differ only in ``g`` and ``b``,
so they are solved together (see :class:`_BatchSolver`) and each solution
is certified through its KKT conditions. Paths that fail the certificate
are re-solved one by one with the active-set solver, warm-started from the
shifted previous solution.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from . import matrix_kernels as mk
from .model import LinearStochasticSystem, QuadCost, RiskConstraints, SynthesisResult, synthesize
from .ocp_solver import ParametricOCP
from .qp import NullSpace, QpStatus, solve_qp
from .risk import RiskKind, RiskSpec, bootstrap_se, empirical_risk
from .tightening import ErrorProcess, TighteningSchedule, gaussian_schedule

log = logging.getLogger(__name__)

BLOCK_SIZE = 1024
PRIMAL_TOL = 1e-9
DUAL_TOL = 1e-10
COMPL_TOL = 1e-9
PDAS_ITERS = 12
SQRT3 = np.sqrt(3.0)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RISKMPC_THREADS", "1")))
    except ValueError:
        return 1


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent stream for ``(seed, block)``; PCG64 seeded via SeedSequence spawn keys."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


@dataclass
class SimConfig:
    paths: int = 15_000
    steps: int = 50
    seed: int = 0
    mu_X0: NDArray | None = None
    Sigma_X0: NDArray | None = None
    report_measures: tuple[RiskSpec, ...] | None = None
    risk_steps: int | None = None
    bootstrap: int = 200
    trace_paths: int = 0
    out_dir: Path | None = None
    monitor: NDArray | None = None
    exact_cost: bool = False
    noise: str = "gaussian"

    def __post_init__(self):
        if self.paths < 1 or self.steps < 1:
            raise ValueError("paths and steps must be >= 1")
        if self.noise not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise model {self.noise!r}")


@dataclass
class ClosedLoopTrace:
    x: NDArray
    u: NDArray
    z: NDArray
    v: NDArray
    objective: NDArray
    status: list[str]


@dataclass
class MonteCarloReport:
    label: str
    design: RiskSpec
    bound: float
    paths: int
    steps: int
    risk: dict[str, tuple[NDArray, NDArray]]
    stage_cost_mean: NDArray
    running_average: NDArray
    tail_average: float
    tail_se: float
    final_se: float
    lower_bound: float
    upper_bound: float
    status_rows: list[tuple[int, int, str]]
    infeasible: int
    split_error: float
    nominal_violation: float
    traces: list[ClosedLoopTrace] = field(default_factory=list)
    measures: tuple[RiskSpec, ...] = ()
    exact_cost: bool = False

    # -- audits ---------------------------------------------------------
    def risk_bound_ok(self, n_se: float = 3.0) -> bool:
        vals, se = self.risk[self.design.label]
        return bool(np.all(vals <= self.bound + n_se * se + 1e-12))

    def ordering_ok(self, n_se: float = 3.0) -> bool:
        # Ordering holds at a common level, so compare measures sharing alpha.
        rank = {k: i for i, k in enumerate(RiskKind)}
        present = [m.label for m in sorted(self.measures, key=lambda m: rank[m.kind])
                   if m.kind is RiskKind.EXPECTATION or m.alpha == self.design.alpha]
        for a, b in zip(present, present[1:]):
            va, sa = self.risk[a]
            vb, sb = self.risk[b]
            if np.any(va > vb + n_se * np.hypot(sa, sb) + 1e-9):
                return False
        return True

    def feasibility_ok(self) -> bool:
        return self.infeasible == 0

    def splitting_ok(self, tol: float = 1e-9) -> bool:
        return self.split_error <= tol

    def nominal_ok(self, tol: float = 1e-8) -> bool:
        return self.nominal_violation <= tol

    def sandwich_ok(self, n_se: float = 3.0) -> bool:
        eps = n_se * self.tail_se
        return self.lower_bound - eps <= self.tail_average <= self.upper_bound + eps

    def audits(self) -> dict[str, bool]:
        """Guarantee audits. The cost sandwich is a guarantee only for the exact objective."""
        out = {
            "recursive_feasibility": self.feasibility_ok(),
            "closed_loop_risk": self.risk_bound_ok(),
            "risk_ordering": self.ordering_ok(),
            "splitting_identity": self.splitting_ok(),
            "nominal_constraints": self.nominal_ok(),
        }
        if self.exact_cost:
            out["performance_sandwich"] = self.sandwich_ok()
        return out

    def diagnostics(self) -> dict[str, bool]:
        """Checks reported without gating; without the cross term the upper bound may be exceeded."""
        return {"performance_sandwich": self.sandwich_ok()}

    # -- output ---------------------------------------------------------
    def write_risk_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "measure", "value", "se"])
            for lab, (vals, se) in self.risk.items():
                for k, (v, s) in enumerate(zip(vals, se)):
                    w.writerow([k, lab, _fmt(v), _fmt(s)])

    def performance_rows(self) -> list[list[str]]:
        return [[str(L + 1), _fmt(avg), _fmt(self.lower_bound), _fmt(self.upper_bound), self.label]
                for L, avg in enumerate(self.running_average)]

    def write_performance_csv(self, path: Path) -> None:
        write_performance_csv(path, [self])

    def write_feasibility_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "step", "status"])
            for row in self.status_rows:
                w.writerow(row)

    def write_all(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        self.write_risk_csv(out_dir / "risk_trajectories.csv")
        self.write_performance_csv(out_dir / "performance.csv")
        self.write_feasibility_csv(out_dir / "feasibility.csv")

    def summary(self) -> dict:
        final = float(self.running_average[-1])
        return {
            "label": self.label,
            "design": self.design.label,
            "paths": self.paths,
            "steps": self.steps,
            "infeasible": self.infeasible,
            "split_error": self.split_error,
            "nominal_violation": self.nominal_violation,
            "running_average": final,
            "running_average_se": self.final_se,
            "tail_average": self.tail_average,
            "tail_se": self.tail_se,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "exact_cost": self.exact_cost,
            "audits": self.audits(),
            "diagnostics": self.diagnostics(),
        }


def write_performance_csv(path: Path, reports: list[MonteCarloReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["L", "running_average", "lower_bound", "upper_bound", "gain_label"])
        for rep in reports:
            w.writerows(rep.performance_rows())


def performance_bounds(synth: SynthesisResult) -> tuple[float, float]:
    """Bounds on the long-run average cost: ``(tr(P* Sigma_W), tr(P Sigma_W))``."""
    lower = synth.stationary_cost
    return lower, lower + synth.C_f


# ---------------------------------------------------------------------------
# batched closed loop
# ---------------------------------------------------------------------------

class _BatchSolver:
    """Batched solution of the open-loop QPs of one step.

    After eliminating the terminal equality, each path's problem is
    ``min 0.5 y'Gy + c'y`` s.t. ``A y <= b`` with ``G`` and ``A`` shared.
    Its dual is a linear complementarity problem with the shared matrix
    ``M = A G^-1 A'`` and a path-dependent vector, solved for all paths at
    once by a primal-dual active-set (semismooth Newton) iteration that
    is warm-started from each path's previous active set. Every returned
    solution carries a KKT certificate (stationarity by construction,
    primal and dual feasibility, complementarity), so it is the exact
    optimum. Paths that are not certified go to the scalar solver.
    """

    def __init__(self, par: ParametricOCP):
        self.par = par
        ns = NullSpace.of(par.A_eq, par.nv)
        self.Z = ns.Z
        G = self.Z.T @ par.H @ self.Z
        self.Ginv = np.linalg.inv(G)
        At = par.A_in @ self.Z
        norms = np.linalg.norm(At, axis=1) if At.size else np.zeros(At.shape[0])
        live = norms > 1e-12 * (1.0 + norms.max(initial=0.0))
        # Rows without dependence on v are constants; they only decide feasibility.
        self.rows = np.nonzero(live)[0]
        self.dead = np.nonzero(~live)[0]
        self.At = At
        self.A = At[self.rows]
        self.GiAt = self.Ginv @ self.A.T
        self.M = self.A @ self.GiAt
        self.Vz = -ns.pinv @ par.pred.Phi[par.N]          # vp = Vz z + vc
        self.vc = -ns.pinv @ par.pred.omega[par.N]
        self.eq_ok = par.A_eq.shape[0] == 0 or np.linalg.matrix_rank(par.A_eq) == par.A_eq.shape[0]

    @property
    def m(self) -> int:
        return self.rows.size

    def working_rows(self, mask: NDArray) -> list[int]:
        return [int(r) for r in self.rows[mask]]

    def mask_of(self, active: tuple[int, ...]) -> NDArray:
        return np.isin(self.rows, np.asarray(active, dtype=int))

    def solve(self, X: NDArray, Zn: NDArray, b_const: NDArray, W: NDArray):
        """Solve for all rows of ``X``/``Zn`` from initial masks ``W``.

        Returns ``(V, certified, W_final)``.
        """
        par = self.par
        P = X.shape[0]
        vp = Zn @ self.Vz.T + self.vc
        c = (X @ par.Gx.T + par.g0 + vp @ par.H.T) @ self.Z
        bt = b_const[None, :] - Zn @ par.Bz.T - vp @ par.A_in.T
        y_free = -c @ self.Ginv.T
        V = np.zeros((P, par.nv))
        W = W.copy()
        certified = np.zeros(P, dtype=bool)
        if not self.eq_ok:
            return V, certified, W
        feasible = np.ones(P, dtype=bool)
        if self.dead.size:
            feasible = bt[:, self.dead].min(axis=1) >= -PRIMAL_TOL
        scale = 1.0 + np.abs(bt).max(axis=1, initial=0.0)
        b_live = bt[:, self.rows]
        s = y_free @ self.A.T - b_live
        pending = np.nonzero(feasible)[0]
        m = self.m
        eye = np.eye(m, dtype=bool)
        for _ in range(PDAS_ITERS):
            if pending.size == 0:
                break
            Wp = W[pending]
            lam = np.zeros(Wp.shape)
            some = np.nonzero(Wp.any(axis=1))[0]
            if some.size:
                Ws = Wp[some]
                Mm = np.where(Ws[:, :, None] & Ws[:, None, :], self.M, 0.0) + (eye & ~Ws[:, :, None])
                lam[some] = _batched_solve(Mm, np.where(Ws, s[pending[some]], 0.0))
            y = y_free[pending] - lam @ self.GiAt.T
            viol = y @ self.A.T - b_live[pending]
            lam_tol = DUAL_TOL * (1.0 + np.abs(lam).max(axis=1, initial=0.0))
            sc = scale[pending]
            good = (np.isfinite(lam).all(axis=1)
                    & (lam.min(axis=1, initial=0.0) >= -lam_tol)
                    & (viol.max(axis=1, initial=-np.inf) <= PRIMAL_TOL)
                    & (np.where(Wp, np.abs(viol), 0.0).max(axis=1, initial=0.0) <= COMPL_TOL * sc))
            done = pending[good]
            V[done] = vp[done] + y[good] @ self.Z.T
            certified[done] = True
            W[done] = Wp[good]
            # Drop rows with negative multipliers, add violated rows.
            keep = ~good
            Wn = (Wp & (lam >= -lam_tol[:, None])) | (~Wp & (viol > PRIMAL_TOL))
            stuck = keep & np.all(Wn == Wp, axis=1)
            W[pending[keep]] = Wn[keep]
            pending = pending[keep & ~stuck]
        return V, certified, W


def _batched_solve(M: NDArray, rhs: NDArray) -> NDArray:
    try:
        return np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full(rhs.shape, np.nan)
        for i in range(M.shape[0]):
            try:
                out[i] = np.linalg.solve(M[i], rhs[i])
            except np.linalg.LinAlgError:
                pass
        return out


@dataclass
class _BlockResult:
    monitored: NDArray       # (paths_b, risk_steps + 1)
    cost_sum: NDArray        # (L,) over surviving paths
    path_avg: NDArray        # (survivors,)
    path_tail: NDArray       # (survivors,)
    status_rows: list[tuple[int, int, str]]
    aborted: NDArray         # bool (paths_b,)
    split_error: float
    nominal_violation: float
    traces: list[ClosedLoopTrace]


def _simulate_block(block: int, first_path: int, size: int, ctx: dict) -> _BlockResult:
    sys: LinearStochasticSystem = ctx["sys"]
    par: ParametricOCP = ctx["par"]
    bs = _BatchSolver(par)  # per block: its set registry and KKT cache are not shared
    schedule: TighteningSchedule = ctx["schedule"]
    cost: QuadCost = ctx["cost"]
    cfg: SimConfig = ctx["cfg"]
    L = cfg.steps
    n, l = sys.n, sys.l
    risk_steps = ctx["risk_steps"]
    monitor = ctx["monitor"]
    b_const = ctx["b_const"]
    nominal_bound = ctx["nominal_bound"]
    A, B, K, Acl, mu_W = sys.A, sys.B, sys.K, sys.Acl, sys.mu_W
    Lw = ctx["Lw"]

    rng = block_rng(cfg.seed, block)
    mu0 = ctx["mu0"]
    x = np.tile(mu0, (size, 1))
    if ctx["L0"] is not None:
        x = x + rng.standard_normal((size, n)) @ ctx["L0"].T
    z = np.tile(mu0, (size, 1))
    E = x - z
    W = np.zeros((size, bs.m), dtype=bool)
    v_prev = np.full((size, par.nv), np.nan)
    alive = np.ones(size, dtype=bool)
    status_first: list[tuple[int, str] | None] = [None] * size

    monitored = np.empty((size, risk_steps + 1))
    costs = np.empty((size, L))
    split_err = 0.0
    nom_viol = -np.inf
    n_trace = min(size, cfg.trace_paths) if block == 0 else 0
    tr = {k: [] for k in ("x", "u", "z", "v", "obj", "status")}

    for j in range(L):
        if j <= risk_steps:
            monitored[:, j] = x @ monitor
        split_err = max(split_err, float(np.max(np.abs(x - z - E))))
        if nominal_bound is not None:
            nom_viol = max(nom_viol, float(np.max(z @ ctx["C"].T - nominal_bound[:, j][None, :])))

        idx = np.nonzero(alive)[0]
        V = np.zeros((size, par.nv))
        Vi, good, Wi = bs.solve(x[idx], z[idx], b_const[j], W[idx])
        V[idx] = Vi
        W[idx] = Wi
        ok = ~alive
        ok[idx[good]] = True
        statuses = np.full(size, QpStatus.OPTIMAL.value, dtype=object)
        for i in np.nonzero(~ok)[0]:
            qp = par.instantiate(x[i], z[i], schedule, j)
            warm = None
            if np.all(np.isfinite(v_prev[i])):
                warm = np.concatenate([v_prev[i, l:], np.zeros(l)])
            sol = solve_qp(qp, v0=warm, working=bs.working_rows(W[i]))
            if sol.ok:
                V[i] = sol.v
                W[i] = bs.mask_of(sol.active_set)
            else:
                statuses[i] = sol.status.value
                alive[i] = False
                status_first[i] = (j, sol.status.value)
        V[~alive] = 0.0
        v0 = V[:, :l]
        u = x @ K.T + v0
        costs[:, j] = np.einsum("pi,ij,pj->p", x, cost.Q, x) + np.einsum("pi,ij,pj->p", u, cost.R, u)
        if n_trace:
            tr["x"].append(x[:n_trace].copy())
            tr["u"].append(u[:n_trace].copy())
            tr["z"].append(z[:n_trace].copy())
            tr["v"].append(v0[:n_trace].copy())
            objs = []
            for i in range(n_trace):
                qp = par.instantiate(x[i], z[i], schedule, j)
                objs.append(qp.objective(V[i]) + qp.offset)
            tr["obj"].append(np.array(objs))
            tr["status"].append(list(statuses[:n_trace]))
        v_prev = V
        if cfg.noise == "gaussian":
            w = rng.standard_normal((size, n)) @ Lw.T + mu_W
        else:
            w = rng.uniform(-SQRT3, SQRT3, (size, n)) @ Lw.T + mu_W
        x = x @ A.T + u @ B.T + w
        z = z @ Acl.T + v0 @ B.T + mu_W
        E = E @ Acl.T + (w - mu_W)
    if L <= risk_steps:
        monitored[:, L] = x @ monitor
    split_err = max(split_err, float(np.max(np.abs(x - z - E))))

    rows = []
    for i in range(size):
        p = first_path + i
        if status_first[i] is None:
            rows.append((p, L, QpStatus.OPTIMAL.value))
        else:
            rows.append((p, status_first[i][0], status_first[i][1]))
    surv = costs[alive]
    half = L // 2
    traces = []
    if n_trace:
        for i in range(n_trace):
            traces.append(ClosedLoopTrace(
                x=np.array([a[i] for a in tr["x"]]), u=np.array([a[i] for a in tr["u"]]),
                z=np.array([a[i] for a in tr["z"]]), v=np.array([a[i] for a in tr["v"]]),
                objective=np.array([a[i] for a in tr["obj"]]), status=[s[i] for s in tr["status"]]))
    return _BlockResult(monitored, surv.sum(axis=0), surv.mean(axis=1), surv[:, half:].mean(axis=1),
                        rows, ~alive, split_err, nom_viol, traces)


def run_paths(cfg: SimConfig, sys: LinearStochasticSystem, cost: QuadCost, constraints: RiskConstraints,
              schedule: TighteningSchedule | None = None, N: int = 10, synth: SynthesisResult | None = None,
              label: str = "K") -> MonteCarloReport:
    """Simulate ``cfg.paths`` closed-loop paths of the indirect-feedback controller.

    Without an explicit ``schedule`` the exact Gaussian back-offs from
    ``Sigma_E0 = Sigma_X0`` are used (the moment-based scheme).
    """
    synth = synth or synthesize(sys, cost)
    n = sys.n
    L = cfg.steps
    mu0 = np.zeros(n) if cfg.mu_X0 is None else np.asarray(cfg.mu_X0, dtype=float).reshape(n)
    S0 = np.zeros((n, n)) if cfg.Sigma_X0 is None else mk.as_matrix(cfg.Sigma_X0, n, n, "Sigma_X0")
    if schedule is None:
        ep = ErrorProcess.from_system(sys, S0, gaussian=cfg.noise == "gaussian")
        schedule = gaussian_schedule(ep, constraints, L + N)
    par = ParametricOCP.build(sys, cost, constraints, synth.P, N, cfg.exact_cost)
    risk_steps = L if cfg.risk_steps is None else min(cfg.risk_steps, L)
    if cfg.monitor is not None:
        monitor = np.asarray(cfg.monitor, dtype=float).reshape(n)
    elif constraints.m_x:
        monitor = constraints.C[0].copy()
    else:
        monitor = np.eye(n)[0]
    nominal_bound = None
    if constraints.m_x:
        nominal_bound = constraints.p[:, None] - schedule.state_window(0, L)
    ctx = {
        "sys": sys, "cost": cost, "par": par, "schedule": schedule, "cfg": cfg,
        "risk_steps": risk_steps, "monitor": monitor, "mu0": mu0,
        "L0": None if not np.any(S0) else mk.chol(S0), "Lw": mk.chol(sys.Sigma_W),
        "b_const": [par.b_const(schedule, j) for j in range(L)],
        "nominal_bound": nominal_bound, "C": constraints.C,
    }
    blocks = [(b, s, min(BLOCK_SIZE, cfg.paths - s)) for b, s in enumerate(range(0, cfg.paths, BLOCK_SIZE))]
    workers = worker_count()
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _simulate_block(*a, ctx), blocks))
    else:
        results = [_simulate_block(*a, ctx) for a in blocks]

    aborted = np.concatenate([r.aborted for r in results])
    monitored = np.concatenate([r.monitored for r in results])[~aborted]
    survivors = int((~aborted).sum())
    cost_sum = np.zeros(L)
    for r in results:
        cost_sum += r.cost_sum
    stage_mean = cost_sum / max(survivors, 1)
    running = np.cumsum(stage_mean) / np.arange(1, L + 1)
    path_avg = np.concatenate([r.path_avg for r in results])
    path_tail = np.concatenate([r.path_tail for r in results])
    final_se = float(np.std(path_avg, ddof=1) / np.sqrt(survivors)) if survivors > 1 else 0.0
    tail_se = float(np.std(path_tail, ddof=1) / np.sqrt(survivors)) if survivors > 1 else 0.0

    measures = cfg.report_measures or tuple(RiskSpec(k, constraints.spec.alpha) for k in RiskKind)
    if constraints.spec.label not in {m.label for m in measures}:
        measures = (constraints.spec,) + tuple(measures)
    risk: dict[str, tuple[NDArray, NDArray]] = {}
    for spec in measures:
        vals = np.empty(risk_steps + 1)
        ses = np.empty(risk_steps + 1)
        for k in range(risk_steps + 1):
            col = monitored[:, k]
            vals[k] = empirical_risk(spec, col) if col.size else np.nan
            if cfg.bootstrap and col.size > 1:
                brng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2**31, k)))
                ses[k] = bootstrap_se(spec, col, brng, cfg.bootstrap)
            else:
                ses[k] = 0.0
        risk[spec.label] = (vals, ses)

    lower, upper = performance_bounds(synth)
    status_rows = [row for r in results for row in r.status_rows]
    report = MonteCarloReport(
        label=label, design=constraints.spec, bound=float(constraints.p[0]) if constraints.m_x else np.inf,
        paths=cfg.paths, steps=L, risk=risk, stage_cost_mean=stage_mean, running_average=running,
        tail_average=float(np.mean(path_tail)) if survivors else np.nan, tail_se=tail_se, final_se=final_se,
        lower_bound=lower, upper_bound=upper, status_rows=status_rows, infeasible=int(aborted.sum()),
        split_error=max(r.split_error for r in results),
        nominal_violation=max((r.nominal_violation for r in results), default=-np.inf),
        traces=[t for r in results for t in r.traces], measures=tuple(measures), exact_cost=cfg.exact_cost,
    )
    if cfg.out_dir is not None:
        report.write_all(Path(cfg.out_dir))
    return report


def compare_gains(cfg: SimConfig, sys: LinearStochasticSystem, cost: QuadCost, constraints: RiskConstraints,
                  gains: dict[str, NDArray], N: int = 10) -> dict[str, MonteCarloReport]:
    """One report per tube gain, all driven by the same noise (same ``cfg.seed``)."""
    reports = {}
    for label, K in gains.items():
        sys_k = sys.with_gain(K)
        reports[label] = run_paths(cfg, sys_k, cost, constraints, N=N, label=label)
    return reports


def dump_summary(path: Path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
