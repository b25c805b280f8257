"""``riskmpc`` command line: synthesize, tighten, simulate, reproduce-dcdc.

Exit codes: 0 success, 2 configuration error, 3 guarantee-audit failure,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .errors import (ConfigError, DimensionMismatch, InitCovTooLarge, InitInfeasible, NumericalError, QpInfeasible,
                     RiskMPCError, ScheduleError)
from .model import check_stationary_admissible, synthesize
from .risk import RiskKind
from .simharness import SimConfig, dump_summary, run_paths, write_performance_csv
from .tightening import (ErrorProcess, TighteningSchedule, gaussian_sampler, gaussian_schedule,
                         monte_carlo_schedule, uniform_sampler, validate_terminal_set)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_AUDIT = 3
EXIT_NUMERICAL = 4

RISK_CHOICES = ("e", "var", "cvar", "evar")
RISK_ORDER = (RiskKind.EXPECTATION, RiskKind.VAR, RiskKind.CVAR, RiskKind.EVAR)
SHORT = {RiskKind.EXPECTATION: "e", RiskKind.VAR: "var", RiskKind.CVAR: "cvar", RiskKind.EVAR: "evar"}

log = logging.getLogger("riskmpc")


def _fmt_matrix(M) -> str:
    return np.array2string(np.atleast_2d(M), precision=6, suppress_small=True, max_line_width=100)


def _load(args) -> ScenarioConfig:
    if args.config:
        return ScenarioConfig.load(args.config)
    return ScenarioConfig.builtin("dcdc")


def _out_dir(args, default: str) -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------

def synthesis_payload(cfg: ScenarioConfig, gain_label: str | None = None) -> tuple[dict, str]:
    sys_ = cfg.system_model(gain_label)
    syn = synthesize(sys_, cfg.cost_model())
    adm = check_stationary_admissible(sys_, cfg.constraint_model(), syn)
    upper = syn.stationary_cost + syn.C_f
    payload = {
        "K": sys_.K.tolist(), "P": syn.P.tolist(), "Pstar": syn.Pstar.tolist(), "Kstar": syn.Kstar.tolist(),
        "Sigma_E_s": syn.Sigma_E_s.tolist(), "Sigma_X_s": syn.Sigma_X_s.tolist(),
        "trace_Pstar_Sigma_W": syn.stationary_cost, "trace_P_Sigma_W": upper, "C_f": syn.C_f,
        "stationary_admissible": [{"kind": r.kind, "row": r.row, "bound": r.bound, "required": r.required,
                                   "ok": r.ok} for r in adm.rows],
    }
    lines = [f"scenario {cfg.name}", "K =", _fmt_matrix(sys_.K), "P =", _fmt_matrix(syn.P),
             "P* =", _fmt_matrix(syn.Pstar), "K* =", _fmt_matrix(syn.Kstar),
             "Sigma_E_s =", _fmt_matrix(syn.Sigma_E_s), "Sigma_X_s =", _fmt_matrix(syn.Sigma_X_s),
             f"tr(P* Sigma_W) = {syn.stationary_cost:.10g}", f"tr(P Sigma_W)  = {upper:.10g}",
             f"C_f            = {syn.C_f:.10g}", "stationary admissibility (K*, N(0, Sigma_X_s)):"]
    for r in adm.rows:
        lines.append(f"  {r.kind:5s} row {r.row}: bound {r.bound:.6g}  required {r.required:.6g}  "
                     f"{'ok' if r.ok else 'VIOLATED'}")
    if not adm.rows:
        lines.append("  (no constraint rows)")
    return payload, "\n".join(lines)


def cmd_synthesize(args) -> int:
    cfg = _load(args)
    payload, text = synthesis_payload(cfg, args.gain)
    print(text)
    if args.out_dir:
        dump_summary(_out_dir(args, ".") / "synthesis.json", payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# tighten
# ---------------------------------------------------------------------------

def build_schedule(cfg: ScenarioConfig, sys_, constraints, length: int, mode: str,
                   paths: int | None = None, seed: int | None = None) -> TighteningSchedule:
    _, S0 = cfg.initial_moments()
    gaussian = cfg.system["noise"] == "gaussian"
    ep = ErrorProcess.from_system(sys_, S0, gaussian=gaussian)
    if mode == "gaussian":
        return gaussian_schedule(ep, constraints, length)
    if mode == "mc":
        sampler = (gaussian_sampler if gaussian else uniform_sampler)(sys_.Sigma_W, sys_.mu_W)
        return monte_carlo_schedule(ep, constraints, length, paths or cfg.tightening["paths"],
                                    cfg.tightening["seed"] if seed is None else seed, sampler)
    if mode == "user":
        sf = cfg.tightening.get("schedule_file")
        if not sf:
            raise ConfigError("mode 'user' needs tightening.schedule_file")
        try:
            return TighteningSchedule.from_csv(sf)
        except OSError as exc:
            raise ConfigError(f"cannot read schedule file {sf}: {exc}") from None
    raise ConfigError(f"unknown tightening mode {mode!r}")


def _terminal_verdict(constraints, schedule, sys_) -> bool:
    rep = validate_terminal_set(constraints, schedule, sys_)
    rows_ok = all(r["ok"] for r in rep.rows)
    for r in rep.rows:
        print(f"  terminal {r['kind']} row {r['row']}: sup back-off {r['backoff']:.6g} <= bound {r['bound']:.6g}"
              f"  {'ok' if r['ok'] else 'FAIL'}")
    for note in rep.notes:
        print(f"  note: {note}")
    print(f"terminal-set validation: {'PASS' if rows_ok else 'FAIL'}")
    return rows_ok


def cmd_tighten(args) -> int:
    cfg = _load(args)
    sys_ = cfg.system_model(getattr(args, "gain", None))
    cons = cfg.constraint_model(args.risk)
    steps = args.steps or cfg.sim["steps"]
    length = steps + cfg.horizon
    mode = args.mode or cfg.tightening["mode"]
    sched = build_schedule(cfg, sys_, cons, length, mode, args.paths, args.seed)
    out = Path(args.out) if args.out else _out_dir(args, ".") / f"schedule_{mode}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    sched.to_csv(out)
    print(f"wrote {out} ({sched.mode.value}, horizon {sched.horizon})")
    ok = _terminal_verdict(cons, sched, sys_)
    return EXIT_OK if ok else EXIT_AUDIT


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _sim_config(cfg: ScenarioConfig, args, steps: int, risk_steps: int | None, bootstrap: int,
                out_dir: Path | None = None) -> SimConfig:
    mu0, S0 = cfg.initial_moments()
    return SimConfig(paths=args.paths or cfg.sim["paths"], steps=steps,
                     seed=cfg.sim["seed"] if args.seed is None else args.seed,
                     mu_X0=mu0, Sigma_X0=S0, risk_steps=risk_steps, bootstrap=bootstrap, out_dir=out_dir,
                     exact_cost=cfg.sim["exact_cost"], noise=cfg.system["noise"])


def _print_audits(label: str, audits: dict[str, bool]) -> bool:
    for name, ok in audits.items():
        print(f"  [{label}] {name}: {'PASS' if ok else 'FAIL'}")
    return all(audits.values())


def _print_diagnostics(label: str, diag: dict[str, bool]) -> None:
    for name, ok in diag.items():
        print(f"  [{label}] {name} (diagnostic): {'PASS' if ok else 'FAIL'}")


def _report_audits(rep, performance: bool) -> dict[str, bool]:
    audits = rep.audits()
    if not performance:
        audits.pop("performance_sandwich", None)
    return audits


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sys_ = cfg.system_model(args.gain)
    cost = cfg.cost_model()
    cons = cfg.constraint_model(args.risk)
    steps = args.steps or cfg.sim["steps"]
    mode = args.mode or cfg.tightening["mode"]
    sched = build_schedule(cfg, sys_, cons, steps + cfg.horizon, mode)
    if not _terminal_verdict(cons, sched, sys_):
        return EXIT_AUDIT
    out = _out_dir(args, "riskmpc_out")
    sim = _sim_config(cfg, args, steps, min(cfg.sim["risk_steps"], steps), cfg.sim["bootstrap"], out)
    t0 = time.perf_counter()
    rep = run_paths(sim, sys_, cost, cons, sched, N=cfg.horizon, label=args.gain or "K")
    performance = steps >= cfg.sim["perf_steps"]
    audits = _report_audits(rep, performance)
    summary = {**rep.summary(), "audits": audits}
    if not performance:
        summary.pop("diagnostics")
    dump_summary(out / "summary.json", summary)
    print(f"simulated {sim.paths} paths x {steps} steps in {time.perf_counter() - t0:.1f} s -> {out}")
    print(f"  running average at L={steps}: {rep.running_average[-1]:.6g} (se {rep.final_se:.3g}); "
          f"bounds [{rep.lower_bound:.6g}, {rep.upper_bound:.6g}]")
    if performance and not rep.exact_cost:
        _print_diagnostics(rep.label, rep.diagnostics())
    return EXIT_OK if _print_audits(rep.label, audits) else EXIT_AUDIT


# ---------------------------------------------------------------------------
# reproduce-dcdc
# ---------------------------------------------------------------------------

def reproduce(cfg: ScenarioConfig, args, out: Path) -> dict:
    """Four risk-measure designs plus the K* / K~ comparison; returns the summary payload."""
    cost = cfg.cost_model()
    steps = args.steps or cfg.sim["steps"]
    perf_steps = args.perf_steps or cfg.sim["perf_steps"]
    summary: dict = {"scenario": cfg.name, "seed": cfg.sim["seed"] if args.seed is None else args.seed,
                     "paths": args.paths or cfg.sim["paths"], "steps": steps, "perf_steps": perf_steps,
                     "designs": {}, "gains": {}}
    sys_ = cfg.system_model()
    for kind in RISK_ORDER:
        t0 = time.perf_counter()
        cons = cfg.constraint_model(kind.value)
        sched = build_schedule(cfg, sys_, cons, steps + cfg.horizon, "gaussian")
        sim = _sim_config(cfg, args, steps, min(cfg.sim["risk_steps"], steps), cfg.sim["bootstrap"])
        rep = run_paths(sim, sys_, cost, cons, sched, N=cfg.horizon, label=SHORT[kind])
        rep.write_risk_csv(out / f"risk_trajectories_{SHORT[kind]}.csv")
        rep.write_feasibility_csv(out / f"feasibility_{SHORT[kind]}.csv")
        audits = _report_audits(rep, performance=False)
        d = rep.summary()
        d["audits"] = audits
        d.pop("diagnostics")
        d["max_design_risk"] = float(np.max(rep.risk[cons.spec.label][0]))
        summary["designs"][SHORT[kind]] = d
        log.info("design %s done in %.1f s", kind.value, time.perf_counter() - t0)

    cons = cfg.constraint_model()
    reports = []
    labels = list(cfg.gains) or ["K"]
    for label in labels:
        t0 = time.perf_counter()
        sys_g = cfg.system_model(label)
        sched = build_schedule(cfg, sys_g, cons, perf_steps + cfg.horizon, "gaussian")
        sim = _sim_config(cfg, args, perf_steps, 0, 0)
        rep = run_paths(sim, sys_g, cost, cons, sched, N=cfg.horizon, label=label)
        rep.write_feasibility_csv(out / f"feasibility_{label}.csv")
        reports.append(rep)
        d = rep.summary()
        d["audits"] = {k: v for k, v in rep.audits().items()
                       if k in ("recursive_feasibility", "splitting_identity", "nominal_constraints",
                                "performance_sandwich")}
        summary["gains"][label] = d
        log.info("gain %s done in %.1f s", label, time.perf_counter() - t0)
    write_performance_csv(out / "performance.csv", reports)

    checks = {}
    if "kstar" in summary["gains"]:
        g = summary["gains"]["kstar"]
        checks["kstar_within_2pct"] = abs(g["running_average"] - g["lower_bound"]) <= 0.02 * g["lower_bound"]
    if "kstar" in summary["gains"] and "ktilde" in summary["gains"]:
        g = summary["gains"]["ktilde"]
        checks["ktilde_above_optimal"] = g["running_average"] > g["lower_bound"] + 5 * g["running_average_se"]
        checks["ktilde_below_upper"] = g["running_average"] <= g["upper_bound"] + 3 * g["running_average_se"]
    summary["performance_checks"] = checks
    all_ok = all(all(d["audits"].values()) for d in summary["designs"].values())
    all_ok &= all(all(d["audits"].values()) for d in summary["gains"].values())
    all_ok &= all(checks.values())
    summary["pass"] = bool(all_ok)
    return summary


def cmd_reproduce_dcdc(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, "dcdc_out")
    t0 = time.perf_counter()
    summary = reproduce(cfg, args, out)
    dump_summary(out / "summary.json", summary)
    for key, d in summary["designs"].items():
        _print_audits(f"design {key}", d["audits"])
    for key, d in summary["gains"].items():
        _print_audits(f"gain {key}", d["audits"])
        if not d["exact_cost"]:
            _print_diagnostics(f"gain {key}", d["diagnostics"])
        print(f"  [gain {key}] running average {d['running_average']:.6g} (se {d['running_average_se']:.3g}), "
              f"bounds [{d['lower_bound']:.6g}, {d['upper_bound']:.6g}]")
    for name, ok in summary["performance_checks"].items():
        print(f"  {name}: {'PASS' if ok else 'FAIL'}")
    print(f"reproduce-dcdc finished in {time.perf_counter() - t0:.1f} s -> {out}")
    return EXIT_OK if summary["pass"] else EXIT_AUDIT


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario JSON (default: built-in dcdc)")
    common.add_argument("--seed", type=int, help="RNG seed override")
    common.add_argument("--paths", type=int, help="number of Monte-Carlo paths")
    common.add_argument("--steps", type=int, help="closed-loop steps for risk trajectories")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="riskmpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="offline gains, covariances and cost bounds")
    p.add_argument("--gain", "--gain-label", dest="gain", help="named gain from the scenario")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("tighten", parents=[common], help="write a constraint back-off schedule")
    p.add_argument("--risk", choices=RISK_CHOICES)
    p.add_argument("--mode", choices=("gaussian", "mc", "user"))
    p.add_argument("--gain", "--gain-label", dest="gain")
    p.add_argument("--out", help="schedule CSV path")
    p.set_defaults(func=cmd_tighten)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo closed loop with audits")
    p.add_argument("--risk", choices=RISK_CHOICES)
    p.add_argument("--mode", choices=("gaussian", "mc", "user"))
    p.add_argument("--gain", "--gain-label", dest="gain")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce-dcdc", parents=[common], help="full DC-DC converter reproduction")
    p.add_argument("--perf-steps", type=int, help="closed-loop steps for the gain comparison")
    p.set_defaults(func=cmd_reproduce_dcdc)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("paths", "steps", "perf_steps"):
        val = getattr(args, name, None)
        if val is not None and val < 1:
            print(f"error: --{name.replace('_', '-')} must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ScheduleError, DimensionMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InitInfeasible, InitCovTooLarge, QpInfeasible) as exc:
        print(f"feasibility error: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (NumericalError, RiskMPCError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
