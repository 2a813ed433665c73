"""Command-line scenario runner.

``schloegl run CONFIG`` simulates one scenario and writes ``trace.csv``,
field snapshots, ``summary.json`` and (for receding-horizon runs)
``windows.json``. ``compare``, ``diagnose`` and ``validate`` work on traces
and configs. ``CONFIG`` is a YAML path or the name of a bundled scenario.

Exit codes: 0 success (also when an optimizer window did not converge; the
summary then carries a warning), 2 invalid configuration, 3 blow-up (the
partial trace is kept).
"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import expr
from .actuation import FeedbackConfig, NormKind, build_actuators, frak_u_norm
from .config import ScenarioConfig, bundled_path, bundled_scenarios
from .diagnostics import check_mlam, convergence_study, decay_rate, poincare_xi
from .dynamics import (ClosedLoop, OpenLoop, ReactionParams, RecordOptions, SimTrace, TargetSpec,
                       forcing_persistent_bound, manufactured_forcing, simulate, step_count)
from .errors import BlowUpError, ConfigurationError, ResolutionError, SchloeglError
from .fem import build_grid, neumann_eigenbasis
from .ocp import ObservationQ, OcpProblem, receding_horizon

log = logging.getLogger("schloegl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOWUP = 3

# a run counts as stabilized when the final H-norm is below this fraction of the initial one
STABILIZED_FRACTION = 0.01


@dataclass
class Setup:
    grid: object
    ops: object
    fam: object
    params: ReactionParams
    target: TargetSpec
    z0: np.ndarray
    Q: ObservationQ


def load_config(source):
    """Config from a YAML path or a bundled scenario name."""
    path = Path(source)
    if not path.exists() and not str(source).endswith((".yaml", ".yml")):
        path = bundled_path(str(source))
    return ScenarioConfig.load(path)


def make_target(cfg):
    t = cfg.target
    L = cfg.grid.length
    if t.kind == "zero":
        return TargetSpec.zero(L)
    if t.kind == "separable_sin_cos":
        return TargetSpec.separable_sin_cos(t.amplitude, t.omega, t.wavenumber, L)
    return TargetSpec.custom(t.expression, L)


def build_setup(cfg):
    grid, ops = build_grid(cfg.grid.n_nodes, cfg.grid.length, cfg.grid.nu)
    fam = build_actuators(cfg.actuators.M, cfg.actuators.r, grid, ops)
    params = ReactionParams(tuple(cfg.reaction.zeta))
    target = make_target(cfg)
    z0 = expr.to_function(expr.parse(cfg.initial_error))(0.0, grid.x)
    Q = ObservationQ(ops, neumann_eigenbasis(grid, ops, cfg.controller.M1))
    return Setup(grid, ops, fam, params, target, z0, Q)


def _decay_summary(trace):
    T = trace.times[-1] - trace.times[0]
    floor = 1e-10 * max(trace.norm_H[0], np.finfo(float).tiny)
    alive = np.flatnonzero(trace.norm_H > floor)
    t_start = trace.times[0] + 0.1 * T
    if alive.size == 0 or trace.times[alive[-1]] - t_start < 10 * trace.dt:
        return None
    t_end = trace.times[alive[-1]]
    return decay_rate(trace.times, trace.norm_H, t_start=t_start, t_end=t_end).to_dict()


def summarize(cfg, setup, trace, extra=None):
    initial = float(trace.norm_H[0])
    final = float(trace.norm_H[-1])
    summary = {
        "name": cfg.name,
        "controller": cfg.controller.kind,
        "profile": cfg.profile,
        "n_nodes": cfg.grid.n_nodes,
        "dt": cfg.time.dt,
        "T": float(trace.times[-1]),
        "initial_normH": initial,
        "final_normH": final,
        "final_normV": float(trace.norm_V[-1]),
        "final_normL6": float(trace.norm_L6[-1]),
        "final_ratio": final / initial if initial > 0 else 0.0,
        "stabilized": bool(final <= STABILIZED_FRACTION * initial),
        "J_state": float(trace.cost_state[-1]),
        "J_control": float(trace.cost_control[-1]),
        "J_total": trace.total_cost,
        "saturation_duty": float(np.mean(trace.saturated[:-1])) if len(trace.times) > 1 else 0.0,
        "max_control_linf": float(np.abs(trace.controls).max()) if trace.controls.size else 0.0,
        "decay": None,
        "warnings": [],
        "status": "ok",
    }
    if np.all(np.isfinite(trace.norm_H)):
        try:
            summary["decay"] = _decay_summary(trace)
        except SchloeglError as exc:
            summary["warnings"].append(f"decay fit skipped: {exc}")
    if not summary["stabilized"]:
        summary["warnings"].append(
            f"not stabilized: final ||z||_H = {final:.4g} exceeds "
            f"{STABILIZED_FRACTION} x initial ({initial:.4g})")
    summary.update(extra or {})
    return summary


def run_scenario(cfg, out_dir=None, progress=None):
    """Run one scenario, write its artifacts and return ``(exit_code, summary)``."""
    out = Path(out_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    c = cfg.controller
    T, dt = cfg.time.T, cfg.time.dt
    record = RecordOptions(snapshot_every=cfg.output.snapshot_every or 0, observation=setup.Q)

    forcing = None if cfg.target.kind == "zero" else manufactured_forcing(
        setup.target, setup.params, cfg.grid.nu)
    c_h = forcing_persistent_bound(forcing, setup.grid, setup.ops, T, cfg.forcing.tau_h)
    extra = {"forcing_bound": {"tau_h": cfg.forcing.tau_h, "estimate": c_h, "C_h": cfg.forcing.C_h}}
    if cfg.forcing.C_h is not None and c_h > cfg.forcing.C_h:
        raise ConfigurationError(f"manufactured forcing violates the persistent bound: "
                                 f"estimate {c_h:.6g} > C_h = {cfg.forcing.C_h}")

    windows = None
    try:
        if c.kind == "free":
            n = step_count(T, dt)
            rhs = OpenLoop(setup.params, setup.target, setup.fam, np.zeros((n, setup.fam.M_sigma)))
            trace = simulate(setup.grid, setup.ops, setup.z0, T, dt, rhs, record=record)
        elif c.kind == "explicit":
            fb = FeedbackConfig(c.lam, c.C_u, c.norm_kind, c.variant)
            rhs = ClosedLoop(setup.params, setup.target, setup.fam, fb)
            extra.update(lam=c.lam, C_u=c.C_u,
                         frak_u_norm=frak_u_norm(setup.fam, setup.ops, NormKind(c.norm_kind)))
            trace = simulate(setup.grid, setup.ops, setup.z0, T, dt, rhs, record=record)
        else:
            template = OcpProblem(setup.grid, setup.ops, setup.fam, setup.params, setup.Q,
                                  setup.z0, 0.0, c.T_rh, dt, setup.target, c.C_u, c.norm_kind,
                                  c.optimizer, c.state_weight)
            trace, reports = receding_horizon(setup.z0, T, c.T_rh, c.delta_rh, template,
                                              record=record, progress=progress)
            windows = [r.to_dict() for r in reports]
            extra.update(C_u=c.C_u, state_weight=c.state_weight, optimizer={
                "windows": len(reports),
                "all_converged": all(r.converged for r in reports),
                "total_iterations": sum(r.iterations for r in reports),
                "max_residual": max(r.residual for r in reports),
            })
    except BlowUpError as exc:
        summary = {"name": cfg.name, "controller": c.kind, "status": "blow_up",
                   "message": str(exc), "time": exc.time}
        if exc.trace is not None:
            exc.trace.to_csv(out / "trace.csv")
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        return EXIT_BLOWUP, summary

    summary = summarize(cfg, setup, trace, extra)
    if windows is not None and not summary["optimizer"]["all_converged"]:
        summary["warnings"].append("optimizer did not converge in every window; best iterates used")
    trace.to_csv(out / "trace.csv")
    if cfg.output.snapshot_format == "npz":
        trace.save_snapshots(out / "snapshots.npz", setup.grid.x)
    elif cfg.output.snapshot_format == "json":
        (out / "snapshots.json").write_text(trace.snapshots_json(setup.grid.x))
    if windows is not None:
        (out / "windows.json").write_text(json.dumps(windows, indent=2))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / "config.yaml").write_text(cfg.dumps())
    return EXIT_OK, summary


COMPARE_COLUMNS = ["run", "T", "dt", "final_normH", "mu_hat", "J_total", "J_state", "J_control",
                   "saturation_duty", "d_final_normH", "d_J_total"]


def compare(paths):
    """Comparison rows for traces sharing ``T`` and ``dt``; differences are against the first."""
    if not paths:
        raise ConfigurationError("compare needs at least one trace")
    traces = [SimTrace.from_csv(p) for p in paths]
    ref = traces[0]
    mismatches = []
    for p, tr in zip(paths[1:], traces[1:]):
        if len(tr.times) != len(ref.times) or not np.allclose(tr.times, ref.times, atol=1e-9):
            mismatches.append(f"{p}: time grid differs from {paths[0]} "
                              f"(T={tr.times[-1]:.6g}, dt={tr.dt:.3g} vs "
                              f"T={ref.times[-1]:.6g}, dt={ref.dt:.3g})")
    if mismatches:
        raise ConfigurationError("incompatible traces:\n  " + "\n  ".join(mismatches))
    rows = []
    for p, tr in zip(paths, traces):
        try:
            decay = _decay_summary(tr)
        except SchloeglError:
            decay = None
        rows.append({
            "run": str(p), "T": float(tr.times[-1]), "dt": tr.dt,
            "final_normH": float(tr.norm_H[-1]),
            "mu_hat": decay["mu"] if decay else float("nan"),
            "J_total": tr.total_cost, "J_state": float(tr.cost_state[-1]),
            "J_control": float(tr.cost_control[-1]),
            "saturation_duty": float(np.mean(tr.saturated[:-1])),
            "d_final_normH": float(tr.norm_H[-1] - ref.norm_H[-1]),
            "d_J_total": tr.total_cost - ref.total_cost,
        })
    return rows


def diagnose(cfg, out_dir=None, convergence=True):
    """Poincare constants, the M-lambda ratio, feedback norms and the convergence study."""
    setup = build_setup(cfg)
    grid, ops = setup.grid, setup.ops
    report = {"name": cfg.name, "n_nodes": grid.n_nodes, "r": cfg.actuators.r}
    xi = {}
    for M in (1, 2, 4, 8):
        try:
            xi[str(M)] = poincare_xi(build_actuators(M, cfg.actuators.r, grid, ops), ops)
        except ResolutionError as exc:
            xi[str(M)] = None
            log.info("xi_%d skipped: %s", M, exc)
    report["poincare_xi"] = xi
    report["frak_u_norm"] = {k.value: frak_u_norm(setup.fam, ops, k) for k in NormKind}

    rng = np.random.default_rng(0)
    samples = np.hstack([neumann_eigenbasis(grid, ops, min(20, grid.n_nodes)).fields,
                         rng.standard_normal((grid.n_nodes, 50))])
    lam = cfg.controller.lam or 0.0
    report["mlam"] = {"lam": lam, "min_ratio": check_mlam(samples, lam, setup.fam, ops)}

    if convergence:
        target = setup.target if cfg.target.kind != "zero" else TargetSpec.separable_sin_cos(
            length=cfg.grid.length)
        report["convergence"] = convergence_study(target, setup.params, cfg.grid.nu,
                                                  length=cfg.grid.length).to_dict()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "diagnostics.json").write_text(json.dumps(report, indent=2))
    return report


def _parser():
    p = argparse.ArgumentParser(prog="schloegl", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario")
    r.add_argument("config", help="YAML file or bundled scenario name")
    r.add_argument("--out", help="output directory (default: output.directory of the config)")
    r.add_argument("--profile", choices=["desk", "paper"], help="override resolution and time step")

    c = sub.add_parser("compare", help="tabulate traces written by 'run'")
    c.add_argument("traces", nargs="+")
    c.add_argument("--output", help="CSV file (default: stdout)")

    d = sub.add_parser("diagnose", help="Poincare constants, M-lambda ratio, convergence study")
    d.add_argument("config")
    d.add_argument("--out", help="directory for diagnostics.json")
    d.add_argument("--no-convergence", action="store_true", help="skip the convergence study")

    v = sub.add_parser("validate", help="check configs without running them")
    v.add_argument("configs", nargs="+")

    sub.add_parser("list", help="names of the bundled scenarios")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "list":
            print("\n".join(bundled_scenarios()))
            return EXIT_OK
        if args.command == "validate":
            for source in args.configs:
                cfg = load_config(source)
                build_setup(cfg)
                print(f"{source}: ok")
            return EXIT_OK
        if args.command == "run":
            cfg = load_config(args.config)
            if args.profile:
                cfg = cfg.with_profile(args.profile)

            def progress(rep):
                log.info("window %d (%.3g, %.3g): %d iterations, J=%.6g, residual=%.2e",
                         rep.index, rep.s0, rep.s1, rep.iterations, rep.J, rep.residual)

            code, summary = run_scenario(cfg, args.out, progress)
            print(json.dumps(summary, indent=2))
            for w in summary.get("warnings", []):
                log.warning(w)
            return code
        if args.command == "compare":
            rows = compare(args.traces)
            fh = open(args.output, "w", newline="") if args.output else sys.stdout
            try:
                w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
                w.writeheader()
                w.writerows(rows)
            finally:
                if args.output:
                    fh.close()
            return EXIT_OK
        if args.command == "diagnose":
            report = diagnose(load_config(args.config), args.out, not args.no_convergence)
            print(json.dumps(report, indent=2))
            return EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
