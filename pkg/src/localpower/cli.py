"""Command-line batch runner for scenario files.

    localpower run <scenario.toml | shipped name> [--out DIR] [--quiet]
    localpower check <scenario.toml | shipped name>
    localpower suite [--out DIR] [--quiet]

Exit status: 0 all bounds pass, 1 a verification bound failed, 2 usage or
parse error, 3 runtime abort such as norm drift or a failed relaxation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, verify
from .grid import COMPLEX_BYTES, make_grid
from .hydro import NodePolicy
from .local_obs import EnergyBreakdown, PowerBreakdown
from .propagator import ConvergenceError, PropagationError
from .scenario import Scenario, ScenarioError, build_potentials, parse_scenario, prepare_state

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
OUTPUT_ENV = "LOCALPOWER_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "localpower_runs"
SENSITIVITY_THRESHOLDS = (1e-6, 1e-8, 1e-10)


def _fmt(value: float) -> str:
    return f"{value:.16e}"


def write_series_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(float(v)) for v in row])


def write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def output_root(cli_value: str | None) -> Path:
    return Path(cli_value or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT_ROOT)


# -- shipped corpus ---------------------------------------------------------------------


def shipped_scenario_names() -> list[str]:
    root = resources.files("localpower") / "scenarios"
    return sorted(p.name[: -len(".toml")] for p in root.iterdir() if p.name.endswith(".toml"))


def shipped_scenario_text(name: str) -> str:
    path = resources.files("localpower") / "scenarios" / f"{name}.toml"
    if not path.is_file():
        raise ScenarioError([f"no shipped scenario {name!r}; available: {', '.join(shipped_scenario_names())}"])
    return path.read_text()


def load_shipped(name: str) -> Scenario:
    return parse_scenario(shipped_scenario_text(name))


# -- running ----------------------------------------------------------------------------


@dataclass
class RunResult:
    exit_code: int
    directory: Path
    report: verify.IdentityReport | None = None
    failures: list[str] = field(default_factory=list)
    abort: str | None = None
    abort_step: int | None = None


def _max_norm_error(run: verify.SampledRun, psi0) -> float:
    return run.max_norm_drift + abs(psi0.norm() - 1.0)


def _checks(
    s: Scenario,
    psi0,
    run: verify.SampledRun,
    records: list[verify.SampleRecord],
    refined: list[verify.SampleRecord] | None,
    potentials,
    summary: dict,
) -> list[verify.Check]:
    checks: list[verify.Check] = []
    c = s.checks
    labels = [o.label for o in s.omegas]
    checks.append(verify.Check.below("norm_drift", _max_norm_error(run, psi0), c["norm_drift"]))
    if not records:
        return checks
    if "balance" in c or "balance_absolute" in c:
        for label in labels:
            bal = verify.energy_power_balance(records, label)
            if "balance" in c:
                checks.append(verify.Check.below(f"balance[{label}]", bal["max_normalized"], c["balance"]))
            if "balance_absolute" in c:
                checks.append(
                    verify.Check.below(f"balance_absolute[{label}]", bal["max_absolute"], c["balance_absolute"])
                )
    if "continuity" in c:
        checks.append(
            verify.Check.below("continuity", max(r.continuity_residual for r in records), c["continuity"])
        )
    if "energy_drift" in c:
        checks.append(verify.Check.below("energy_drift", verify.energy_drift(records), c["energy_drift"]))
    closed_keys = ("quantum_cancellation", "coulomb_cancellation", "qpot_time_integral", "total_power_cross")
    if any(k in c for k in closed_keys):
        try:
            closed = verify.closed_limit_checks(records, run)
        except verify.VerificationError as exc:
            checks.append(verify.Check.below("seam_probability", run.max_seam_probability, verify.SEAM_THRESHOLD))
            summary["closed_error"] = str(exc)
        else:
            for k in closed_keys:
                if k in c:
                    checks.append(verify.Check.below(k, closed[k + "_normalized"], c[k]))
    if "presence_symmetry" in c:
        worst = max(
            abs(om.presence[0] - p) for r in records for om in r.omegas for p in om.presence[1:]
        ) if s.grid.particle_count > 1 else 0.0
        checks.append(verify.Check.below("presence_symmetry", worst, c["presence_symmetry"]))
    if refined is not None:
        orders = {}
        for label in labels:
            coarse = verify.energy_power_balance(records, label)["max_absolute"]
            fine = verify.energy_power_balance(refined, label)["max_absolute"]
            orders[label] = verify.convergence_order(coarse, fine)
            if "balance_order" in c:
                lo, hi = c["balance_order"]
                checks.append(verify.Check.within(f"balance_order[{label}]", orders[label], lo, hi))
        coarse = max(r.continuity_residual for r in records)
        fine = max(r.continuity_residual for r in refined)
        orders["continuity"] = verify.convergence_order(coarse, fine)
        if "continuity_order" in c:
            lo, hi = c["continuity_order"]
            checks.append(verify.Check.within("continuity_order", orders["continuity"], lo, hi))
        summary["refinement"] = {
            "dt_fine": s.dt / 2,
            "orders": orders,
            "fine_balance_max": {
                label: verify.energy_power_balance(refined, label)["max_absolute"] for label in labels
            },
            "fine_continuity_max": fine,
        }
    if c.get("node_sensitivity"):
        omegas = [o.spec() for o in s.omegas]
        sens = verify.node_sensitivity(run, omegas, potentials, SENSITIVITY_THRESHOLDS)
        summary["node_sensitivity"] = {f"{eps:.0e}": v for eps, v in sens.items()}
        base = {o.label: verify.energy_power_balance(records, o.label)["max_absolute"] for o in omegas}
        worst = 0.0
        for eps, per in sens.items():
            for label, value in per.items():
                worst = max(worst, abs(value - base[label]) / max(base[label], verify.RESIDUAL_FLOOR))
        # passes when every threshold moves the residual by less than the residual itself
        checks.append(verify.Check.below("node_sensitivity", worst, 1.0))
    return checks


def _write_observers(s: Scenario, directory: Path, records: list[verify.SampleRecord]) -> list[str]:
    written = []
    energy_fields = list(EnergyBreakdown.__dataclass_fields__) + ["total"]
    power_fields = PowerBreakdown.field_names()
    npart = s.grid.particle_count

    def emit(name, header, rows):
        write_series_csv(directory / name, ["time"] + header, rows)
        written.append(name)

    obs = set(s.observers)
    for o in s.omegas:
        rows = [(r, next(om for om in r.omegas if om.label == o.label)) for r in records]
        if "energy" in obs:
            emit(f"energy_{o.label}.csv", energy_fields, [[r.time] + [om.energy[f] for f in energy_fields] for r, om in rows])
        if "power" in obs:
            emit(
                f"power_{o.label}.csv",
                power_fields + ["energy_rate", "balance_residual"],
                [[r.time] + [om.power[f] for f in power_fields] + [om.energy_rate, om.balance_residual] for r, om in rows],
            )
        if "presence" in obs:
            emit(f"presence_{o.label}.csv", [f"particle{k}" for k in range(npart)], [[r.time] + om.presence for r, om in rows])
        if "current" in obs:
            emit(f"current_{o.label}.csv", [f"particle{k}" for k in range(npart)], [[r.time] + om.current for r, om in rows])
    if "norm" in obs:
        emit("norm.csv", ["norm"], [[r.time, r.norm] for r in records])
    if "continuity" in obs:
        emit("continuity.csv", ["continuity_residual"], [[r.time, r.continuity_residual] for r in records])
    if "closed" in obs:
        keys = sorted(records[0].closed) if records else []
        emit("closed.csv", keys, [[r.time] + [r.closed[k] for k in keys] for r in records])
    if "total_energy" in obs:
        emit("total_energy.csv", ["total_energy", "power_external"], [[r.time, r.total_energy, r.power_external] for r in records])
    return written


def _manifest(s: Scenario, result: RunResult, wall_clock: float, files: list[str], extra: dict) -> dict:
    grid = s.grid
    return {
        "scenario": s.scenario_id,
        "config": s.resolved(),
        "versions": {
            "localpower": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "grid": {
            "ndim": grid.ndim,
            "points_per_axis": grid.points_per_axis,
            "total_points": grid.size,
            "spacing": grid.spacing,
            "bytes_per_snapshot": grid.size * COMPLEX_BYTES,
        },
        "exit_code": result.exit_code,
        "failures": result.failures,
        "abort": result.abort,
        "abort_step": result.abort_step,
        "files": sorted(files),
        "wall_clock": wall_clock,
        **extra,
    }


def run_scenario(s: Scenario, out_root: Path | str, log=print) -> RunResult:
    """Run one scenario end to end and write its artifacts."""
    started = time.perf_counter()
    directory = Path(out_root) / s.output_directory
    directory.mkdir(parents=True, exist_ok=True)
    result = RunResult(EXIT_PASS, directory)
    files: list[str] = []
    extra: dict = {}
    try:
        grid = make_grid(s.grid)
        potentials = build_potentials(s, grid)
        psi0 = prepare_state(s, potentials)
        omegas = [o.spec() for o in s.omegas]
        policy = NodePolicy(s.node_epsilon)
        log(f"[{s.scenario_id}] propagating {round(s.t_end / s.dt)} steps of dt={s.dt}")
        run = verify.propagate_sampled(psi0, potentials, s.t_end, s.dt, s.sample_stride, s.norm_abort)
        records = verify.evaluate_run(run, omegas, potentials, policy)
        refined = None
        if s.refine_dt:
            log(f"[{s.scenario_id}] refinement rerun at dt={s.dt / 2}")
            fine = verify.propagate_sampled(psi0, potentials, s.t_end, s.dt / 2, 2 * s.sample_stride, s.norm_abort)
            refined = verify.evaluate_run(fine, omegas, potentials, policy)
        summary = verify.summarize(records, omegas)
        summary["max_norm_error"] = _max_norm_error(run, psi0)
        summary["max_seam_probability"] = run.max_seam_probability
        checks = _checks(s, psi0, run, records, refined, potentials, summary)
        config = {
            "dt": s.dt,
            "n": s.grid.points_per_axis,
            "node_epsilon": s.node_epsilon,
            "soft_core": s.pair.soft_core,
            "scenario": s.resolved(),
        }
        report = verify.IdentityReport(s.scenario_id, config, records, summary, checks)
        result.report = report
        result.failures = [c.name for c in checks if not c.passed]
        result.exit_code = EXIT_PASS if report.passed else EXIT_FAIL
        if "csv" in s.formats:
            files += _write_observers(s, directory, records)
        if "json" in s.formats:
            report.to_json(directory / "report.json")
            files.append("report.json")
        for chk in checks:
            log(f"[{s.scenario_id}] {'PASS' if chk.passed else 'FAIL'} {chk.name}: {chk.value:.3e} (bound {chk.bound:.1e})")
    except (PropagationError, ConvergenceError, verify.VerificationError, OSError, ValueError) as exc:
        result.exit_code = EXIT_ABORT
        result.abort = f"{type(exc).__name__}: {exc}"
        result.abort_step = getattr(exc, "step", None)
        log(f"[{s.scenario_id}] ABORT {result.abort}")
    manifest = _manifest(s, result, time.perf_counter() - started, files + ["manifest.json"], extra)
    write_json(directory / "manifest.json", manifest)
    return result


def run_suite(out_root: Path | str, log=print) -> int:
    """Run every shipped scenario plus the worked-example table."""
    root = Path(out_root) / "suite"
    root.mkdir(parents=True, exist_ok=True)
    statuses = {}
    for name in shipped_scenario_names():
        res = run_scenario(load_shipped(name), root, log)
        statuses[name] = {"exit_code": res.exit_code, "failures": res.failures, "abort": res.abort}
    rows = verify.worked_examples_suite()
    for row in rows:
        log(f"[examples] {'PASS' if row.passed else 'FAIL'} {row.name}: {row.value:.3e} (bound {row.bound:.1e})")
    write_json(root / "examples.json", {"note": verify.BOUNDS_NOTE, "rows": [r.__dict__ for r in rows]})
    codes = [s["exit_code"] for s in statuses.values()] + [EXIT_PASS if all(r.passed for r in rows) else EXIT_FAIL]
    code = EXIT_ABORT if EXIT_ABORT in codes else (EXIT_FAIL if EXIT_FAIL in codes else EXIT_PASS)
    write_json(root / "suite.json", {"exit_code": code, "scenarios": statuses})
    return code


# -- entry point ------------------------------------------------------------------------


def _read_scenario(path: str) -> Scenario:
    """Parse a scenario file; a bare shipped name such as ``driven_pair`` also works."""
    if not Path(path).exists() and path in shipped_scenario_names():
        return load_shipped(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError([f"cannot read {path}: {exc}"]) from exc
    return parse_scenario(text)


def build_parser() -> argparse.ArgumentParser:
    out_help = f"output root (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT_ROOT})"
    parser = argparse.ArgumentParser(prog="localpower", description=__doc__.split("\n\n")[0])
    parser.add_argument("--out", help=out_help)
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    # subcommands accept the same options; SUPPRESS keeps them from erasing values given earlier
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=argparse.SUPPRESS, help=out_help)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", parents=[common], help="run one scenario file")
    p_run.add_argument("scenario", help="scenario file or shipped scenario name")
    p_check = sub.add_parser("check", parents=[common], help="parse and validate only")
    p_check.add_argument("scenario", help="scenario file or shipped scenario name")
    sub.add_parser("suite", parents=[common], help="run the shipped verification corpus")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    log = (lambda *a, **k: None) if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        if args.command == "check":
            s = _read_scenario(args.scenario)
            for o in s.omegas:
                log(f"omega {o.label}: cells {o.region.lower_index}..{o.region.upper_index}, snap distance {o.snap_distance:.3e}")
            log(f"{s.scenario_id}: ok")
            return EXIT_PASS
        if args.command == "run":
            s = _read_scenario(args.scenario)
            return run_scenario(s, output_root(args.out), log).exit_code
        return run_suite(output_root(args.out), log)
    except ScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
