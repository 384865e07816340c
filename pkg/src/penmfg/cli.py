"""Config-driven command line front end.

Every invocation reads one config file, applies command-line patches
(positional command, --seed, --out, repeatable --override section.key=value),
and runs a single command into the output directory:

    simulate     particle paths under the constant first control atom
    cost         the same run plus the cost functional breakdown
    dp           one best-response solve against the uncontrolled flow
    equilibrium  the fixed-point iteration
    sweep-n      equilibria across penalty levels vs the reflected reference
    chatter      chattered strict controls closing on a relaxed reference
    diagnose     coefficient growth constants and discretization guards

Artifacts are plain CSV / text: paths.csv, flow.csv, value.csv, sweep.csv,
report.txt as applicable, plus manifest.txt with the seed, package version,
and the sha256 of the canonical config text.  Outputs carry no timestamps,
so identical config + seed reruns are byte-identical.

Exit status: 0 on success, 2 when a run finished but is flagged as not
converged, 1 on any error (parse, validation, numerical, I/O).
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import (
    COMMANDS,
    RunConfig,
    apply_overrides,
    build_fixed_point,
    build_grid,
    build_model,
    build_sim,
    config_hash,
    parse_config_file,
)
from .dp import build_chain, pad_for_penalty, solve_dp, value_to_csv
from .equilibrium import (
    _constant_law,
    penalization_sweep,
    solve_equilibrium,
    strict_approximation_run,
)
from .errors import PenmfgError
from .measures import flow_to_csv, format_float
from .model import empirical_growth_constants
from .simulate import (
    EXPLICIT_PENALTY_LIMIT,
    evaluate_cost,
    moment_summary,
    paths_to_csv,
    simulate,
)


def _ff(value) -> str:
    return format_float(value)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _manifest(cfg: RunConfig) -> str:
    return (f"command = {cfg.command}\n"
            f"seed = {cfg.seed}\n"
            f"version = {__version__}\n"
            f"config_sha256 = {config_hash(cfg)}\n")


def _report_head(cfg: RunConfig) -> list:
    lines = [f"command {cfg.command}  seed {cfg.seed}  penmfg {__version__}",
             f"config sha256 {config_hash(cfg)}"]
    if cfg.defaults_applied:
        lines.append("defaults applied:")
        lines += [f"  {entry}" for entry in cfg.defaults_applied]
    else:
        lines.append("defaults applied: none")
    return lines


def _csv_table(header: list, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ----------------------------------------------------------------- commands


def _cmd_simulate(cfg: RunConfig, ms, out: Path, with_cost: bool) -> int:
    sim = build_sim(cfg)
    paths, flow = simulate(ms, sim, _constant_law(ms))
    paths_to_csv(paths, out / "paths.csv")
    flow_to_csv(flow, out / "flow.csv")
    lines = _report_head(cfg)
    lines.append(f"scheme {sim.scheme}"
                 + (f"  penalty {sim.penalty}" if sim.penalty else ""))
    lines.append(f"particles {paths.n_particles}  steps {paths.n_steps}"
                 f"  dt {_ff(sim.dt)}")
    moments = moment_summary(paths)
    lines += [f"{key} {_ff(val)}" for key, val in moments.items()]
    if with_cost:
        cost = evaluate_cost(ms, paths, flow)
        lines += [
            f"cost {_ff(cost.value)} +/- {_ff(cost.stderr)}",
            f"  running  {_ff(cost.running)}",
            f"  boundary {_ff(cost.boundary)}",
            f"  terminal {_ff(cost.terminal)}",
        ]
    _write_text(out / "report.txt", "\n".join(lines) + "\n")
    return 0


def _cmd_dp(cfg: RunConfig, ms, out: Path) -> int:
    sim = build_sim(cfg)
    grid = build_grid(cfg, ms)
    if grid is None:
        raise PenmfgError("the dp command needs [dp] hx")
    penalty = sim.penalty if sim.scheme.startswith("penalized") else None
    if penalty is not None:
        grid = pad_for_penalty(grid, ms, sim.dt, penalty)
    _, flow = simulate(ms, sim, _constant_law(ms))
    chain = build_chain(ms, penalty, flow, grid)
    field, _ = solve_dp(chain, ms, flow)
    value_to_csv(field, ms, out / "value.csv")
    v0 = field.V[0]
    lines = _report_head(cfg)
    lines += [
        f"grid nodes {grid.n_nodes}  hx {_ff(grid.hx)}"
        f"  substeps <= {int(max(chain.substeps))}",
        f"value at t=0: min {_ff(v0.min())}  mean {_ff(v0.mean())}"
        f"  max {_ff(v0.max())}",
        f"truncated stencil mass {_ff(chain.truncated_mass)}",
    ]
    _write_text(out / "report.txt", "\n".join(lines) + "\n")
    return 0


def _cmd_equilibrium(cfg: RunConfig, ms, out: Path) -> int:
    sim = build_sim(cfg)
    grid = build_grid(cfg, ms)
    fp = build_fixed_point(cfg, sim, grid)
    rep = solve_equilibrium(ms, fp)
    flow_to_csv(rep.flow, out / "flow.csv")
    if rep.field is not None:
        value_to_csv(rep.field, ms, out / "value.csv")
    lines = _report_head(cfg) + [rep.summary()]
    if not rep.converged:
        lines.append("NOT CONVERGED within max_iters")
    _write_text(out / "report.txt", "\n".join(lines) + "\n")
    return 0 if rep.converged else 2


_SWEEP_HEADER = ["penalty", "converged", "iterations", "residual", "cost",
                 "cost_se", "flow_gap", "cost_gap", "cost_gap_se", "error"]


def _sweep_rows(report) -> list:
    rows = []
    for r in report.rows + [report.reference]:
        tag = "ref" if r.penalty is None else str(r.penalty)
        rows.append([tag, str(r.converged).lower(), r.iterations,
                     _ff(r.residual), _ff(r.cost), _ff(r.cost_se),
                     _ff(r.flow_gap), _ff(r.cost_gap), _ff(r.cost_gap_se),
                     r.error])
    return rows


def _cmd_sweep(cfg: RunConfig, ms, out: Path) -> int:
    grid = build_grid(cfg, ms)
    fp = build_fixed_point(cfg, build_sim(cfg), grid)
    n_list = cfg.sweep.get("n_list", (8, 32, 128))
    report = penalization_sweep(ms, fp, list(n_list))
    _write_text(out / "sweep.csv", _csv_table(_SWEEP_HEADER,
                                              _sweep_rows(report)))
    _write_text(out / "report.txt",
                "\n".join(_report_head(cfg) + [report.summary()]) + "\n")
    clean = report.reference.converged and all(
        r.converged and not r.error for r in report.rows)
    return 0 if clean else 2


_CHATTER_HEADER = ["delta", "penalty", "control_distance", "cost", "cost_se",
                   "cost_gap", "cost_gap_se"]


def _cmd_chatter(cfg: RunConfig, ms, out: Path) -> int:
    grid = build_grid(cfg, ms)
    if grid is None:
        raise PenmfgError("the chatter command needs [dp] hx")
    fp = build_fixed_point(cfg, build_sim(cfg), grid)
    report = strict_approximation_run(
        ms, fp, deltas=list(cfg.sweep.get("deltas", (0.2, 0.1, 0.05))),
        n0=cfg.sweep.get("n0", 8.0), epsilon=cfg.sweep.get("epsilon", 0.1),
    )
    rows = [[_ff(r.delta), r.penalty, _ff(r.control_distance), _ff(r.cost),
             _ff(r.cost_se), _ff(r.cost_gap), _ff(r.cost_gap_se)]
            for r in report.rows]
    _write_text(out / "sweep.csv", _csv_table(_CHATTER_HEADER, rows))
    _write_text(out / "report.txt",
                "\n".join(_report_head(cfg) + [report.summary()]) + "\n")
    return 0 if report.base_converged else 2


def _cmd_diagnose(cfg: RunConfig, ms, out: Path) -> int:
    lines = _report_head(cfg)
    lines.append(f"domain {ms.dom.kind}  dim {ms.dim}")
    lines.append("model parameters (resolved):")
    lines += [f"  {key} = {val}" for key, val in sorted(ms.params.items())]
    lines.append(str(empirical_growth_constants(ms, seed=cfg.seed)))
    dt = cfg.sim.get("dt")
    penalty = cfg.sim.get("penalty")
    scheme = cfg.sim.get("scheme", "penalized_splitting")
    if dt is not None and penalty is not None:
        ratio = penalty * dt
        lines.append(
            f"penalty*dt = {_ff(ratio)} vs explicit stability limit "
            f"{_ff(EXPLICIT_PENALTY_LIMIT)}"
            + (" [OK]" if ratio <= EXPLICIT_PENALTY_LIMIT
               else f" [requires splitting; {scheme} configured]"))
    grid = build_grid(cfg, ms)
    if grid is not None:
        lines.append(f"dp grid: {grid.n_nodes} nodes, hx {_ff(grid.hx)}")
    _write_text(out / "report.txt", "\n".join(lines) + "\n")
    return 0


def run(cfg: RunConfig) -> int:
    """Execute one validated config; returns the process exit status."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "manifest.txt", _manifest(cfg))
    ms = build_model(cfg)
    if cfg.command == "simulate":
        return _cmd_simulate(cfg, ms, out, with_cost=False)
    if cfg.command == "cost":
        return _cmd_simulate(cfg, ms, out, with_cost=True)
    if cfg.command == "dp":
        return _cmd_dp(cfg, ms, out)
    if cfg.command == "equilibrium":
        return _cmd_equilibrium(cfg, ms, out)
    if cfg.command == "sweep-n":
        return _cmd_sweep(cfg, ms, out)
    if cfg.command == "chatter":
        return _cmd_chatter(cfg, ms, out)
    return _cmd_diagnose(cfg, ms, out)


# --------------------------------------------------------------- entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="penmfg",
        description="Penalized particle studies of reflected mean field games",
    )
    parser.add_argument("command", nargs="?", choices=COMMANDS,
                        help="overrides the [run] command in the config")
    parser.add_argument("--config", required=True, help="config file path")
    parser.add_argument("--seed", type=int, default=None,
                        help="overrides the [run] seed")
    parser.add_argument("--out", default=None,
                        help="overrides the [run] output directory")
    parser.add_argument("--override", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="config patch, repeatable")
    parser.add_argument("--version", action="version",
                        version=f"penmfg {__version__}")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config_file(args.config)
        if args.command is not None:
            cfg = replace(cfg, command=args.command)
        if args.seed is not None:
            if args.seed < 0:
                raise PenmfgError("--seed must be nonnegative")
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        cfg = apply_overrides(cfg, args.override)
        return run(cfg)
    except PenmfgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


def console_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_entry()
