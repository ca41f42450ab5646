"""``smpc`` command-line entry point.

    smpc <solve-ocp|run-mpc|turnpike|report> --config cfg.json [--seed S] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import grid_dp, mpc, performance, scenario, svg, turnpike
from .model import ModelError, SystemModel, model_from_config

log = logging.getLogger("smpc")


class ConfigError(ValueError):
    pass


@dataclass
class SolverConfig:
    grid_size: int = grid_dp.DEFAULT_GRID_SIZE
    control_scan_points: int = grid_dp.DEFAULT_SCAN_POINTS
    grad_tol: float = 1e-8
    max_iters: int = 500
    node_cap: int = scenario.DEFAULT_NODE_CAP


@dataclass
class MpcConfig:
    x0: float = 3.0
    horizons: List[int] = field(default_factory=lambda: [3, 4, 5])
    K_max: int = 100
    paths: int = 1000
    seed: int = 0
    support_cap: int = mpc.DEFAULT_SUPPORT_CAP
    workers: int = 1


@dataclass
class TurnpikeConfig:
    N_long: int = 15
    mid_fraction: float = 0.5
    thresholds: List[float] = field(default_factory=lambda: list(turnpike.DEFAULT_THRESHOLDS))
    horizons: List[int] = field(default_factory=lambda: list(range(3, 16)))


@dataclass
class OutputConfig:
    directory: str = "out"
    emit_svg: bool = True


@dataclass
class ExperimentConfig:
    model: SystemModel
    model_block: Dict[str, Any]
    solver: SolverConfig
    mpc: MpcConfig
    turnpike: TurnpikeConfig
    output: OutputConfig


def _section(raw: dict, name: str, cls):
    block = raw.get(name, {})
    if not isinstance(block, dict):
        raise ConfigError(f"{name}: expected an object")
    known = cls.__dataclass_fields__
    for key in block:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
    try:
        return cls(**block)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _require(cond: bool, field_name: str, msg: str):
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


def _int_list(values, name):
    _require(isinstance(values, list), name, "expected a list")
    _require(all(isinstance(v, int) and not isinstance(v, bool) for v in values),
             name, "expected integers")
    return values


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    model_block = raw.get("model", {"model": "paper_example"})
    _require(isinstance(model_block, dict), "model", "expected an object")
    try:
        model = model_from_config(model_block)
    except ModelError as exc:
        raise ConfigError(str(exc) if str(exc).startswith("model") else f"model: {exc}") from None
    solver = _section(raw, "solver", SolverConfig)
    mpc_cfg = _section(raw, "mpc", MpcConfig)
    tp = _section(raw, "turnpike", TurnpikeConfig)
    out = _section(raw, "output", OutputConfig)

    _require(solver.grid_size >= 2, "solver.grid_size", "must be >= 2")
    _require(solver.control_scan_points >= 3, "solver.control_scan_points", "must be >= 3")
    _require(solver.grad_tol > 0, "solver.grad_tol", "must be positive")
    _require(solver.max_iters >= 1, "solver.max_iters", "must be >= 1")
    _require(solver.node_cap >= 1, "solver.node_cap", "must be >= 1")
    _int_list(mpc_cfg.horizons, "mpc.horizons")
    _require(len(mpc_cfg.horizons) > 0, "mpc.horizons", "must be nonempty")
    _require(all(n >= 1 for n in mpc_cfg.horizons), "mpc.horizons", "entries must be >= 1")
    _require(mpc_cfg.K_max >= 1, "mpc.K_max", "must be >= 1")
    _require(mpc_cfg.paths >= 1, "mpc.paths", "must be >= 1")
    _require(mpc_cfg.support_cap >= 1, "mpc.support_cap", "must be >= 1")
    _require(mpc_cfg.workers >= 1, "mpc.workers", "must be >= 1")
    _require(isinstance(mpc_cfg.seed, int) and mpc_cfg.seed >= 0, "mpc.seed",
             "must be a nonnegative integer")
    _require(math.isfinite(float(mpc_cfg.x0)), "mpc.x0", "must be finite")
    _require(tp.N_long >= 10, "turnpike.N_long", "must be >= 10")
    _require(0.0 < tp.mid_fraction < 1.0, "turnpike.mid_fraction", "must lie in (0, 1)")
    _require(isinstance(tp.thresholds, list) and len(tp.thresholds) > 0
             and all(t > 0 for t in tp.thresholds), "turnpike.thresholds",
             "must be a nonempty list of positive numbers")
    _int_list(tp.horizons, "turnpike.horizons")
    _require(len(tp.horizons) > 0, "turnpike.horizons", "must be nonempty")
    _require(all(n >= 1 for n in tp.horizons), "turnpike.horizons", "entries must be >= 1")
    return ExperimentConfig(model=model, model_block=model_block, solver=solver, mpc=mpc_cfg,
                            turnpike=tp, output=out)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    return parse_config(raw)


# -- helpers ------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _solve_opts(cfg: ExperimentConfig) -> dict:
    return dict(max_iters=cfg.solver.max_iters, grad_tol=cfg.solver.grad_tol,
                node_cap=cfg.solver.node_cap)


def _solve(cfg: ExperimentConfig, x0: float, N: int) -> scenario.OcpSolution:
    return scenario.solve(cfg.model, x0, N, **_solve_opts(cfg))


def _table(cfg: ExperimentConfig, N: int) -> grid_dp.ValueTable:
    return grid_dp.backward_induction(cfg.model, N, grid_size=cfg.solver.grid_size,
                                      scan_points=cfg.solver.control_scan_points,
                                      workers=cfg.mpc.workers)


def _stationary(cfg: ExperimentConfig, table=None):
    tp = cfg.turnpike
    return turnpike.estimate_stationary(cfg.model, x0=cfg.mpc.x0, N_long=tp.N_long,
                                        mid_fraction=tp.mid_fraction, table=table,
                                        grid_size=cfg.solver.grid_size, **_solve_opts(cfg))


def _color(i: int) -> str:
    return svg.PALETTE[i % len(svg.PALETTE)]


# -- commands -----------------------------------------------------------------

def cmd_solve_ocp(cfg: ExperimentConfig, horizons: Optional[List[int]] = None) -> List[Path]:
    """Per-horizon state laws (``ocp_N{N}.csv``) and fan plots of every scenario path."""
    out = Path(cfg.output.directory)
    horizons = horizons or cfg.turnpike.horizons
    written = []
    state_panel = svg.Panel("optimal state paths", "k", "x")
    control_panel = svg.Panel("optimal control paths", "k", "u")
    for i, N in enumerate(horizons):
        sol = _solve(cfg, cfg.mpc.x0, N)
        dists = scenario.optimal_state_distributions(sol)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "value", "probability"])
        for k, v, p in scenario.distributions_csv_rows(dists):
            w.writerow([k, _fmt(v), _fmt(p)])
        w.writerow(["V_N", _fmt(sol.value), ""])
        path = out / f"ocp_N{N}.csv"
        _write(path, buf.getvalue())
        written.append(path)
        tree, s = sol.tree, sol.tree.branching
        for k in range(N):
            parent = np.repeat(tree.states[k], s)
            n = parent.size
            state_panel.segments.append((np.full(n, k), parent, np.full(n, k + 1),
                                         tree.states[k + 1], _color(i)))
            if k + 1 < N:
                up = np.repeat(sol.controls.levels[k], s)
                control_panel.segments.append((np.full(n, k), up, np.full(n, k + 1),
                                               sol.controls.levels[k + 1], _color(i)))
        if N == 1:
            u = sol.controls.levels[0]
            control_panel.lines.append(svg.Line([0, 0], [u[0], u[0]], _color(i)))
    if cfg.output.emit_svg:
        for name, panel in (("ocp_states.svg", state_panel), ("ocp_controls.svg", control_panel)):
            _write(out / name, svg.render([panel]))
            written.append(out / name)
    return written


def _run_mpc_series(cfg: ExperimentConfig, stationary_cost: float, table=None):
    m = cfg.mpc
    table = table if table is not None else _table(cfg, max(m.horizons))
    results = {}
    for N in m.horizons:
        results[N] = mpc.monte_carlo(cfg.model, mpc.GridPolicy(table, N), m.x0, m.K_max,
                                     m.paths, seed=m.seed, stationary_cost=stationary_cost,
                                     workers=m.workers, keep_traces=(m.paths == 1))
    return results, table


def cmd_run_mpc(cfg: ExperimentConfig) -> List[Path]:
    """Monte-Carlo closed loop per horizon with cumulative and averaged cost curves."""
    out = Path(cfg.output.directory)
    table = _table(cfg, max(max(cfg.mpc.horizons), cfg.turnpike.N_long + 1))
    stat = _stationary(cfg, table)
    results, _ = _run_mpc_series(cfg, stat.stationary_cost, table)
    written = []
    for N, res in results.items():
        path = out / f"performance_N{N}.csv"
        _write(path, res.series.to_csv())
        written.append(path)
        if res.traces is not None:
            path = out / f"trace_N{N}.csv"
            _write(path, mpc.traces_csv(res.traces))
            written.append(path)
    if cfg.output.emit_svg:
        Ks = list(range(1, cfg.mpc.K_max + 1))
        if cfg.mpc.paths == 1:
            panel = svg.Panel("closed-loop state (single path)", "k", "x")
            for i, (N, res) in enumerate(results.items()):
                tr = res.traces[0]
                panel.lines.append(svg.Line(list(range(tr.K + 1)), tr.states.tolist(),
                                            _color(i), f"N={N}"))
            panels = [panel]
        else:
            cum = svg.Panel("cumulative cost", "K", "J_K")
            avg = svg.Panel("averaged cost", "K", "J_K / K")
            for i, (N, res) in enumerate(results.items()):
                cum.lines.append(svg.Line(Ks, res.series.cumulative.tolist(), _color(i), f"N={N}"))
                avg.lines.append(svg.Line(Ks, res.series.averaged.tolist(), _color(i), f"N={N}"))
            avg.hlines.append(svg.Line([Ks[0], Ks[-1]], [stat.stationary_cost] * 2, "#000"))
            panels = [cum, avg]
        _write(out / "performance.svg", svg.render(panels))
        written.append(out / "performance.svg")
    return written


def cmd_turnpike(cfg: ExperimentConfig) -> List[Path]:
    out = Path(cfg.output.directory)
    stat = _stationary(cfg)
    written = []
    profiles = []
    panel = svg.Panel("W1 distance to stationary law", "k", "distance")
    for i, N in enumerate(cfg.turnpike.horizons):
        prof = turnpike.turnpike_profile(cfg.model, cfg.mpc.x0, N, stat,
                                         cfg.turnpike.thresholds, **_solve_opts(cfg))
        profiles.append(prof)
        path = out / f"turnpike_N{N}.csv"
        _write(path, prof.to_csv())
        written.append(path)
        panel.lines.append(svg.Line(list(range(N + 1)), prof.distances.tolist(), _color(i),
                                    f"N={N}"))
    summary = {"stationary_cost": stat.stationary_cost,
               "estimators": {"mid_horizon": stat.provenance["mid_horizon_estimate"],
                              "marginal_value": stat.provenance["marginal_estimate"]},
               "estimate_note": "stationary law and cost are estimates",
               "thresholds": list(cfg.turnpike.thresholds),
               "counts": {str(p.horizon): list(p.exceptional_counts) for p in profiles}}
    _write(out / "turnpike_summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    written.append(out / "turnpike_summary.json")
    if cfg.output.emit_svg:
        _write(out / "turnpike.svg", svg.render([panel]))
        written.append(out / "turnpike.svg")
    return written


def build_report(cfg: ExperimentConfig) -> dict:
    """Collect the headline quantities of every experiment into one dict."""
    m, tp = cfg.mpc, cfg.turnpike
    N_dp = max(max(m.horizons), tp.N_long + 1, 10)
    table = _table(cfg, N_dp)
    stat = _stationary(cfg, table)

    oracle = {}
    for N in range(1, 11):
        v_tree = _solve(cfg, m.x0, N).value
        v_dp = float(table.value(m.x0, N))
        oracle[str(N)] = {"tree": v_tree, "dp": v_dp, "relative_gap": abs(v_tree - v_dp) / v_dp}

    dpp_max = 0.0
    for N in range(1, 11):
        for M in range(1, N + 1):
            for x in (1.0, 3.0, 5.0):
                r = grid_dp.dpp_residual(cfg.model, table, x, M, N)
                dpp_max = max(dpp_max, r / float(table.value(x, N)))

    counts = {}
    for N in tp.horizons:
        prof = turnpike.turnpike_profile(cfg.model, m.x0, N, stat, tp.thresholds,
                                         **_solve_opts(cfg))
        counts[str(N)] = list(prof.exceptional_counts)

    results, _ = _run_mpc_series(cfg, stat.stationary_cost, table)
    perf = performance.averaged_performance({N: r.series for N, r in results.items()}, stat)
    N_last = max(m.horizons)
    K_eq = min(50, m.K_max)
    ens = mpc.run_algorithm1(cfg.model, mpc.GridPolicy(table, N_last), m.x0, K_eq,
                             support_cap=m.support_cap)
    s = results[N_last].series
    dev = np.abs(ens.cumulative() - s.cumulative[:K_eq])
    inside = bool(np.all(dev <= np.nan_to_num(s.ci_halfwidth[:K_eq]) + 1e-9 * ens.cumulative()))
    ref_h = tp.N_long
    K_ot = max(1, min(8, ref_h - N_last))
    margin = performance.overtaking_comparison(
        cfg.model, m.x0, N_last, K_ot, ref_h, perf.horizons[N_last].delta_estimate, table=table,
        **_solve_opts(cfg))
    return {
        "stationary": {"stationary_cost": stat.stationary_cost, **stat.provenance,
                       "note": "stationary law and cost are estimates"},
        "oracle_equivalence": oracle,
        "dpp_residual_max_relative": dpp_max,
        "turnpike_counts": {"thresholds": list(tp.thresholds), "counts": counts},
        "performance": perf.to_dict(),
        "algorithm_equivalence": {"N": N_last, "K": K_eq, "merge_loss": ens.merge_loss,
                                  "exact_cumulative": ens.cumulative().tolist(),
                                  "inside_ci": inside},
        "overtaking": {"N_mpc": N_last, "reference_horizon": ref_h,
                       "margin": margin.tolist()},
        "clamp_events": table.clamp_events,
        "config": {"model": cfg.model_block, "solver": asdict(cfg.solver),
                   "mpc": asdict(cfg.mpc), "turnpike": asdict(cfg.turnpike)},
    }


def cmd_report(cfg: ExperimentConfig) -> List[Path]:
    out = Path(cfg.output.directory)
    report = build_report(cfg)
    path = out / "report.json"
    _write(path, json.dumps(report, sort_keys=True, indent=2) + "\n")
    return [path]


COMMANDS = {"solve-ocp": cmd_solve_ocp, "run-mpc": cmd_run_mpc,
            "turnpike": cmd_turnpike, "report": cmd_report}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="smpc", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--seed", type=int, help="override mpc.seed")
    parser.add_argument("--out", help="override output.directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("--seed: must be an unsigned 64-bit integer")
            cfg.mpc.seed = args.seed
        if args.out is not None:
            cfg.output.directory = args.out
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            written = COMMANDS[args.command](cfg)
    except (scenario.NotConverged, scenario.NodeCapExceeded) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
