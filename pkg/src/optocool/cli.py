"""Command line interface: optocool simulate|sweep|reproduce|check.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .io import (dumps_json, provenance_line, write_fit_json, write_spectrum_csv, write_table,
                 write_trace_csv, write_trajectory)
from .model import (coupling_rate_gN, ground_state_feasible, hybrid_cooperativity,
                    sympathetic_rate_from_params)
from .pipeline import SWEEP_COLUMNS, run_and_analyze, sweep_point
from .scenario import ScenarioError, bundled_scenario_path, load_scenario
from .sim import SimulationDiverged, Trajectory

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class NumericalFailure(RuntimeError):
    """A run finished but its results failed a required check."""


def _err(msg):
    print(f"optocool: error: {msg}", file=sys.stderr)


def resolve_scenario(arg):
    """Load a scenario from a path, or a bundled one by bare name."""
    path = Path(arg)
    if not path.exists() and os.sep not in arg and not arg.endswith(".scenario"):
        path = bundled_scenario_path(arg)
    return load_scenario(path)


def max_workers(n_tasks):
    env = os.environ.get("OPTOCOOL_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(int(env), 1)
        except ValueError:
            raise ScenarioError(f"OPTOCOOL_THREADS must be an integer, got {env!r}") from None
    return max(min(cap, n_tasks), 1)


def _thinned(traj: Trajectory, stride):
    if stride <= 1:
        return traj
    extra = {}
    if traj.x_a is not None:
        extra = dict(x_a=traj.x_a[::stride].copy(), v_a=traj.v_a[::stride].copy())
    return Trajectory(traj.dt * stride, traj.x[::stride].copy(), traj.v[::stride].copy(),
                      traj.y[::stride].copy(), t0=traj.t0,
                      metadata=dict(traj.metadata, export_stride=stride), **extra)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(scenario, out_dir, seed=None):
    """Simulate ``scenario``, analyse it and write the exports to ``out_dir``."""
    sc = resolve_scenario(scenario)
    if seed is not None:
        sc = sc.with_seed(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance_line(sc.sha256)
    t0 = time.perf_counter()
    traj, res = run_and_analyze(sc)
    runtime = time.perf_counter() - t0
    stride = int(sc.analysis.get("export_stride", 1))
    write_trajectory(_thinned(traj, stride), out / "trajectory.otr")
    write_spectrum_csv(res.spectrum, out / "spectrum_inloop.csv", provenance=prov)
    write_spectrum_csv(res.spectrum_x, out / "spectrum_x.csv", provenance=prov)
    if res.trace is not None:
        write_trace_csv(res.trace, out / "zero_span.csv", provenance=prov)
    if res.inloop_fit is not None:
        write_fit_json(res.inloop_fit, out / "fit_inloop.json")
    if res.cooldown_fit is not None:
        write_fit_json(res.cooldown_fit, out / "fit_cooldown.json")
    summary = dict(res.summary, runtime_s=runtime, seed=sc.sim.seed, scenario_sha256=sc.sha256,
                   version=__version__)
    (out / "summary.json").write_text(dumps_json(summary) + "\n")
    print(f"steady-state band temperature: {res.summary['t_band']:.6g} K "
          f"(variance: {res.summary['t_mode']:.6g} K)")
    if "g_v_fit" in res.summary:
        print(f"in-loop fit: g_v = {res.summary['g_v_fit']:.6g}, "
              f"T_final = {res.summary['t_final']:.6g} K, n = {res.summary['n_mean']:.4g}")
    if "cooldown_g_fit" in res.summary:
        print(f"cooldown fit: g = {res.summary['cooldown_g_fit']:.6g} "
              f"(set {res.summary['cooldown_g_expected']:.6g})")
    print(f"runtime: {runtime:.2f} s, outputs in {out}")
    return EXIT_OK


def _parse_values(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ScenarioError(f"--values must be a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise ScenarioError("--values is empty")
    return vals


def cmd_sweep(scenario, param, values, out_dir, seed=None):
    """Run the simulate-and-fit chain for every value of ``param``; one CSV row per point."""
    sc = resolve_scenario(scenario)
    if seed is not None:
        sc = sc.with_seed(seed)
    vals = _parse_values(values) if isinstance(values, str) else [float(v) for v in values]
    for v in vals:
        sc.with_value(param, v)  # validates key and value before any work
    base = sc.sim.seed
    seeds = [base ^ i for i in range(len(vals))]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = max_workers(len(vals))
    t0 = time.perf_counter()
    if workers == 1:
        rows = [sweep_point(sc, param, v, s) for v, s in zip(vals, seeds)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(sweep_point, [sc] * len(vals), [param] * len(vals), vals, seeds))
    write_table(out / "sweep.csv", SWEEP_COLUMNS, rows,
                comments=[f"param={param}", f"seed={base}"], provenance=provenance_line(sc.sha256))
    print(",".join(SWEEP_COLUMNS))
    for r in rows:
        print(",".join(f"{v:.6g}" for v in r))
    print(f"{len(rows)} points in {time.perf_counter() - t0:.1f} s, outputs in {out}")
    return EXIT_OK


def check_report(sc):
    """Feasibility numbers for a scenario and the improvement projections."""
    p, d = sc.membrane, sc.detection
    feasible, margin = ground_state_feasible(p, d)
    rep = dict(x_zp=p.x_zp, n_th=p.n_th, s_xn=d.s_xn, ground_state_feasible=feasible,
               ground_state_margin=margin)

    def coop(pp, aa):
        return hybrid_cooperativity(coupling_rate_gN(aa, pp), aa.gamma_a, pp.gamma_m)

    upgraded = replace(p, gamma_m=p.gamma_m / 10, mass=p.mass / 10)
    up_feasible, up_margin = ground_state_feasible(upgraded, d)
    what_if = [dict(change="Q x10, m /10", margin=up_margin, margin_ratio=up_margin / margin
                    if margin not in (0, math.inf) else math.nan, feasible=up_feasible)]
    if sc.atoms is not None:
        a = sc.atoms
        g_n = coupling_rate_gN(a, p)
        c = coop(p, a)
        rep.update(g_n=g_n, gamma_sym=sympathetic_rate_from_params(a, p), c_hybrid=c,
                   strong_coupling=c > p.n_th, c_over_n_th=c / p.n_th)
        c_up = coop(upgraded, a)
        what_if[0].update(c_hybrid=c_up, c_ratio=c_up / c)
        a_f = replace(a, finesse=850.0)
        c_f = coop(p, a_f)
        what_if.append(dict(change=f"finesse {a.finesse:g} -> 850", c_hybrid=c_f,
                            c_ratio=c_f / c))
        c_both = coop(upgraded, a_f)
        what_if.append(dict(change="both", c_hybrid=c_both, c_ratio=c_both / c,
                            strong_coupling=c_both > upgraded.n_th, margin=up_margin,
                            feasible=up_feasible))
    rep["what_if"] = what_if
    return rep


def cmd_check(scenario, out_dir=None):
    """Print the ground-state and strong-coupling feasibility report."""
    sc = resolve_scenario(scenario)
    rep = check_report(sc)
    verdict = "feasible" if rep["ground_state_feasible"] else "infeasible"
    print(f"ground state: {verdict}, margin S_bound/S_xn = {rep['ground_state_margin']:.4g}")
    print(f"n_th = {rep['n_th']:.4g}, x_zp = {rep['x_zp']:.4g} m")
    if "c_hybrid" in rep:
        regime = "strong" if rep["strong_coupling"] else "weak"
        print(f"g_N = {rep['g_n']:.6g} rad/s, Gamma_sym = {rep['gamma_sym']:.6g} 1/s, "
              f"C_hybrid = {rep['c_hybrid']:.6g} ({regime} coupling, C/n_th = "
              f"{rep['c_over_n_th']:.3g})")
    print("what-if:")
    for row in rep["what_if"]:
        parts = [row["change"]]
        if "c_ratio" in row:
            parts.append(f"C_hybrid x{row['c_ratio']:.6g} -> {row['c_hybrid']:.6g}")
        if "margin" in row:
            parts.append(f"margin {row['margin']:.4g} ({'feasible' if row['feasible'] else 'infeasible'})")
        print("  " + "; ".join(parts))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "check.json").write_text(dumps_json(dict(rep, scenario_sha256=sc.sha256)) + "\n")
    return EXIT_OK


def cmd_reproduce(figure_id, out_dir, seed=None):
    """Regenerate the data of one figure and run its shape assertions."""
    from .figures import FIGURES, NOT_REPRODUCED, reproduce
    if figure_id not in FIGURES:
        raise ScenarioError(f"unknown figure {figure_id!r}; choose from {', '.join(FIGURES)}")
    result = reproduce(figure_id, out_dir, seed=seed)
    for name, ok, detail in result["assertions"]:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if not all(ok for _, ok, _ in result["assertions"]):
        raise NumericalFailure(f"figure {figure_id}: shape assertions failed")
    for item in NOT_REPRODUCED:
        print(f"not reproduced at desk scale: {item}")
    print(f"figure {figure_id} data in {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _err(message)
        raise SystemExit(EXIT_INPUT)


def build_parser():
    ap = _Parser(prog="optocool", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"optocool {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate", help="simulate one scenario and analyse it")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s = sub.add_parser("sweep", help="sweep one numeric scenario field")
    s.add_argument("--scenario", required=True)
    s.add_argument("--param", required=True, help="dotted key, e.g. feedback.gain_v")
    s.add_argument("--values", required=True, help="comma-separated values (file units)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s = sub.add_parser("reproduce", help="regenerate one figure's data")
    s.add_argument("--figure", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s = sub.add_parser("check", help="ground-state and coupling feasibility report")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.scenario, args.out, args.seed)
        if args.command == "sweep":
            return cmd_sweep(args.scenario, args.param, args.values, args.out, args.seed)
        if args.command == "reproduce":
            return cmd_reproduce(args.figure, args.out, args.seed)
        return cmd_check(args.scenario, args.out)
    except ScenarioError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except OSError as exc:
        _err(f"{exc.strerror or exc}: {exc.filename or ''}")
        return EXIT_INPUT
    except SimulationDiverged as exc:
        _err(f"simulation diverged: {exc}")
        return EXIT_NUMERIC
    except (NumericalFailure, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
