"""Command line entry point: ``hiddendrift <command> --config scenario.yaml``.

Every command writes its results under ``--out`` and exits with status 0
only when all of its checks pass. Configuration or compatibility problems
exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .harness import (IDENTITIES, Scenario, ScenarioError, convergence_study, make_filter, run_replication,
                      run_scenario, verify_identity, write_json)
from .filters import KalmanBucyFilter, export_riccati_csv
from .market import iter_bundles

ORDER_BAND = (0.8, 1.2)


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for key in sorted(obj):
            yield from _flatten(obj[key], f"{prefix}{key}.")
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}{i}.")
        return
    yield prefix.rstrip("."), obj


def write_report(report: dict, out: Path, stem: str, fmt: str) -> Path:
    """Write ``report`` as pretty JSON or as ``key,value`` CSV rows."""
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = out / f"{stem}.json"
        write_json(report, path)
        return path
    path = out / f"{stem}.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for key, val in _flatten(report):
            w.writerow([key, repr(val) if isinstance(val, float) else val])
    return path


def _scenario(args) -> Scenario:
    cfg = load_config(args.config)
    return Scenario.from_config(cfg, seed=args.seed, dt=args.dt, n_paths=args.paths)


def _print_checks(checks: dict) -> bool:
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(checks.values())


def cmd_simulate(args, s: Scenario, out: Path) -> dict:
    rows = 0
    for i, b in enumerate(iter_bundles(s.market, s.dt, s.n_paths, s.seed, measure=args.measure,
                                       chunk_size=s.chunk_size)):
        b.save(out / f"paths_{b.path_offset:08d}.hdpb")
        if args.format == "csv":
            target = out / "paths.csv"
            part = out / "paths.part"
            b.to_csv(part)
            text = part.read_text(encoding="utf-8")
            part.unlink()
            with open(target, "w" if i == 0 else "a", encoding="utf-8") as fh:
                fh.write(text if i == 0 else text.split("\n", 1)[1])
        rows += b.n_paths
    report = {"command": "simulate", "version": __version__, "config_hash": s.config_hash, "seed": s.seed,
              "dt": s.dt, "n_paths": rows, "measure": args.measure}
    write_report(report, out, "simulate", "json")
    return {}


def cmd_filter(args, s: Scenario, out: Path) -> dict:
    filt = None
    finals = []
    for i, b in enumerate(iter_bundles(s.market, s.dt, s.n_paths, s.seed, chunk_size=s.chunk_size)):
        if filt is None:
            filt = make_filter(s).fit(b)
            if isinstance(filt, KalmanBucyFilter) and filt.cov_ is not None:
                export_riccati_csv(filt.times_, filt.cov_, out / "riccati.csv")
        trace = filt.trace(b)
        finals.append(trace.ahat[:, -1])
        if args.format == "csv":
            part = out / "filter.part"
            trace.to_csv(part, path_offset=b.path_offset)
            text = part.read_text(encoding="utf-8")
            part.unlink()
            with open(out / "filter.csv", "w" if i == 0 else "a", encoding="utf-8") as fh:
                fh.write(text if i == 0 else text.split("\n", 1)[1])
    a_T = np.concatenate(finals)
    report = {"command": "filter", "version": __version__, "config_hash": s.config_hash, "seed": s.seed,
              "filter": type(filt).__name__, "terminal_estimate_mean": a_T.mean(axis=0).tolist(),
              "terminal_estimate_std": a_T.std(axis=0, ddof=1).tolist()}
    write_report(report, out, "filter", "json")
    return {}


def cmd_optimize(args, s: Scenario, out: Path) -> dict:
    report = run_scenario(s, out)
    write_report(report, out, "optimize", args.format)
    checks = {}
    if "budget" in report:
        checks["budget"] = report["budget"]["passed"]
    form = report.get("expected_utility_formula")
    if form is not None and "se" in form:
        eu = report["expected_utility"]
        checks["expected_utility_formula"] = abs(eu["mean"] - form["mean"]) <= 3 * np.hypot(eu["se"], form["se"])
    return checks


def cmd_replicate(args, s: Scenario, out: Path) -> dict:
    report = run_replication(s, out)
    write_report(report, out, "replicate", args.format)
    return report["checks"]


def cmd_verify(args, s: Scenario, out: Path) -> dict:
    names = args.identity or (s.config or {}).get("verify") or list(IDENTITIES)
    results = [verify_identity(n, s) for n in names]
    report = {"command": "verify", "version": __version__, "config_hash": s.config_hash, "seed": s.seed,
              "results": [r.to_dict() for r in results]}
    write_report(report, out, "verify", args.format)
    return {r.name: r.passed for r in results}


def cmd_converge(args, s: Scenario, out: Path) -> dict:
    conv = (s.config or {}).get("converge", {})
    kind = args.kind or conv.get("kind", "log_replication")
    levels = conv.get("levels", [s.dt * 4, s.dt * 2, s.dt])
    table = convergence_study(s, levels, kind)
    table.to_csv(out / "convergence.csv")
    report = {"command": "converge", "version": __version__, "config_hash": s.config_hash, "seed": s.seed,
              **table.to_dict()}
    write_report(report, out, "converge", "json" if args.format == "json" else "csv")
    if kind == "zero_strategy":
        return {"zero_strategy_exact": all(e.mean == 0.0 for e in table.errors)}
    return {f"order_{i}": o is not None and ORDER_BAND[0] <= o <= ORDER_BAND[1]
            for i, o in enumerate(table.orders)}


COMMANDS = {"simulate": cmd_simulate, "filter": cmd_filter, "optimize": cmd_optimize,
            "replicate": cmd_replicate, "verify": cmd_verify, "converge": cmd_converge}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="scenario file (.yaml, .yml or .json)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--dt", type=float, help="override the time step")
    common.add_argument("--paths", type=int, help="override the number of paths")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--format", choices=("csv", "json"), default="json", help="report format")
    parser = argparse.ArgumentParser(prog="hiddendrift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="simulate return paths")
    sim.add_argument("--measure", choices=("P", "Pstar"), default="P")
    sub.add_parser("filter", parents=[common], help="run the drift filter on simulated paths")
    sub.add_parser("optimize", parents=[common], help="trade the configured strategy and report")
    sub.add_parser("replicate", parents=[common], help="value and replicate the optimal claim via PDE")
    ver = sub.add_parser("verify", parents=[common], help="check statistical and pathwise identities")
    ver.add_argument("--identity", action="append", choices=IDENTITIES,
                     help="identity to check; repeatable (default: the config's list, else all)")
    con = sub.add_parser("converge", parents=[common], help="time-step refinement study")
    con.add_argument("--kind", choices=("log_replication", "power_replication", "zbar_two_forms",
                                        "zero_strategy"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        s = _scenario(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        checks = COMMANDS[args.command](args, s, out)
    except (ConfigError, ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if _print_checks(checks) else 1


if __name__ == "__main__":
    sys.exit(main())
