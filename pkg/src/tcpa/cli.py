"""Command-line front end: ``tcpa <subcommand> ...``.

Exit codes: 0 success, 1 validation or threshold failure, 2 usage error.
The default output directory is ``$TCPA_OUT`` (or ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import benches
from .engine import rows_to_csv, run, sweep, trace_text
from .scenario import ScenarioError, load_scenario, parse_value

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _out_dir(args) -> Path:
    path = Path(args.out or os.environ.get("TCPA_OUT") or "out")
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise OSError(f"output directory {path} is not writable")
    return path


def _read(path: str) -> str:
    p = Path(path)
    if not p.exists():
        # fall back to a shipped scenario by name
        try:
            return benches.scenario_text(p.name)
        except FileNotFoundError:
            raise FileNotFoundError(f"scenario file not found: {path}") from None
    return p.read_text()


def _write_rows(path: Path, rows: list, columns: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _finish(checks, strict: bool, always: bool) -> int:
    print(benches.format_checks(checks))
    bad = benches.failed(checks)
    if bad and (strict or always):
        print(f"{len(bad)} check(s) failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- subcommands -----------------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = load_scenario(_read(args.scenario), args.set, args.seed)
    metrics, trace = run(scenario, check_invariants=args.check)
    out = _out_dir(args)
    (out / "metrics.json").write_text(metrics.to_json())
    if args.trace:
        (out / "trace.txt").write_text(trace_text(trace))
    print(f"scenario {scenario.name}: {metrics.total_cycles} cycles, {len(metrics.apps)} app(s)")
    for app in metrics.apps.values():
        status = app.error or "ok"
        print(f"  app {app.app_id}: {app.strategy} granted {app.granted}/{app.requested} "
              f"latency {app.total_latency} retreat {app.retreat_latency} [{status}]")
    if metrics.energy is not None:
        e = metrics.energy
        print(f"  energy {e.e_total:.1f} vs always-on {e.e_baseline:.1f} "
              f"(savings {e.savings_fraction:.3f}, analytic error {e.estimate_error:.4f})")
    print(f"wrote {out / 'metrics.json'}" + (f" and {out / 'trace.txt'}" if args.trace else ""))
    if metrics.invariant_violations:
        print(f"{len(metrics.invariant_violations)} invariant violation(s); first: "
              f"{metrics.invariant_violations[0]}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ScenarioError(item, "grid entries look like path=[v1, v2, ...]")
        path, text = item.split("=", 1)
        values = parse_value(text.strip())
        if not isinstance(values, list):
            values = [values]
        grid[path.strip()] = values
    return grid


def cmd_sweep(args) -> int:
    text = _read(args.scenario)
    grid = _parse_grid(args.grid)
    rows = sweep(text, grid, workers=args.workers, base_seed=args.seed, overrides=args.set)
    out = _out_dir(args)
    csv_text = rows_to_csv(rows, list(grid))
    (out / "sweep.csv").write_text(csv_text)
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_speedup(args) -> int:
    sizes = tuple(args.sizes) if args.sizes else benches.SPEEDUP_SIZES
    rows, checks = benches.speedup_bench(args.set, sizes=sizes)
    print(benches.format_table(rows, benches.SPEEDUP_COLUMNS))
    _write_rows(_out_dir(args) / "speedup.csv", rows, benches.SPEEDUP_COLUMNS)
    return _finish(checks, args.strict, always=False)


def cmd_energy(args) -> int:
    rows, checks = benches.energy_bench(args.set)
    print(benches.format_table(rows, benches.ENERGY_COLUMNS))
    out = _out_dir(args)
    _write_rows(out / "energy.csv", rows, benches.ENERGY_COLUMNS)
    grows, gchecks = benches.grouping_bench(args.set)
    print()
    print(benches.format_table(grows, benches.GROUPING_COLUMNS))
    _write_rows(out / "grouping.csv", grows, benches.GROUPING_COLUMNS)
    return _finish(checks + gchecks, args.strict, always=True)


def cmd_ft(args) -> int:
    rows, checks = benches.ft_run(args.set, pairs=not args.no_pairs)
    print(benches.format_table(rows, benches.FT_COLUMNS))
    _write_rows(_out_dir(args) / "ft.csv", rows, benches.FT_COLUMNS)
    return _finish(checks, args.strict, always=True)


def cmd_validate(args) -> int:
    checks = benches.validate(fuzz_count=args.fuzz, seed=args.seed or 0)
    return _finish(checks, args.strict, always=True)


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcpa", description="Invasive processor-array simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=False):
        if scenario:
            sp.add_argument("scenario", help="scenario file (TOML) or the name of a shipped scenario")
        sp.add_argument("-o", "--out", help="output directory (default $TCPA_OUT or ./out)")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a scenario field, e.g. power.ictrl_domain_size=4")
        sp.add_argument("--seed", type=int, help="override rng_seed")
        sp.add_argument("--strict", action="store_true", help="nonzero exit on any threshold miss")

    sp = sub.add_parser("simulate", help="run one scenario")
    common(sp, scenario=True)
    sp.add_argument("--trace", action=argparse.BooleanOptionalAction, default=True, help="write trace.txt")
    sp.add_argument("--check", action="store_true", help="check invariants every cycle")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="run a scenario over a parameter grid")
    common(sp, scenario=True)
    sp.add_argument("--grid", action="append", metavar='PATH=[V1, V2]',
                    help='grid axis, e.g. power.ictrl_domain_size=[1, 4, "row"]')
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("speedup-bench", help="distributed vs. centralized claim latency")
    common(sp)
    sp.add_argument("--sizes", type=int, nargs="+", help="claim sizes (default 4 8 16 64 256)")
    sp.set_defaults(func=cmd_speedup)

    sp = sub.add_parser("energy-bench", help="power-gating savings and domain-grouping trade-off")
    common(sp)
    sp.set_defaults(func=cmd_energy)

    sp = sub.add_parser("ft-run", help="exhaustive fault sweep and voting-scheme coverage")
    common(sp)
    sp.add_argument("--no-pairs", action="store_true", help="skip the two-fault brute force")
    sp.set_defaults(func=cmd_ft)

    sp = sub.add_parser("validate", help="headless invariant and property checks")
    common(sp)
    sp.add_argument("--fuzz", type=int, default=300, help="number of random protocol scenarios")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
