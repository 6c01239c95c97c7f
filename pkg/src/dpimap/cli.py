"""Batch front-end: single runs, parameter sweeps, and validation suites.

Results go out as CSV for external plotting; no graphics dependencies.
Exit codes: 0 on success, 1 when a validation suite fails, 2 on input or
configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import numpy as np

from .sim.config import ConfigError, SimConfig, SweepSpec, load_config
from .sim.core import run
from .validate import format_report, run_suite

RUN_COLUMNS = [
    "seed", "protocol", "num_uavs", "v_max",
    "latency_mean_ms", "latency_p90_ms", "hit_rate", "disturbance_rate",
    "mapping_accuracy", "ad_range_p90_m", "vd_range_p90_m", "fused_range_p90_m",
]
_METRIC_COLUMNS = RUN_COLUMNS[4:]

# Two-sided 90% point of the standard normal, for aggregate half-widths.
_Z90 = 1.6448536269514722


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return f"{float(value):.6g}"


def _run_row(cfg: SimConfig, record) -> list[str]:
    return [str(cfg.seed), cfg.protocol, str(int(cfg.num_uavs)), _fmt(cfg.v_max),
            _fmt(record.latency_mean_ms), _fmt(record.latency_p90_ms),
            _fmt(record.hit_rate), _fmt(record.disturbance_rate),
            _fmt(record.mapping_accuracy), _fmt(record.ad_range_p90_m),
            _fmt(record.vd_range_p90_m), _fmt(record.fused_range_p90_m)]


def _metric_values(record) -> list[float]:
    return [record.latency_mean_ms, record.latency_p90_ms, record.hit_rate,
            record.disturbance_rate, record.mapping_accuracy,
            record.ad_range_p90_m, record.vd_range_p90_m,
            record.fused_range_p90_m]


def _write_rows(output: Optional[str], header: list[str],
                rows: list[list[str]]) -> None:
    if output:
        with open(output, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_run(args) -> int:
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    record = run(cfg)
    _write_rows(args.output, RUN_COLUMNS, [_run_row(cfg, record)])
    return 0


def _sweep_cells(cfg: SimConfig, sweep: SweepSpec) -> list[tuple]:
    """Cross-product of the declared axes, falling back to the base config."""
    uav_axis = sweep.num_uavs or [cfg.num_uavs]
    v_axis = sweep.v_max or [cfg.v_max]
    proto_axis = sweep.protocol or [cfg.protocol]
    return list(itertools.product(uav_axis, v_axis, proto_axis))


def cmd_sweep(args) -> int:
    cfg, sweep = load_config(args.config)
    problems = sweep.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    if args.seed is not None:
        cfg.seed = args.seed

    cells = _sweep_cells(cfg, sweep)
    reps = sweep.repetitions
    total = len(cells) * reps
    if total > sweep.job_cap:
        raise ConfigError(
            f"sweep would launch {total} runs, exceeding the job cap of "
            f"{sweep.job_cap}")

    plain = not (sweep.num_uavs or sweep.v_max or sweep.protocol) and reps == 1

    # Deterministic per-run seeds: cell c always starts at base + c, and
    # repetitions stride by the cell count so no two runs share a seed.
    configs = []
    for rep in range(reps):
        for c, (n, v, proto) in enumerate(cells):
            configs.append(dataclasses.replace(
                cfg, num_uavs=n, v_max=v, protocol=proto,
                seed=cfg.seed + c + rep * len(cells)))
    for candidate in configs:
        problems = candidate.validate()
        if problems:
            raise ConfigError("; ".join(problems))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(run, configs))
    else:
        records = [run(c) for c in configs]

    if plain:
        _write_rows(args.output, RUN_COLUMNS, [_run_row(configs[0], records[0])])
        return 0

    by_cell = {}
    for c_cfg, record in zip(configs, records):
        key = (int(c_cfg.num_uavs), c_cfg.v_max, c_cfg.protocol)
        by_cell.setdefault(key, []).append((c_cfg, record))

    header = ["kind"] + RUN_COLUMNS + [c + "_hw90" for c in _METRIC_COLUMNS]
    rows = []
    for (n, v, proto) in cells:
        members = by_cell[(int(n), v, proto)]
        for c_cfg, record in members:
            rows.append(["run"] + _run_row(c_cfg, record)
                        + [""] * len(_METRIC_COLUMNS))
        values = np.array([_metric_values(r) for _, r in members])
        means = values.mean(axis=0)
        if len(members) > 1:
            hw = _Z90 * values.std(axis=0, ddof=1) / np.sqrt(len(members))
        else:
            hw = np.zeros(values.shape[1])
        rows.append(["agg", "", proto, str(int(n)), _fmt(float(v))]
                    + [_fmt(float(x)) for x in means]
                    + [_fmt(float(x)) for x in hw])
    _write_rows(args.output, header, rows)
    return 0


def cmd_validate(args) -> int:
    results = run_suite(args.suite)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpimap",
        description="Identity-mapping swarm simulator: run, sweep, validate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one seeded simulation")
    p_run.add_argument("--config", required=True, help="INI config file")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
    p_run.add_argument("--output", default=None,
                       help="CSV output path (default: stdout)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("--config", required=True, help="INI config file")
    p_sweep.add_argument("--seed", type=int, default=None,
                         help="override the base seed")
    p_sweep.add_argument("--output", default=None,
                         help="CSV output path (default: stdout)")
    p_sweep.add_argument("--jobs", type=int, default=1,
                         help="parallel worker processes")
    p_sweep.set_defaults(func=cmd_sweep)

    p_val = sub.add_parser("validate", help="run self-check suites")
    p_val.add_argument("suite", choices=("matcher", "filter", "all"))
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
