"""Command-line pipeline: simulate, fuse, report, or all three chained.

Exit codes: 0 success, 2 configuration error, 3 malformed or inconsistent
data file, 4 evaluation error, 1 anything unexpected. One summary line per
invocation goes to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from importlib import resources
from pathlib import Path

from .ekf import run_filter
from .evaluation import (
    EvaluationError,
    compute_errors,
    export_csv,
    read_log_csv,
    render_plots,
    write_log_csv,
    write_report_json,
)
from .scenario import (
    ConfigError,
    DataError,
    ScenarioConfig,
    load_config,
    read_events_csv,
    read_truth_csv,
    run_scenario,
    write_events_csv,
    write_scan_archive,
    write_truth_csv,
)

logger = logging.getLogger(__name__)

PRESET_NAMES = (
    "straight_degenerate",
    "loop_nominal",
    "loop_lidar_outage",
    "loop_thermal_only",
    "loop_both_outage",
)


def _resolve_config(spec: str, seed: int | None) -> ScenarioConfig:
    """Load a config from a path or a packaged preset name."""
    path = Path(spec)
    if path.exists():
        config = load_config(path)
    elif spec in PRESET_NAMES:
        ref = resources.files("tunnelfusion").joinpath(f"scenarios/{spec}.json")
        with resources.as_file(ref) as real:
            config = load_config(real)
    else:
        raise ConfigError(
            f"config {spec!r} is neither a readable file nor one of the presets "
            f"{', '.join(PRESET_NAMES)}"
        )
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    return config


def _parse_rays(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    parts = text.lower().split("x")
    try:
        nh, nv = (int(p) for p in parts)
        if nh < 1 or nv < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--rays expects HxV with positive integers, got {text!r}") from None
    return nh, nv


def cmd_simulate(args: argparse.Namespace) -> str:
    config = _resolve_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keep_scans = not args.no_scan_archive
    result = run_scenario(config, rays=_parse_rays(args.rays), keep_scans=keep_scans)
    write_truth_csv(result.truth, out / "ground_truth.csv")
    write_events_csv(result.events, out / "events.csv")
    archived = 0
    if keep_scans and result.scans is not None:
        write_scan_archive(result.scans, out / "scans")
        archived = len(result.scans)
    logger.info("simulated %s into %s", config.name, out)
    return (
        f"{config.name}: {len(result.truth)} truth samples, "
        f"{len(result.events)} events, {archived} scans archived"
    )


def cmd_fuse(args: argparse.Namespace) -> str:
    config = _resolve_config(args.config, args.seed)
    events = read_events_csv(args.events)
    trajectory = config.build_trajectory(config.build_tunnel_map())
    log = run_filter(
        events,
        trajectory.state_at(0.0),
        config.initial_cov(),
        ts_max=config.filter.ts_max,
        params=config.process_params(),
        t_end=config.trajectory.duration_s,
    )
    records = log.records()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_log_csv(records, out / "trajectory.csv")
    corrections = sum(1 for r in records if r.source is not None)
    logger.info("fused %d events from %s", len(events), args.events)
    return f"{config.name}: {len(records)} log records, {corrections} corrections"


def cmd_report(args: argparse.Namespace) -> str:
    records = read_log_csv(args.log)
    truth = read_truth_csv(args.truth)
    report = compute_errors(records, truth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out / "report.json")
    export_csv(records, truth, out / "errors.csv")
    render_plots(report, records, truth, out)
    name = args.name if args.name else Path(args.log).resolve().parent.name
    logger.info("report artifacts written to %s", out)
    return (
        f"{name}: position RMSE {report.position_rmse:.3f} m, "
        f"max {report.max_position_error:.3f} m"
    )


def cmd_run(args: argparse.Namespace) -> str:
    out = Path(args.out)
    cmd_simulate(args)
    fuse_args = argparse.Namespace(
        config=args.config, seed=args.seed, events=str(out / "events.csv"), out=args.out
    )
    cmd_fuse(fuse_args)
    config = _resolve_config(args.config, args.seed)
    report_args = argparse.Namespace(
        log=str(out / "trajectory.csv"),
        truth=str(out / "ground_truth.csv"),
        out=args.out,
        name=config.name,
    )
    return cmd_report(report_args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tunnelfusion",
        description="Simulate a tunnel run, fuse LiDAR/thermal odometry, and report errors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="config JSON path or preset name")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    def add_sim_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--no-scan-archive", action="store_true", help="skip the PLY scan dump")
        p.add_argument("--rays", default=None, metavar="HxV", help="override the LiDAR ray grid")

    p_sim = sub.add_parser("simulate", help="render scans and produce truth + event stream")
    add_config_flags(p_sim)
    p_sim.add_argument("--out", required=True, help="output directory")
    add_sim_flags(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_fuse = sub.add_parser("fuse", help="run the filter over an event stream")
    add_config_flags(p_fuse)
    p_fuse.add_argument("--events", required=True, help="events CSV path")
    p_fuse.add_argument("--out", required=True, help="output directory")
    p_fuse.set_defaults(func=cmd_fuse)

    p_rep = sub.add_parser("report", help="compare a filter log against ground truth")
    p_rep.add_argument("--log", required=True, help="trajectory CSV path")
    p_rep.add_argument("--truth", required=True, help="ground truth CSV path")
    p_rep.add_argument("--out", required=True, help="output directory")
    p_rep.add_argument("--name", default=None, help="scenario name for the summary line")
    p_rep.set_defaults(func=cmd_report)

    p_run = sub.add_parser("run", help="simulate, fuse and report in one go")
    add_config_flags(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    add_sim_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 - the CLI must not traceback on bad inputs
        logger.exception("unexpected failure")
        print(f"unexpected error: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
