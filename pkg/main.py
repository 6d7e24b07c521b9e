import argparse
import hashlib
import json
import sys
from pathlib import Path

from loguru import logger

from config import (
    CURVES_FILE,
    MANIFEST_FILE,
    STABILITY_FILE,
    SUMMARY_FILE,
    SWEEP_FILE,
    TABLE2_FILE,
    load_configuration,
)
from errors import BtlTrackError, ConfigError, DegenerateRule
from experiment import (
    INTENSITY_SWEEP,
    KAPPA_SWEEP,
    TABLE2_INTENSITIES,
    load_experiment,
    sweep_configs,
    table2_variants,
    with_intensity,
)
from harness import ExperimentConfig, McReport, run_mc
from reporting import (
    STABILITY_COLUMNS,
    curve_rows,
    report_header,
    summary_rows,
    write_manifest,
    write_results,
    write_stability,
)
from rules import RuleKind, RuleSpec, create_rule

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

DEFAULT_TABLE2_CONFIG = Path(__file__).parent / "configs" / "table2.toml"


def parse_range(text: str, name: str) -> list[int]:
    """Parses 'a:b' (inclusive) or a comma-separated list of integers."""
    try:
        if ":" in text:
            start, stop = (int(part) for part in text.split(":", 1))
            values = list(range(start, stop + 1))
        else:
            values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"Cannot parse {text!r}: {e}", field=name) from e
    if not values:
        raise ConfigError(f"{text!r} is empty.", field=name)
    return values


def parse_values(text: str | None, defaults, name: str) -> list[float]:
    if text is None:
        return list(defaults)
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"Cannot parse {text!r}: {e}", field=name) from e


def setup_logging(level: str, verbose: bool):
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else level)


def resolve_seed(args, config) -> int | None:
    """--seed wins over BTLTRACK_SEED, which wins over the experiment file."""
    if args.seed is not None:
        return args.seed
    if config['SEED'] is not None:
        logger.info(f"Using seed {config['SEED']} from BTLTRACK_SEED")
    return config['SEED']


def load_from_args(args, config, default_path: Path | None = None) -> ExperimentConfig:
    path = args.config or default_path
    if path is None:
        raise ConfigError("An experiment file is required.", field="--config")
    return load_experiment(
        path,
        seed=resolve_seed(args, config),
        mc=args.mc,
        kappa=getattr(args, "kappa", None),
        iw=getattr(args, "iw", None),
        init=args.init,
    )


def check_divergence(reports: list[McReport], limit: float) -> int:
    worst = max(report.divergence_fraction() for report in reports)
    if worst > limit:
        logger.error(f"{worst:.1%} of replicas diverged for at least one variant (limit {limit:.1%}).")
        return EXIT_DIVERGENCE
    return EXIT_OK


def cmd_simulate(args, config) -> int:
    cfg = load_from_args(args, config)
    report = run_mc(cfg, args.threads)
    iw = cfg.primary_sensor.intensity
    out = Path(args.out)
    header = report_header(report)
    write_results(out / SUMMARY_FILE, header, summary_rows(report, iw))
    write_results(out / CURVES_FILE, header, curve_rows(report, iw))
    write_manifest(
        out / MANIFEST_FILE,
        {
            "command": "simulate",
            "config_path": str(args.config) if args.config else None,
            "config": cfg.to_dict(),
            "config_hash": report.config_hash,
            "seed": cfg.seed,
            "streams_digests": [report.streams_digest],
            "outputs": [SUMMARY_FILE, CURVES_FILE],
        },
    )
    for name, summary in report.summaries.items():
        logger.info(f"{name:<28} time-avg RMSE {summary.time_avg_rmse:9.4f} m  pooled {summary.pooled_rmse:9.4f} m")
    return check_divergence([report], cfg.max_divergence_fraction)


def _run_points(points: list[tuple[float, ExperimentConfig]], threads: int) -> tuple[list[McReport], list[dict]]:
    reports, rows = [], []
    for value, cfg in points:
        logger.info(f"Sweep point {value:g}")
        report = run_mc(cfg, threads)
        reports.append(report)
        rows += summary_rows(report, cfg.primary_sensor.intensity)
    return reports, rows


def _write_batch(args, command: str, base: ExperimentConfig, reports: list[McReport], rows, filename: str, extra: dict):
    out = Path(args.out)
    header = {"config_hash": base.config_hash(), "seed": base.seed, "mc_runs": base.mc_runs, "k_steps": base.k_steps, **extra}
    write_results(out / filename, header, rows)
    write_manifest(
        out / MANIFEST_FILE,
        {
            "command": command,
            "config_path": str(args.config) if args.config else None,
            "config": base.to_dict(),
            "config_hash": base.config_hash(),
            "seed": base.seed,
            "streams_digests": [r.streams_digest for r in reports],
            "outputs": [filename],
        },
    )


def cmd_sweep(args, config) -> int:
    base = load_from_args(args, config)
    defaults = KAPPA_SWEEP if args.sweep == "kappa" else INTENSITY_SWEEP
    values = parse_values(args.values, defaults, "--values")
    points = sweep_configs(base, args.sweep, values)
    reports, rows = _run_points(points, args.threads)
    _write_batch(args, "sweep", base, reports, rows, SWEEP_FILE, {"sweep": args.sweep})
    return check_divergence(reports, base.max_divergence_fraction)


def cmd_table2(args, config) -> int:
    base = load_from_args(args, config, DEFAULT_TABLE2_CONFIG).replace(variants=table2_variants())
    intensities = [args.iw] if args.iw is not None else list(TABLE2_INTENSITIES)
    points = [(iw, with_intensity(base, iw)) for iw in intensities]
    reports, rows = _run_points(points, args.threads)
    _write_batch(args, "table2", base, reports, rows, TABLE2_FILE, {})
    return check_divergence(reports, base.max_divergence_fraction)


def stability_rows(kinds: list[RuleKind], nx_values: list[int], kappas: list[int], alpha: float, check: bool) -> list[dict]:
    rows = []
    for kind in kinds:
        for n_x in nx_values:
            for kappa in kappas if kind is RuleKind.UT else [None]:
                try:
                    rule = create_rule(RuleSpec(kind, n_x, alpha=alpha, kappa=kappa))
                except DegenerateRule as e:
                    raise ConfigError(str(e), field="--kappa-range") from e
                row = {
                    "rule": kind.value,
                    "n_x": n_x,
                    "alpha": float(alpha) if kind is RuleKind.UT else None,
                    "kappa": float(kappa) if kind is RuleKind.UT else None,
                    "stability": rule.stability_measure(),
                }
                if check:
                    row["brute_force"] = rule.absolute_weight_sum()
                    if abs(row["brute_force"] - row["stability"]) > 1e-12:
                        logger.warning(f"{rule}: closed form {row['stability']!r} != weight sum {row['brute_force']!r}")
                rows.append(row)
    return rows


def cmd_stability(args, config) -> int:
    kinds = [RuleKind(args.rule)] if args.rule else list(RuleKind)
    nx_values = parse_range(args.nx_range, "--nx-range")
    kappas = parse_range(args.kappa_range, "--kappa-range")
    rows = stability_rows(kinds, nx_values, kappas, args.alpha, args.check)
    grid = {"rules": [k.value for k in kinds], "n_x": nx_values, "kappa": kappas, "alpha": args.alpha}
    grid_hash = hashlib.sha256(json.dumps(grid, sort_keys=True).encode("utf-8")).hexdigest()

    columns = STABILITY_COLUMNS + (("brute_force",) if args.check else ())
    out = Path(args.out)
    write_stability(out / STABILITY_FILE, {"config_hash": grid_hash}, rows, columns)
    write_manifest(
        out / MANIFEST_FILE,
        {"command": "stability", "config": grid, "config_hash": grid_hash, "seed": None, "outputs": [STABILITY_FILE]},
    )
    return EXIT_OK


def build_parser(config) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Benchmark sigma-point and cubature filters with and without Bayesian transfer learning."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="Experiment TOML file.")
    common.add_argument("-s", "--seed", type=int, help="Root seed (unsigned 64-bit); overrides BTLTRACK_SEED.")
    common.add_argument("--mc", type=int, help="Number of Monte Carlo replicas.")
    common.add_argument("--init", choices=["exact", "sampled"], help="Initial estimate: x0 or a draw from N(x0, P0).")
    common.add_argument("-t", "--threads", type=int, default=config['THREADS'], help="Worker processes for replicas.")
    common.add_argument("-o", "--out", default=config['OUT_DIRECTORY'], help="Output directory.")

    simulate = subparsers.add_parser("simulate", parents=[common], help="Run one experiment file.")
    simulate.add_argument("--kappa", type=float, help="Override kappa of every UKF variant.")
    simulate.add_argument("--iw", type=float, help="Override the primary sensor noise intensity.")
    simulate.set_defaults(handler=cmd_simulate)

    sweep = subparsers.add_parser("sweep", parents=[common], help="Repeat an experiment over kappa or intensity values.")
    sweep.add_argument("--sweep", choices=["kappa", "intensity"], required=True)
    sweep.add_argument(
        "--values",
        help="Comma-separated sweep values (default: kappa -2..10 or intensity 0.5..8). Write negative lists as --values=-2,6.",
    )
    sweep.add_argument("--kappa", type=float, help="Override kappa of every UKF variant (intensity sweeps).")
    sweep.add_argument("--iw", type=float, help="Override the primary noise intensity (kappa sweeps).")
    sweep.set_defaults(handler=cmd_sweep)

    table2 = subparsers.add_parser("table2", parents=[common], help="Every UKF/CKF3/CKF5 x isolated/MVF/BTLF cell.")
    table2.add_argument("--iw", type=float, help="Run a single intensity instead of 1, 4 and 8.")
    table2.set_defaults(handler=cmd_table2)

    stability = subparsers.add_parser("stability", help="Stability measure (sum of |weights|) over a parameter grid.")
    stability.add_argument("--rule", choices=[k.value for k in RuleKind], help="Single rule (default: all).")
    stability.add_argument("--nx-range", default="3:8", help="State dimensions, 'a:b' inclusive or 'a,b,c'.")
    stability.add_argument(
        "--kappa-range", default="-2:10", help="UKF kappa values, 'a:b' inclusive or 'a,b,c'; use --kappa-range=-2:10 form."
    )
    stability.add_argument("--alpha", type=float, default=1.0)
    stability.add_argument("--check", action="store_true", help="Also sum |W_j| over the generated weights.")
    stability.add_argument("-o", "--out", default=config['OUT_DIRECTORY'], help="Output directory.")
    stability.set_defaults(handler=cmd_stability)
    return parser


def main(argv=None) -> int:
    try:
        config = load_configuration()
    except ValueError as e:
        logger.error(f"Invalid environment: {e}")
        return EXIT_CONFIG

    args = build_parser(config).parse_args(argv)
    setup_logging(config['LOG_LEVEL'], args.verbose)

    try:
        code = args.handler(args, config)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DegenerateRule as e:
        logger.error(f"Degenerate rule: {e}")
        return EXIT_CONFIG
    except BtlTrackError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1

    if code == EXIT_OK:
        logger.success(f"{args.command} completed")
    return code


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
