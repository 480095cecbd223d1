"""Command line entry point: ``metamix {gen-data,run,suite,report}``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..episodes import EpisodeError, generate_synthetic, save_dataset
from ..metalearn import NumericalError
from .config import ConfigError, ExperimentConfig, field_names, load_config, parse_config
from .runner import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PARTIAL, resolve_output_dir, run_experiment
from .suite import ALGORITHMS, SUITES, aggregate_rows, read_runs, run_suite, suite_variants, write_suite_tables


class _Parser(argparse.ArgumentParser):
    # Usage errors are configuration errors; exit 2 is reserved for numerical failure.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for name in field_names():
        group.add_argument(f"--{name}", dest=f"ov:{name}", metavar="VALUE", default=None)


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    return {k[3:]: v for k, v in vars(args).items() if k.startswith("ov:") and v is not None}


def _config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        return load_config(args.config, _overrides(args))
    return parse_config("", "<defaults>", _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metamix", description="Few-shot meta-learning experiments with MetaMix.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic class-structured dataset")
    gen.add_argument("output", help="dataset file to write")
    gen.add_argument("--num-classes", type=int, default=25)
    gen.add_argument("--per-class", type=int, default=40)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--spread", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)

    run = sub.add_parser("run", help="train, select on validation and test one configuration")
    run.add_argument("config", nargs="?", help="config file (omit for all defaults)")
    _add_overrides(run)

    suite = sub.add_parser("suite", help="run a variant x seed experiment suite")
    suite.add_argument("suite", choices=SUITES)
    suite.add_argument("config", nargs="?", help="base config file")
    suite.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated master seeds")
    suite.add_argument("--algorithms", default=",".join(ALGORITHMS), help="algorithms for the main suite")
    suite.add_argument("--output", default=None, help="suite output directory")
    _add_overrides(suite)

    report = sub.add_parser("report", help="re-aggregate a suite's runs.csv")
    report.add_argument("directory", help="suite output directory")
    report.add_argument("--suite", choices=SUITES, default=None, help="restore reference pairings for this suite")
    return parser


def _print_table(aggregate: list[dict]) -> None:
    print(f"{'variant':<22} {'n':>2} {'mean':>8} {'std':>8} {'diff':>8} {'pos':>4}")
    for a in aggregate:
        mean = "-" if a["mean_of_means"] is None else f"{a['mean_of_means']:.4f}"
        std = "-" if a["seed_std"] is None else f"{a['seed_std']:.4f}"
        diff = "-" if a["paired_diff_mean"] is None else f"{a['paired_diff_mean']:+.4f}"
        pos = "-" if a["paired_diff_positive"] is None else str(a["paired_diff_positive"])
        print(f"{a['variant']:<22} {a['completed']:>2} {mean:>8} {std:>8} {diff:>8} {pos:>4}")


def _gen_data(args) -> int:
    ds = generate_synthetic(args.num_classes, args.per_class, args.dim, args.spread, args.seed)
    path = resolve_output_dir(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    n_train, n_val, n_test = ds.split_sizes()
    print(f"{path}: {args.num_classes} classes, split {n_train}/{n_val}/{n_test}, dim {ds.dim}")
    return EXIT_OK


def _run(args) -> int:
    cfg = _config(args)
    try:
        outcome = run_experiment(cfg)
    except NumericalError as exc:  # pragma: no cover - runner already converts these
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if outcome.status != "ok":
        print(f"numerical failure: {outcome.report.get('error')}; partial curve in {outcome.output_dir}", file=sys.stderr)
        return outcome.exit_code
    test = outcome.report["test"]
    print(f"{outcome.output_dir}: test accuracy {test['mean_accuracy']:.4f} +/- {test['ci95_halfwidth']:.4f}")
    return EXIT_OK


def _suite(args) -> int:
    base = _config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad seed list {args.seeds!r}", "--seeds") from None
    algorithms = [a for a in args.algorithms.split(",") if a]
    for alg in algorithms:
        if alg not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {alg!r}", "--algorithms")
    result = run_suite(args.suite, base, seeds, args.output, algorithms)
    _print_table(result.aggregate)
    return result.exit_code


def _report(args) -> int:
    root = resolve_output_dir(args.directory)
    runs = root / "runs.csv"
    if not runs.exists():
        raise ConfigError("no runs.csv found", str(root))
    rows = read_runs(runs)
    variants = None
    if args.suite:
        present = {r.variant for r in rows}
        variants = [v for v in suite_variants(args.suite) if v.name in present]
    aggregate = aggregate_rows(rows, variants)
    write_suite_tables(root, rows, aggregate, variants or [])
    _print_table(aggregate)
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_PARTIAL


COMMANDS = {"gen-data": _gen_data, "run": _run, "suite": _suite, "report": _report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, EpisodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
