"""Experiment suites: cross products of variants and seeds with aggregated tables."""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig
from .runner import EXIT_OK, EXIT_PARTIAL, resolve_output_dir, run_experiment

logger = logging.getLogger(__name__)

ALGORITHMS = ("maml", "fomaml", "meta_sgd", "mtl_lite")
BETA_VALUES = (0.1, 0.2, 0.5, 0.8, 1.0, 2.0, 4.0, 8.0)
FRACTIONS = (1.0, 0.5, 0.4, 0.3)
SUITES = ("main", "ablation", "beta_sweep", "fraction_sweep")

RUN_COLUMNS = ("variant", "seed", "status", "mean_accuracy", "ci95")
AGGREGATE_COLUMNS = (
    "variant",
    "completed",
    "mean_of_means",
    "seed_std",
    "reference",
    "paired_diff_mean",
    "paired_diff_positive",
)


@dataclass(frozen=True)
class Variant:
    name: str
    changes: dict
    reference: str = ""  # variant this one is paired against
    x: float | None = None  # abscissa for sweep plots


def suite_variants(suite: str, algorithms: Sequence[str] = ALGORITHMS) -> list[Variant]:
    if suite == "main":
        out = []
        for alg in algorithms:
            out.append(Variant(alg, {"meta.algorithm": alg, "mixup.enabled": False}))
            out.append(Variant(f"metamix+{alg}", {"meta.algorithm": alg, "mixup.enabled": True}, reference=alg))
        return out
    if suite == "ablation":
        return [
            Variant("vanilla", {"mixup.enabled": False}),
            Variant("mix-Q", {"mixup.enabled": True, "mixup.mix_target": "query"}, "vanilla"),
            Variant("mix-S", {"mixup.enabled": True, "mixup.mix_target": "support"}, "vanilla"),
            Variant("mix-Q+S", {"mixup.enabled": True, "mixup.mix_target": "both"}, "vanilla"),
        ]
    if suite == "beta_sweep":
        return [
            Variant(f"alpha_check={a}", {"mixup.enabled": True, "mixup.alpha_check": a}, "alpha_check=1.0", x=a)
            for a in BETA_VALUES
        ]
    if suite == "fraction_sweep":
        return [Variant(f"fraction={f}", {"task.fraction": f}, "fraction=1.0", x=f) for f in FRACTIONS]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


@dataclass(frozen=True)
class RunRow:
    variant: str
    seed: int
    status: str
    mean_accuracy: float | None
    ci95: float | None


@dataclass
class SuiteResult:
    suite: str
    rows: list[RunRow]
    aggregate: list[dict]
    output_dir: Path

    @property
    def exit_code(self) -> int:
        failed = sum(r.status != "ok" for r in self.rows)
        return EXIT_OK if failed == 0 else EXIT_PARTIAL

    def means(self) -> dict[str, float]:
        return {a["variant"]: a["mean_of_means"] for a in self.aggregate}


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value)) if isinstance(value, float) else str(value)


def aggregate_rows(rows: Sequence[RunRow], variants: Sequence[Variant] | None = None) -> list[dict]:
    """Per-variant mean of seed means, seed-level stddev and paired differences against the reference."""
    names = [v.name for v in variants] if variants else list(dict.fromkeys(r.variant for r in rows))
    refs = {v.name: v.reference for v in variants} if variants else {}
    by = {(r.variant, r.seed): r for r in rows if r.status == "ok"}
    out = []
    for name in names:
        accs = [r.mean_accuracy for r in rows if r.variant == name and r.status == "ok"]
        ref = refs.get(name, "")
        diffs = []
        if ref and ref != name:
            for r in rows:
                if r.variant == name and r.status == "ok" and (ref, r.seed) in by:
                    diffs.append(r.mean_accuracy - by[(ref, r.seed)].mean_accuracy)
        out.append(
            {
                "variant": name,
                "completed": len(accs),
                "mean_of_means": statistics.fmean(accs) if accs else None,
                "seed_std": statistics.stdev(accs) if len(accs) > 1 else (0.0 if accs else None),
                "reference": ref if ref != name else "",
                "paired_diff_mean": statistics.fmean(diffs) if diffs else None,
                "paired_diff_positive": sum(d > 0 for d in diffs) if diffs else None,
            }
        )
    return out


def _table(columns, records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([_fmt(rec[c]) for c in columns])
    return buf.getvalue()


def write_suite_tables(out: Path, rows: Sequence[RunRow], aggregate: list[dict], variants: Sequence[Variant]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").write_text(_table(RUN_COLUMNS, [r.__dict__ for r in rows]))
    (out / "aggregate.csv").write_text(_table(AGGREGATE_COLUMNS, aggregate))
    points = [(v.x, a["mean_of_means"]) for v, a in zip(variants, aggregate) if v.x is not None]
    if points:
        (out / "sweep.dat").write_text(
            "".join(f"{x!r} {y!r}\n" for x, y in sorted(points) if y is not None and not math.isnan(y))
        )


def read_runs(path: str | Path) -> list[RunRow]:
    with open(path, newline="") as fh:
        return [
            RunRow(
                rec["variant"],
                int(rec["seed"]),
                rec["status"],
                float(rec["mean_accuracy"]) if rec["mean_accuracy"] else None,
                float(rec["ci95"]) if rec["ci95"] else None,
            )
            for rec in csv.DictReader(fh)
        ]


def run_suite(
    suite: str,
    base: ExperimentConfig,
    seeds: Sequence[int],
    output_root: str | Path | None = None,
    algorithms: Sequence[str] = ALGORITHMS,
    cache: dict[str, RunRow] | None = None,
) -> SuiteResult:
    """Run every variant of ``suite`` for every seed, tolerating member failures.

    Member runs go to ``<root>/<variant>/seed-<seed>``; the root gets
    ``runs.csv``, ``aggregate.csv`` and, for sweeps, ``sweep.dat``.  Runs are
    deterministic, so a ``cache`` keyed by config fingerprint lets several
    suites share members that resolve to the same configuration.
    """
    if not seeds:
        raise ValueError("run_suite needs at least one seed")
    variants = suite_variants(suite, algorithms)
    root = resolve_output_dir(output_root if output_root is not None else Path(base.run.output_dir) / suite)
    rows = []
    for variant in variants:
        for seed in seeds:
            out_dir = root / variant.name / f"seed-{seed}"
            try:
                cfg = base.replace(**variant.changes, **{"run.seed": seed, "run.output_dir": str(out_dir)})
                if cache is not None and cfg.fingerprint() in cache:
                    hit = cache[cfg.fingerprint()]
                    rows.append(RunRow(variant.name, seed, hit.status, hit.mean_accuracy, hit.ci95))
                    continue
                outcome = run_experiment(cfg)
            except Exception as exc:  # one bad member must not sink the suite
                logger.error("suite %s: %s seed %s failed: %s", suite, variant.name, seed, exc)
                rows.append(RunRow(variant.name, seed, "failed", None, None))
                continue
            if outcome.status != "ok":
                rows.append(RunRow(variant.name, seed, outcome.status, None, None))
                continue
            test = outcome.report["test"]
            rows.append(RunRow(variant.name, seed, "ok", test["mean_accuracy"], test["ci95_halfwidth"]))
            if cache is not None:
                cache[cfg.fingerprint()] = rows[-1]
    aggregate = aggregate_rows(rows, variants)
    write_suite_tables(root, rows, aggregate, variants)
    return SuiteResult(suite, rows, aggregate, root)
