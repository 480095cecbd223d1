"""Single experiment runs: train, select on validation, test, write artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .. import rng as rngs
from ..episodes import ClassDataset, TaskDistribution, generate_synthetic, load_dataset
from ..metalearn import NumericalError, evaluate, train
from .config import ExperimentConfig, format_config

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "METAMIX_OUTPUT_ROOT"
RESULTS_COLUMNS = ("iteration", "split", "mean_accuracy", "ci95", "seconds")
SELECTION_RULE = "best validation accuracy; ties go to the earliest iteration"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 1, 2, 3


def resolve_output_dir(output_dir: str | os.PathLike) -> Path:
    """Relative output directories are placed under ``$METAMIX_OUTPUT_ROOT`` when it is set."""
    path = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def build_dataset(cfg: ExperimentConfig) -> ClassDataset:
    d = cfg.data
    if d.path:
        ds = load_dataset(d.path)
        if ds.dim != d.dim:
            raise ValueError(f"dataset {d.path} has dim {ds.dim} but data.dim = {d.dim}")
        return ds
    seed = d.seed if d.seed is not None else rngs.derived_seed(cfg.run.seed, "data")
    return generate_synthetic(d.num_classes, d.per_class, d.dim, d.spread, seed)


def task_distributions(cfg: ExperimentConfig, dataset: ClassDataset):
    """Train (with data fraction), validation and test distributions.

    A validation split with fewer than N classes is sampled at reduced width,
    labels still laid out over the N model outputs.
    """
    t = cfg.task
    common = dict(k_shot=t.k_shot, n_query=t.n_query)
    train_dist = TaskDistribution(
        dataset, "train", t.n_way, fraction=t.fraction, fraction_seed=rngs.derived_seed(cfg.run.seed, "fraction"), **common
    )
    n_val = min(t.n_way, len(dataset.split["val"]))
    val_dist = TaskDistribution(dataset, "val", max(n_val, 1), label_dim=t.n_way, **common) if n_val >= 2 else None
    test_dist = TaskDistribution(dataset, "test", t.n_way, **common)
    return train_dist, val_dist, test_dist


@dataclass
class RunOutcome:
    status: str  # "ok" or "numerical_failure"
    exit_code: int
    report: dict
    output_dir: Path


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


def _curve_dicts(curve) -> list[dict]:
    return [
        {"iteration": p.iteration, "train_loss": p.train_loss, "val_accuracy": p.val_accuracy, "val_ci95": p.val_ci95}
        for p in curve
    ]


def _write(out: Path, report: dict, rows, curve) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "results.csv").write_text(_csv_text(rows))
    (out / "val_curve.dat").write_text(
        "".join(f"{p.iteration} {p.val_accuracy!r}\n" for p in curve if p.val_accuracy is not None)
    )


def run_experiment(cfg: ExperimentConfig) -> RunOutcome:
    """Run one configuration end to end and write its artifacts.

    Writes ``resolved-config.txt``, ``report.json``, ``results.csv`` and
    ``val_curve.dat`` (iteration, validation accuracy) to the output
    directory.  Seconds are recorded only when ``run.record_wallclock`` is
    set; otherwise they are written as 0.0 so artifacts are byte-reproducible.
    """
    out = resolve_output_dir(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved-config.txt").write_text(format_config(cfg))
    clock = cfg.run.record_wallclock
    started = time.perf_counter()

    arch = cfg.architecture()
    meta_cfg = cfg.meta_config()
    dataset = build_dataset(cfg)
    train_dist, val_dist, test_dist = task_distributions(cfg, dataset)
    report = {
        "fingerprint": cfg.fingerprint(),
        "algorithm": meta_cfg.algorithm.value,
        "metamix": cfg.mixup.enabled,
        "architecture": arch.serialize(),
        "seed": cfg.run.seed,
        "selection": SELECTION_RULE,
        "validation_ways": val_dist.n_way if val_dist else 0,
    }

    run = cfg.run
    try:
        result = train(
            arch,
            meta_cfg,
            train_dist,
            val_dist,
            run.iterations,
            run.eval_every,
            run.val_episodes,
            run.seed,
        )
    except NumericalError as exc:
        report.update(status="numerical_failure", error=str(exc), curve=_curve_dicts(exc.curve))
        rows = [(p.iteration, "val", repr(p.val_accuracy), repr(p.val_ci95), 0.0) for p in exc.curve if p.val_accuracy is not None]
        _write(out, report, rows, exc.curve)
        return RunOutcome("numerical_failure", EXIT_NUMERICAL, report, out)

    test = evaluate(result.state, arch, test_dist, run.test_episodes, meta_cfg, rngs.derived_seed(run.seed, "test"))
    elapsed = time.perf_counter() - started
    rows = [
        (p.iteration, "val", repr(p.val_accuracy), repr(p.val_ci95), repr(ev.seconds) if clock else 0.0)
        for p, ev in zip(result.curve, result.evaluations)
    ]
    rows.append((result.best_iteration, "test", repr(test.mean_accuracy), repr(test.ci95_halfwidth), repr(test.seconds) if clock else 0.0))
    test_dict = test.to_dict()
    test_dict["config_fingerprint"] = report["fingerprint"]
    test_dict["seconds"] = elapsed if clock else 0.0
    report.update(
        status="ok",
        best_iteration=result.best_iteration,
        pretrain_accuracy=result.pretrain_accuracy,
        curve=_curve_dicts(result.curve),
        test=test_dict,
    )
    _write(out, report, rows, result.curve)
    logger.info("run %s: test accuracy %.4f +/- %.4f", out, test.mean_accuracy, test.ci95_halfwidth)
    return RunOutcome("ok", EXIT_OK, report, out)
