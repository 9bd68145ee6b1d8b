"""
Component ablation: k-fold train/evaluate for every subset of
{AA, ES, CR}, tabulated as mean±std percentages.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from backend.analysis.validation import kfold_split
from backend.data.loader import ManifestLoader
from backend.errors import ArgumentError, DatasetIOError
from config.settings import config_hash
from detector.contracts import FoldMetrics, ImageRecord, MetricsReport
from detector.evaluator import evaluate_model
from detector.models import EvalConfig, TrainConfig
from detector.trainer import train

logger = logging.getLogger(__name__)

Components = Tuple[str, ...]

COMPONENTS = ("AA", "ES", "CR")

# Row order of the ablation table
ABLATION_GRID: List[Components] = [
    (),
    ("AA",),
    ("ES",),
    ("CR",),
    ("AA", "ES"),
    ("AA", "CR"),
    ("ES", "CR"),
    ("AA", "ES", "CR"),
]

METRIC_COLUMNS = ("map", "precision", "recall", "f1")


def row_name(components: Components) -> str:
    if not components:
        return "Baseline"
    if set(components) == set(COMPONENTS):
        return "+All"
    return "+" + "+".join(c for c in COMPONENTS if c in components)


def parse_components(text: str) -> Components:
    """'aa,es' -> ('AA', 'ES'); 'baseline' or '' -> ()"""
    names = [part.strip().upper() for part in text.split(",") if part.strip()]
    if names in (["BASELINE"], ["NONE"]):
        return ()
    if names == ["ALL"]:
        return COMPONENTS
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise ArgumentError(f"Unknown components {unknown}; expected a subset of {COMPONENTS}")
    return tuple(c for c in COMPONENTS if c in names)


def config_for(base: TrainConfig, components: Components) -> TrainConfig:
    return base.model_copy(
        update={
            "use_aa": "AA" in components,
            "use_es": "ES" in components,
            "use_cr": "CR" in components,
        }
    )


# Eval settings that change how a run executes but not what it computes
EXECUTION_ONLY = {"n_jobs", "render"}

SeedFolds = Tuple[Optional[int], List[Tuple[List[int], List[int]]]]


def run_row(
    components: Components,
    records: Sequence[ImageRecord],
    manifest_path: Union[str, Path],
    base_config: TrainConfig,
    eval_config: EvalConfig,
    seed_folds: Sequence[SeedFolds],
) -> MetricsReport:
    """
    k-fold train/evaluate of one component subset, once per seed.

    A seed of None keeps the training seed of base_config. Any failing fold
    aborts the row; the report then carries the error.
    """
    name = row_name(components)
    config = config_for(base_config, components)
    fingerprint = config_hash(
        {
            "train": config.model_dump(mode="json"),
            "eval": eval_config.model_dump(mode="json", exclude=EXECUTION_ONLY),
            "seeds": [[seed, folds] for seed, folds in seed_folds],
        }
    )
    loader = ManifestLoader(manifest_path)
    by_id = {record.image_id: record for record in records}
    results: List[FoldMetrics] = []
    try:
        for seed, folds in seed_folds:
            seeded = config if seed is None else config.model_copy(update={"seed": seed})
            for fold, (train_ids, test_ids) in enumerate(folds):
                result = train([by_id[i] for i in train_ids], seeded, loader)
                metrics = evaluate_model(
                    result.params, result.states, [by_id[i] for i in test_ids], loader, seeded, eval_config, fold
                )
                results.append(replace(metrics, seed=seeded.seed))
    except Exception as e:
        logger.warning(f"Ablation row {name} failed: {type(e).__name__}: {e}")
        return MetricsReport(name=name, folds=[], config_fingerprint=fingerprint, error=f"{type(e).__name__}: {e}")
    logger.info(f"Ablation row {name}: mAP={np.mean([f.map for f in results]):.4f}")
    return MetricsReport(name=name, folds=results, config_fingerprint=fingerprint)


def ablation_run(
    records: Sequence[ImageRecord],
    manifest_path: Union[str, Path],
    base_config: TrainConfig,
    eval_config: EvalConfig,
    grid: Optional[Sequence[Components]] = None,
    k: Optional[int] = None,
    seed: int = 0,
    seeds: Optional[Sequence[int]] = None,
) -> List[MetricsReport]:
    """
    One MetricsReport per component subset, in table row order.

    Args:
        records (Sequence[ImageRecord]): Manifest records
        manifest_path: Manifest the records came from; workers reopen it
        base_config (TrainConfig): Shared hyperparameters; toggles are overridden per row
        eval_config (EvalConfig): Evaluation settings, n_jobs sets row parallelism
        grid (Optional[Sequence[Components]]): Subsets to run, all eight by default
        k (Optional[int]): Fold count, eval_config.k by default
        seed (int): Fold shuffle seed of a single-seed run
        seeds (Optional[Sequence[int]]): Repeat every row per seed; each seed
            reshuffles the folds and reseeds training

    Returns:
        List[MetricsReport]: rows sorted by table order
    """
    grid = list(ABLATION_GRID if grid is None else grid)
    order = {tuple(c): i for i, c in enumerate(ABLATION_GRID)}
    grid.sort(key=lambda c: order.get(tuple(c), len(order)))
    k = eval_config.k if k is None else k
    ids = [r.image_id for r in records]
    if seeds is None:
        seed_folds: List[SeedFolds] = [(None, kfold_split(ids, k, seed))]
    else:
        if len(seeds) == 0:
            raise ArgumentError("seeds must name at least one seed")
        seed_folds = [(int(s), kfold_split(ids, k, int(s))) for s in seeds]

    logger.info(f"Ablation over {len(grid)} rows, k={k}, seeds={len(seed_folds)}, n_jobs={eval_config.n_jobs}")
    return Parallel(n_jobs=eval_config.n_jobs)(
        delayed(run_row)(tuple(c), records, manifest_path, base_config, eval_config, seed_folds) for c in grid
    )


@dataclass
class DirectionalCheck:
    name: str
    passed: bool
    detail: str = ""


def _row_means(reports: Sequence[MetricsReport]) -> Dict[str, float]:
    return {r.name: float(np.mean([f.map for f in r.folds])) for r in reports if r.folds and not r.error}


def directional_check(reports: Sequence[MetricsReport], margin: float = 0.02) -> List[DirectionalCheck]:
    """
    Ordering of mean mAP across rows expected when every component helps.

    Each single component beats Baseline, +All beats Baseline by at least
    margin (mAP fraction), and +All is no worse than any pair. Comparisons
    involving a missing or failed row are left out.
    """
    means = _row_means(reports)
    checks = []

    def compare(name: str, left: str, right: str, offset: float = 0.0, strict: bool = False):
        if left not in means or right not in means:
            return
        gap = means[left] - means[right] - offset
        passed = gap > 0.0 if strict else gap >= 0.0
        detail = f"{left}={100.0 * means[left]:.1f} {right}={100.0 * means[right]:.1f}"
        checks.append(DirectionalCheck(name, bool(passed), detail))

    baseline, full = row_name(()), row_name(COMPONENTS)
    for component in COMPONENTS:
        single = row_name((component,))
        compare(f"{single} > {baseline}", single, baseline, strict=True)
    compare(f"{full} >= {baseline} + {100.0 * margin:.1f}", full, baseline, offset=margin)
    for pair in ABLATION_GRID:
        if len(pair) == 2:
            compare(f"{full} >= {row_name(pair)}", full, row_name(pair))
    return checks


def format_directional(checks: Sequence[DirectionalCheck]) -> str:
    lines = [f"{'PASS' if c.passed else 'FAIL'} {c.name} ({c.detail})" for c in checks]
    verdict = "directional: " + ("PASS" if checks and all(c.passed for c in checks) else "FAIL")
    return "\n".join([*lines, verdict])


def _percent(value: float) -> str:
    return f"{100.0 * value:.1f}"


def _mean_std(values: Sequence[float]) -> str:
    values = np.asarray(values, dtype=np.float64)
    return f"{100.0 * values.mean():.1f}±{100.0 * values.std():.1f}"


def reports_to_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """
    Per-fold rows (one per fold and seed) plus one 'mean±std' row per configuration, values in percent.

    Tier AP columns are named ap_<tier>.
    """
    tiers = sorted({tier for report in reports for fold in report.folds for tier in fold.tier_ap})
    columns = ["config", "fold", "seed", *METRIC_COLUMNS, *[f"ap_{t}" for t in tiers], "fingerprint", "error"]
    rows = []
    for report in reports:
        for fold in report.folds:
            row = {"config": report.name, "fold": str(fold.fold), "seed": str(fold.seed),
                   "fingerprint": report.config_fingerprint, "error": ""}
            row.update({m: _percent(getattr(fold, m)) for m in METRIC_COLUMNS})
            row.update({f"ap_{t}": _percent(fold.tier_ap[t]) if t in fold.tier_ap else "" for t in tiers})
            rows.append(row)
        summary = {"config": report.name, "fold": "mean±std", "seed": "", "fingerprint": report.config_fingerprint}
        summary["error"] = report.error or ""
        for m in METRIC_COLUMNS:
            summary[m] = _mean_std([getattr(f, m) for f in report.folds]) if report.folds else ""
        for t in tiers:
            values = [f.tier_ap[t] for f in report.folds if t in f.tier_ap]
            summary[f"ap_{t}"] = _mean_std(values) if values else ""
        rows.append(summary)
    return pd.DataFrame(rows, columns=columns)


def summary_table(frame: pd.DataFrame) -> str:
    """Aggregate rows rendered as a fixed-width text table"""
    summary = frame[frame["fold"] == "mean±std"].set_index("config")
    columns = [c for c in summary.columns if c not in ("fold", "seed", "fingerprint")]
    if not summary["error"].astype(bool).any():
        columns.remove("error")
    renamed = summary[columns].rename(columns={"map": "mAP", "precision": "P", "recall": "R", "f1": "F1"})
    return renamed.to_string()


def write_metrics_csv(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise DatasetIOError(f"Failed to write metrics {path}: {e}", str(path)) from e
    return path


def read_metrics_csv(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetIOError(f"Failed to read metrics {path}: {e}", str(path)) from e


def parse_mean_std(cell: str) -> Tuple[float, float]:
    """'74.9±0.4' -> (74.9, 0.4); empty cells give NaN"""
    if not cell:
        return float("nan"), float("nan")
    mean, _, std = cell.partition("±")
    return float(mean), float(std or 0.0)


def aggregate_columns(frame: pd.DataFrame) -> Dict[str, Dict[str, Tuple[float, float]]]:
    """config -> metric -> (mean, std) in percent, from the summary rows"""
    summary = frame[frame["fold"] == "mean±std"]
    return {
        row["config"]: {m: parse_mean_std(row[m]) for m in METRIC_COLUMNS}
        for _, row in summary.iterrows()
    }
