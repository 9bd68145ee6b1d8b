# app.py
# Main entry point for the tinydet command-line toolkit

import functools
import logging
import sys
from pathlib import Path
from typing import List, Optional

import click
import pandas as pd

from backend.analysis.metrics import precision_recall_curve
from backend.data.loader import ManifestLoader
from backend.errors import ConfigError, DatasetIOError, TinyDetError
from backend.visualization.charts import DetectionCharts, dot_centers, pr_curve_series
from config.settings import EnvSettings, RunSettings, load_run_config
from data_gen.dataset import generate_dataset
from detector.contracts import MetricsReport
from detector.evaluator import collect_detections, fold_metrics
from detector.experiments import (
    ABLATION_GRID,
    METRIC_COLUMNS,
    ablation_run,
    directional_check,
    format_directional,
    aggregate_columns,
    parse_components,
    read_metrics_csv,
    reports_to_frame,
    summary_table,
    write_metrics_csv,
)
from detector.models import EvalConfig
from detector.selftest import run_selftest
from detector.snapshot import load_snapshot, save_snapshot
from detector.trainer import train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(verbose: int, quiet: bool) -> None:
    level = EnvSettings().log_level.upper()
    if verbose:
        level = "DEBUG"
    elif quiet:
        level = "WARNING"
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)


def error_line(error: Exception) -> str:
    """Single machine-parsable line describing a failure"""
    field = getattr(error, "field", None) or "-"
    message = " ".join(str(error).split())
    return f"error type={type(error).__name__} field={field} message={message}"


def report_errors(func):
    """Turn toolkit errors into one stderr line and exit status 1"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TinyDetError as e:
            click.echo(error_line(e), err=True)
            raise click.exceptions.Exit(1)

    return wrapper


def output_dir(out: Optional[str], default_leaf: str) -> Path:
    path = Path(out) if out else Path(EnvSettings().output_root) / default_leaf
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Failed to create output directory {path}: {e}", str(path)) from e
    return path


def read_pr_curve(path: str) -> pd.DataFrame:
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetIOError(f"Failed to read PR curve {path}: {e}", path) from e


def run_settings(config: Optional[str], seed: Optional[int], unsafe_ranges: bool) -> RunSettings:
    if config is None:
        settings = RunSettings()
        return settings.with_seed(seed) if seed is not None else settings
    return load_run_config(config, unsafe_ranges=unsafe_ranges, seed=seed)


config_option = click.option(
    "--config", "-c", "config", type=click.Path(dir_okay=False), default=None,
    help="JSON config with seed, dataset, train and eval sections. Built-in defaults when omitted.",
)
out_option = click.option(
    "--out", "-o", "out", type=click.Path(file_okay=False), default=None,
    help="Output directory, created if absent. Defaults to $TINYDET_OUTPUT_ROOT/<command>.",
)
seed_option = click.option(
    "--seed", type=int, default=None, help="Override the config seed (dataset, training and folds)."
)
unsafe_option = click.option(
    "--unsafe-ranges", is_flag=True, default=False,
    help="Accept hyperparameters outside their documented intervals.",
)


@click.group()
@click.option("-v", "--verbose", count=True, help="Log at DEBUG level.")
@click.option("-q", "--quiet", is_flag=True, default=False, help="Log warnings and errors only.")
def cli(verbose: int, quiet: bool):
    """Dense tiny-object detection toolkit with EMA-stabilized training."""
    configure_logging(verbose, quiet)


@cli.command()
@config_option
@out_option
@seed_option
@unsafe_option
@report_errors
def gen(config, out, seed, unsafe_ranges):
    """Generate a synthetic dataset (images + manifest.jsonl) from the dataset section."""
    settings = run_settings(config, seed, unsafe_ranges)
    manifest = generate_dataset(settings.dataset, output_dir(out, "data"))
    click.echo(str(manifest))


@cli.command("train")
@config_option
@click.option("--manifest", "-m", required=True, type=click.Path(dir_okay=False), help="Training manifest.")
@click.option("--val-manifest", type=click.Path(dir_okay=False), default=None,
              help="Manifest scored after every epoch; metrics go to the training log.")
@click.option("--resume", type=click.Path(dir_okay=False), default=None,
              help="Snapshot to continue from; runs the configured number of further epochs.")
@out_option
@seed_option
@unsafe_option
@report_errors
def train_command(config, manifest, val_manifest, resume, out, seed, unsafe_ranges):
    """Train one configuration; writes snapshot.json and train_log.jsonl."""
    settings = run_settings(config, seed, unsafe_ranges)
    out_path = output_dir(out, "train")
    loader = ManifestLoader(manifest)
    records = loader.read_records()
    val_records = ManifestLoader(val_manifest).read_records() if val_manifest else None
    snapshot = load_snapshot(resume) if resume else None

    result = train(records, settings.train, loader, val_records, settings.eval, resume=snapshot)
    save_snapshot(out_path / "snapshot.json", result.snapshot(settings.train))
    result.log.write(out_path / "train_log.jsonl")
    click.echo(str(out_path / "snapshot.json"))


@cli.command("eval")
@click.option("--snapshot", "-s", "snapshot_path", required=True, type=click.Path(dir_okay=False),
              help="Snapshot written by train.")
@click.option("--manifest", "-m", required=True, type=click.Path(dir_okay=False), help="Manifest to score.")
@config_option
@click.option("--render", type=int, default=None,
              help="Render the first N images with predicted dots and ground-truth circles.")
@out_option
@unsafe_option
@report_errors
def eval_command(snapshot_path, manifest, config, render, out, unsafe_ranges):
    """Score a snapshot on a manifest; writes metrics.csv and pr_curve.csv."""
    eval_config = run_settings(config, None, unsafe_ranges).eval if config else EvalConfig()
    out_path = output_dir(out, "eval")
    snapshot = load_snapshot(snapshot_path)
    loader = ManifestLoader(manifest)
    records = loader.read_records()

    scored = collect_detections(snapshot.params, snapshot.states, records, loader, snapshot.config, eval_config)
    metrics = fold_metrics(scored, snapshot.config, eval_config)
    report = MetricsReport(name=snapshot.config.components, folds=[metrics], config_fingerprint=snapshot.config_hash)
    frame = reports_to_frame([report])
    write_metrics_csv(out_path / "metrics.csv", frame)

    precision, recall, confidence = precision_recall_curve(
        [(dets, rec.annotations) for rec, dets in scored],
        eval_config.tolerance(snapshot.config.object_radius),
        eval_config.match_mode,
        eval_config.iou_threshold,
    )
    pd.DataFrame(
        {
            "series": report.name,
            "rank": range(1, len(precision) + 1),
            "confidence": confidence,
            "precision": precision,
            "recall": recall,
        }
    ).to_csv(out_path / "pr_curve.csv", index=False, lineterminator="\n")

    count = eval_config.render if render is None else render
    charts = DetectionCharts()
    for record, detections in scored[:count]:
        kept = [d for d in detections if d.confidence >= eval_config.score_threshold]
        charts.render_detections(
            loader.load_image(record),
            dot_centers(kept),
            dot_centers(record.annotations),
            out_path / "renders" / f"img_{record.image_id:05d}.png",
            radius=snapshot.config.object_radius,
        )
    click.echo(summary_table(frame))


@cli.command()
@config_option
@click.option("--manifest", "-m", type=click.Path(dir_okay=False), default=None,
              help="Dataset to use. Generated from the config into <out>/data when omitted.")
@click.option("--k", "k", type=click.IntRange(min=2), default=None,
              help="Number of folds, at least 2 (default: eval.k from the config).")
@click.option("--rows", multiple=True,
              help="Component subset to run, e.g. 'baseline', 'aa', 'es,cr', 'all'. Repeatable; all eight by default.")
@click.option("--seeds", "n_seeds", type=click.IntRange(min=1), default=1, show_default=True,
              help="Repeat every row with seeds seed, seed+1, ...; each reshuffles folds and reseeds training.")
@out_option
@seed_option
@unsafe_option
@report_errors
def ablate(config, manifest, k, rows, n_seeds, out, seed, unsafe_ranges):
    """k-fold ablation over component subsets; writes ablation.csv and ablation.txt."""
    settings = run_settings(config, seed, unsafe_ranges)
    out_path = output_dir(out, "ablate")
    if manifest is None:
        manifest = generate_dataset(settings.dataset, out_path / "data")
    records = ManifestLoader(manifest).read_records()
    grid = [parse_components(r) for r in rows] if rows else ABLATION_GRID
    seeds = [settings.seed + i for i in range(n_seeds)] if n_seeds > 1 else None

    reports = ablation_run(records, manifest, settings.train, settings.eval, grid, k, settings.seed, seeds)
    frame = reports_to_frame(reports)
    write_metrics_csv(out_path / "ablation.csv", frame)
    table = summary_table(frame)
    verdict = format_directional(directional_check(reports))
    logger.info(verdict.replace("\n", "; "))
    text_path = out_path / "ablation.txt"
    try:
        text_path.write_text(table + "\n\n" + verdict + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetIOError(f"Failed to write {text_path}: {e}", str(text_path)) from e
    click.echo(table)
    click.echo(verdict)


@cli.command()
@click.option("--metrics", "metrics_path", required=True, type=click.Path(dir_okay=False),
              help="metrics.csv or ablation.csv written by eval/ablate.")
@click.option("--pr-curve", "pr_curves", multiple=True, type=click.Path(dir_okay=False),
              help="pr_curve.csv files to plot together. Repeatable.")
@out_option
@report_errors
def report(metrics_path, pr_curves, out):
    """Render SVG plots (ablation bars, PR curves) and a text table from metrics CSVs."""
    out_path = output_dir(out, "report")
    frame = read_metrics_csv(metrics_path)
    aggregates = aggregate_columns(frame)
    if not aggregates:
        raise ConfigError(f"{metrics_path} holds no mean±std rows", field="metrics")
    charts = DetectionCharts()
    names: List[str] = list(aggregates)
    for metric in METRIC_COLUMNS:
        charts.plot_ablation_bars(
            names,
            [aggregates[n][metric][0] for n in names],
            [aggregates[n][metric][1] for n in names],
            out_path / f"bars_{metric}.svg",
            metric="mAP" if metric == "map" else metric,
        )
    if pr_curves:
        curves = pd.concat([read_pr_curve(path) for path in pr_curves], ignore_index=True)
        charts.plot_pr_curves(pr_curve_series(curves), out_path / "pr_curves.svg")
    table = summary_table(frame)
    (out_path / "summary.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)


@cli.command()
@click.option("--instances", type=int, default=50, show_default=True,
              help="Random instances per gradient check.")
@click.option("--trials", type=int, default=1000, show_default=True,
              help="Random instances for the grouping and AP oracles.")
@seed_option
def selftest(instances, trials, seed):
    """Run the invariant suite; prints PASS/FAIL per check, exits 1 if any check fails."""
    results = run_selftest(instances=instances, trials=trials, seed=seed or 0)
    for result in results:
        click.echo(f"{'PASS' if result.passed else 'FAIL'} {result.name} {result.detail}".rstrip())
    if not all(r.passed for r in results):
        raise click.exceptions.Exit(1)


def run(argv: Optional[List[str]] = None) -> int:
    """
    Run the CLI without exiting the interpreter

    Args:
        argv (Optional[List[str]]): Arguments, sys.argv[1:] when None

    Returns:
        int: 0 on success, 1 for toolkit errors, 2 for usage errors
    """
    try:
        result = cli.main(args=argv, prog_name="tinydet", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    return result if isinstance(result, int) else 0


def main():
    """
    Main entry point for the application.
    """
    sys.exit(run())


if __name__ == "__main__":
    main()
