from __future__ import annotations

import functools
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from .autodiff import operator_suite
from .calibration import diff_ece_gradcheck
from .config import Settings, build_settings, merge_configs, parse_overrides
from .errors import CalsegError
from .logging_setup import setup_logging, setup_run_logging
from .pipeline import SPLITS, CalsegPipeline
from .report import write_report

console = Console()

DEFAULT_CONFIG = Path("config/settings.toml")
OPERATOR_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-3


def handle_errors(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Turn calseg errors into a red message and exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except KeyboardInterrupt:
            console.print("\n[yellow]Interrupted by user.[/yellow]")
            sys.exit(130)
        except CalsegError as e:
            console.print(f"[red]{type(e).__name__}: {e}[/red]")
            sys.exit(1)

    return wrapper


def resolve_settings(
    config_file: Optional[Path],
    assignments: Sequence[str],
    seed: Optional[int],
    run_dir: Optional[Path],
) -> Settings:
    """defaults < CALSEG_* environment < TOML file < --set < --seed / --run-dir"""
    overrides = parse_overrides(assignments)
    direct: dict = {}
    if seed is not None:
        direct["seed"] = seed
    if run_dir is not None:
        direct["run_dir"] = str(run_dir)
    chosen = config_file if config_file is not None else (DEFAULT_CONFIG if DEFAULT_CONFIG.exists() else None)
    return build_settings(chosen, merge_configs(overrides, direct))


def print_frame(frame: pd.DataFrame, title: str) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)


pass_settings = click.make_pass_decorator(dict, ensure=True)


@click.group()
@click.option("--config", "config_file", type=click.Path(path_type=Path), default=None, help="TOML settings file")
@click.option("--set", "assignments", multiple=True, metavar="SECTION.KEY=VALUE", help="Override one setting")
@click.option("--seed", type=int, default=None, help="Root seed")
@click.option("--run-dir", type=click.Path(path_type=Path), default=None, help="Run directory")
@click.version_option(package_name="calseg")
@click.pass_context
def cli(
    ctx: click.Context,
    config_file: Optional[Path],
    assignments: Sequence[str],
    seed: Optional[int],
    run_dir: Optional[Path],
) -> None:
    """Calibration-guided source-free adaptation for segmentation."""
    ctx.obj = {"config_file": config_file, "assignments": list(assignments), "seed": seed, "run_dir": run_dir}


def _pipeline(obj: dict) -> CalsegPipeline:
    settings = resolve_settings(obj["config_file"], obj["assignments"], obj["seed"], obj["run_dir"])
    setup_run_logging(settings)
    pipeline = CalsegPipeline(settings)
    pipeline.echo_config()
    return pipeline


def stage_command(fn: Callable[..., Any]) -> Callable[..., Any]:
    """Build the pipeline for the run directory, run the stage, log timings."""

    @functools.wraps(fn)
    def wrapper(obj: dict, *args: Any, **kwargs: Any) -> Any:
        pipeline = _pipeline(obj)
        try:
            return fn(pipeline, *args, **kwargs)
        finally:
            pipeline.timer.log_summary()

    return pass_settings(handle_errors(wrapper))


@cli.command()
@click.option("--force", is_flag=True, help="Overwrite existing dataset directories")
@stage_command
def generate(pipeline: CalsegPipeline, force: bool) -> None:
    """Generate the synthetic source and target datasets."""
    sizes = pipeline.generate(force=force)
    for split, n in sizes.items():
        console.print(f"[green]{split}: {n} images[/green]")


@cli.command("train-source")
@stage_command
def train_source(pipeline: CalsegPipeline) -> None:
    """Calibration-aware source training; one checkpoint per epoch."""
    pool = pipeline.train_source()
    console.print(f"[green]Trained {len(pool)} source epochs into {pipeline.layout.source}[/green]")


@cli.command("select-source")
@click.option(
    "--criterion",
    type=click.Choice(["ece", "source_miou", "target_miou"]),
    default=None,
    help="Selection rule (target_miou is an oracle)",
)
@stage_command
def select_source(pipeline: CalsegPipeline, criterion: Optional[str]) -> None:
    """Pick the source checkpoint by validation ECE statistics."""
    chosen = pipeline.select_source(criterion)  # type: ignore[arg-type]
    console.print(
        f"[green]Selected epoch {chosen.epoch}: ECE mean+max+min={chosen.ece_score:.4f}, "
        f"source mIoU={chosen.source_miou:.4f}[/green]"
    )


@cli.command("train-valuenet")
@stage_command
def train_valuenet(pipeline: CalsegPipeline) -> None:
    """Fit the per-image ECE estimator on the frozen source model."""
    path = pipeline.train_valuenet()
    console.print(f"[green]Value net written to {path}[/green]")


@cli.command()
@stage_command
def adapt(pipeline: CalsegPipeline) -> None:
    """Calibration-guided self-training on the unlabeled target split."""
    path = pipeline.adapt()
    console.print(f"[green]Adapted model written to {path}[/green]")


@cli.command()
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None, help="Checkpoint to evaluate")
@click.option("--split", type=click.Choice(SPLITS), default=None, help="Dataset split")
@stage_command
def evaluate(pipeline: CalsegPipeline, checkpoint: Optional[Path], split: Optional[str]) -> None:
    """mIoU, ECE and reliability diagrams; by default source-only vs adapted."""
    frame = pipeline.evaluate(checkpoint, split)
    print_frame(frame[[c for c in frame.columns if not c.startswith("iou_")]], "Evaluation")


@cli.command()
@stage_command
def run(pipeline: CalsegPipeline) -> None:
    """All stages in order, skipping those already on disk."""
    frame = pipeline.run()
    print_frame(frame[[c for c in frame.columns if not c.startswith("iou_")]], "Evaluation")


@cli.command()
@click.argument("root", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help="Output directory")
@pass_settings
@handle_errors
def report(obj: dict, root: Path, out_dir: Optional[Path]) -> None:
    """Aggregate completed runs under ROOT into an alpha-sweep report."""
    settings = resolve_settings(obj["config_file"], obj["assignments"], obj["seed"], obj["run_dir"])
    setup_logging(level=settings.effective_log_level, use_rich=settings.logging.use_rich)
    result = write_report(root, out_dir)
    print_frame(result.sweep, "Runs")
    print_frame(result.means, "Mean per alpha")


@cli.command()
@click.option("--instances", type=int, default=20, show_default=True, help="Random cases per operator")
@click.option("--seed", "check_seed", type=int, default=0, show_default=True, help="Seed of the random cases")
@handle_errors
def gradcheck(instances: int, check_seed: int) -> None:
    """Compare every autodiff operator and the differentiable ECE with finite differences."""
    setup_logging(level="WARNING")
    results = {name: (err, OPERATOR_TOLERANCE) for name, err in operator_suite(instances, check_seed).items()}
    results["diff_ece_loss"] = (diff_ece_gradcheck(instances, check_seed), LOSS_TOLERANCE)

    table = Table(title="Gradient check (float64)")
    table.add_column("operator")
    table.add_column("worst rel err", justify="right")
    table.add_column("tolerance", justify="right")
    table.add_column("status")
    failed = 0
    for name, (err, tol) in results.items():
        ok = err <= tol
        failed += not ok
        table.add_row(name, f"{err:.3e}", f"{tol:.0e}", "[green]ok[/green]" if ok else "[red]FAIL[/red]")
    console.print(table)
    if failed:
        console.print(f"[red]{failed} gradient check(s) failed[/red]")
        sys.exit(1)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
