"""
Cross-run report: α-sweep table, per-α means, ablations, pooled reliability diagrams

Reads only the CSVs each run's evaluate stage left behind, so re-running the
report over the same runs reproduces the same files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use("agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .calibration import export_reliability, merge_diagrams, read_reliability_csv  # noqa: E402
from .errors import EmptyInputError, FormatError  # noqa: E402
from .pipeline import ABLATION_FLAGS, SUMMARY_FILE  # noqa: E402
from .utils.metrics_csv import read_csv, write_csv  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_DIR = "report"
SUMMARY_COLUMNS = ["model", "split", "alpha", "seed", "miou", "ece"]
METRIC_COLUMNS = [
    "source_val_ece",
    "source_miou",
    "source_ece",
    "adapted_miou",
    "adapted_ece",
    "oracle_miou",
    "miou_gain",
]
SWEEP_COLUMNS = ["run", "alpha", "seed", "variant", *ABLATION_FLAGS, *METRIC_COLUMNS]
MEAN_COLUMNS = ["alpha", "runs", *METRIC_COLUMNS]
ABLATION_COLUMNS = ["variant", "alpha", *ABLATION_FLAGS, "runs", *METRIC_COLUMNS]
FULL_METHOD = "full"
DIAGRAM_MODELS = ("source_only", "adapted")


@dataclass
class Report:
    sweep: pd.DataFrame
    means: pd.DataFrame
    ablation: pd.DataFrame
    files: List[Path] = field(default_factory=list)


def find_runs(root: Union[str, Path]) -> List[Path]:
    """Run directories under root (root included) holding eval/summary.csv, sorted."""
    root = Path(root)
    runs = {p.parent.parent for p in root.rglob(SUMMARY_FILE) if p.parent.name == "eval"}
    return sorted(runs)


def _metric(summary: pd.DataFrame, model: str, split: str, column: str) -> float:
    rows = summary[(summary["model"] == model) & (summary["split"] == split)]
    return float(rows[column].iloc[0]) if len(rows) else float("nan")


def variant_name(flags: Dict[str, int]) -> str:
    """FULL_METHOD, or the switched-off components as no_<flag> joined by "+"."""
    off = [f"no_{name}" for name in ABLATION_FLAGS if not flags[name]]
    return "+".join(off) if off else FULL_METHOD


def run_row(run_dir: Path, root: Path) -> Dict[str, object]:
    """
    One sweep row from a run's eval/summary.csv.

    Raises:
        FormatError: summary lacks the required columns or the adapted row
    """
    path = run_dir / "eval" / SUMMARY_FILE
    try:
        summary = read_csv(path, SUMMARY_COLUMNS)
    except KeyError as e:
        raise FormatError(path, str(e)) from e
    if not ((summary["model"] == "adapted") & (summary["split"] == "target_test")).any():
        raise FormatError(path, "no adapted/target_test row")
    source_miou = _metric(summary, "source_only", "target_test", "miou")
    adapted_miou = _metric(summary, "adapted", "target_test", "miou")
    # summaries without flag columns come from full-method runs
    flags = {name: int(summary[name].iloc[0]) if name in summary else 1 for name in ABLATION_FLAGS}
    return {
        "run": run_dir.relative_to(root).as_posix() if run_dir != root else ".",
        "alpha": float(summary["alpha"].iloc[0]),
        "seed": int(summary["seed"].iloc[0]),
        "variant": variant_name(flags),
        **flags,
        "source_val_ece": _metric(summary, "source_only", "source_val", "ece"),
        "source_miou": source_miou,
        "source_ece": _metric(summary, "source_only", "target_test", "ece"),
        "adapted_miou": adapted_miou,
        "adapted_ece": _metric(summary, "adapted", "target_test", "ece"),
        "oracle_miou": _metric(summary, "oracle", "target_test", "miou"),
        "miou_gain": adapted_miou - source_miou,
    }


def _group_means(frame: pd.DataFrame, keys: List[str], columns: List[str]) -> pd.DataFrame:
    if frame.empty:
        return pd.DataFrame(columns=columns)
    grouped = frame.groupby(keys, sort=True)
    means = grouped[METRIC_COLUMNS].mean()
    means.insert(0, "runs", grouped.size())
    return means.reset_index()[columns]


def build_sweep(runs: List[Path], root: Path) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """
    (one row per run sorted by alpha, seed, run; per-α means of the full-method
    runs; per-variant and α means over every run, full method first)
    """
    if not runs:
        raise EmptyInputError(f"no completed runs (eval/{SUMMARY_FILE}) under {root}")
    sweep = pd.DataFrame([run_row(r, root) for r in runs], columns=SWEEP_COLUMNS)
    sweep = sweep.sort_values(["alpha", "seed", "run"], kind="mergesort").reset_index(drop=True)
    means = _group_means(sweep[sweep["variant"] == FULL_METHOD], ["alpha"], MEAN_COLUMNS)
    ablation = _group_means(sweep, ["variant", "alpha", *ABLATION_FLAGS], ABLATION_COLUMNS)
    if not ablation.empty:
        order = (ablation["variant"] != FULL_METHOD).astype(int)
        ablation = ablation.assign(_order=order).sort_values(["_order", "variant", "alpha"], kind="mergesort")
        ablation = ablation.drop(columns="_order").reset_index(drop=True)
    return sweep, means, ablation


def _markdown_table(frame: pd.DataFrame) -> str:
    def cell(v: object) -> str:
        if isinstance(v, (float, np.floating)):
            return "n/a" if np.isnan(v) else f"{v:.4f}"
        return str(v)

    header = "| " + " | ".join(frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(cell(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *body])


def _plot_sweep(sweep: pd.DataFrame, means: pd.DataFrame, svg_path: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric, label in ((axes[0], "miou", "target mIoU"), (axes[1], "ece", "target ECE")):
        for model, color in (("source", "tab:gray"), ("adapted", "tab:blue")):
            column = f"{model}_{metric}"
            ax.scatter(sweep["alpha"], sweep[column], color=color, alpha=0.4, s=16)
            ax.plot(means["alpha"], means[column], marker="o", color=color, label=model)
        ax.set_xlabel("alpha")
        ax.set_ylabel(label)
        ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _pooled_diagrams(runs: List[Path], sweep: pd.DataFrame, root: Path, out_dir: Path) -> List[Path]:
    files: List[Path] = []
    alpha_of = {row.run: row.alpha for row in sweep.itertuples(index=False) if row.variant == FULL_METHOD}
    for alpha in sorted(set(alpha_of.values())):
        for model in DIAGRAM_MODELS:
            diagrams = []
            for run in runs:
                key = run.relative_to(root).as_posix() if run != root else "."
                path = run / "eval" / f"reliability_{model}_target_test.csv"
                if alpha_of.get(key) == alpha and path.exists():
                    diagrams.append(read_reliability_csv(path))
            if not diagrams:
                continue
            pooled = merge_diagrams(diagrams)
            csv_path, svg_path = export_reliability(
                pooled, out_dir / f"reliability_alpha{alpha:g}_{model}", title=f"{model}, alpha={alpha:g}"
            )
            files.extend([csv_path, svg_path])
    return files


def write_report(root: Union[str, Path], out_dir: Optional[Union[str, Path]] = None) -> Report:
    """
    Aggregate every completed run under root into <out_dir>/alpha_sweep.csv,
    alpha_means.csv, ablation.csv, alpha_sweep.svg, report.md and pooled
    reliability diagrams. Means, plot and pooled diagrams cover full-method runs.

    Raises:
        EmptyInputError: no completed runs under root
    """
    root = Path(root)
    out_dir = Path(out_dir) if out_dir is not None else root / REPORT_DIR
    runs = find_runs(root)
    sweep, means, ablation = build_sweep(runs, root)
    out_dir.mkdir(parents=True, exist_ok=True)

    write_csv(sweep, out_dir / "alpha_sweep.csv")
    write_csv(means, out_dir / "alpha_means.csv")
    write_csv(ablation, out_dir / "ablation.csv")
    _plot_sweep(sweep[sweep["variant"] == FULL_METHOD], means, out_dir / "alpha_sweep.svg")
    files = [
        out_dir / "alpha_sweep.csv",
        out_dir / "alpha_means.csv",
        out_dir / "ablation.csv",
        out_dir / "alpha_sweep.svg",
    ]
    files.extend(_pooled_diagrams(runs, sweep, root, out_dir))

    lines = [
        "# calseg report",
        "",
        f"{len(sweep)} run(s) under `{root.as_posix()}`. Source = selected source model, "
        "adapted = lowest-entropy adaptation epoch, oracle = best monitored target epoch; "
        "mIoU and ECE on the target test split.",
        "",
        "## Runs",
        "",
        _markdown_table(sweep),
        "",
        "## Mean per alpha (full method)",
        "",
        _markdown_table(means),
        "",
        "## Ablations",
        "",
        "Mean per variant and alpha; a variant names the components switched off.",
        "",
        _markdown_table(ablation),
        "",
    ]
    (out_dir / "report.md").write_text("\n".join(lines), encoding="utf-8")
    files.append(out_dir / "report.md")
    logger.info(f"report: {len(sweep)} runs, {len(means)} alpha values -> {out_dir}")
    return Report(sweep=sweep, means=means, ablation=ablation, files=files)
