"""
Stage orchestration over one run directory

Run layout:
    config.resolved.toml
    logs/calseg.log
    data/{source_train,source_val,target_train,target_test}/   CALSEG1 records
    source/epoch_XXX.ckpt, metrics.csv, selection.csv, selected.ckpt
    valuenet/valuenet.ckpt, metrics.csv
    adapt/round_<r>/..., metrics.csv, selection.csv, adapted.ckpt, oracle.ckpt
    eval/summary.csv, iou_<model>_<split>.csv, reliability_<model>_<split>.{csv,svg}

Every stage reads its inputs from disk and draws randomness from fresh
streams of the root seed, so any stage can be re-run on its own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .calibration import export_reliability
from .checkpoint import SEG_PREFIX, CheckpointMeta, load_checkpoint, restore, save_checkpoint
from .config import Settings
from .datagen import INDEX_FILE, SegDataset, generate_domain, read_dataset, split_validation, write_dataset
from .errors import MissingArtifactError, RangeError, StageMaskError
from .evaluation import SplitEvaluation, evaluate_model
from .model import SegModel, SegModelSpec, Stage, ValueNet, ValueNetSpec, set_eval, set_stage_masks
from .source_stage import (
    CheckpointRecord,
    SelectionCriterion,
    select_source_checkpoint,
    train_value_net,
)
from .source_stage import train_source as run_source_training
from .target_stage import adapt as run_adaptation
from .utils.metrics_csv import write_csv
from .utils.timing import StageTimer

SPLITS = ("source_train", "source_val", "target_train", "target_test")
SUMMARY_FILE = "summary.csv"
ABLATION_FLAGS = ("ece_loss", "statistic_warmup", "ece_guided", "symmetric")


def _finite(**values: float) -> Dict[str, float]:
    return {k: float(v) for k, v in values.items() if np.isfinite(v)}


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.resolved.toml"

    def data(self, split: str) -> Path:
        return self.root / "data" / split

    @property
    def source(self) -> Path:
        return self.root / "source"

    @property
    def selected(self) -> Path:
        return self.source / "selected.ckpt"

    @property
    def valuenet(self) -> Path:
        return self.root / "valuenet" / "valuenet.ckpt"

    @property
    def adapt(self) -> Path:
        return self.root / "adapt"

    @property
    def adapted(self) -> Path:
        return self.adapt / "adapted.ckpt"

    @property
    def oracle(self) -> Path:
        return self.adapt / "oracle.ckpt"

    @property
    def eval(self) -> Path:
        return self.root / "eval"

    @property
    def summary(self) -> Path:
        return self.eval / SUMMARY_FILE

    def source_epoch(self, epoch: int) -> Path:
        return self.source / f"epoch_{epoch:03d}.ckpt"


class CalsegPipeline:
    """
    The three-stage pipeline over one run directory

    One instance owns one run directory; stage methods raise
    MissingArtifactError when an earlier stage's output is absent.
    """

    def __init__(self, settings: Settings) -> None:
        self.settings = settings
        self.layout = RunLayout(settings.run_path)
        self.timer = StageTimer()
        self.logger = logging.getLogger(__name__)

    # ------------------------------------------------------------------ helpers

    def echo_config(self) -> Path:
        return self.settings.dump_toml(self.layout.config)

    def _require(self, stage: str, path: Path) -> Path:
        if not path.exists():
            raise MissingArtifactError(stage, path)
        return path

    def load_split(self, split: str) -> SegDataset:
        if split not in SPLITS:
            raise RangeError(f"unknown split '{split}', expected one of {', '.join(SPLITS)}")
        directory = self.layout.data(split)
        self._require("generate", directory / INDEX_FILE)
        return read_dataset(directory)

    def ablation_flags(self) -> Dict[str, int]:
        """Method components switched on (1) or off (0) in this run."""
        source, target = self.settings.source, self.settings.target
        return {
            "ece_loss": int(source.ece_loss),
            "statistic_warmup": int(target.statistic_warmup),
            "ece_guided": int(target.ece_guided),
            "symmetric": int(target.symmetric),
        }

    def build_model(self) -> SegModel:
        cfg = self.settings.model
        spec = SegModelSpec(
            in_channels=3,
            channels=tuple(cfg.channels),
            kernel_size=cfg.kernel_size,
            num_classes=self.settings.data.num_classes,
            tap_layer=cfg.tap_layer,
        )
        return SegModel(spec, self.settings.streams().fresh("init", 0))

    def build_value_net(self, model: SegModel) -> ValueNet:
        cfg = self.settings.model
        spec = ValueNetSpec(
            in_channels=model.feature_channels,
            channels=tuple(cfg.value_channels),
            kernel_size=cfg.kernel_size,
        )
        return ValueNet(spec, self.settings.streams().fresh("init", 1))

    def load_model(self, path: Path, stage: str, with_value_net: bool = False) -> tuple[SegModel, Optional[ValueNet]]:
        ckpt = load_checkpoint(self._require(stage, path))
        model = self.build_model()
        valuenet = self.build_value_net(model) if with_value_net else None
        restore(ckpt, model, valuenet)
        set_eval(model, valuenet)
        return model, valuenet

    # ------------------------------------------------------------------ stages

    def generate(self, force: bool = False) -> Dict[str, int]:
        """Synthetic source and target pools, split and written as record directories."""
        data = self.settings.data
        streams = self.settings.streams()
        threads = self.settings.effective_threads
        sizes: Dict[str, int] = {}
        with self.timer.measure("generate"):
            for key, (domain, fraction) in enumerate(
                (("source", data.source_val_fraction), ("target", data.target_test_fraction))
            ):
                pool = generate_domain(data.domain_spec(domain, self.settings.seed), domain, threads)
                split_seed = int(streams.seed_sequence("split", key).generate_state(1)[0])
                train, held = split_validation(pool, fraction, split_seed)
                held_split = "source_val" if domain == "source" else "target_test"
                for split, dataset in ((f"{domain}_train", train), (held_split, held)):
                    dataset.name = split
                    write_dataset(dataset, self.layout.data(split), force=force)
                    sizes[split] = len(dataset)
        self.logger.info(f"generate: {sizes}")
        return sizes

    def train_source(self) -> List[CheckpointRecord]:
        train = self.load_split("source_train")
        val = self.load_split("source_val")
        model = self.build_model()
        for stale in self.layout.source.glob("epoch_*.ckpt"):
            stale.unlink()
        with self.timer.measure("train-source"):
            pool = run_source_training(
                train,
                val,
                model,
                self.settings.source,
                self.settings.calib,
                self.settings.streams(),
                checkpoint_dir=self.layout.source,
                metrics_path=self.layout.source / "metrics.csv",
                flip_probability=self.settings.data.flip_probability,
            )
        return pool

    def load_source_pool(self) -> List[CheckpointRecord]:
        """CheckpointRecords of every source epoch checkpoint on disk."""
        paths = sorted(self.layout.source.glob("epoch_*.ckpt"))
        if not paths:
            raise MissingArtifactError("train-source", self.layout.source / "epoch_*.ckpt")
        pool = []
        for path in paths:
            ckpt = load_checkpoint(path)
            m = ckpt.meta.metrics
            pool.append(
                CheckpointRecord(
                    stage=ckpt.stage,
                    epoch=ckpt.meta.epoch,
                    state={k[len(SEG_PREFIX) :]: v for k, v in ckpt.arrays.items() if k.startswith(SEG_PREFIX)},
                    ece_mean=m["val_ece_mean"],
                    ece_max=m["val_ece_max"],
                    ece_min=m["val_ece_min"],
                    l_seg=m["l_seg"],
                    l_ece_diff=m["l_ece_diff"],
                    source_miou=m["source_miou"],
                    path=path,
                )
            )
        return pool

    def _fill_target_miou(self, pool: List[CheckpointRecord]) -> None:
        """Labeled target_test mIoU of every pool checkpoint, for the oracle criterion and the selection table."""
        target = self.load_split("target_test")
        model = self.build_model()
        for record in pool:
            model.load_state_dict(record.state)
            record.target_miou = evaluate_model(model, target, self.settings.calib.bins).iou.miou

    def select_source(self, criterion: Optional[SelectionCriterion] = None) -> CheckpointRecord:
        """Pick θ* from the on-disk pool and write selected.ckpt plus selection.csv."""
        criterion = criterion or self.settings.source.criterion
        with self.timer.measure("select-source"):
            pool = self.load_source_pool()
            self._fill_target_miou(pool)
            chosen = select_source_checkpoint(pool, criterion)
            oracle_epoch = min(pool, key=lambda r: (-(r.target_miou or 0.0), r.epoch)).epoch
            frame = pd.DataFrame(
                {
                    "epoch": [r.epoch for r in pool],
                    "val_ece_mean": [r.ece_mean for r in pool],
                    "val_ece_max": [r.ece_max for r in pool],
                    "val_ece_min": [r.ece_min for r in pool],
                    "ece_score": [r.ece_score for r in pool],
                    "source_miou": [r.source_miou for r in pool],
                    "target_miou": [r.target_miou for r in pool],
                    "selected": [int(r.epoch == chosen.epoch) for r in pool],
                    "target_oracle": [int(r.epoch == oracle_epoch) for r in pool],
                }
            )
            write_csv(frame, self.layout.source / "selection.csv")
            model = self.build_model()
            model.load_state_dict(chosen.state)
            save_checkpoint(
                self.layout.selected,
                model,
                None,
                CheckpointMeta(
                    stage=Stage.SOURCE.value,
                    epoch=chosen.epoch,
                    metrics=chosen.metrics(),
                    notes={"criterion": criterion, "ece_score": chosen.ece_score},
                ),
            )
        self.logger.info(
            f"select-source: epoch {chosen.epoch} by {criterion} "
            f"(ECE mean+max+min={chosen.ece_score:.4f}, source mIoU={chosen.source_miou:.4f}, "
            f"target mIoU={chosen.target_miou:.4f}; target oracle epoch {oracle_epoch})"
        )
        return chosen

    def train_valuenet(self) -> Path:
        """Fit φ on the frozen θ*; writes valuenet.ckpt holding both."""
        train = self.load_split("source_train")
        val = self.load_split("source_val")
        model, _ = self.load_model(self.layout.selected, "select-source")
        valuenet = self.build_value_net(model)
        set_stage_masks(model, valuenet, Stage.VALUENET)
        before = model.checksum()
        with self.timer.measure("train-valuenet"):
            result = train_value_net(
                train,
                val,
                model,
                valuenet,
                self.settings.valuenet,
                self.settings.calib,
                self.settings.streams(),
                metrics_path=self.layout.valuenet.parent / "metrics.csv",
            )
        after = model.checksum()
        if after != before:
            raise StageMaskError(f"source parameters changed during value net training ({before} -> {after})")
        return save_checkpoint(
            self.layout.valuenet,
            model,
            valuenet,
            CheckpointMeta(
                stage=Stage.VALUENET.value,
                epoch=result.best_epoch,
                metrics={"val_l_match": result.best_val_loss, "val_ece_variance": result.val_ece_variance},
                notes={"seg_checksum": after},
            ),
        )

    def adapt(self) -> Path:
        """Self-training on target_train; writes adapted.ckpt (and oracle.ckpt when a pick exists)."""
        target_train = self.load_split("target_train")
        monitor = self.load_split("target_test")
        model, valuenet = self.load_model(self.layout.valuenet, "train-valuenet", with_value_net=True)
        assert valuenet is not None
        cfg = self.settings.target
        with self.timer.measure("adapt"):
            result = run_adaptation(
                target_train,
                model,
                valuenet,
                cfg,
                self.settings.calib,
                self.settings.streams(),
                out_dir=self.layout.adapt,
                monitor=monitor,
                flip_probability=self.settings.data.flip_probability,
            )
        chosen = result.selected_record
        if chosen is None:
            meta = CheckpointMeta(stage="adapted", notes={"rounds": 0})
        else:
            meta = CheckpointMeta(
                stage="adapted",
                epoch=chosen.epoch,
                round=chosen.round,
                metrics=_finite(mean_entropy=chosen.mean_entropy, monitor_miou=chosen.monitor_miou),
                notes={"phase": chosen.phase, "rounds": cfg.rounds},
            )
        path = save_checkpoint(self.layout.adapted, model, valuenet, meta)

        if result.records:
            frame = pd.DataFrame(
                {
                    "round": [r.round for r in result.records],
                    "epoch": [r.epoch for r in result.records],
                    "phase": [r.phase for r in result.records],
                    "mean_entropy": [r.mean_entropy for r in result.records],
                    "monitor_miou": [r.monitor_miou for r in result.records],
                    "selected": [int(i == result.selected) for i in range(len(result.records))],
                    "oracle": [int(i == result.oracle) for i in range(len(result.records))],
                }
            )
            write_csv(frame, self.layout.adapt / "selection.csv")
        if result.oracle is not None:
            best = result.records[result.oracle]
            oracle_model = self.build_model()
            oracle_model.load_state_dict(best.seg_state)
            save_checkpoint(
                self.layout.oracle,
                oracle_model,
                None,
                CheckpointMeta(
                    stage="oracle",
                    epoch=best.epoch,
                    round=best.round,
                    metrics=_finite(mean_entropy=best.mean_entropy, monitor_miou=best.monitor_miou),
                ),
            )
        elif self.layout.oracle.exists():
            self.layout.oracle.unlink()
        return path

    def evaluate_checkpoint(self, name: str, path: Path, split: str, stage: str = "evaluate") -> Dict[str, float]:
        """Per-class IoU table and reliability diagram of one checkpoint on one split."""
        model, _ = self.load_model(path, stage)
        dataset = self.load_split(split)
        result: SplitEvaluation = evaluate_model(model, dataset, self.settings.calib.bins)
        tag = f"{name}_{split}"
        iou = pd.DataFrame({"class": np.arange(len(result.iou.per_class)), "iou": result.iou.per_class})
        write_csv(iou, self.layout.eval / f"iou_{tag}.csv")
        export_reliability(result.diagram, self.layout.eval / f"reliability_{tag}", title=f"{name} on {split}")
        self.logger.info(f"evaluate {name} on {split}: mIoU={result.iou.miou:.4f} ECE={result.ece:.4f}")
        row: Dict[str, float] = {"miou": result.iou.miou, "ece": result.ece}
        row.update({f"iou_{c}": float(v) for c, v in enumerate(result.iou.per_class)})
        return row

    def evaluate(self, checkpoint: Optional[Path] = None, split: Optional[str] = None) -> pd.DataFrame:
        """
        Without arguments: source-only on source_val and target_test, adapted (and
        oracle, if present) on target_test, collected in eval/summary.csv. With a
        checkpoint and/or split only that pair is evaluated and no summary is written.
        """
        with self.timer.measure("evaluate"):
            if checkpoint is not None or split is not None:
                path = Path(checkpoint) if checkpoint is not None else self.layout.adapted
                split = split or "target_test"
                row = self.evaluate_checkpoint(path.stem, path, split)
                return pd.DataFrame([{"model": path.stem, "split": split, **row}])

            plan = [
                ("source_only", self.layout.selected, "source_val", "select-source"),
                ("source_only", self.layout.selected, "target_test", "select-source"),
                ("adapted", self.layout.adapted, "target_test", "adapt"),
            ]
            if self.layout.oracle.exists():
                plan.append(("oracle", self.layout.oracle, "target_test", "adapt"))
            rows = []
            for name, path, split_name, stage in plan:
                row = self.evaluate_checkpoint(name, path, split_name, stage)
                rows.append(
                    {
                        "model": name,
                        "split": split_name,
                        "alpha": self.settings.calib.alpha,
                        "seed": self.settings.seed,
                        **self.ablation_flags(),
                        **row,
                    }
                )
            frame = pd.DataFrame(rows)
            write_csv(frame, self.layout.summary)
        return frame

    def run(self) -> pd.DataFrame:
        """Every stage in order, skipping those whose final artifact is already on disk."""
        layout = self.layout
        if not (layout.data("target_test") / INDEX_FILE).exists():
            self.generate()
        else:
            self.logger.info("run: data present, skipping generate")
        if not layout.source_epoch(self.settings.source.epochs).exists():
            self.train_source()
        else:
            self.logger.info("run: source checkpoints present, skipping train-source")
        if not layout.selected.exists():
            self.select_source()
        if not layout.valuenet.exists():
            self.train_valuenet()
        if not layout.adapted.exists():
            self.adapt()
        return self.evaluate()
