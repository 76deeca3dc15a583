"""
Test the staged pipeline and the command line on a tiny configuration
"""

import shutil
from pathlib import Path
from typing import Dict

import pandas as pd
import pytest
from click.testing import CliRunner

from calseg.app import cli
from calseg.checkpoint import load_checkpoint
from calseg.config import build_settings
from calseg.errors import MissingArtifactError, OutputExistsError, RangeError
from calseg.pipeline import ABLATION_FLAGS, CalsegPipeline


def artifact_bytes(root: Path) -> Dict[str, bytes]:
    """Every metrics CSV and checkpoint under root, keyed by relative path."""
    files = sorted([*root.rglob("*.csv"), *root.rglob("*.ckpt")])
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in files}


@pytest.fixture
def pipeline(tiny_settings) -> CalsegPipeline:
    return CalsegPipeline(tiny_settings)


class TestStages:
    """Test individual stages and their prerequisites"""

    def test_generate_splits(self, pipeline):
        sizes = pipeline.generate()

        assert set(sizes) == {"source_train", "source_val", "target_train", "target_test"}
        assert sizes["source_train"] + sizes["source_val"] == 12
        assert sizes["target_train"] + sizes["target_test"] == 12
        assert len(pipeline.load_split("target_test")) == sizes["target_test"]

    def test_generate_refuses_overwrite(self, pipeline):
        pipeline.generate()
        with pytest.raises(OutputExistsError):
            pipeline.generate()
        pipeline.generate(force=True)

    def test_unknown_split(self, pipeline):
        with pytest.raises(RangeError):
            pipeline.load_split("validation")

    def test_missing_prerequisites(self, pipeline):
        with pytest.raises(MissingArtifactError):
            pipeline.train_source()
        pipeline.generate()
        with pytest.raises(MissingArtifactError, match="select-source"):
            pipeline.train_valuenet()
        with pytest.raises(MissingArtifactError, match="train-source"):
            pipeline.select_source()

    def test_target_miou_criterion(self, pipeline):
        pipeline.generate()
        pipeline.train_source()
        chosen = pipeline.select_source("target_miou")
        selection = pd.read_csv(pipeline.layout.source / "selection.csv")
        oracle = selection[selection["target_oracle"] == 1]

        assert chosen.epoch == int(oracle["epoch"].iloc[0])
        assert selection.loc[selection["selected"] == 1, "epoch"].tolist() == [chosen.epoch]
        assert load_checkpoint(pipeline.layout.selected).meta.notes["criterion"] == "target_miou"

    def test_stage_by_stage(self, pipeline):
        layout = pipeline.layout
        pipeline.generate()
        pool = pipeline.train_source()
        chosen = pipeline.select_source()
        pipeline.train_valuenet()
        pipeline.adapt()

        assert len(pool) == 2
        assert chosen.epoch in (1, 2)
        selection = pd.read_csv(layout.source / "selection.csv")
        assert selection["selected"].sum() == 1
        assert selection["target_oracle"].sum() == 1
        assert selection["target_miou"].between(0.0, 1.0).all()
        assert load_checkpoint(layout.valuenet).meta.notes["seg_checksum"]
        assert load_checkpoint(layout.adapted).stage == "adapted"
        assert (layout.adapt / "round_1" / "thresholds.csv").exists()


class TestRun:
    """Test the resumable end-to-end run"""

    def test_summary(self, pipeline):
        frame = pipeline.run()

        assert pipeline.layout.summary.exists()
        assert list(zip(frame["model"], frame["split"]))[:3] == [
            ("source_only", "source_val"),
            ("source_only", "target_test"),
            ("adapted", "target_test"),
        ]
        assert frame["miou"].between(0.0, 1.0).all()
        assert frame["ece"].between(0.0, 1.0).all()
        assert (pipeline.layout.eval / "reliability_adapted_target_test.svg").exists()
        assert frame[list(ABLATION_FLAGS)].eq(1).all().all()

    def test_ablation_flags_in_summary(self, tmp_path, tiny_overrides):
        target = {**tiny_overrides["target"], "statistic_warmup": False, "symmetric": False}
        overrides = {**tiny_overrides, "target": target, "run_dir": str(tmp_path / "run")}
        frame = CalsegPipeline(build_settings(overrides=overrides)).run()
        first = frame.iloc[0]

        assert (first["ece_loss"], first["statistic_warmup"], first["ece_guided"], first["symmetric"]) == (1, 0, 1, 0)
        metrics = pd.read_csv(tmp_path / "run" / "adapt" / "metrics.csv")
        assert "warmup" not in set(metrics["phase"])

    def test_resume_skips_finished_stages(self, pipeline):
        pipeline.run()
        stamp = pipeline.layout.adapted.stat().st_mtime_ns
        again = CalsegPipeline(pipeline.settings).run()

        assert pipeline.layout.adapted.stat().st_mtime_ns == stamp
        assert len(again) >= 3

    def test_same_seed_same_artifacts(self, tmp_path, tiny_overrides):
        artifacts = []
        for name in ("a", "b"):
            settings = build_settings(overrides={**tiny_overrides, "run_dir": str(tmp_path / name)})
            CalsegPipeline(settings).run()
            artifacts.append(artifact_bytes(tmp_path / name))

        assert "eval/summary.csv" in artifacts[0]
        assert "source/selected.ckpt" in artifacts[0]
        assert "adapt/adapted.ckpt" in artifacts[0]
        assert sorted(artifacts[0]) == sorted(artifacts[1])
        for name, content in artifacts[0].items():
            assert content == artifacts[1][name], name

    def test_resume_reproduces_later_stages(self, pipeline):
        """Deleting everything after select-source and re-running gives identical bytes"""
        pipeline.run()
        layout = pipeline.layout
        before = artifact_bytes(layout.root)
        shutil.rmtree(layout.valuenet.parent)
        shutil.rmtree(layout.adapt)
        shutil.rmtree(layout.eval)

        CalsegPipeline(pipeline.settings).run()

        assert artifact_bytes(layout.root) == before


SEEDS = (0, 1, 2)


def target_metric(frame: pd.DataFrame, model: str, column: str) -> float:
    row = frame[(frame["model"] == model) & (frame["split"] == "target_test")]
    return float(row[column].iloc[0])


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory) -> Dict[tuple, CalsegPipeline]:
    """Default-size runs for every seed at alpha 0 and 1."""
    root = tmp_path_factory.mktemp("runs")
    runs = {}
    for alpha in (0.0, 1.0):
        for seed in SEEDS:
            run_dir = root / f"alpha{alpha:g}" / f"seed{seed}"
            overrides = {"seed": seed, "run_dir": str(run_dir), "calib": {"alpha": alpha}}
            pipeline = CalsegPipeline(build_settings(overrides=overrides))
            pipeline.run()
            runs[(alpha, seed)] = pipeline
    return runs


@pytest.mark.integration
class TestDefaultSweep:
    """Test the end-to-end claims over three seeds at default size"""

    def summary(self, pipeline: CalsegPipeline) -> pd.DataFrame:
        return pd.read_csv(pipeline.layout.summary)

    def test_adaptation_gains_target_miou(self, default_runs):
        gains = []
        for seed in SEEDS:
            frame = self.summary(default_runs[(1.0, seed)])
            gains.append(target_metric(frame, "adapted", "miou") - target_metric(frame, "source_only", "miou"))

        assert sum(gain >= 0.03 for gain in gains) >= 2, gains

    def test_ece_loss_lowers_source_target_ece(self, default_runs):
        pairs = []
        for seed in SEEDS:
            with_loss = target_metric(self.summary(default_runs[(1.0, seed)]), "source_only", "ece")
            without = target_metric(self.summary(default_runs[(0.0, seed)]), "source_only", "ece")
            pairs.append((with_loss, without))

        assert sum(a < b for a, b in pairs) >= 2, pairs

    def test_source_model_fits_source_train(self, default_runs):
        for seed in SEEDS:
            pipeline = default_runs[(1.0, seed)]
            frame = pipeline.evaluate(checkpoint=pipeline.layout.selected, split="source_train")

            assert frame["miou"].iloc[0] > 0.6, seed

    def test_value_net_beats_constant_predictor(self, default_runs):
        for seed in SEEDS:
            metrics = pd.read_csv(default_runs[(1.0, seed)].layout.valuenet.parent / "metrics.csv")

            assert metrics["val_l_match"].min() < metrics["val_ece_variance"].iloc[0], seed


class TestCli:
    """Test the click command surface"""

    @pytest.fixture(autouse=True)
    def tiny_config(self, tmp_path, tiny_overrides):
        self.config = build_settings(overrides=tiny_overrides).dump_toml(tmp_path / "tiny.toml")

    def invoke(self, tmp_path, *args):
        return CliRunner().invoke(cli, ["--config", str(self.config), "--run-dir", str(tmp_path / "run"), *args])

    def test_generate_twice(self, tmp_path):
        first = self.invoke(tmp_path, "generate")
        second = self.invoke(tmp_path, "generate")
        forced = self.invoke(tmp_path, "generate", "--force")

        assert first.exit_code == 0, first.output
        assert "source_train" in first.output
        assert second.exit_code == 1
        assert "OutputExistsError" in second.output
        assert forced.exit_code == 0
        assert (tmp_path / "run" / "config.resolved.toml").exists()

    def test_stage_out_of_order(self, tmp_path):
        result = self.invoke(tmp_path, "adapt")

        assert result.exit_code == 1
        assert "MissingArtifactError" in result.output

    def test_set_override(self, tmp_path):
        result = self.invoke(tmp_path, "--set", "data.source_images=6", "generate")

        assert result.exit_code == 0, result.output
        assert "source_val: 1 images" in result.output

    def test_report_without_runs(self, tmp_path):
        (tmp_path / "empty").mkdir()
        result = CliRunner().invoke(cli, ["report", str(tmp_path / "empty")])

        assert result.exit_code == 1
        assert "EmptyInputError" in result.output

    def test_gradcheck(self):
        result = CliRunner().invoke(cli, ["gradcheck", "--instances", "2"])

        assert result.exit_code == 0, result.output
        assert "FAIL" not in result.output
