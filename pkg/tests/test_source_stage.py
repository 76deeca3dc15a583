"""
Test source pre-training, checkpoint selection and the value net
"""

import math
from typing import Optional

import numpy as np
import pandas as pd
import pytest

from calseg.autodiff import Tensor, default_dtype
from calseg.config import CalibConfig, SourceConfig, ValueNetConfig
from calseg.datagen import IGNORE_LABEL
from calseg.errors import EmptyInputError, RangeError, StageMaskError
from calseg.model import SegModel, SegModelSpec, Stage, ValueNet, ValueNetSpec, set_stage_masks
from calseg.source_stage import (
    SOURCE_COLUMNS,
    CheckpointRecord,
    _match_loss,
    seg_loss,
    select_source_checkpoint,
    train_source,
    train_value_net,
)
from calseg.utils.rng import RngStreams

SPEC = SegModelSpec(channels=(4, 6), num_classes=3, tap_layer=1)


def record(
    epoch: int, mean: float, high: float, low: float, source_miou: float = 0.5, target_miou: Optional[float] = None
) -> CheckpointRecord:
    return CheckpointRecord(
        stage="source",
        epoch=epoch,
        state={},
        ece_mean=mean,
        ece_max=high,
        ece_min=low,
        l_seg=1.0,
        l_ece_diff=0.0,
        source_miou=source_miou,
        target_miou=target_miou,
    )


def logits_1x1(*values: float) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64).reshape(1, -1, 1, 1), dtype=np.float64)


class TestSegLoss:
    """Test pixel cross-entropy"""

    def test_confident_correct_is_zero(self):
        with default_dtype(np.float64):
            loss = seg_loss(logits_1x1(50.0, 0.0, 0.0), np.zeros((1, 1, 1), dtype=np.int64))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_is_log_classes(self):
        labels = np.random.default_rng(0).integers(0, 5, size=(2, 3, 3))
        loss = seg_loss(Tensor(np.zeros((2, 5, 3, 3)), dtype=np.float64), labels)
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_two_class_point_eight(self):
        with default_dtype(np.float64):
            loss = seg_loss(logits_1x1(math.log(4.0), 0.0), np.zeros((1, 1, 1), dtype=np.int64))
        assert loss.item() == pytest.approx(-math.log(0.8), abs=1e-12)
        assert loss.item() == pytest.approx(0.2231, abs=1e-4)

    def test_ignored_pixels_excluded(self):
        z = np.zeros((1, 2, 1, 2))
        z[0, 0, 0, 0] = math.log(4.0)
        labels = np.array([[[0, IGNORE_LABEL]]])
        loss = seg_loss(Tensor(z, dtype=np.float64), labels)

        assert loss.item() == pytest.approx(-math.log(0.8), abs=1e-12)

    def test_all_ignored(self):
        with pytest.raises(EmptyInputError):
            seg_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), IGNORE_LABEL))


class TestSelection:
    """Test checkpoint selection"""

    def test_lowest_score_wins(self):
        pool = [record(1, 0.1, 0.2, 0.05), record(2, 0.12, 0.15, 0.05)]
        assert select_source_checkpoint(pool).epoch == 2

    def test_single_checkpoint(self):
        only = record(1, 0.3, 0.4, 0.2)
        assert select_source_checkpoint([only]) is only

    def test_shift_invariance(self):
        pool = [record(1, 0.1, 0.2, 0.05), record(2, 0.12, 0.15, 0.05), record(3, 0.2, 0.3, 0.1)]
        shifted = [record(r.epoch, r.ece_mean + 0.1, r.ece_max + 0.1, r.ece_min + 0.1) for r in pool]

        assert select_source_checkpoint(pool).epoch == select_source_checkpoint(shifted).epoch

    def test_tie_goes_to_earliest(self):
        pool = [record(3, 0.1, 0.2, 0.1), record(1, 0.1, 0.2, 0.1), record(2, 0.2, 0.2, 0.1)]
        assert select_source_checkpoint(pool).epoch == 1

    def test_source_miou_criterion(self):
        pool = [record(1, 0.1, 0.2, 0.05, source_miou=0.7), record(2, 0.12, 0.15, 0.05, source_miou=0.6)]
        assert select_source_checkpoint(pool, "source_miou").epoch == 1

    def test_target_miou_oracle(self):
        pool = [
            record(1, 0.1, 0.2, 0.05, source_miou=0.7, target_miou=0.3),
            record(2, 0.3, 0.4, 0.2, source_miou=0.6, target_miou=0.45),
            record(3, 0.2, 0.3, 0.1, source_miou=0.5, target_miou=0.45),
        ]

        assert select_source_checkpoint(pool, "ece").epoch == 1
        assert select_source_checkpoint(pool, "target_miou").epoch == 2

    def test_target_miou_needs_every_record(self):
        pool = [record(1, 0.1, 0.2, 0.05, target_miou=0.4), record(2, 0.1, 0.2, 0.05)]
        with pytest.raises(RangeError, match="target mIoU"):
            select_source_checkpoint(pool, "target_miou")

    def test_empty_pool(self):
        with pytest.raises(EmptyInputError):
            select_source_checkpoint([])

    def test_unknown_criterion(self):
        with pytest.raises(RangeError):
            select_source_checkpoint([record(1, 0.1, 0.1, 0.1)], "accuracy")  # type: ignore[arg-type]


class TestTrainSource:
    """Test the source training loop on a toy dataset"""

    def run(self, dataset_factory, tmp_path=None, alpha: float = 1.0, epochs: int = 2, ece_loss: bool = True):
        model = SegModel(SPEC, np.random.default_rng(0))
        cfg = SourceConfig(epochs=epochs, batch_size=2, ece_warmup_epochs=1, lr=0.01, ece_loss=ece_loss)
        pool = train_source(
            dataset_factory(n=4, seed=1),
            dataset_factory(n=2, seed=2),
            model,
            cfg,
            CalibConfig(alpha=alpha),
            RngStreams(0),
            checkpoint_dir=tmp_path / "ckpt" if tmp_path else None,
            metrics_path=tmp_path / "metrics.csv" if tmp_path else None,
        )
        return model, pool

    def test_pool_size_and_stats(self, dataset_factory, tmp_path):
        _, pool = self.run(dataset_factory, tmp_path)

        assert [r.epoch for r in pool] == [1, 2]
        for r in pool:
            assert r.ece_min <= r.ece_mean <= r.ece_max
            assert r.path is not None and r.path.exists()
        assert pool[0].l_ece_diff == 0.0
        assert pool[1].l_ece_diff > 0.0

        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert list(frame.columns) == SOURCE_COLUMNS
        assert len(frame) == 2

    def test_ece_term_waits_for_warmup(self, dataset_factory):
        """Before the ECE term joins, α has no effect on the trajectory"""
        _, with_ece = self.run(dataset_factory, alpha=1.0, epochs=1)
        _, without = self.run(dataset_factory, alpha=0.0, epochs=1)

        assert with_ece[0].l_seg == without[0].l_seg
        for name, value in with_ece[0].state.items():
            np.testing.assert_array_equal(value, without[0].state[name])

    def test_ece_loss_switched_off(self, dataset_factory):
        """Without the ECE term the run matches α = 0 exactly"""
        _, switched_off = self.run(dataset_factory, alpha=1.0, ece_loss=False)
        _, plain = self.run(dataset_factory, alpha=0.0)

        assert [r.l_ece_diff for r in switched_off] == [0.0, 0.0]
        for name, value in switched_off[-1].state.items():
            np.testing.assert_array_equal(value, plain[-1].state[name])

    def test_snapshot_restores(self, dataset_factory):
        model, pool = self.run(dataset_factory)
        other = SegModel(SPEC, np.random.default_rng(9))
        other.load_state_dict(pool[-1].state)

        assert other.checksum() == model.checksum()

    def test_empty_validation(self, dataset_factory, toy_dataset):
        model = SegModel(SPEC, np.random.default_rng(0))
        with pytest.raises(EmptyInputError):
            train_source(toy_dataset, toy_dataset.subset([]), model, SourceConfig(), CalibConfig(), RngStreams(0))


class TestValueNet:
    """Test value net training"""

    def networks(self):
        model = SegModel(SPEC, np.random.default_rng(0))
        valuenet = ValueNet(ValueNetSpec(in_channels=model.feature_channels, channels=(4,)), np.random.default_rng(1))
        return model, valuenet

    def test_match_loss_identities(self):
        target = np.array([0.1, 0.3, 0.2, 0.4])
        with default_dtype(np.float64):
            assert _match_loss(Tensor(target), target).item() == 0.0
            constant = _match_loss(Tensor(np.full(4, target.mean())), target).item()

        assert constant == pytest.approx(np.var(target))

    def test_frozen_segmentation_model(self, dataset_factory):
        model, valuenet = self.networks()
        set_stage_masks(model, valuenet, Stage.VALUENET)
        before = model.checksum()
        result = train_value_net(
            dataset_factory(n=6, seed=1),
            dataset_factory(n=4, seed=2),
            model,
            valuenet,
            ValueNetConfig(epochs=2, batch_size=2),
            CalibConfig(),
            RngStreams(0),
        )

        assert model.checksum() == before
        assert 0 <= result.best_epoch <= 2
        assert len(result.history) <= 2
        assert result.best_val_loss <= min([h["val_l_match"] for h in result.history] + [math.inf]) + 1e-12

    def test_requires_valuenet_stage(self, dataset_factory):
        model, valuenet = self.networks()
        set_stage_masks(model, valuenet, Stage.SOURCE)

        with pytest.raises(StageMaskError):
            train_value_net(
                dataset_factory(n=4),
                dataset_factory(n=2),
                model,
                valuenet,
                ValueNetConfig(epochs=1, batch_size=2),
                CalibConfig(),
                RngStreams(0),
            )
