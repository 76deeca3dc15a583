"""
Test pseudo-labeling, the target losses, statistic warm-up and adaptation rounds
"""

import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from calseg.autodiff import GradientTape, Tensor, default_dtype
from calseg.config import CalibConfig, TargetConfig
from calseg.datagen import IGNORE_LABEL
from calseg.errors import EmptyInputError, RangeError, StageMaskError
from calseg.model import SegModel, SegModelSpec, Stage, ValueNet, ValueNetSpec, set_stage_masks
from calseg.target_stage import (
    BOTH,
    GLOBAL,
    LOCAL,
    UNLABELED,
    ClassThresholds,
    adapt,
    adjusted_confidence,
    assign_pseudo_labels,
    compute_class_thresholds,
    entropy_loss,
    estimate_pseudo_labels,
    negative_loss,
    sample_complementary,
    sce_components,
    sce_loss,
    select_by_entropy,
    statistic_warmup,
    target_loss,
    top_delta_threshold,
)
from calseg.utils.rng import RngStreams

SPEC = SegModelSpec(channels=(4, 6), num_classes=3, tap_layer=1)


def pixel_logits(*probs: float) -> Tensor:
    """1×C×1×1 float64 logits with the given softmax probabilities."""
    return Tensor(np.log(np.array(probs)).reshape(1, -1, 1, 1), dtype=np.float64)


def networks():
    model = SegModel(SPEC, np.random.default_rng(0))
    valuenet = ValueNet(ValueNetSpec(in_channels=model.feature_channels, channels=(4,)), np.random.default_rng(1))
    return model, valuenet


class TestAdjustedConfidence:
    """Test calibration-guided confidence"""

    def test_zero_ece_keeps_confidence(self):
        p = np.random.default_rng(0).uniform(size=(2, 3, 3))
        np.testing.assert_array_equal(adjusted_confidence(p, np.zeros(2)), p)

    def test_zero_confidence(self):
        np.testing.assert_array_equal(adjusted_confidence(np.zeros((2, 2, 2)), np.array([0.3, 0.9])), 0.0)

    def test_scaling_per_image(self):
        out = adjusted_confidence(np.full((2, 1, 1), 0.5), np.array([0.2, 0.5]))
        np.testing.assert_allclose(out.reshape(-1), [0.4, 0.25])

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            adjusted_confidence(np.full((1, 1, 1), 1.5), np.array([0.1]))
        with pytest.raises(RangeError):
            adjusted_confidence(np.full((1, 1, 1), 0.5), np.array([1.1]))


class TestThresholds:
    """Test class-balanced thresholds"""

    RANKED = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.45, 0.4, 0.3, 0.2, 0.1])

    def test_top_delta_example(self):
        assert top_delta_threshold(self.RANKED, 0.15) == 0.8
        assert top_delta_threshold(np.random.default_rng(0).permutation(self.RANKED), 0.15) == 0.8

    def test_full_ratio_clamps_to_smallest(self):
        assert top_delta_threshold(self.RANKED, 1.0) == 0.1

    def test_class_thresholds(self):
        adjusted = self.RANKED.reshape(1, 2, 5)
        pred = np.zeros((1, 2, 5), dtype=np.int64)
        th = compute_class_thresholds(adjusted, pred, 0.15, num_classes=2)

        np.testing.assert_allclose(th.xi, [0.8, 1.0])
        assert th.member_counts.tolist() == [10, 0]
        assert th.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert th.weights[1] == pytest.approx(math.exp(1.0) / (math.exp(0.8) + math.exp(1.0)))

    def test_equal_thresholds_equal_weights(self):
        th = ClassThresholds.from_xi(np.array([0.3, 0.3]), np.array([4, 4]))
        np.testing.assert_allclose(th.weights, [0.5, 0.5])

    def test_empty_dataset(self):
        with pytest.raises(EmptyInputError):
            compute_class_thresholds(np.zeros((0, 2, 2)), np.zeros((0, 2, 2), dtype=np.int64), 0.15, 2)

    @pytest.mark.parametrize("delta", [0.0, 1.5])
    def test_bad_ratio(self, delta):
        with pytest.raises(RangeError):
            compute_class_thresholds(np.ones((1, 2, 2)), np.zeros((1, 2, 2), dtype=np.int64), delta, 2)


class TestPseudoLabels:
    """Test global/local pseudo-label fusion"""

    def random_case(self, n: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        adjusted = rng.permutation(n * 36).reshape(n, 6, 6) / (n * 36.0)
        pred = rng.integers(0, 3, size=(n, 6, 6))
        return adjusted, pred

    @pytest.mark.parametrize("delta", [0.05, 0.15, 0.5, 1.0])
    def test_global_labeled_count(self, delta):
        """With distinct confidences exactly min(floor(δm), m−1) pixels per class pass globally"""
        for seed in range(50):
            adjusted, pred = self.random_case(n=2 + seed % 3, seed=seed)
            th = compute_class_thresholds(adjusted, pred, delta, 3)
            pseudo = assign_pseudo_labels(adjusted, pred, th, delta)

            for c in range(3):
                m = int((pred == c).sum())
                global_hits = int(((pseudo.provenance & GLOBAL) > 0)[pred == c].sum())
                assert global_hits == min(math.floor(delta * m), m - 1), (seed, c)
                labeled = pseudo.labels[pred == c]
                assert np.all((labeled == c) | (labeled == IGNORE_LABEL))

    def test_labels_follow_prediction(self):
        adjusted, pred = self.random_case()
        th = compute_class_thresholds(adjusted, pred, 0.3, 3)
        pseudo = assign_pseudo_labels(adjusted, pred, th, 0.3)
        labeled = pseudo.labels != IGNORE_LABEL

        np.testing.assert_array_equal(pseudo.labels[labeled], pred[labeled])
        np.testing.assert_array_equal(labeled, pseudo.provenance != UNLABELED)
        assert set(np.unique(pseudo.provenance)) <= {UNLABELED, GLOBAL, LOCAL, BOTH}

    def test_single_image_paths_coincide(self):
        adjusted, pred = self.random_case(n=1)
        th = compute_class_thresholds(adjusted, pred, 0.2, 3)
        pseudo = assign_pseudo_labels(adjusted, pred, th, 0.2)

        assert set(np.unique(pseudo.provenance)) <= {UNLABELED, BOTH}

    def test_everything_below_threshold(self):
        adjusted = np.full((1, 2, 2), 0.3)
        pred = np.zeros((1, 2, 2), dtype=np.int64)
        th = ClassThresholds.from_xi(np.array([0.9, 0.9]), np.array([4, 0]))
        pseudo = assign_pseudo_labels(adjusted, pred, th, 0.15)

        assert np.all(pseudo.labels == IGNORE_LABEL)

    def test_lower_ece_never_loses_pixels(self):
        adjusted, pred = self.random_case()
        p = adjusted.copy()
        th = compute_class_thresholds(adjusted_confidence(p, np.full(3, 0.3)), pred, 0.2, 3)
        high = adjusted_confidence(p, np.array([0.3, 0.3, 0.3])) > th.xi[pred]
        low = adjusted_confidence(p, np.array([0.1, 0.3, 0.3])) > th.xi[pred]

        assert low[0].sum() >= high[0].sum()
        assert np.all(low[0] | ~high[0])

    def test_labeled_fraction(self):
        adjusted, pred = self.random_case()
        th = compute_class_thresholds(adjusted, pred, 0.5, 3)
        pseudo = assign_pseudo_labels(adjusted, pred, th, 0.5)
        fractions = pseudo.labeled_fraction(3, pred)

        assert np.all((fractions >= 0.45) & (fractions <= 1.0))


class TestLosses:
    """Test the SCE, entropy and negative-learning terms"""

    def test_sce_example(self):
        with default_dtype(np.float64):
            logits = pixel_logits(0.8, 0.2)
            pseudo = np.zeros((1, 1, 1), dtype=np.int64)
            total, l_wce, l_rce = sce_components(logits, pseudo, np.array([0.5, 0.5]), 0.1)

        assert l_wce.item() == pytest.approx(0.11157, abs=1e-5)
        assert l_rce.item() == pytest.approx(1.84207, abs=1e-5)
        assert total.item() == pytest.approx(1.85322, abs=1e-5)

    def test_sce_without_weighted_term(self):
        with default_dtype(np.float64):
            logits = pixel_logits(0.6, 0.3, 0.1)
            pseudo = np.zeros((1, 1, 1), dtype=np.int64)
            total, _, l_rce = sce_components(logits, pseudo, np.full(3, 1 / 3), 0.0)

        assert total.item() == l_rce.item()

    def test_sce_perfect_prediction(self):
        logits = np.zeros((1, 2, 1, 1))
        logits[0, 0] = 60.0
        with default_dtype(np.float64):
            _, l_wce, l_rce = sce_components(Tensor(logits), np.zeros((1, 1, 1), dtype=np.int64), np.array([0.5, 0.5]), 0.1)

        assert l_wce.item() == pytest.approx(0.0, abs=1e-12)
        assert l_rce.item() == pytest.approx(0.0, abs=1e-12)

    def test_sce_needs_labels(self):
        with pytest.raises(EmptyInputError):
            sce_loss(Tensor(np.zeros((1, 2, 1, 1))), np.full((1, 1, 1), IGNORE_LABEL), np.array([0.5, 0.5]), 0.1)

    def test_entropy_values(self):
        with default_dtype(np.float64):
            assert entropy_loss(pixel_logits(0.8, 0.2)).item() == pytest.approx(0.50040, abs=1e-5)
            assert entropy_loss(Tensor(np.zeros((2, 4, 3, 3)))).item() == pytest.approx(math.log(4), abs=1e-12)
            peaked = np.zeros((1, 3, 1, 1))
            peaked[0, 0] = 100.0
            assert entropy_loss(Tensor(peaked)).item() == pytest.approx(0.0, abs=1e-12)

    def test_negative_values(self):
        pseudo = np.zeros((1, 1, 1), dtype=np.int64)
        other = np.ones((1, 1, 1), dtype=np.int64)
        with default_dtype(np.float64):
            small = negative_loss(pixel_logits(0.95, 0.05), pseudo, complementary=other)
            tiny = negative_loss(Tensor(np.array([60.0, 0.0, -60.0]).reshape(1, 3, 1, 1)), pseudo, complementary=np.full((1, 1, 1), 2))
            capped = negative_loss(Tensor(np.array([0.0, 100.0]).reshape(1, 2, 1, 1)), pseudo, complementary=other)

        assert small.item() == pytest.approx(0.05129, abs=1e-5)
        assert tiny.item() == pytest.approx(0.0, abs=1e-12)
        assert capped.item() == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_negative_needs_two_classes(self):
        with pytest.raises(RangeError):
            negative_loss(Tensor(np.zeros((1, 1, 1, 1))), np.zeros((1, 1, 1), dtype=np.int64), np.random.default_rng(0))

    def test_complementary_classes(self):
        pseudo = np.random.default_rng(0).integers(0, 4, size=(2, 8, 8))
        pseudo[0, 0, :] = IGNORE_LABEL
        out = sample_complementary(pseudo, 4, np.random.default_rng(1))
        labeled = pseudo != IGNORE_LABEL

        assert np.all(out[~labeled] == IGNORE_LABEL)
        assert np.all(out[labeled] != pseudo[labeled])
        assert np.all((out[labeled] >= 0) & (out[labeled] < 4))

    def test_unlabeled_pixels_get_no_gradient(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True, dtype=np.float64)
        pseudo = np.array([[[0, IGNORE_LABEL], [2, IGNORE_LABEL]]])
        with GradientTape() as tape:
            loss = sce_loss(logits, pseudo, np.full(3, 1 / 3), 0.1)
            loss = loss + negative_loss(logits, pseudo, rng)
        tape.backward(loss)

        np.testing.assert_array_equal(logits.grad[0, :, :, 1], 0.0)
        assert np.any(logits.grad[0, :, :, 0] != 0.0)

    def test_unlabeled_batch_keeps_entropy_only(self):
        logits = Tensor(np.random.default_rng(3).normal(size=(2, 3, 2, 2)), dtype=np.float64)
        cfg = TargetConfig()
        loss = target_loss(logits, np.full((2, 2, 2), IGNORE_LABEL), np.full(3, 1 / 3), cfg, np.random.default_rng(0))

        assert loss.parts["l_sce"] == 0.0 and loss.parts["l_neg"] == 0.0
        assert loss.total.item() == pytest.approx(cfg.eta * loss.parts["l_ent"])

    def test_weighted_ce_without_symmetric_term(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(2, 3, 2, 2)), dtype=np.float64)
        pseudo = rng.integers(0, 3, size=(2, 2, 2))
        weights = np.array([0.2, 0.3, 0.5])
        cfg = TargetConfig(symmetric=False)

        loss = target_loss(logits, pseudo, weights, cfg, np.random.default_rng(0))
        _, l_wce, _ = sce_components(logits, pseudo, weights, cfg.epsilon)
        l_neg = negative_loss(logits, pseudo, np.random.default_rng(0))

        assert loss.parts["l_sce"] == pytest.approx(l_wce.item())
        assert loss.total.item() == pytest.approx(l_wce.item() + l_neg.item() + cfg.eta * loss.parts["l_ent"])

    def test_target_loss_finite(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 500.0
        pseudo = np.zeros((1, 2, 2), dtype=np.int64)
        loss = target_loss(Tensor(logits, dtype=np.float64), pseudo, np.full(3, 1 / 3), TargetConfig(), np.random.default_rng(0))

        assert math.isfinite(loss.total.item())


class TestSelection:
    """Test entropy-based epoch selection"""

    def test_argmin(self):
        assert select_by_entropy([0.9, 0.4, 0.6]) == 1

    def test_shift_invariance_and_ties(self):
        assert select_by_entropy([1.9, 1.4, 1.6]) == 1
        assert select_by_entropy([0.5, 0.3, 0.3]) == 1

    def test_no_epochs(self):
        with pytest.raises(EmptyInputError):
            select_by_entropy([])


class TestStatisticWarmup:
    """Test the BatchNorm-only warm-up epoch"""

    def pseudo_set(self, dataset_factory):
        return dataset_factory(n=4, num_classes=3, seed=3)

    def non_bn(self, model, valuenet):
        return [p for m in (model, valuenet) for p in m.parameters() if not p.is_bn_affine]

    def test_zero_lr_moves_only_statistics(self, dataset_factory):
        model, valuenet = networks()
        set_stage_masks(model, valuenet, Stage.WARMUP)
        affine = {p.name: p.data.copy() for m in (model, valuenet) for p in m.parameters() if p.is_bn_affine}
        stats_before = model.blocks[0].bn.running_mean.copy()
        value_stats_before = valuenet.blocks[0].bn.running_var.copy()

        statistic_warmup(
            model, valuenet, self.pseudo_set(dataset_factory), np.full(3, 1 / 3), TargetConfig(batch_size=2), RngStreams(0), lr=0.0
        )

        for m in (model, valuenet):
            for p in m.parameters():
                if p.is_bn_affine:
                    np.testing.assert_array_equal(p.data, affine[p.name])
        assert not np.array_equal(model.blocks[0].bn.running_mean, stats_before)
        assert not np.array_equal(valuenet.blocks[0].bn.running_var, value_stats_before)

    def test_non_bn_parameters_untouched(self, dataset_factory):
        model, valuenet = networks()
        set_stage_masks(model, valuenet, Stage.WARMUP)
        frozen = self.non_bn(model, valuenet)
        before = model.checksum(frozen)
        gamma_before = model.blocks[1].bn.gamma.data.copy()

        stats = statistic_warmup(
            model, valuenet, self.pseudo_set(dataset_factory), np.full(3, 1 / 3), TargetConfig(batch_size=2), RngStreams(0), lr=0.05
        )

        assert model.checksum(frozen) == before
        assert not np.array_equal(model.blocks[1].bn.gamma.data, gamma_before)
        assert stats.iterations == 2

    def test_requires_warmup_stage(self, dataset_factory):
        model, valuenet = networks()
        set_stage_masks(model, valuenet, Stage.ADAPT)

        with pytest.raises(StageMaskError):
            statistic_warmup(
                model, valuenet, self.pseudo_set(dataset_factory), np.full(3, 1 / 3), TargetConfig(), RngStreams(0)
            )


class TestAdapt:
    """Test adaptation rounds end to end on a toy target set"""

    def test_zero_rounds_keep_model(self, dataset_factory):
        model, valuenet = networks()
        before = model.checksum()
        result = adapt(dataset_factory(n=4), model, valuenet, TargetConfig(rounds=0), CalibConfig(), RngStreams(0))

        assert result.records == []
        assert result.selected is None
        assert model.checksum() == before

    def test_one_round(self, dataset_factory, tmp_path):
        model, valuenet = networks()
        frozen = [p for block in model.feature_extractor() for p in block.conv.parameters()]
        frozen_before = model.checksum(frozen)
        value_head_before = valuenet.checksum([valuenet.fc_weight, valuenet.fc_bias])
        cfg = TargetConfig(rounds=1, epochs_per_round=1, batch_size=2)

        result = adapt(
            dataset_factory(n=4, seed=4),
            model,
            valuenet,
            cfg,
            CalibConfig(),
            RngStreams(0),
            out_dir=tmp_path,
            monitor=dataset_factory(n=2, seed=5),
        )

        assert [(r.round, r.epoch, r.phase) for r in result.records] == [(1, 1, "warmup"), (1, 2, "adapt")]
        entropies = [r.mean_entropy for r in result.records]
        assert result.selected == int(np.argmin(entropies))
        assert result.oracle is not None
        assert model.checksum(frozen) == frozen_before
        assert valuenet.checksum([valuenet.fc_weight, valuenet.fc_bias]) == value_head_before

        round_dir = tmp_path / "round_1"
        assert (round_dir / "pseudo" / "index.json").exists()
        assert np.load(round_dir / "provenance.npy").shape == (4, 16, 16)
        assert (round_dir / "epoch_001.ckpt").exists() and (round_dir / "epoch_002.ckpt").exists()
        thresholds = pd.read_csv(round_dir / "thresholds.csv")
        assert list(thresholds["class"]) == [0, 1, 2]
        metrics = pd.read_csv(tmp_path / "metrics.csv")
        assert list(metrics["phase"]) == ["warmup", "adapt"]
        assert "labeled_fraction_2" in metrics.columns

    def test_without_statistic_warmup(self, dataset_factory):
        model, valuenet = networks()
        bn_before = valuenet.blocks[0].bn.running_mean.copy()
        cfg = TargetConfig(rounds=2, epochs_per_round=1, batch_size=2, statistic_warmup=False)

        result = adapt(dataset_factory(n=4, seed=4), model, valuenet, cfg, CalibConfig(), RngStreams(0))

        assert [(r.round, r.epoch, r.phase) for r in result.records] == [(1, 2, "adapt"), (2, 2, "adapt")]
        np.testing.assert_array_equal(valuenet.blocks[0].bn.running_mean, bn_before)

    def test_warmup_off_needs_adaptation_epochs(self):
        with pytest.raises(ValidationError, match="epochs_per_round"):
            TargetConfig(statistic_warmup=False, epochs_per_round=0)


class TestEstimatePseudoLabels:
    """Test the round-level pseudo-label estimate"""

    def thresholds(self, dataset, bias: float, ece_guided: bool) -> np.ndarray:
        model, valuenet = networks()
        valuenet.fc_bias.data[...] = bias
        return estimate_pseudo_labels(model, valuenet, dataset, 0.15, ece_guided).pseudo.thresholds.xi

    def test_value_net_moves_guided_thresholds(self, dataset_factory):
        dataset = dataset_factory(n=4, seed=6)
        assert not np.array_equal(self.thresholds(dataset, -2.0, True), self.thresholds(dataset, 1.0, True))

    def test_unguided_thresholds_ignore_value_net(self, dataset_factory):
        dataset = dataset_factory(n=4, seed=6)
        unguided = self.thresholds(dataset, -2.0, False)

        np.testing.assert_array_equal(unguided, self.thresholds(dataset, 1.0, False))
        assert np.all(unguided[unguided < 1.0] >= 1 / 3)
