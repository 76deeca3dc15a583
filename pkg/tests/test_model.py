"""
Test the segmentation network, the value net and the stage masks
"""

import numpy as np
import pytest

from calseg.autodiff import Tensor
from calseg.autodiff import functional as F
from calseg.errors import ShapeError, StageMaskError
from calseg.model import (
    SegModel,
    SegModelSpec,
    Stage,
    ValueNet,
    ValueNetSpec,
    evaluating,
    require_stage,
    set_eval,
    set_stage_masks,
    trainable_parameters,
)

SPEC = SegModelSpec(channels=(4, 6, 8), num_classes=3, tap_layer=2)


@pytest.fixture
def networks():
    model = SegModel(SPEC, np.random.default_rng(0))
    valuenet = ValueNet(ValueNetSpec(in_channels=model.feature_channels, channels=(4,)), np.random.default_rng(1))
    return model, valuenet


def images(n: int = 2, size: int = 8) -> Tensor:
    return Tensor(np.random.default_rng(5).random((n, 3, size, size)))


class TestForward:
    """Test shapes and fixed-point outputs"""

    def test_shapes(self, networks):
        model, valuenet = networks
        logits, feature = model(images())

        assert logits.shape == (2, 3, 8, 8)
        assert feature.shape == (2, 6, 8, 8)
        assert valuenet(feature).shape == (2,)

    def test_value_net_output_in_unit_interval(self, networks):
        model, valuenet = networks
        _, feature = model(images())
        score = valuenet(feature).data

        assert np.all((score > 0) & (score < 1))

    def test_zero_head_gives_uniform_softmax(self, networks):
        model, _ = networks
        model.head.weight.data[...] = 0.0
        model.head.bias.data[...] = 0.0
        logits, _ = model(images())

        np.testing.assert_allclose(F.softmax(logits).data, 1.0 / 3, rtol=1e-6)

    def test_zero_fc_gives_half(self, networks):
        model, valuenet = networks
        valuenet.fc_weight.data[...] = 0.0
        valuenet.fc_bias.data[...] = 0.0
        _, feature = model(images())

        np.testing.assert_allclose(valuenet(feature).data, 0.5)

    def test_wrong_input_channels(self, networks):
        model, _ = networks
        with pytest.raises(ShapeError):
            model(Tensor(np.zeros((2, 1, 8, 8))))

    def test_tap_layer_out_of_range(self):
        with pytest.raises(ShapeError):
            SegModel(SegModelSpec(channels=(4, 4), tap_layer=3), np.random.default_rng(0))

    def test_same_seed_same_weights(self):
        a = SegModel(SPEC, np.random.default_rng(3))
        b = SegModel(SPEC, np.random.default_rng(3))
        c = SegModel(SPEC, np.random.default_rng(4))

        assert a.checksum() == b.checksum()
        assert a.checksum() != c.checksum()


class TestStateDict:
    """Test state copies and loading"""

    def test_round_trip(self, networks):
        model, _ = networks
        other = SegModel(SPEC, np.random.default_rng(9))
        other.load_state_dict(model.state_dict())

        assert other.checksum() == model.checksum()
        np.testing.assert_array_equal(other.blocks[0].bn.running_var, model.blocks[0].bn.running_var)

    def test_state_dict_is_a_copy(self, networks):
        model, _ = networks
        state = model.state_dict()
        state["head.bias"][...] = 42.0

        assert not np.any(model.head.bias.data == 42.0)

    def test_shape_mismatch(self, networks):
        model, _ = networks
        state = model.state_dict()
        state["head.weight"] = np.zeros((5, 8, 1, 1))

        with pytest.raises(ShapeError):
            model.load_state_dict(state)

    def test_missing_key(self, networks):
        model, _ = networks
        state = model.state_dict()
        del state["block1.bn.running_mean"]

        with pytest.raises(ShapeError, match="missing"):
            model.load_state_dict(state)


class TestStageMasks:
    """Test trainable sets and BN modes per stage"""

    def test_source_stage(self, networks):
        model, _ = networks
        set_stage_masks(model, None, Stage.SOURCE)

        assert all(p.trainable for p in model.parameters())
        assert all(bn.mode == "train" for bn in model.batchnorms())

    def test_valuenet_stage_freezes_theta(self, networks):
        model, valuenet = networks
        set_stage_masks(model, valuenet, "valuenet")

        assert trainable_parameters(model) == []
        assert trainable_parameters(valuenet) == valuenet.parameters()
        assert all(bn.mode == "eval" for bn in model.batchnorms())
        assert all(bn.mode == "train" for bn in valuenet.batchnorms())

    def test_warmup_trains_only_bn_affine(self, networks):
        model, valuenet = networks
        set_stage_masks(model, valuenet, Stage.WARMUP)
        trainable = trainable_parameters(model, valuenet)
        expected = [bn_param for m in (model, valuenet) for bn in m.batchnorms() for bn_param in bn.parameters()]

        assert {p.name for p in trainable} == {p.name for p in expected}
        assert all(p.kind in ("bn_gamma", "bn_beta") for p in trainable)
        assert all(bn.mode == "stat" for bn in model.batchnorms() + valuenet.batchnorms())

    def test_adapt_freezes_feature_extractor(self, networks):
        model, valuenet = networks
        set_stage_masks(model, valuenet, Stage.ADAPT)
        trainable = {p.name for p in trainable_parameters(model, valuenet)}

        assert not any(name.startswith(("block1.", "block2.", "value")) for name in trainable)
        assert {p.name for p in model.blocks[2].parameters()} <= trainable
        assert {"head.weight", "head.bias"} <= trainable
        assert [b.bn.mode for b in model.blocks] == ["eval", "eval", "train"]
        assert all(bn.mode == "eval" for bn in valuenet.batchnorms())

    def test_require_stage(self, networks):
        model, valuenet = networks
        set_stage_masks(model, valuenet, Stage.ADAPT)
        require_stage(model, valuenet, Stage.ADAPT)

        with pytest.raises(StageMaskError):
            require_stage(model, valuenet, Stage.WARMUP)

        model.blocks[0].conv.weight.trainable = True
        with pytest.raises(StageMaskError, match="block1.conv.weight"):
            require_stage(model, valuenet, Stage.ADAPT)

    def test_unknown_stage(self, networks):
        model, valuenet = networks
        with pytest.raises(StageMaskError):
            set_stage_masks(model, valuenet, "finetune")

    def test_set_eval_keeps_masks(self, networks):
        model, valuenet = networks
        set_stage_masks(model, valuenet, Stage.VALUENET)
        set_eval(model, valuenet)

        assert trainable_parameters(model) == []
        assert all(bn.mode == "eval" for bn in model.batchnorms() + valuenet.batchnorms())

    def test_evaluating_restores_modes(self, networks):
        model, valuenet = networks
        set_stage_masks(model, valuenet, Stage.WARMUP)
        before = model.blocks[0].bn.running_mean.copy()

        with evaluating(model, valuenet):
            assert all(bn.mode == "eval" for bn in model.batchnorms())
            model(images())

        assert all(bn.mode == "stat" for bn in model.batchnorms() + valuenet.batchnorms())
        np.testing.assert_array_equal(model.blocks[0].bn.running_mean, before)
