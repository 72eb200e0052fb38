"""Backbone: stage geometry, whole-backbone SAC conversion, injection
neutrality, and gradient flow through the feedback path."""

import numpy as np
import pytest

import rfpsac.gradcheck as gc
from rfpsac.backbone import Backbone, BackboneConfig, backbone_forward, convert_backbone_to_sac
from rfpsac.errors import ConfigError, DimensionError, UsageError
from rfpsac.ops import ConvParams, add, mul, sum_all
from rfpsac.sac import SacConv
from rfpsac.tensor import Tensor, no_grad


def make_backbone(seed=0, dtype=np.float64, **overrides):
    cfg = BackboneConfig(**overrides) if overrides else BackboneConfig()
    return Backbone.create(cfg, np.random.default_rng(seed), dtype=dtype), cfg


def image(seed, size=64, c=1, dtype=np.float64):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (1, c, size, size)), dtype=dtype)


class TestGeometry:
    def test_default_stage_shapes(self):
        bb, _ = make_backbone(in_channels=3)
        x = image(0, c=3)
        with no_grad():
            outs = backbone_forward(bb, x)
        assert [o.shape for o in outs] == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4)]

    def test_input_channel_mismatch(self):
        bb, _ = make_backbone()
        with pytest.raises(DimensionError):
            backbone_forward(bb, image(1, c=3))

    def test_feedback_count_mismatch(self):
        bb, _ = make_backbone()
        with pytest.raises(DimensionError):
            backbone_forward(bb, image(2), feedback=[Tensor(np.zeros((1, 64, 16, 16)))])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BackboneConfig(stages=2, channels=(32, 64, 128))
        with pytest.raises(ConfigError):
            BackboneConfig(blocks_per_stage=0)


class TestInjectionNeutrality:
    def test_untrained_injection_ignores_feedback(self):
        bb, cfg = make_backbone(seed=3)
        x = image(4)
        with no_grad():
            base = backbone_forward(bb, x)
            shapes = [(o.h, o.w) for o in base]
            fb = [Tensor(np.random.default_rng(5 + i).normal(
                0, 10, (1, cfg.feedback_channels, h, w)), dtype=np.float64)
                for i, (h, w) in enumerate(shapes)]
            fed = backbone_forward(bb, x, feedback=fb)
        for a, b in zip(base, fed):
            np.testing.assert_array_equal(a.data, b.data)

    def test_injection_zero_at_construction(self):
        bb, _ = make_backbone(seed=6)
        for stage in bb.stages:
            np.testing.assert_array_equal(stage.injection.weight.data, 0.0)
            np.testing.assert_array_equal(stage.injection.bias.data, 0.0)


class TestConversion:
    def test_forward_identity_on_five_images(self):
        bb, _ = make_backbone(seed=7, dtype=np.float32)
        converted = convert_backbone_to_sac(bb)
        for seed in range(5):
            x = image(100 + seed, dtype=np.float32)
            with no_grad():
                a = backbone_forward(bb, x)
                b = backbone_forward(converted, x)
            assert max(np.max(np.abs(u.data - v.data)) for u, v in zip(a, b)) <= 1e-5

    def test_sac_count_equals_former_3x3_count(self):
        bb, cfg = make_backbone(seed=8)
        plain_3x3 = 1 + cfg.stages * cfg.blocks_per_stage  # stem + one per block
        converted = convert_backbone_to_sac(bb)
        assert len(list(converted.sac_layers())) == plain_3x3
        assert isinstance(converted.stem, SacConv)

    def test_1x1_layers_stay_plain(self):
        bb, _ = make_backbone(seed=9)
        converted = convert_backbone_to_sac(bb)
        for stage in converted.stages:
            assert isinstance(stage.injection, ConvParams)
            for block in stage.blocks:
                assert isinstance(block.reduce, ConvParams)
                assert isinstance(block.expand, ConvParams)
                if block.shortcut is not None:
                    assert isinstance(block.shortcut, ConvParams)

    def test_double_conversion_rejected(self):
        bb, _ = make_backbone(seed=10)
        converted = convert_backbone_to_sac(bb)
        with pytest.raises(UsageError):
            convert_backbone_to_sac(converted)

    def test_original_untouched_by_training_converted(self):
        bb, _ = make_backbone(seed=11)
        converted = convert_backbone_to_sac(bb)
        snapshot = {n: p.data.copy() for n, p in bb.named_parameters()}
        for _, p in converted.named_parameters():
            p.data = p.data + 1.0
        for n, p in bb.named_parameters():
            np.testing.assert_array_equal(p.data, snapshot[n])


class TestGradientFlow:
    def test_full_backbone_with_feedback_path(self):
        cfg = BackboneConfig(stages=2, channels=(8, 8), blocks_per_stage=1,
                             stem_channels=4, in_channels=1, feedback_channels=4)
        # seed chosen so no pre-ReLU activation falls inside the central
        # difference window; at a kink the numeric estimate is meaningless
        rng = np.random.default_rng(15)
        bb = Backbone.create(cfg, rng, dtype=np.float64)
        converted = convert_backbone_to_sac(bb)
        x = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)), dtype=np.float64, requires_grad=True)
        fb = [Tensor(rng.normal(size=(1, 4, 2, 2)), dtype=np.float64, requires_grad=True),
              Tensor(rng.normal(size=(1, 4, 1, 1)), dtype=np.float64, requires_grad=True)]
        coeffs = [Tensor(rng.normal(size=(1, 8, 2, 2)), dtype=np.float64),
                  Tensor(rng.normal(size=(1, 8, 1, 1)), dtype=np.float64)]
        params = {"x": x, "fb0": fb[0], "fb1": fb[1]}
        for n, p in converted.named_parameters("bb"):
            params[n] = p

        def loss():
            outs = backbone_forward(converted, x, feedback=fb)
            return add(sum_all(mul(outs[0], coeffs[0])), sum_all(mul(outs[1], coeffs[1])))

        errors = gc.check_gradients(loss, params)
        worst = max(errors.values())
        assert worst <= 1e-4, f"worst {worst:.3e}"
        assert any("injection" in n for n in errors)
        assert any("delta_weight" in n for n in errors)
