"""Synthetic task, metrics, IoU, training loop plumbing, and PGM export."""

import dataclasses

import numpy as np
import pytest

from rfpsac.errors import ConfigError, TrainingDiverged, UsageError
from rfpsac.harness import (Metrics, TrainConfig, build_model, evaluate, export_switch_map,
                            gen_dataset, read_pgm, train, write_pgm)
from rfpsac.tensor import Tensor

TINY = TrainConfig(epochs=1, steps_per_epoch=3, image_size=32, dataset_size=4)


class TestDataset:
    def test_deterministic_bitwise(self):
        a = gen_dataset(7, 4, 64)
        b = gen_dataset(7, 4, 64)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image.data, sb.image.data)
            for ma, mb in zip(sa.masks, sb.masks):
                np.testing.assert_array_equal(ma.data, mb.data)

    def test_scene_count(self):
        assert len(gen_dataset(0, 16, 64)) == 16

    def test_coverage_in_band(self):
        scenes = gen_dataset(0, 100, 64)
        ones = sum(float(m.data.sum()) for s in scenes for m in s.masks)
        cells = sum(m.data.size for s in scenes for m in s.masks)
        assert 0.05 <= ones / cells <= 0.5

    def test_masks_binary_and_single_level(self):
        for scene in gen_dataset(1, 8, 64):
            for m in scene.masks:
                assert set(np.unique(m.data)) <= {0.0, 1.0}
            for obj in scene.objects:
                assert 0 <= obj.level < len(scene.masks)

    def test_mask_resolution_per_level(self):
        scene = gen_dataset(2, 1, 64)[0]
        assert [m.shape for m in scene.masks] == [(1, 1, 16, 16), (1, 1, 8, 8), (1, 1, 4, 4)]

    def test_image_in_unit_range(self):
        for scene in gen_dataset(3, 4, 32):
            assert scene.image.data.min() >= 0.0 and scene.image.data.max() <= 1.0

    def test_invalid_size_rejected(self):
        with pytest.raises(ConfigError):
            gen_dataset(0, 1, 60)
        with pytest.raises(ConfigError):
            gen_dataset(0, 0, 64)


class _StubModel:
    """Predicts a fixed logit offset of the ground truth for IoU tests."""

    def __init__(self, scenes, mode):
        self.scenes = scenes
        self.mode = mode
        self._cursor = 0

    def forward(self, image):
        scene = self.scenes[self._cursor]
        self._cursor = (self._cursor + 1) % len(self.scenes)
        if self.mode == "exact":
            return [Tensor(m.data * 20.0 - 10.0) for m in scene.masks]
        if self.mode == "all_on":
            return [Tensor(np.full_like(m.data, 10.0)) for m in scene.masks]
        return [Tensor(np.full_like(m.data, -10.0)) for m in scene.masks]


class TestEvaluate:
    def test_exact_prediction_scores_one(self):
        scenes = gen_dataset(4, 4, 32)
        metrics = evaluate(_StubModel(scenes, "exact"), scenes)
        assert metrics.iou_per_level[-1] == [1.0, 1.0, 1.0]

    def test_empty_vs_empty_is_one(self):
        scenes = gen_dataset(5, 6, 32)
        metrics = evaluate(_StubModel(scenes, "all_off"), scenes)
        for lvl, value in enumerate(metrics.iou_per_level[-1]):
            empties = [float(s.masks[lvl].data.sum()) == 0 for s in scenes]
            expected = float(np.mean([1.0 if e else 0.0 for e in empties]))
            assert value == pytest.approx(expected)

    def test_all_ones_prediction_scores_coverage(self):
        scenes = gen_dataset(6, 5, 32)
        metrics = evaluate(_StubModel(scenes, "all_on"), scenes)
        for lvl, value in enumerate(metrics.iou_per_level[-1]):
            cov = float(np.mean([s.masks[lvl].data.mean() for s in scenes]))
            assert value == pytest.approx(cov)


class TestMetrics:
    def test_moving_average_window(self):
        m = Metrics(losses=[float(i) for i in range(200)])
        assert m.moving_average(20) == pytest.approx(np.mean(range(20)))
        assert m.moving_average(200) == pytest.approx(np.mean(range(150, 200)))

    def test_text_dump_parses(self):
        m = Metrics(losses=[1.5, 1.0, 0.5], iou_per_level=[[0.1, 0.2, 0.3]])
        text = m.to_text()
        lines = text.splitlines()
        assert lines[0] == "step,loss"
        steps = [line for line in lines[1:] if "," in line and not line.startswith("#")]
        assert steps == ["0,1.500000", "1,1.000000", "2,0.500000"]
        assert "# summary" in lines
        assert any(line.startswith("final_loss=0.5") for line in lines)


class TestTrain:
    def test_records_every_step_and_evaluates_per_epoch(self):
        cfg = dataclasses.replace(TINY, epochs=2)
        model, metrics = train(cfg)
        assert len(metrics.losses) == 6
        assert len(metrics.iou_per_level) == 2
        assert metrics.nan_step is None

    def test_deterministic_loss_history(self):
        a = train(TINY)[1].losses
        b = train(TINY)[1].losses
        assert a == b

    def test_variant_flags_build_the_right_model(self):
        cfg = dataclasses.replace(TINY, use_sac=True, use_rfp=True, unroll_steps=2)
        model = build_model(cfg)
        assert model.rfp.steps == 2
        assert len(model.rfp.backbones) == 2
        assert model.sac_layers()
        shared = build_model(dataclasses.replace(cfg, shared_backbones=True))
        assert len(shared.rfp.backbones) == 1 and shared.rfp.shared

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        cfg = dataclasses.replace(TINY, lr=1e9, epochs=1, steps_per_epoch=20)
        with pytest.raises(TrainingDiverged) as err:
            train(cfg)
        assert err.value.step >= 0
        assert err.value.metrics.nan_step == err.value.step

    def test_trainable_parameters_respect_variant(self):
        base = build_model(TINY)
        assert not any("/injection/" in n for n, t in base.named_parameters()
                       if id(t) in {id(p) for p in base.trainable_parameters()})
        rfp_cfg = dataclasses.replace(TINY, use_rfp=True, unroll_steps=2)
        model = build_model(rfp_cfg)
        trainable = {id(p) for p in model.trainable_parameters()}
        names = dict(model.named_parameters())
        assert not any(id(t) in trainable for n, t in names.items()
                       if "/injection/" in n and n.startswith("rfp/backbone/0/"))
        assert any(id(t) in trainable for n, t in names.items()
                   if "/injection/" in n and n.startswith("rfp/backbone/1/"))

    def test_gradients_reach_every_trainable_parameter(self):
        from rfpsac.harness import scene_loss
        from rfpsac.tensor import active_tape, backward

        cfg = dataclasses.replace(TINY, use_sac=True, use_rfp=True, unroll_steps=2)
        scenes = gen_dataset(cfg.seed, cfg.dataset_size, cfg.image_size)
        model = build_model(cfg)
        tape = active_tape()
        tape.clear()
        loss = scene_loss(model, scenes[0])
        backward(loss)
        tape.clear()
        id_to_name = {id(t): n for n, t in model.named_parameters()}
        missing = [id_to_name[id(p)] for p in model.trainable_parameters() if p.grad is None]
        assert not missing, f"no grad for: {missing}"
        bad = [id_to_name[id(p)] for p in model.trainable_parameters()
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        assert not bad

    def test_config_validation_names_field(self):
        with pytest.raises(ConfigError, match="lr"):
            TrainConfig(lr=-1.0)
        with pytest.raises(ConfigError, match="unroll_steps"):
            TrainConfig(unroll_steps=0)


class TestPgm:
    def test_write_read_round_trip(self, tmp_path):
        arr = np.linspace(0, 1, 12).reshape(3, 4)
        path = tmp_path / "m.pgm"
        write_pgm(path, arr)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n4 3\n255\n")
        back = read_pgm(path)
        np.testing.assert_allclose(back, np.rint(arr * 255) / 255, atol=1e-12)

    def test_values_clamped(self, tmp_path):
        path = tmp_path / "c.pgm"
        write_pgm(path, np.array([[-3.0, 0.5, 7.0]]))
        assert list(read_pgm(path).ravel()) == [0.0, pytest.approx(128 / 255), 1.0]

    def test_fresh_converted_model_exports_white(self, tmp_path):
        cfg = dataclasses.replace(TINY, use_sac=True)
        model = build_model(cfg)
        image = gen_dataset(0, 1, cfg.image_size)[0].image
        layers = model.sac_layers()
        assert layers
        path = tmp_path / "switch.pgm"
        export_switch_map(model, image, layers[0][0], path)
        data = read_pgm(path)
        np.testing.assert_array_equal(data, 1.0)

    def test_export_dims_match_feature_map(self, tmp_path):
        cfg = dataclasses.replace(TINY, use_sac=True)
        model = build_model(cfg)
        image = gen_dataset(0, 1, cfg.image_size)[0].image
        path = tmp_path / "stem.pgm"
        export_switch_map(model, image, 0, path)  # stem: stride 2 on 32 -> 16
        assert read_pgm(path).shape == (16, 16)

    def test_export_without_sac_layers_rejected(self, tmp_path):
        model = build_model(TINY)
        image = gen_dataset(0, 1, TINY.image_size)[0].image
        with pytest.raises(UsageError):
            export_switch_map(model, image, 0, tmp_path / "x.pgm")

    def test_unknown_layer_name_rejected(self, tmp_path):
        cfg = dataclasses.replace(TINY, use_sac=True)
        model = build_model(cfg)
        image = gen_dataset(0, 1, cfg.image_size)[0].image
        with pytest.raises(UsageError):
            export_switch_map(model, image, "nope/missing", tmp_path / "x.pgm")
