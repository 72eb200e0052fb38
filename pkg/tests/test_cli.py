"""End-to-end CLI flows: exit codes, config validation, file outputs."""

import json

import numpy as np
import pytest

import rfpsac.gradcheck as gc
from rfpsac.cli import main
from rfpsac.harness import read_pgm
from rfpsac.ops import mul, sum_all
from rfpsac.tensor import Tensor


TINY_CONFIG = {
    "seed": 0,
    "epochs": 1,
    "steps_per_epoch": 3,
    "image_size": 32,
    "dataset_size": 4,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def write_config(tmp_path, name="cfg.json", **extra):
    doc = dict(TINY_CONFIG)
    doc.update(extra)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class TestTrainCommand:
    def test_writes_metrics_and_checkpoint(self, tmp_path, config_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_path), "--out", str(out)]) == 0
        assert (out / "metrics.txt").exists()
        assert (out / "model.rfpk").exists()
        text = (out / "metrics.txt").read_text()
        assert text.startswith("step,loss\n")
        assert "# summary" in text

    def test_deterministic_metrics(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(config_path), "--out", str(a)]) == 0
        assert main(["train", "--config", str(config_path), "--out", str(b)]) == 0
        assert (a / "metrics.txt").read_bytes() == (b / "metrics.txt").read_bytes()

    def test_seed_override_changes_run(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(config_path), "--out", str(a)]) == 0
        assert main(["train", "--config", str(config_path), "--seed", "1",
                     "--out", str(b)]) == 0
        assert (a / "metrics.txt").read_text() != (b / "metrics.txt").read_text()

    def test_negative_lr_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, lr=-1.0)
        assert main(["train", "--config", str(cfg)]) == 2
        assert "lr" in capsys.readouterr().err

    def test_unknown_key_named(self, tmp_path, capsys):
        cfg = write_config(tmp_path, warp_factor=9)
        assert main(["train", "--config", str(cfg)]) == 2
        assert "warp_factor" in capsys.readouterr().err

    def test_malformed_json_reports_location(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{"seed": 0,, }')
        assert main(["train", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "line" in err and "column" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_abort_exits_three(self, tmp_path, capsys):
        cfg = write_config(tmp_path, lr=1e9, steps_per_epoch=20)
        out = tmp_path / "nan"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 3
        assert "step" in capsys.readouterr().err
        assert (out / "metrics.txt").exists()


class TestEvalCommand:
    def test_eval_prints_iou(self, tmp_path, config_path, capsys):
        out = tmp_path / "run"
        main(["train", "--config", str(config_path), "--out", str(out)])
        code = main(["eval", "--config", str(config_path),
                     "--checkpoint", str(out / "model.rfpk")])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert sum(1 for line in lines if line.startswith("iou_level_")) == 3


class TestConvertCommand:
    def _train(self, tmp_path, config_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_path), "--out", str(out)]) == 0
        return out / "model.rfpk"

    def test_convert_verify_roundtrip(self, tmp_path, config_path, capsys):
        plain = self._train(tmp_path, config_path)
        converted = tmp_path / "sac.rfpk"
        code = main(["convert", "--config", str(config_path), "--in", str(plain),
                     "--out", str(converted), "--verify"])
        assert code == 0
        assert "max abs output diff" in capsys.readouterr().out
        # the converted checkpoint is loadable and verification is repeatable
        sac_cfg = write_config(tmp_path, name="sac.json", use_sac=True)
        assert main(["eval", "--config", str(sac_cfg), "--checkpoint", str(converted)]) == 0
        assert main(["convert", "--config", str(config_path), "--in", str(plain),
                     "--out", str(tmp_path / "sac2.rfpk"), "--verify"]) == 0

    def test_corrupt_input_exits_two(self, tmp_path, config_path, capsys):
        bad = tmp_path / "junk.rfpk"
        bad.write_bytes(b"definitely not a checkpoint")
        assert main(["convert", "--config", str(config_path), "--in", str(bad),
                     "--out", str(tmp_path / "out.rfpk")]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_input_exits_two(self, tmp_path, config_path):
        assert main(["convert", "--config", str(config_path),
                     "--in", str(tmp_path / "absent.rfpk"),
                     "--out", str(tmp_path / "out.rfpk")]) == 2


class TestGradcheckCommand:
    def test_restricted_run_passes(self, capsys):
        assert main(["gradcheck", "--layer", "conv", "--layer", "pool"]) == 0
        out = capsys.readouterr().out
        assert "conv" in out and "pool" in out and "FAIL" not in out

    def test_unknown_layer_exits_two(self, capsys):
        assert main(["gradcheck", "--layer", "warp"]) == 2

    def test_injected_backward_bug_exits_five(self, monkeypatch, capsys):
        from rfpsac.tensor import result_tensor

        def broken_scale(x):
            # forward doubles, backward pretends to triple
            return result_tensor(x.data * 2.0, (x,), lambda g: (g * 3.0,))

        def build_bogus():
            x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 2, 2)),
                       dtype=np.float64, requires_grad=True)
            coeffs = Tensor(np.random.default_rng(1).normal(size=(1, 1, 2, 2)),
                            dtype=np.float64)
            return (lambda: sum_all(mul(broken_scale(x), coeffs))), {"x": x}

        monkeypatch.setitem(gc.SUITE, "bogus", build_bogus)
        assert main(["gradcheck", "--layer", "bogus"]) == 5
        captured = capsys.readouterr()
        assert "FAIL" in captured.out
        assert "bogus:x" in captured.err


class TestVizSwitchCommand:
    def _converted_checkpoint(self, tmp_path, config_path):
        out = tmp_path / "run"
        main(["train", "--config", str(config_path), "--out", str(out)])
        converted = tmp_path / "sac.rfpk"
        main(["convert", "--config", str(config_path), "--in", str(out / "model.rfpk"),
              "--out", str(converted)])
        return converted

    def test_fresh_converted_maps_are_white(self, tmp_path, config_path):
        ckpt = self._converted_checkpoint(tmp_path, config_path)
        maps_dir = tmp_path / "maps"
        code = main(["viz-switch", "--config",
                     str(write_config(tmp_path, name="sac.json", use_sac=True)),
                     "--checkpoint", str(ckpt), "--out", str(maps_dir)])
        assert code == 0
        files = sorted(maps_dir.glob("*.pgm"))
        assert len(files) == 7  # stem + 6 block convs
        for f in files:
            data = read_pgm(f)
            np.testing.assert_array_equal(data, 1.0)

    def test_config_inferred_from_checkpoint(self, tmp_path, config_path):
        ckpt = self._converted_checkpoint(tmp_path, config_path)
        maps_dir = tmp_path / "maps_auto"
        assert main(["viz-switch", "--checkpoint", str(ckpt), "--out", str(maps_dir)]) == 0
        assert len(list(maps_dir.glob("*.pgm"))) == 7

    def test_plain_checkpoint_exits_two(self, tmp_path, config_path, capsys):
        out = tmp_path / "run"
        main(["train", "--config", str(config_path), "--out", str(out)])
        assert main(["viz-switch", "--config", str(config_path),
                     "--checkpoint", str(out / "model.rfpk"),
                     "--out", str(tmp_path / "maps")]) == 2
        assert "no SAC layers" in capsys.readouterr().err

    def test_missing_checkpoint_exits_two(self, tmp_path, config_path):
        assert main(["viz-switch", "--config", str(config_path),
                     "--checkpoint", str(tmp_path / "none.rfpk"),
                     "--out", str(tmp_path / "maps")]) == 2

    def test_trained_sac_checkpoint_exports_valid_maps(self, tmp_path, capsys):
        sac_cfg = write_config(tmp_path, name="sac.json", use_sac=True)
        out = tmp_path / "sac_run"
        assert main(["train", "--config", str(sac_cfg), "--out", str(out)]) == 0
        maps_dir = tmp_path / "trained_maps"
        assert main(["viz-switch", "--config", str(sac_cfg),
                     "--checkpoint", str(out / "model.rfpk"), "--out", str(maps_dir)]) == 0
        files = sorted(maps_dir.glob("*.pgm"))
        assert len(files) == 7
        for f in files:
            assert f.read_bytes().startswith(b"P5\n")
            read_pgm(f)  # parses cleanly

    def test_custom_pgm_image_input(self, tmp_path, config_path):
        from rfpsac.harness import write_pgm

        ckpt = self._converted_checkpoint(tmp_path, config_path)
        img = tmp_path / "input.pgm"
        write_pgm(img, np.random.default_rng(0).uniform(0, 1, (32, 32)))
        maps_dir = tmp_path / "maps_img"
        sac_cfg = write_config(tmp_path, name="sac.json", use_sac=True)
        assert main(["viz-switch", "--config", str(sac_cfg), "--checkpoint", str(ckpt),
                     "--out", str(maps_dir), "--image", str(img)]) == 0
        assert len(list(maps_dir.glob("*.pgm"))) == 7
