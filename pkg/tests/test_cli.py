"""Command-line interface: exit codes, artifacts, and reproducibility."""

import json

import numpy as np
import pytest

from bimal.cli import main
from bimal.scenegen import load_dataset
from bimal.tenio import read_tensor


@pytest.fixture()
def small_cfg(tmp_path):
    """16x16 scenes and a small flow keep CLI runs fast."""
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "scene.height": 16,
        "scene.width": 16,
        "flow.hidden_width": 8,
        "flow.steps_per_scale": 2,
        "optim.batch_size": 2,
        "train.eval_samples": 4,
        "train.eval_every": 4,
    }))
    return str(path)


def gen(tmp_path, small_cfg, name, domain, n=5, seed=0):
    out = str(tmp_path / name)
    code = main(["gen-data", "--config", small_cfg, "--n", str(n),
                 "--domain", domain, "--seed", str(seed), "--out", out])
    assert code == 0
    return out


class TestGenData:
    def test_writes_loadable_dataset(self, tmp_path, small_cfg):
        out = gen(tmp_path, small_cfg, "src", "source", n=4)
        data = load_dataset(out)
        assert len(data) == 4
        assert data.images.shape == (4, 16, 16, 3)

    def test_n_below_one_is_usage_error(self, tmp_path, small_cfg, capsys):
        code = main(["gen-data", "--config", small_cfg, "--n", "0",
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "--n" in capsys.readouterr().err

    def test_same_seed_same_bytes(self, tmp_path, small_cfg):
        a = gen(tmp_path, small_cfg, "a", "source", n=3, seed=5)
        b = gen(tmp_path, small_cfg, "b", "source", n=3, seed=5)
        assert (tmp_path / "a" / "images.ten").read_bytes() == \
            (tmp_path / "b" / "images.ten").read_bytes()

    def test_unknown_config_key_is_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"optim.turbo": 1}))
        code = main(["gen-data", "--config", str(bad), "--n", "1",
                     "--out", str(tmp_path / "x")])
        assert code == 2
        assert "optim.turbo" in capsys.readouterr().err


class TestTrainFlowCmd:
    def test_writes_checkpoint_and_curve(self, tmp_path, small_cfg):
        src = gen(tmp_path, small_cfg, "src", "source")
        out = tmp_path / "flowrun"
        code = main(["train-flow", "--config", small_cfg, "--data", src,
                     "--steps", "4", "--out", str(out)])
        assert code == 0
        assert (out / "flow_ckpt" / "manifest.json").exists()
        lines = (out / "flow_curve.csv").read_text().splitlines()
        assert lines[0].startswith("# config=")
        assert lines[1] == "step,loss"
        assert len(lines) == 2 + 5  # initial point plus 4 steps

    def test_missing_data_dir_is_exit_3(self, tmp_path, small_cfg):
        code = main(["train-flow", "--config", small_cfg,
                     "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")])
        assert code == 3


class TestTrainSegCmd:
    def test_bimal_without_flow_is_usage_error(self, tmp_path, small_cfg, capsys):
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        code = main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--mode", "bimal", "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--flow-ckpt" in capsys.readouterr().err

    def test_source_only_writes_artifacts(self, tmp_path, small_cfg):
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        out = tmp_path / "segrun"
        code = main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--steps", "4", "--out", str(out)])
        assert code == 0
        assert (out / "seg_ckpt" / "manifest.json").exists()
        assert (out / "seg_curve.csv").exists()
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[1].startswith("step,miou,iou_0")

    def test_full_bimal_round_trip(self, tmp_path, small_cfg):
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        flow_out = tmp_path / "flowrun"
        assert main(["train-flow", "--config", small_cfg, "--data", src,
                     "--steps", "2", "--out", str(flow_out)]) == 0
        seg_out = tmp_path / "segrun"
        code = main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--mode", "bimal",
                     "--flow-ckpt", str(flow_out / "flow_ckpt"),
                     "--steps", "2", "--keep", "last", "--out", str(seg_out)])
        assert code == 0

    def test_init_ckpt_resumes(self, tmp_path, small_cfg):
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        first = tmp_path / "first"
        assert main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--steps", "2", "--out", str(first)]) == 0
        second = tmp_path / "second"
        code = main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--steps", "2",
                     "--init-ckpt", str(first / "seg_ckpt"), "--out", str(second)])
        assert code == 0


class TestEvalCmd:
    def test_eval_appends_metrics(self, tmp_path, small_cfg):
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        seg_out = tmp_path / "segrun"
        assert main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--steps", "2", "--out", str(seg_out)]) == 0
        out = tmp_path / "evalrun"
        code = main(["eval", "--config", small_cfg,
                     "--seg-ckpt", str(seg_out / "seg_ckpt"),
                     "--data", tgt, "--out", str(out)])
        assert code == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3

    def test_run_dir_resolves_to_nested_checkpoint(self, tmp_path, small_cfg):
        # passing the training output directory works the same as passing
        # the seg_ckpt/flow_ckpt directory inside it
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        flow_out = tmp_path / "flowrun"
        assert main(["train-flow", "--config", small_cfg, "--data", src,
                     "--steps", "2", "--out", str(flow_out)]) == 0
        seg_out = tmp_path / "segrun"
        assert main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--steps", "2", "--out", str(seg_out)]) == 0
        adapted = tmp_path / "adapted"
        assert main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--mode", "bimal",
                     "--flow-ckpt", str(flow_out), "--init-ckpt", str(seg_out),
                     "--keep", "last", "--steps", "2", "--out", str(adapted)]) == 0
        out = tmp_path / "evalrun"
        code = main(["eval", "--config", small_cfg, "--seg-ckpt", str(adapted),
                     "--data", tgt, "--flow-ckpt", str(flow_out), "--out", str(out)])
        assert code == 0
        assert (out / "metrics.csv").exists()

    def test_corrupt_checkpoint_is_exit_3(self, tmp_path, small_cfg):
        src = gen(tmp_path, small_cfg, "src", "source")
        tgt = gen(tmp_path, small_cfg, "tgt", "target")
        seg_out = tmp_path / "segrun"
        assert main(["train-seg", "--config", small_cfg, "--source", src,
                     "--target", tgt, "--steps", "2", "--out", str(seg_out)]) == 0
        victim = seg_out / "seg_ckpt" / "conv0.kernel.ten"
        raw = bytearray(victim.read_bytes())
        raw[-2] ^= 0x55
        victim.write_bytes(bytes(raw))
        code = main(["eval", "--config", small_cfg,
                     "--seg-ckpt", str(seg_out / "seg_ckpt"),
                     "--data", tgt, "--out", str(tmp_path / "e")])
        assert code == 3


class TestSampleFlowCmd:
    def test_writes_label_maps(self, tmp_path, small_cfg, capsys):
        src = gen(tmp_path, small_cfg, "src", "source")
        flow_out = tmp_path / "flowrun"
        assert main(["train-flow", "--config", small_cfg, "--data", src,
                     "--steps", "2", "--out", str(flow_out)]) == 0
        out = tmp_path / "samples"
        code = main(["sample-flow", "--config", small_cfg,
                     "--flow-ckpt", str(flow_out / "flow_ckpt"),
                     "--n", "3", "--out", str(out)])
        assert code == 0
        maps = read_tensor(out / "samples.ten")
        assert maps.shape == (3, 16, 16)
        assert maps.dtype == np.uint8
        assert maps.max() < 6
        assert "3 samples" in capsys.readouterr().out


class TestGradCheckCmd:
    def test_passes_at_default_tolerance(self, capsys):
        code = main(["grad-check"])
        out = capsys.readouterr().out
        assert code == 0
        assert "30/30" in out
        assert "FAIL" not in out

    def test_impossible_tolerance_fails_with_exit_4(self, capsys):
        code = main(["grad-check", "--tol", "1e-18"])
        assert code == 4
        assert "FAIL" in capsys.readouterr().out

    def test_bad_eps_is_usage_error(self):
        assert main(["grad-check", "--eps", "0.5"]) == 2


class TestParser:
    def test_no_command_is_exit_2(self):
        assert main([]) == 2

    def test_unknown_command_is_exit_2(self):
        assert main(["frobnicate"]) == 2
