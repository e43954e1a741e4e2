import os
import re

import numpy as np
import pytest

from conftest import tiny_spn_config
from spn import configio
from spn.checkpoint import save_checkpoint
from spn.cli import main
from spn.data import make_synthetic_corpus
from spn.model import SPN
from spn.ppm import read_ppm, write_ppm
from spn.subscale import Image
from spn.training import TrainConfig


def write_config(path, model_cfg, train_cfg, kind="spn"):
    kv = configio.model_config_to_kv(model_cfg)
    kv.update(configio.train_config_to_kv(train_cfg))
    kv["kind"] = kind
    with open(path, "w") as fh:
        fh.write(configio.render_kv(kv))


def zero_head(model):
    model.decoder.pixelcnn.head.w.data[:] = 0
    model.decoder.pixelcnn.head.b.data[:] = 0


@pytest.fixture
def corpus3(tmp_path):
    return make_synthetic_corpus("stripes", 8, 8, 8, 3, seed=4,
                                 out_dir=tmp_path / "data3", valid_every=4)


class TestVerify:
    def test_exits_zero(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out


class TestEval:
    def test_uniform_model_prints_3(self, tmp_path, corpus3, capsys):
        cfg = tiny_spn_config(depth=3)
        model = SPN(cfg, seed=0)
        zero_head(model)
        ckpt = tmp_path / "uniform.ckpt"
        save_checkpoint(ckpt, model)
        manifest_path = os.path.join(corpus3.root, "manifest.txt")
        rc = main(["eval", "--checkpoint", str(ckpt), "--data", manifest_path,
                   "--split", "valid"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "3.0000"

    def test_staged_format(self, tmp_path, capsys):
        corpus8 = make_synthetic_corpus("checker", 4, 8, 8, 8, seed=2,
                                        out_dir=tmp_path / "data8", valid_every=2)
        stage1 = SPN(tiny_spn_config(depth=3), seed=0)
        stage2 = SPN(tiny_spn_config(depth=5, cond_depth=3), seed=1)
        zero_head(stage1)
        zero_head(stage2)
        ck1, ck2 = tmp_path / "s1.ckpt", tmp_path / "s2.ckpt"
        save_checkpoint(ck1, stage1)
        save_checkpoint(ck2, stage2)
        rc = main(["eval", "--checkpoint", str(ck1), "--stage2-checkpoint", str(ck2),
                   "--data", os.path.join(corpus8.root, "manifest.txt"), "--split", "valid"])
        assert rc == 0
        assert capsys.readouterr().out.strip() == "8.0000 (3.0000, 5.0000)"


class TestSlice:
    def test_ramp_slices(self, tmp_path, capsys):
        ramp = np.repeat(np.arange(16, dtype=np.int32).reshape(4, 4, 1), 3, axis=2)
        src = tmp_path / "ramp.ppm"
        write_ppm(src, Image(values=ramp, depth=8))
        out_dir = tmp_path / "slices"
        rc = main(["slice", "--input", str(src), "--S", "2", "--out", str(out_dir)])
        assert rc == 0
        expected = {
            (0, 0): [[0, 2], [8, 10]],
            (0, 1): [[1, 3], [9, 11]],
            (1, 0): [[4, 6], [12, 14]],
            (1, 1): [[5, 7], [13, 15]],
        }
        for (i, j), vals in expected.items():
            img = read_ppm(out_dir / f"slice_{i}_{j}.ppm")
            assert np.array_equal(img.values[:, :, 0], vals)


class TestTrain:
    def _train_config(self):
        return TrainConfig(batch_size=2, learning_rate=1e-3, lr_drops=(),
                           polyak_decay=0.99, seed=5, steps=6, report_every=2,
                           checkpoint_every=0)

    def test_smoke_and_log_format(self, tmp_path, corpus3):
        cfg_path = tmp_path / "cfg.txt"
        write_config(cfg_path, tiny_spn_config(depth=3), self._train_config())
        out = tmp_path / "run"
        rc = main(["train", "--config", str(cfg_path),
                   "--data", os.path.join(corpus3.root, "manifest.txt"), "--out", str(out)])
        assert rc == 0
        lines = (out / "metrics.log").read_text().splitlines()
        assert lines[0].startswith("# seed=5 config_hash=")
        pattern = re.compile(r"^step=\d+ bits_per_dim=\d+\.\d{6} wall_s=\d+\.\d{3}$")
        body = [l for l in lines if not l.startswith("#")]
        assert body and all(pattern.match(l) for l in body)
        ckpts = sorted(p for p in os.listdir(out) if p.endswith(".ckpt"))
        assert ckpts == ["ckpt_00000006.ckpt"]

    def test_deterministic_logs_modulo_wall_time(self, tmp_path, corpus3):
        cfg_path = tmp_path / "cfg.txt"
        write_config(cfg_path, tiny_spn_config(depth=3), self._train_config())
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["train", "--config", str(cfg_path),
                         "--data", os.path.join(corpus3.root, "manifest.txt"),
                         "--out", str(out)]) == 0
            text = (out / "metrics.log").read_text()
            logs.append(re.sub(r" wall_s=\d+\.\d{3}", "", text))
        assert logs[0] == logs[1]

    def test_resume_from_checkpoint(self, tmp_path, corpus3):
        cfg_path = tmp_path / "cfg.txt"
        write_config(cfg_path, tiny_spn_config(depth=3), self._train_config())
        out = tmp_path / "run"
        manifest = os.path.join(corpus3.root, "manifest.txt")
        assert main(["train", "--config", str(cfg_path), "--data", manifest,
                     "--out", str(out)]) == 0
        assert main(["train", "--config", str(cfg_path), "--data", manifest,
                     "--out", str(out), "--steps", "10",
                     "--checkpoint", str(out / "ckpt_00000006.ckpt")]) == 0
        assert (out / "ckpt_00000010.ckpt").exists()

    def test_unknown_config_key_rejected(self, tmp_path, corpus3, capsys):
        cfg_path = tmp_path / "cfg.txt"
        write_config(cfg_path, tiny_spn_config(depth=3), self._train_config())
        with open(cfg_path, "a") as fh:
            fh.write("learninng_rate=0.1\n")
        rc = main(["train", "--config", str(cfg_path),
                   "--data", os.path.join(corpus3.root, "manifest.txt"),
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "learninng_rate" in capsys.readouterr().err


class TestSample:
    def test_sample_writes_ppm(self, tmp_path, capsys):
        model = SPN(tiny_spn_config(depth=3), seed=0)
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, model)
        out = tmp_path / "img.ppm"
        rc = main(["sample", "--checkpoint", str(ckpt), "--out", str(out),
                   "--seed", "1", "--temperature", "1.0"])
        assert rc == 0
        img = read_ppm(out)
        assert img.values.shape == (8, 8, 3)

    def test_greedy_sample_deterministic(self, tmp_path):
        model = SPN(tiny_spn_config(depth=2), seed=0)
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, model)
        outs = []
        for name in ("a.ppm", "b.ppm"):
            path = tmp_path / name
            assert main(["sample", "--checkpoint", str(ckpt), "--out", str(path),
                         "--greedy"]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_bad_checkpoint_path_errors(self, tmp_path, capsys):
        rc = main(["sample", "--checkpoint", str(tmp_path / "nope.ckpt"),
                   "--out", str(tmp_path / "x.ppm")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestUpscaleCLI:
    def test_upscale_depth_pipeline_runs(self, tmp_path):
        stage1 = SPN(tiny_spn_config(depth=1), seed=0)
        stage2 = SPN(tiny_spn_config(depth=1, cond_depth=1), seed=1)
        ck1, ck2 = tmp_path / "s1.ckpt", tmp_path / "s2.ckpt"
        save_checkpoint(ck1, stage1)
        save_checkpoint(ck2, stage2)
        out = tmp_path / "up.ppm"
        rc = main(["upscale-depth", "--stage1-checkpoint", str(ck1),
                   "--stage2-checkpoint", str(ck2), "--out", str(out), "--seed", "3"])
        assert rc == 0
        img = read_ppm(out)
        # written as a depth-2 preview
        assert (img.values >> 6).max() < 4
