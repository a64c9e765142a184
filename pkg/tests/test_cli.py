"""End-to-end command line runs through ``python3 -m birq``."""

import os
import struct
import subprocess
import sys

import numpy as np
import pytest

from birq.config import parse_config, resolve, serialize
from birq.features import load_features

TINY_CFG = """\
layers = 2
hidden_dim = 8
heads = 2
ff_dim = 16
codebook_size = 4
code_dim = 3
k = 1
epochs = 2
batch_size = 2
lr = 0.001
stack_factor = 2
mask_start_prob = 0.3
mask_span = 2
synth_num_sequences = 4
synth_frames = 30
synth_dim = 8
"""


def birq(*args, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.pop("BIRQ_BASE_SEED", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "birq", *args],
                          capture_output=True, text=True, env=env, cwd=cwd)


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


class TestParsing:
    def test_no_subcommand_is_usage_error(self):
        assert birq().returncode == 2

    def test_help(self):
        res = birq("--help")
        assert res.returncode == 0
        for name in ("pretrain", "gradcheck", "bilevel-demo", "quantize",
                     "synth-data", "plot"):
            assert name in res.stdout

    def test_unknown_config_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epoochs = 2\n")
        res = birq("synth-data", "--config", str(bad),
                   "--out", str(tmp_path / "d"))
        assert res.returncode == 2
        assert "config error" in res.stderr


class TestSynthData:
    def test_writes_deterministic_corpus(self, tmp_path, cfg_path):
        a, b = tmp_path / "a", tmp_path / "b"
        res = birq("synth-data", "--config", cfg_path, "--out", str(a))
        assert res.returncode == 0, res.stderr
        files = sorted(os.listdir(a))
        assert files == [f"seq_{i:04d}.feat" for i in range(4)]
        assert load_features(str(a / files[0])).data.shape == (30, 8)
        birq("synth-data", "--config", cfg_path, "--out", str(b))
        assert (a / files[2]).read_bytes() == (b / files[2]).read_bytes()


class TestPretrain:
    def test_synth_run_writes_artifacts(self, tmp_path, cfg_path):
        out = tmp_path / "run"
        res = birq("pretrain", "--config", cfg_path, "--synth",
                   "--out", str(out))
        assert res.returncode == 0, res.stderr
        assert (out / "metrics.csv").exists()
        assert (out / "checkpoint_epoch_0001.ckpt").exists()
        assert "final mask_acc_anchor" in res.stdout
        assert "wrote" in res.stdout

    def test_config_resolved_closure(self, tmp_path, cfg_path):
        out = tmp_path / "run"
        birq("pretrain", "--config", cfg_path, "--synth", "--out", str(out))
        text = (out / "config.resolved").read_text()
        assert serialize(resolve(parse_config(text))) == text
        assert "k = 1" in text

    def test_data_directory_input(self, tmp_path, cfg_path):
        data = tmp_path / "data"
        birq("synth-data", "--config", cfg_path, "--out", str(data))
        res = birq("pretrain", "--config", cfg_path, "--data", str(data),
                   "--out", str(tmp_path / "run"))
        assert res.returncode == 0, res.stderr

    def test_empty_data_directory_exits_3(self, tmp_path, cfg_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        res = birq("pretrain", "--config", cfg_path, "--data", str(empty),
                   "--out", str(tmp_path / "run"))
        assert res.returncode == 3
        assert "data error" in res.stderr

    def test_resume_matches_uninterrupted_rows(self, tmp_path, cfg_path):
        full = tmp_path / "full"
        birq("pretrain", "--config", cfg_path, "--synth", "--out", str(full))

        short_cfg = tmp_path / "short.cfg"
        short_cfg.write_text(TINY_CFG.replace("epochs = 2", "epochs = 1"))
        part = tmp_path / "part"
        birq("pretrain", "--config", str(short_cfg), "--synth",
             "--out", str(part))
        tail = tmp_path / "tail"
        res = birq("pretrain", "--config", cfg_path, "--synth",
                   "--out", str(tail),
                   "--resume", str(part / "checkpoint_epoch_0000.ckpt"))
        assert res.returncode == 0, res.stderr
        full_rows = (full / "metrics.csv").read_text().splitlines()
        tail_rows = (tail / "metrics.csv").read_text().splitlines()
        half = 1 + (len(full_rows) - 1) // 2
        assert tail_rows[1:] == full_rows[half:]

    def test_base_seed_env_fans_out(self, tmp_path, cfg_path):
        out = tmp_path / "run"
        res = birq("pretrain", "--config", cfg_path, "--synth",
                   "--out", str(out), env_extra={"BIRQ_BASE_SEED": "777"})
        assert res.returncode == 0, res.stderr
        assert "BIRQ_BASE_SEED=777" in res.stderr
        text = (out / "config.resolved").read_text()
        assert "seed_data = 777" in text
        assert "seed_mask = 778" in text
        assert "synth_seed = 782" in text

    def test_bad_base_seed_exits_2(self, tmp_path, cfg_path):
        res = birq("pretrain", "--config", cfg_path, "--synth",
                   "--out", str(tmp_path / "run"),
                   env_extra={"BIRQ_BASE_SEED": "not-a-number"})
        assert res.returncode == 2


class TestGradcheck:
    def test_passes_and_writes_csv(self, tmp_path):
        csv = tmp_path / "errs.csv"
        res = birq("gradcheck", "--csv", str(csv))
        assert res.returncode == 0, res.stderr
        assert "gradient check passed" in res.stdout
        lines = csv.read_text().splitlines()
        assert lines[0] == "loss,tensor,max_rel_err"
        assert len(lines) > 3

    def test_sabotage_negative_control_exits_5(self):
        res = birq("gradcheck", "--sabotage", "head.b")
        assert res.returncode == 5
        assert "failed" in res.stderr


class TestBilevelDemo:
    def test_passes_with_default_gammas(self, tmp_path):
        csv = tmp_path / "demo.csv"
        res = birq("bilevel-demo", "--csv", str(csv))
        assert res.returncode == 0, res.stderr
        assert "penalty demo passed" in res.stdout
        assert res.stdout.startswith("gamma,delta_measured,distance_to_oracle")
        assert csv.read_text().count("\n") == 5

    def test_bad_gammas_exit_2(self):
        assert birq("bilevel-demo", "--gammas", "1,abc").returncode == 2
        assert birq("bilevel-demo", "--gammas", "").returncode == 2


class TestQuantize:
    @pytest.fixture
    def feat_file(self, tmp_path, cfg_path):
        data = tmp_path / "data"
        birq("synth-data", "--config", cfg_path, "--out", str(data))
        return str(data / "seq_0000.feat")

    def test_hard_labels_deterministic(self, tmp_path, feat_file):
        a, b = tmp_path / "a.labels", tmp_path / "b.labels"
        res = birq("quantize", "--feats", feat_file, "--out", str(a),
                   "--codebook-size", "8", "--code-dim", "4")
        assert res.returncode == 0, res.stderr
        assert "utilization" in res.stdout
        birq("quantize", "--feats", feat_file, "--out", str(b),
             "--codebook-size", "8", "--code-dim", "4")
        assert a.read_bytes() == b.read_bytes()

    def test_soft_mode_with_noise(self, tmp_path, feat_file):
        out = tmp_path / "s.labels"
        res = birq("quantize", "--feats", feat_file, "--out", str(out),
                   "--mode", "soft", "--gumbel-seed", "3",
                   "--codebook-size", "8", "--code-dim", "4")
        assert res.returncode == 0, res.stderr
        assert out.exists()

    def test_missing_input_exits_3(self, tmp_path):
        res = birq("quantize", "--feats", str(tmp_path / "none.feat"),
                   "--out", str(tmp_path / "x.labels"))
        assert res.returncode == 3

    def test_nonfinite_payload_exits_4(self, tmp_path):
        path = tmp_path / "nan.feat"
        payload = np.full(8, np.nan, dtype="<f4").tobytes()
        path.write_bytes(b"BIRQFEAT" + struct.pack("<I", 1)
                         + struct.pack("<QQ", 2, 4) + payload)
        res = birq("quantize", "--feats", str(path),
                   "--out", str(tmp_path / "x.labels"))
        assert res.returncode == 4
        assert "numerical failure" in res.stderr


class TestPlot:
    def test_renders_training_metrics(self, tmp_path, cfg_path):
        out = tmp_path / "run"
        birq("pretrain", "--config", cfg_path, "--synth", "--out", str(out))
        svg = tmp_path / "m.svg"
        res = birq("plot", "--metrics", str(out / "metrics.csv"),
                   "--out", str(svg))
        assert res.returncode == 0, res.stderr
        assert svg.read_text().startswith("<svg ")

    def test_corrupt_metrics_exits_3(self, tmp_path):
        bad = tmp_path / "m.csv"
        bad.write_text("step,loss\n0,1\n")
        res = birq("plot", "--metrics", str(bad),
                   "--out", str(tmp_path / "m.svg"))
        assert res.returncode == 3
