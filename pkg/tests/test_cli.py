import json
from pathlib import Path

import numpy as np
import pytest

from duodiff.cli import UsageError, load_config, main
from duodiff.motion import load_motion, retime
from duodiff.synthdata import read_dataset

CFG_TEXT = """
[data]
seed = 3
sample_count = 30
frame_count = 16
listener_lag = 4
noise_level = 0.01

[model]
motion_dim = 23
cond_dim = 4
role_dim = 2
width = 8
heads = 2
cla_window = 2
cla_layers = 1
fusion_layers = 1
timesteps = 4
lambda_weight = 0.7

[schedule]
beta_start = 1e-2
beta_end = 0.3

[train]
batch_size = 4
lr = 1e-3
steps = 6
seed = 0
checkpoint_every = 3
alpha_foot = 0.1
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "desk.ini"
    p.write_text(CFG_TEXT)
    return str(p)


@pytest.fixture
def dataset_dir(tmp_path, cfg_file):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", cfg_file, "--out", str(out)]) == 0
    return out


@pytest.fixture
def trained(tmp_path, cfg_file, dataset_dir):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg_file, "--data", str(dataset_dir), "--out", str(out)]) == 0
    cks = sorted(out.glob("checkpoint_*.zip"))
    assert cks
    return cks[-1], dataset_dir


class TestConfig:
    def test_load_and_override(self, cfg_file):
        cfg = load_config(cfg_file, ["train.lr=5e-4", "model.width=16"])
        assert cfg["train"]["lr"] == "5e-4"
        assert cfg["model"]["width"] == "16"

    def test_unknown_key_rejected(self, cfg_file):
        with pytest.raises(UsageError, match="model.depth"):
            load_config(cfg_file, ["model.depth=3"])

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(UsageError, match="optimizer"):
            load_config(str(p), [])

    def test_malformed_override(self, cfg_file):
        with pytest.raises(UsageError, match="--set"):
            load_config(cfg_file, ["widths=3"])

    def test_missing_file(self):
        with pytest.raises(UsageError, match="not found"):
            load_config("/nonexistent.ini", [])


class TestGenData:
    def test_idempotent_byte_identical(self, tmp_path, cfg_file):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-data", "--config", cfg_file, "--out", str(a)]) == 0
        assert main(["gen-data", "--config", cfg_file, "--out", str(b)]) == 0
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name

    def test_split_sizes_in_manifest(self, tmp_path, cfg_file):
        out = tmp_path / "d"
        assert main(["gen-data", "--config", cfg_file, "--set", "data.sample_count=100",
                     "--set", "data.frame_count=12", "--set", "data.listener_lag=2",
                     "--out", str(out)]) == 0
        recs = [json.loads(l) for l in (out / "manifest.jsonl").read_text().splitlines()]
        counts = {s: sum(r["split"] == s for r in recs) for s in ("train", "val", "test")}
        assert counts == {"train": 80, "val": 10, "test": 10}

    def test_invalid_spec_field_exits_2(self, tmp_path, cfg_file, capsys):
        rc = main(["gen-data", "--config", cfg_file, "--set", "data.sample_counts=5",
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "sample_counts" in capsys.readouterr().err

    def test_invalid_value_exits_1(self, tmp_path, cfg_file, capsys):
        rc = main(["gen-data", "--config", cfg_file, "--set", "data.listener_gain=0",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "listener_gain" in capsys.readouterr().err


class TestTrainCommand:
    def test_writes_checkpoints_and_losses(self, trained):
        ck_path, _ = trained
        run_dir = ck_path.parent
        names = sorted(p.name for p in run_dir.glob("checkpoint_*.zip"))
        assert names == ["checkpoint_000003.zip", "checkpoint_000006.zip"]
        lines = (run_dir / "losses.csv").read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 7

    def test_resume_flag(self, tmp_path, cfg_file, dataset_dir, trained):
        ck_path, _ = trained
        mid = ck_path.parent / "checkpoint_000003.zip"
        out = tmp_path / "resumed"
        rc = main(["train", "--config", cfg_file, "--data", str(dataset_dir),
                   "--out", str(out), "--resume", str(mid)])
        assert rc == 0
        from duodiff.training import load_checkpoint

        a = load_checkpoint(ck_path)
        b = load_checkpoint(out / "checkpoint_000006.zip")
        for name, arr in a.params.items():
            np.testing.assert_array_equal(arr, b.params[name], err_msg=name)


class TestSampleCommand:
    def test_sample_writes_pairs_reproducibly(self, tmp_path, trained):
        ck_path, data_dir = trained
        cond = next(iter(sorted(data_dir.glob("*_condition.json"))))
        out_a, out_b = tmp_path / "sa", tmp_path / "sb"
        args = ["sample", "--checkpoint", str(ck_path), "--condition", str(cond),
                "--n", "2", "--seed", "5"]
        assert main(args + ["--out", str(out_a)]) == 0
        assert main(args + ["--out", str(out_b)]) == 0
        files = sorted(p.name for p in out_a.iterdir())
        assert files == [
            "sample_000_listener.json",
            "sample_000_speaker.json",
            "sample_001_listener.json",
            "sample_001_speaker.json",
        ]
        for f in files:
            assert (out_a / f).read_bytes() == (out_b / f).read_bytes(), f

    def test_ddim_sampler_flag(self, tmp_path, trained):
        ck_path, data_dir = trained
        cond = next(iter(sorted(data_dir.glob("*_condition.json"))))
        out = tmp_path / "sd"
        rc = main(["sample", "--checkpoint", str(ck_path), "--condition", str(cond),
                   "--n", "1", "--sampler", "ddim:3", "--out", str(out)])
        assert rc == 0
        assert len(list(out.iterdir())) == 2

    def test_bad_n_exits_2(self, tmp_path, trained, capsys):
        ck_path, data_dir = trained
        cond = next(iter(sorted(data_dir.glob("*_condition.json"))))
        rc = main(["sample", "--checkpoint", str(ck_path), "--condition", str(cond),
                   "--n", "0", "--out", str(tmp_path / "x")])
        assert rc == 2

    def test_missing_checkpoint_exits_1(self, tmp_path, trained, capsys):
        _, data_dir = trained
        cond = next(iter(sorted(data_dir.glob("*_condition.json"))))
        rc = main(["sample", "--checkpoint", str(tmp_path / "none.zip"),
                   "--condition", str(cond), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "not found" in capsys.readouterr().err


class TestEvaluateCommand:
    def test_report_written(self, tmp_path, trained):
        ck_path, data_dir = trained
        out_file = tmp_path / "report.json"
        rc = main(["evaluate", "--checkpoint", str(ck_path), "--data", str(data_dir),
                   "--out", str(out_file), "--n-diversity", "3",
                   "--sampler", "ddim:2", "--max-conditions", "2", "--fgd-window", "8"])
        assert rc == 0
        doc = json.loads(out_file.read_text())
        assert set(doc) >= {"fgd", "ba", "div", "sample_count", "checkpoint_id"}
        assert doc["div"] > 0.0


class TestRetimeCommand:
    def test_matches_library_retime(self, tmp_path, dataset_dir):
        src = next(iter(sorted(dataset_dir.glob("*_speaker.json"))))
        out = tmp_path / "r.json"
        assert main(["retime", "--input", str(src), "--frames", "9", "--out", str(out)]) == 0
        got = load_motion(out)
        want = retime(load_motion(src), 9)
        np.testing.assert_allclose(got.root_pos, want.root_pos, atol=1e-12)
        np.testing.assert_allclose(got.rotations, want.rotations, atol=1e-9)

    def test_pingpong_flag(self, tmp_path, dataset_dir):
        src = next(iter(sorted(dataset_dir.glob("*_speaker.json"))))
        out = tmp_path / "r.json"
        assert main(["retime", "--input", str(src), "--frames", "20", "--out", str(out),
                     "--pingpong"]) == 0
        assert load_motion(out).frame_count == 20

    def test_bad_frames_exits_2(self, tmp_path, dataset_dir):
        src = next(iter(sorted(dataset_dir.glob("*_speaker.json"))))
        assert main(["retime", "--input", str(src), "--frames", "0",
                     "--out", str(tmp_path / "r.json")]) == 2


class TestPlotCommand:
    def test_emits_files(self, tmp_path, dataset_dir):
        src = next(iter(sorted(dataset_dir.glob("*_speaker.json"))))
        cond = next(iter(sorted(dataset_dir.glob("*_condition.json"))))
        out = tmp_path / "plots"
        rc = main(["plot", "--input", str(src), "--condition", str(cond), "--out", str(out)])
        assert rc == 0
        pngs = sorted(p.name for p in out.iterdir())
        assert len(pngs) == 2
        assert all(p.endswith(".png") for p in pngs)


class TestEnvOutRoot:
    def test_default_out_uses_env(self, tmp_path, cfg_file, monkeypatch):
        monkeypatch.setenv("DUODIFF_OUT", str(tmp_path / "root"))
        monkeypatch.chdir(tmp_path)
        assert main(["gen-data", "--config", cfg_file]) == 0
        assert (tmp_path / "root" / "data" / "manifest.jsonl").exists()
