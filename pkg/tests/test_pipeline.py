import json
import os

import numpy as np
import pytest

from eegssfi import cli
from eegssfi.eeg_io import load_recording
from eegssfi.isd import IsdMatrix
from eegssfi.nn.checkpoint import load_checkpoint
from eegssfi.pipeline import (PipelineConfig, StageError, featurize, load_preprocessed,
                              read_feature_store, run_pipeline, save_preprocessed,
                              synthetic_recording, write_feature_store)
from eegssfi.ssfi import read_ssfi


def small_config(tmp_path, subjects=(1,), grid=16, **over):
    d = {
        "data_dir": str(tmp_path / "data"),
        "out_dir": str(tmp_path / "runs"),
        "source": "synthetic",
        "subjects": list(subjects),
        "grid": grid,
        "seed": 3,
        "train": {"max_epochs": 2, "batch_size": 32},
        "synthetic": {"n_experiments": 144, "task_samples": {"L": 128, "W": 160, "R": 128}},
        "viz": {"units": [0], "steps": 3, "kernel_layers": ["CNV1"], "upscale": 1},
    }
    d.update(over)
    return d


def test_config_rejects_unknown(tmp_path):
    with pytest.raises(ValueError, match="bogus"):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError, match="nope"):
        PipelineConfig.from_dict({"train": {"nope": 1}})
    with pytest.raises(ValueError):
        PipelineConfig(source="ftp")
    cfg = PipelineConfig.from_dict(small_config(tmp_path))
    assert cfg.train.grid == 16
    assert PipelineConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_featurize_and_store_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict(small_config(tmp_path, grid=48))
    rec = synthetic_recording(2, cfg)
    data, feats, starts = featurize(rec, grid=48)
    assert data.x.shape[1:] == (48, 48, 6) and feats.shape == (len(data), 84)
    write_feature_store(tmp_path / "S2", data, feats, starts)
    back = read_feature_store(tmp_path / "S2")
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.y, data.y)
    np.testing.assert_array_equal(back.task_index, data.task_index)
    assert back.subject_id == 2
    save_preprocessed(rec, tmp_path / "p.npz")
    again = load_preprocessed(tmp_path / "p.npz")
    np.testing.assert_array_equal(again.samples, rec.samples)
    assert again.annotations == rec.annotations


def test_pipeline_end_to_end_and_resume(tmp_path):
    cfg = PipelineConfig.from_dict(small_config(tmp_path, subjects=(1, 2)))
    r1 = run_pipeline(cfg)
    out = tmp_path / "runs"
    assert {"train:S1", "train:S2", "isd", "viz:S1"} <= set(r1.ran)
    for rel in ("models/S1.ckpt", "reports/S2.json", "isd/matrix.csv", "isd/heatmap.ppm",
                "viz/S1/kernels_CNV1.ppm", "viz/S1/CNV1_u0_alpha.ppm", "manifest.json"):
        assert (out / rel).exists(), rel
    assert not list(out.rglob("*.partial"))
    report = json.loads((out / "reports/S1.json").read_text())
    assert 0 <= report["test"]["accuracy"] <= 1
    m = IsdMatrix.from_csv((out / "isd/matrix.csv").read_text())
    assert m.accuracy.shape == (2, 2)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and "config_hash" in manifest

    r2 = run_pipeline(cfg)
    assert r2.ran == [] and len(r2.skipped) == len(r1.ran)

    # changing a downstream parameter reruns only from that stage on
    cfg.train.max_epochs = 1
    r3 = run_pipeline(cfg)
    assert "featurize:S1" in r3.skipped and "train:S1" in r3.ran


def test_stage_error_leaves_no_final_output(tmp_path):
    cfg = PipelineConfig.from_dict(small_config(tmp_path))
    cfg.train.batch_size = 10**6
    cfg.train.max_epochs = 1
    # a one-epoch run with all data in one batch works; corrupt features instead
    run_pipeline(cfg)
    feats = tmp_path / "runs/features/S1.ssfi"
    feats.write_bytes(b"junk")
    ckpt = tmp_path / "runs/models/S1.ckpt"
    ckpt.unlink()
    with pytest.raises(StageError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "train:S1"
    assert not ckpt.exists()


def test_missing_csv_source(tmp_path):
    cfg = PipelineConfig.from_dict(small_config(tmp_path, source="csv"))
    with pytest.raises(StageError, match="S1"):
        run_pipeline(cfg)


# --------------------------------------------------------------------------
# CLI


def _write_cfg(tmp_path, **over):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(small_config(tmp_path, **over)))
    return str(p)


def test_cli_stagewise(tmp_path, capsys):
    cfgp = _write_cfg(tmp_path)
    raw, pre, feats = tmp_path / "S1.csv", tmp_path / "S1.npz", tmp_path / "feats"
    feats.mkdir()
    assert cli.main(["synth", "--config", cfgp, "--subject", "1", "--out", str(raw)]) == 0
    assert load_recording(raw).subject_id == 1
    assert cli.main(["preprocess", "--config", cfgp, "--input", str(raw), "--out", str(pre)]) == 0
    assert cli.main(["featurize", "--config", cfgp, "--input", str(pre), "--out", str(feats / "S1")]) == 0
    arr, _ = read_ssfi(feats / "S1.ssfi")
    assert arr.shape[1:] == (16, 16, 6)
    ck = tmp_path / "S1.ckpt"
    assert cli.main(["train", "--config", cfgp, "--subject", "1", "--data", str(feats), "--out", str(ck)]) == 0
    assert load_checkpoint(ck).grid == 16
    assert (tmp_path / "S1.history.csv").exists()
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(ck), "--subject", "1", "--data", str(feats)]) == 0
    assert "accuracy" in json.loads(capsys.readouterr().out)
    assert cli.main(["isd", "--ckpts", str(tmp_path), "--data", str(feats), "--subjects", "1",
                     "--out", str(tmp_path / "isd")]) == 0
    assert (tmp_path / "isd/matrix.csv").exists()
    assert cli.main(["viz", "kernels", "--ckpt", str(ck), "--layer", "CNV5", "--out", str(tmp_path / "k.ppm")]) == 0
    assert "96 tiles" in capsys.readouterr().out
    assert cli.main(["viz", "patterns", "--ckpt", str(ck), "--units", "0,1", "--steps", "2",
                     "--out", str(tmp_path / "pat")]) == 0
    assert len(list((tmp_path / "pat").glob("*.ppm"))) == 12
    assert cli.main(["viz", "topomap", "--ssfi", str(feats / "S1.ssfi"), "--out", str(tmp_path / "t.ppm")]) == 0


def test_cli_pipeline_and_errors(tmp_path, capsys):
    cfgp = _write_cfg(tmp_path)
    assert cli.main(["pipeline", "--config", cfgp]) == 0
    assert "skipped 0" in capsys.readouterr().out
    assert cli.main(["pipeline", "--config", cfgp]) == 0
    assert "ran 0" in capsys.readouterr().out

    assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--subject", "1", "--data", "x"]) == 1
    assert "error [eval]" in capsys.readouterr().err
    assert cli.main(["isd", "--ckpts", str(tmp_path), "--data", "x", "--subjects", "1..2",
                     "--out", str(tmp_path / "o")]) == 1
    assert "missing checkpoint" in capsys.readouterr().err
    bad = _write_cfg(tmp_path, source="csv", data_dir=str(tmp_path / "empty"), out_dir=str(tmp_path / "r2"))
    assert cli.main(["pipeline", "--config", bad]) == 1
    assert "error [raw:S1]" in capsys.readouterr().err


def test_cli_fetch_subject_range(capsys, tmp_path):
    assert cli.main(["fetch", "--subject", "0", "--dest", str(tmp_path), "--base-url", "http://127.0.0.1:9"]) == 1
    assert "error [fetch]" in capsys.readouterr().err


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "eegssfi", "--help"], capture_output=True, text=True,
                         env={**os.environ, "EEGSSFI_PURE_PYTHON": "1"})
    assert out.returncode == 0 and "pipeline" in out.stdout
