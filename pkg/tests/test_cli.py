import csv
import json
import shutil

import numpy as np
import pytest

from shadowad.cli import main, parse_run_config
from shadowad.errors import ValidationError
from shadowad.evaluation import dataset_boundary_error_cdf
from shadowad.imaging import load_mask, save_mask

TINY = {
    "schema_version": 1,
    "train": {"iterations": 4, "batch_size": 2, "seed": 0, "image_size": 16, "checkpoint_every": 2, "log_every": 1},
    "attenuator": {"depth": 2, "base_channels": 4},
    "detector": {"depth": 2, "base_channels": 4},
}


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(root), "--count", "4", "--size", "16", "--seed", "7"]) == 0
    return root


@pytest.fixture(scope="module")
def run(dataset, tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    cfg = write_config(base / "cfg.json", TINY)
    out = base / "out"
    assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_synth_layout_and_determinism(dataset, tmp_path):
    assert sorted(p.name for p in (dataset / "images").iterdir()) == [f"{i:04d}.png" for i in range(4)]
    assert (dataset / "manifest.json").exists()
    again = tmp_path / "again"
    assert main(["synth", "--out", str(again), "--count", "4", "--size", "16", "--seed", "7"]) == 0
    for sub in ("images", "masks"):
        for p in (dataset / sub).iterdir():
            assert p.read_bytes() == (again / sub / p.name).read_bytes()
    assert (dataset / "manifest.json").read_bytes() == (again / "manifest.json").read_bytes()


def test_synth_count_zero_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--out", str(tmp_path), "--count", "0"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_synth_bad_range_exit_2(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--count", "1", "--k-hi", "1.5"]) == 2


def test_train_outputs(run):
    for name in ("a_final.ckpt", "d_final.ckpt", "metrics.csv", "config.json", "dataset_manifest.json"):
        assert (run / name).exists(), name
    rows = list(csv.reader((run / "metrics.csv").open()))
    assert len(rows) == 1 + 4
    echoed = json.loads((run / "config.json").read_text())
    assert echoed["train"]["weights"]["nsd"] == 30.0
    assert echoed["detector"]["in_channels"] == 3
    config, resolved = parse_run_config(echoed)
    assert resolved == echoed


def test_train_resume_matches(run, dataset, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", TINY)
    out = tmp_path / "resumed"
    shutil.copytree(run, out)
    (out / "a_final.ckpt").unlink()
    (out / "d_final.ckpt").unlink()
    snap = out / "snapshots" / "iter_000002" / "a.ckpt"
    assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(out), "--resume", str(snap)]) == 0
    for name in ("a_final.ckpt", "d_final.ckpt", "metrics.csv"):
        assert (out / name).read_bytes() == (run / name).read_bytes()


@pytest.mark.parametrize("field", ["schema_version", "train.iterations", "train.seed"])
def test_train_missing_field_named(field, dataset, tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    if "." in field:
        section, key = field.split(".")
        del doc[section][key]
    else:
        del doc[field]
    cfg = write_config(tmp_path / "cfg.json", doc)
    assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert field in capsys.readouterr().err


def test_config_unknown_keys_rejected():
    for doc in ({**TINY, "extra": 1}, {**TINY, "train": {**TINY["train"], "lr": 1}},
                {**TINY, "detector": {"depht": 2}}):
        with pytest.raises(ValidationError):
            parse_run_config(doc)


def test_train_missing_data_exit_3(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", TINY)
    assert main(["train", "--data", str(tmp_path / "none"), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_detect_and_prob(run, dataset, tmp_path):
    out, prob = tmp_path / "m.png", tmp_path / "p.png"
    code = main(["detect", "--model", str(run / "d_final.ckpt"), "--image", str(dataset / "images" / "0000.png"),
                 "--out", str(out), "--prob", str(prob), "--size", "16"])
    assert code == 0
    assert load_mask(out).shape == (16, 16)
    assert prob.exists()


def test_detect_with_attenuator_checkpoint_exit_5(run, dataset, tmp_path):
    code = main(["detect", "--model", str(run / "a_final.ckpt"), "--image", str(dataset / "images" / "0000.png"),
                 "--out", str(tmp_path / "m.png")])
    assert code == 5


def test_attenuate(run, dataset, tmp_path):
    out = tmp_path / "a.png"
    code = main(["attenuate", "--model", str(run / "a_final.ckpt"), "--image", str(dataset / "images" / "0001.png"),
                 "--mask", str(dataset / "masks" / "0001.png"), "--out", str(out), "--size", "16"])
    assert code == 0 and out.exists()
    code = main(["attenuate", "--model", str(run / "d_final.ckpt"), "--image", str(dataset / "images" / "0001.png"),
                 "--mask", str(dataset / "masks" / "0001.png"), "--out", str(out)])
    assert code == 5


def test_eval_model_and_perfect_predictions(run, dataset, tmp_path):
    report = tmp_path / "r.json"
    assert main(["eval", "--model", str(run / "d_final.ckpt"), "--data", str(dataset), "--report", str(report),
                 "--size", "16"]) == 0
    assert 0 <= json.loads(report.read_text())["aggregate"]["ber"] <= 100
    assert main(["eval", "--pred-dir", str(dataset / "masks"), "--data", str(dataset), "--report", str(report)]) == 0
    assert json.loads(report.read_text())["aggregate"]["ber"] == 0.0


def test_analyze_perfect_and_unmatched(dataset, tmp_path, capsys):
    cdf = tmp_path / "c.csv"
    gt = dataset / "masks"
    assert main(["analyze", "--pred-dir", str(gt), "--gt-dir", str(gt), "--cdf", str(cdf), "--max-distance", "3"]) == 0
    rows = list(csv.reader(cdf.open()))
    assert all(r[1:] == ["empty", "empty"] for r in rows[1:]) and len(rows) == 5
    partial = tmp_path / "partial"
    partial.mkdir()
    shutil.copy(gt / "0000.png", partial / "0000.png")
    assert main(["analyze", "--pred-dir", str(partial), "--gt-dir", str(gt), "--cdf", str(cdf)]) == 3
    assert "0001" in capsys.readouterr().err


def test_analyze_matches_pooled_oracle(tmp_path):
    rng = np.random.default_rng(11)
    preds, gts = tmp_path / "p", tmp_path / "g"
    preds.mkdir()
    gts.mkdir()
    pm, gm = [], []
    for i in range(5):
        g = np.zeros((16, 16), bool)
        g[rng.integers(2, 6):rng.integers(9, 14), rng.integers(2, 6):rng.integers(9, 14)] = True
        p = g ^ (rng.random((16, 16)) < 0.1)
        save_mask(g, gts / f"{i}.png")
        save_mask(p, preds / f"{i}.png")
        pm.append(p)
        gm.append(g)
    out = tmp_path / "c.csv"
    assert main(["analyze", "--pred-dir", str(preds), "--gt-dir", str(gts), "--cdf", str(out), "--max-distance", "8"]) == 0
    expected = dataset_boundary_error_cdf(pm, gm, 8)
    rows = list(csv.reader(out.open()))[1:]
    np.testing.assert_array_equal([float(r[1]) for r in rows], expected.fn_cum)
    np.testing.assert_array_equal([float(r[2]) for r in rows], expected.fp_cum)


def test_bench_small(capsys):
    assert main(["bench", "--size", "32", "--depth", "3", "--base", "4", "--repeats", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["size"] == 32


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SHADOWAD_THREADS", "many")
    assert main(["synth", "--out", str(tmp_path), "--count", "1"]) == 2
