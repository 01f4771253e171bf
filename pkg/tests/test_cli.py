import csv
import json

import numpy as np
import pytest

from attsim import checkpoint, dsp
from attsim.cli import main
from attsim.harness import RunConfig, collect_rows, report_csv, report_text

TINY = {
    "split": {"seed": 0, "n_train": 3, "n_val": 0, "n_test": 3},
    "backbone": {"channels": [2, 3], "att_channels": 2},
    "schedule": {"max_epochs": 1, "episodes_per_epoch": 2, "batch_episodes": 2, "way": 3, "shot": 1},
    "eval": {"way": 3, "shot": 1, "episodes": 20},
}


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["make-toy-dataset", str(root / "raw"), "--classes", "6", "--clips-per-class", "3"]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "features_dir": str(root / "feat")}))
    assert main(["prepare", str(root / "raw"), str(root / "feat"), "--config", str(cfg)]) == 0
    return root, cfg


def test_toy_dataset_layout(prepared):
    root, _ = prepared
    rows = list(csv.DictReader(open(root / "raw" / "meta" / "esc50.csv")))
    assert len(rows) == 18 and {"filename", "category"} <= set(rows[0])
    assert len(list((root / "raw" / "audio").glob("*.wav"))) == 18
    clip = dsp.load_wav(root / "raw" / "audio" / rows[0]["filename"])
    assert clip.sample_rate == 16000 and len(clip.samples) == 80000


def test_prepare_outputs_and_idempotence(prepared, capsys):
    root, cfg = prepared
    feat = root / "feat"
    rows = dsp.read_manifest(feat / "manifest.csv")
    assert len(rows) == 18 and len(list((feat / "cache").glob("*.lmel"))) == 18
    assert {r.split for r in rows} == {"train", "test"}
    assert dsp.read_lmel(feat / rows[0].filename).shape == (128, 160)
    stamp = (feat / "manifest.csv").stat().st_mtime_ns, (feat / "norm.json").stat().st_mtime_ns
    assert main(["prepare", str(root / "raw"), str(feat), "--config", str(cfg)]) == 0
    assert "0 extracted, 18 cached" in capsys.readouterr().out
    assert ((feat / "manifest.csv").stat().st_mtime_ns, (feat / "norm.json").stat().st_mtime_ns) == stamp


def test_prepare_norm_fitted_on_train_only(prepared):
    root, _ = prepared
    feat = root / "feat"
    rows = dsp.read_manifest(feat / "manifest.csv")
    stats = dsp.NormStats.from_json((feat / "norm.json").read_text())
    ref = dsp.fit_norm([dsp.read_lmel(feat / r.filename) for r in rows if r.split == "train"])
    np.testing.assert_allclose(stats.mean, ref.mean)
    assert stats.n_clips_fitted == sum(r.split == "train" for r in rows)


def test_prepare_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["prepare", str(tmp_path / "empty"), str(tmp_path / "out")]) == 2
    assert "no clips found" in capsys.readouterr().err


def test_prepare_reports_unreadable_files(tmp_path, capsys, prepared):
    root, cfg = prepared
    raw = tmp_path / "raw"
    (raw / "meta").mkdir(parents=True)
    (raw / "audio").mkdir()
    src = list(csv.DictReader(open(root / "raw" / "meta" / "esc50.csv")))
    for r in src:
        (raw / "audio" / r["filename"]).write_bytes((root / "raw" / "audio" / r["filename"]).read_bytes())
    (raw / "audio" / src[0]["filename"]).write_bytes(b"junk")
    (raw / "meta" / "esc50.csv").write_text((root / "raw" / "meta" / "esc50.csv").read_text())
    assert main(["prepare", str(raw), str(tmp_path / "feat"), "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "1 clip(s) failed" in err and src[0]["filename"] in err


def _train(root, cfg, name, *extra):
    out = root / name
    assert main(["train", "--config", str(cfg), "--out", str(out), *extra]) == 0
    return out


def test_train_eval_report(prepared, tmp_path, capsys):
    root, cfg = prepared
    a = _train(root, cfg, "run_a", "--attentional", "on")
    b = _train(root, cfg, "run_b", "--attentional", "on")
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    log = [json.loads(x) for x in (a / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == [0] and {"lr", "train_loss", "val_acc"} <= set(log[0])
    digest, _ = checkpoint.load(a / "model.ckpt")
    assert digest == RunConfig.load(a / "config.json").digest()

    results = tmp_path / "results.jsonl"
    capsys.readouterr()
    for _ in range(2):
        assert main(["eval", "--config", str(cfg), "--attentional", "on", "--checkpoint", str(a / "model.ckpt"),
                     "--seed", "5", "--out", str(results)]) == 0
    first, second = [json.loads(x) for x in results.read_text().splitlines()]
    assert first == second and first["way"] == 3 and first["attentional"] is True
    assert 0 <= first["accuracy"] <= 1

    plain = _train(root, cfg, "run_plain")
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(plain / "model.ckpt"), "--out", str(results)]) == 0
    capsys.readouterr()
    assert main(["report", str(results), "--csv", str(tmp_path / "r.csv"), "--txt", str(tmp_path / "r.txt")]) == 0
    text = capsys.readouterr().out
    assert "delta" in text.splitlines()[0] and (tmp_path / "r.txt").read_text() == text
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["attentional"] for r in rows] == ["off", "on"]
    assert rows[0]["delta"] == ""
    assert float(rows[1]["delta"]) == pytest.approx(float(rows[1]["acc_3w1s"]) - float(rows[0]["acc_3w1s"]), abs=1e-4)


def test_eval_refuses_mismatched_config(prepared, capsys):
    root, cfg = prepared
    run = _train(root, cfg, "run_mismatch")
    capsys.readouterr()
    code = main(["eval", "--config", str(cfg), "--attentional", "on", "--checkpoint", str(run / "model.ckpt")])
    assert code == 1
    assert "different configuration" in capsys.readouterr().err


def test_untrained_checkpoint_evaluates(prepared):
    root, cfg = prepared
    run = _train(root, cfg, "run_untrained", "--epochs", "0")
    assert main(["eval", "--config", str(run / "config.json"), "--episodes", "10", "--checkpoint", str(run / "model.ckpt")]) == 0


def test_numeric_failure_exit_code(prepared, tmp_path, capsys):
    root, _ = prepared
    bad = tmp_path / "bad.json"
    d = json.loads((root / "cfg.json").read_text())
    d["schedule"] = {**d["schedule"], "lr0": 1e36, "max_epochs": 2}
    bad.write_text(json.dumps(d))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) == 3
    assert "episode seed" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [["train"], ["eval", "--checkpoint", "x", "--distance", "manhattan"], ["report"]],
)
def test_usage_errors_exit_1(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"schedule": {"learning_rate": 0.1}}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_missing_features_is_data_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"features_dir": str(tmp_path / "nowhere")}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_report_delta_formatting():
    frags = [
        {"model": "prototypical", "attentional": False, "depth": 3, "params": 100, "way": 5, "shot": 1, "accuracy": 0.5, "ci": 0.04},
        {"model": "prototypical", "attentional": True, "depth": 3, "params": 120, "way": 5, "shot": 1, "accuracy": 0.625, "ci": 0.03},
    ]
    rows = collect_rows(frags)
    assert rows[1].delta == pytest.approx(0.125)
    text = report_text(rows)
    assert "+12.5" in text and "62.5 ± 3.0" in text
    assert report_csv(rows).splitlines()[2].endswith("+0.1250")


# -- noise synthesis -------------------------------------------------------------
@pytest.fixture
def esc_and_scenes(tmp_path):
    esc, scenes = tmp_path / "esc", tmp_path / "scenes"
    (esc / "meta").mkdir(parents=True)
    rng = np.random.default_rng(0)
    rows = []
    for i in range(4):
        t = np.arange(16000) / 16000
        x = 0.1 * np.sin(2 * np.pi * (300 + 100 * i) * t)
        name = f"1-{i}-A-{i}.wav"
        dsp.write_wav(esc / "audio" / name, dsp.AudioClip(x, 16000))
        rows.append(f"{name},1,{i},class{i}")
    (esc / "meta" / "esc50.csv").write_text("filename,fold,target,category\n" + "\n".join(rows) + "\n")
    for s in ("park", "bus"):
        dsp.write_wav(scenes / s / f"{s}.wav", dsp.AudioClip(0.05 * rng.normal(size=48000), 16000))
    return esc, scenes


def test_synth_noise_reproducible_and_invertible(esc_and_scenes, tmp_path):
    esc, scenes = esc_and_scenes
    for out in ("n1", "n2"):
        assert main(["synth-noise", str(esc), str(scenes), str(tmp_path / out), "--seed", "3"]) == 0
    files = sorted(p.name for p in (tmp_path / "n1" / "audio").glob("*.wav"))
    assert len(files) == 4
    for f in files:
        assert (tmp_path / "n1" / "audio" / f).read_bytes() == (tmp_path / "n2" / "audio" / f).read_bytes()
    meta = list(csv.DictReader(open(tmp_path / "n1" / "meta" / "esc50.csv")))
    assert {"scene_file", "offset", "snr_db", "gain", "peak_scale"} <= set(meta[0])
    for row in meta:
        assert 5 <= float(row["snr_db"]) <= 20
        assert float(row["peak_scale"]) == 1.0
        mixed = dsp.load_wav(tmp_path / "n1" / "audio" / row["filename"]).samples
        orig = dsp.load_wav(esc / "audio" / row["filename"]).samples
        scene = dsp.load_wav(scenes / row["scene_file"]).samples
        off = int(row["offset"])
        resid = mixed - float(row["gain"]) * scene[off : off + len(orig)]
        assert np.max(np.abs(resid - orig)) <= 1 / 32768


def test_synth_noise_missing_scenes(esc_and_scenes, tmp_path, capsys):
    esc, _ = esc_and_scenes
    (tmp_path / "none").mkdir()
    assert main(["synth-noise", str(esc), str(tmp_path / "none"), str(tmp_path / "o")]) == 2
    assert "no scene audio" in capsys.readouterr().err
