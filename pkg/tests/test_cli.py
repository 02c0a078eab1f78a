import json

import numpy as np
import pytest

from duomotion import clipio, synth
from duomotion.checkpoint import save_checkpoint
from duomotion.cli import main
from duomotion.representation import Layout

SMALL_MODEL = ["--set", "model.latent_dim=16", "--set", "model.n_blocks=1", "--set", "model.n_heads=2"]


def _resolved(err: str) -> dict:
    line = [l for l in err.splitlines() if l.startswith("resolved config: ")][-1]
    return json.loads(line.split(": ", 1)[1])


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, tiny):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(path, tiny)
    return path


def test_sample_twice_is_byte_identical(tmp_path, ckpt, capsys):
    for name in ("one", "two"):
        assert main(["sample", "--checkpoint", str(ckpt), "--out", str(tmp_path / f"{name}.ihc"),
                     "--label", "circle", "--seed", "7", "--steps", "4", "--length", "40"]) == 0
    assert (tmp_path / "one.ihc").read_bytes() == (tmp_path / "two.ihc").read_bytes()
    clip = clipio.load_clip(tmp_path / "one.ihc")
    assert clip.n_frames == 40 and clip.label == "circle"
    assert main(["sample", "--checkpoint", str(ckpt), "--out", str(tmp_path / "three.ihc"),
                 "--label", "circle", "--seed", "8", "--steps", "4", "--length", "40"]) == 0
    assert (tmp_path / "three.ihc").read_bytes() != (tmp_path / "one.ihc").read_bytes()
    cfg = _resolved(capsys.readouterr().err)
    assert cfg["sample"]["num_steps"] == 50 and cfg["train"]["seed"] == 8


def test_sample_defaults(tmp_path, ckpt, capsys):
    assert main(["sample", "--checkpoint", str(ckpt), "--out", str(tmp_path / "d.ihc")]) == 0
    cfg = _resolved(capsys.readouterr().err)
    assert cfg["sample"]["num_steps"] == 50 and cfg["sample"]["guidance_scale"] == 3.5
    assert clipio.load_clip(tmp_path / "d.ihc").n_frames == cfg["data"]["length"]


def test_convert_round_trip(tmp_path, circle_clip, capsys):
    src = tmp_path / "world.ihc"
    clipio.save_clip(circle_clip, src)
    can, back = tmp_path / "root.ihc", tmp_path / "back.ihc"
    assert main(["convert", "--in", str(src), "--out", str(can), "--to", "canonical"]) == 0
    assert main(["convert", "--in", str(can), "--out", str(back), "--to", "noncanonical"]) == 0
    clip = clipio.load_clip(back)
    lay = Layout(22)
    for p, q in ((clip.person_a, circle_clip.person_a), (clip.person_b, circle_clip.person_b)):
        assert np.abs(lay.positions(p) - lay.positions(q)).max() < 1e-3
    assert clip.label == circle_clip.label
    capsys.readouterr()
    assert main(["convert", "--in", str(can), "--out", str(tmp_path / "x.ihc"), "--to", "canonical"]) == 1
    assert "already canonical" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) >= 7 and all(line.endswith(" ok") for line in out)


def test_drift_demo(capsys):
    assert main(["drift-demo", "--trials", "50", "--horizons", "30", "300"]) == 0
    captured = capsys.readouterr()
    assert "canonical drift grows from 30 to 300 frames" in captured.out
    assert _resolved(captured.err)["trials"] == 50


def test_config_precedence(tmp_path, ckpt, capsys, monkeypatch):
    out = str(tmp_path / "s.ihc")
    base = ["sample", "--checkpoint", str(ckpt), "--out", out, "--steps", "2", "--length", "30"]
    (tmp_path / "file.json").write_text(json.dumps({"sample": {"eta": 0.5, "guidance_scale": 2.0}}))
    monkeypatch.delenv("DUOMOTION_CONFIG_DIR", raising=False)

    assert main(base) == 0
    cfg = _resolved(capsys.readouterr().err)
    assert cfg["sample"]["eta"] == 0.0 and cfg["sample"]["guidance_scale"] == 3.5

    assert main(base + ["--config", str(tmp_path / "file.json")]) == 0
    cfg = _resolved(capsys.readouterr().err)
    assert cfg["sample"]["eta"] == 0.5 and cfg["sample"]["guidance_scale"] == 2.0

    assert main(base + ["--config", str(tmp_path / "file.json"), "--set", "sample.eta=0.25"]) == 0
    cfg = _resolved(capsys.readouterr().err)
    assert cfg["sample"]["eta"] == 0.25 and cfg["sample"]["guidance_scale"] == 2.0

    # default config directory from the environment, still below --set
    env = tmp_path / "env"
    env.mkdir()
    (env / "config.json").write_text(json.dumps({"sample": {"eta": 0.75}}))
    monkeypatch.setenv("DUOMOTION_CONFIG_DIR", str(env))
    assert main(base) == 0
    assert _resolved(capsys.readouterr().err)["sample"]["eta"] == 0.75
    assert main(base + ["--set", "sample.eta=0.1"]) == 0
    assert _resolved(capsys.readouterr().err)["sample"]["eta"] == 0.1


def test_exit_codes(tmp_path, ckpt, capsys):
    base = ["sample", "--checkpoint", str(ckpt), "--out", str(tmp_path / "s.ihc"), "--steps", "2"]
    assert main(base + ["--set", "sample.nope=1"]) == 1
    assert "nope" in capsys.readouterr().err
    assert main(base + ["--set", "bogus.eta=1"]) == 1
    assert main(base + ["--set", "no-equals-sign"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["sample", "--out", "x"]) == 1
    capsys.readouterr()
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "m.ihc")]) == 2
    captured = capsys.readouterr()
    assert captured.out == "" and "error" in captured.err


def test_pipeline_gen_train_sample_edit_eval(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["gen-data", "--out", str(data), "--seed", "3", "--set", "data.n_clips=40",
                 "--set", "data.length=30", "--set", "data.train_ratio=0.7", "--set", "data.val_ratio=0.15"]) == 0
    rows = synth.read_manifest(data / "manifest.tsv")
    assert len(rows) == 40 and {r["split"] for r in rows} == {"train", "val", "test"}
    assert json.loads((data / "config.json").read_text())["data"]["seed"] == 3

    train = ["train", "--data", str(data), "--out", str(run), "--set", "train.epochs=1",
             "--set", "train.warmup_epochs=0", *SMALL_MODEL]
    assert main(train) == 0
    ckpt = run / "epoch0001.ckpt"
    assert ckpt.exists() and (run / "metrics.csv").exists()

    out = tmp_path / "gen.ihc"
    assert main(["sample", "--checkpoint", str(ckpt), "--out", str(out), "--label", "circle", "--steps", "2",
                 "--set", "data.length=30"]) == 0
    assert clipio.load_clip(out).n_frames == 30

    ref = data / rows[0]["clip"]
    (tmp_path / "mask.json").write_text(json.dumps(
        {"reference": str(ref), "entries": [{"person": "a", "channels": "all"}]}))
    edited = tmp_path / "edit.ihc"
    assert main(["edit", "--checkpoint", str(ckpt), "--mask", str(tmp_path / "mask.json"),
                 "--out", str(edited), "--steps", "2"]) == 0
    assert np.array_equal(clipio.load_clip(edited).person_a, clipio.load_clip(ref).person_a)

    report = tmp_path / "report.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(report), "--split", "test",
                 "--repeats", "1", "--n-generated", "4", "--per-condition", "2", "--pool-size", "2",
                 "--embed-steps", "2", "--steps", "2"]) == 0
    rep = json.loads(report.read_text())
    assert rep["repeats"] == 1 and "top1" in rep["generated"]
    capsys.readouterr()
