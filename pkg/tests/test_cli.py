import json
import subprocess
import sys

import pytest

from fairmoe.cli import main

TINY_CONFIG = """\
image_size = 8
patch_size = 4
dim = 8
heads = 2
blocks = 1
d_feat = 4
hidden_mult = 2
batch_size = 8
n_f = 4
steps = 4
eval_every = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    data = root / "data"
    assert main(["synth", "--out", str(data), "--n", "64", "--bias", "0.9", "--seed", "1"]) == 0
    # the tiny model expects 8x8 images
    from fairmoe.data import SynthSpec, synthesize, write_dataset

    spec = SynthSpec(n=64, seed=1, image_size=8)
    write_dataset(synthesize(spec), root / "data8", spec)
    return root, cfg, root / "data8"


def run(*argv):
    return subprocess.run([sys.executable, "-m", "fairmoe.cli", *argv], capture_output=True, text=True)


def test_synth_outputs_and_manifest(workspace, capsys, tmp_path):
    root, _, _ = workspace
    data = root / "data"
    assert sum(1 for _ in open(data / "manifest.jsonl")) == 64
    man = json.loads((data / "run_manifest.json").read_text())
    assert man["command"] == "synth" and man["flags"]["seed"] == 1
    assert set(man["probe_accuracy"]) == {"race", "gender", "ethnicity", "language"}
    # same flags, same bytes
    assert main(["synth", "--out", str(tmp_path / "again"), "--n", "64", "--bias", "0.9", "--seed", "1"]) == 0
    assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == (data / "manifest.jsonl").read_bytes()
    out = capsys.readouterr().out
    assert "probe accuracy [race" in out


def test_synth_priors_file(tmp_path):
    pri = tmp_path / "p.json"
    pri.write_text(json.dumps({"race": [0.2, 0.3, 0.5]}))
    assert main(["synth", "--out", str(tmp_path / "d"), "--n", "8", "--priors", str(pri)]) == 0
    pri.write_text(json.dumps({"shoe": [1.0]}))
    assert main(["synth", "--out", str(tmp_path / "e"), "--n", "8", "--priors", str(pri)]) == 1


def test_train_eval_metrics_flow(workspace, tmp_path, capsys):
    root, cfg, data = workspace
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), "--print-every", "1"]) == 0
    printed = capsys.readouterr().out
    for key in ("contrastive=", "F_EI=", "F_FT=", "L_distance=", "total="):
        assert key in printed
    log = [json.loads(l) for l in (out / "loss_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3, 4]
    assert (out / "best.ckpt").exists() and (out / "run_manifest.json").exists()

    assert main(["eval", "--ckpt", str(out / "best.ckpt"), "--data", str(data), "--attr", "all", "--out", str(tmp_path / "ev")]) == 0
    table = capsys.readouterr().out
    for attr in ("race", "gender", "ethnicity", "language"):
        assert attr in table
    assert "DPD mode: standard" in table
    reports = [json.loads(l) for l in (tmp_path / "ev" / "report.json").read_text().splitlines()]
    assert len(reports) == 4

    assert main(["eval", "--ckpt", str(out / "best.ckpt"), "--data", str(data), "--attr", "race", "--dpd-mode", "as-printed", "--out", str(tmp_path / "ev2")]) == 0
    assert "DPD mode: as-printed" in capsys.readouterr().out

    preds = tmp_path / "ev" / "predictions.jsonl"
    assert main(["metrics", "--predictions", str(preds), "--attr", "gender", "--out", str(tmp_path / "m")]) == 0
    assert "gender" in capsys.readouterr().out


def test_resume_via_cli_matches_uninterrupted(workspace, tmp_path):
    root, cfg, data = workspace
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(full)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(part), "--steps", "2"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(part), "--steps", "2", "--resume", str(part / "last.ckpt")]) == 0
    assert (part / "loss_log.jsonl").read_text() == (full / "loss_log.jsonl").read_text()


def test_use_fol_false_log(workspace, tmp_path):
    root, cfg, data = workspace
    nofol = tmp_path / "nofol.cfg"
    nofol.write_text(TINY_CONFIG + "use_fol = false\n")
    assert main(["train", "--config", str(nofol), "--data", str(data), "--out", str(tmp_path / "o")]) == 0
    for line in (tmp_path / "o" / "loss_log.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert all(rec[k] == 0 for k in ("F_EI", "F_ET", "F_FI", "F_FT", "L_distance"))


def test_ablate_grid(workspace, tmp_path, capsys):
    root, cfg, data = workspace
    short = tmp_path / "short.cfg"
    short.write_text(TINY_CONFIG.replace("steps = 4", "steps = 2"))
    assert main(["ablate", "--config", str(short), "--data", str(data), "--suite", "terms", "--seeds", "1", "--out", str(tmp_path / "ab")]) == 0
    out = capsys.readouterr().out
    assert "±" not in out
    rows = json.loads((tmp_path / "ab" / "grid.json").read_text())
    assert [r["variant"] for r in rows] == ["Fair-MoE", "w/o F_EI", "w/o F_ET", "w/o F_FI", "w/o F_FT"]


def test_exit_codes(workspace, tmp_path):
    root, cfg, data = workspace
    r = run("train", "--config", str(cfg), "--out", str(tmp_path / "x"))
    assert r.returncode == 2 and "--data" in r.stderr
    r = run("synth", "--out", str(tmp_path / "y"), "--bogus")
    assert r.returncode == 2
    r = run("eval", "--ckpt", str(tmp_path / "y"), "--data", str(data), "--attr", "shoe")
    assert r.returncode == 2
    bad = tmp_path / "bad.ckpt"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "t"), "--steps", "1"]) == 0
    raw = bytearray((tmp_path / "t" / "last.ckpt").read_bytes())
    raw[100] ^= 1
    bad.write_bytes(bytes(raw))
    r = run("eval", "--ckpt", str(bad), "--data", str(data))
    assert r.returncode == 1 and "checksum" in r.stderr


def test_config_errors_listed_together(workspace, tmp_path, capsys):
    root, _, data = workspace
    bad = tmp_path / "bad.cfg"
    bad.write_text("steps = 0\nlr = -1\nmystery = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path / "z")]) == 1
    err = capsys.readouterr().err
    assert "steps must be >= 1" in err and "lr must be positive" in err and "mystery" in err
