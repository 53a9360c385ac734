import json

import numpy as np
import pytest

from fairmoe import nncore as nn
from fairmoe.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from fairmoe.data import SynthSpec, from_pairs, split, synthesize
from fairmoe.train import (
    LOG_KEYS,
    SUITES,
    TrainConfig,
    compute_losses,
    evaluate,
    format_config,
    format_grid,
    load_config,
    model_from_checkpoint,
    parse_config_text,
    run_ablation_suite,
    train,
)

TINY = dict(image_size=8, patch_size=4, dim=8, heads=2, blocks=1, d_feat=4, hidden_mult=2, batch_size=8, n_f=4, eval_every=3)


@pytest.fixture(scope="module")
def splits():
    spec = SynthSpec(n=96, seed=0, image_size=8)
    return split(from_pairs(synthesize(spec), spec), [0.6, 0.2, 0.2], seed=0)


def cfg(**kw):
    return TrainConfig(**{**TINY, "steps": 6, **kw})


def test_config_roundtrip_and_errors(tmp_path):
    c = cfg(lambda_fol=0.5, use_em=False)
    assert parse_config_text(format_config(c)) == c
    p = tmp_path / "c.txt"
    p.write_text("# comment\nsteps = 12\nuse_fol = off\n")
    loaded = load_config(p)
    assert loaded.steps == 12 and loaded.use_fol is False
    bad = "steps = x\nfoo = 1\nbatch_size = 1\nterm_mask = EI,XX\njunk\n"
    with pytest.raises(nn.ContractError) as exc:
        parse_config_text(bad)
    msg = str(exc.value)
    for frag in ("line 1", "unknown key 'foo'", "batch_size must be >= 2", "unknown terms", "line 5"):
        assert frag in msg


def test_effective_terms_follow_switches():
    assert cfg().effective_terms() == ("EI", "ET", "FI", "FT")
    assert cfg(use_em=False).effective_terms() == ("FI", "FT")
    assert cfg(use_text_moe=False).effective_terms() == ("EI", "FI")
    assert cfg(use_fom=False).effective_terms() == ()
    assert cfg(term_mask="EI,FT").effective_terms() == ("EI", "FT")


def test_compute_losses_components(splits):
    tr = splits[0]
    c = cfg()
    from fairmoe.encoder import DualEncoder
    from fairmoe.data import GroupSampler

    m = DualEncoder(c.model_config(), seed=0)
    idx = np.arange(8)
    gb = GroupSampler(tr, "race", 4, seed=0).draw()
    parts = compute_losses(m, c, tr, idx, gb)
    assert set(parts) == set(LOG_KEYS)
    vals = {k: parts[k].item() for k in LOG_KEYS}
    assert vals["total"] == pytest.approx(vals["contrastive"] + sum(vals[k] for k in LOG_KEYS[1:-1]))
    off = compute_losses(m, cfg(use_fol=False), tr, idx, gb)
    assert all(off[k].item() == 0.0 for k in LOG_KEYS[1:-1])
    assert off["total"].item() == pytest.approx(vals["contrastive"])


def test_training_is_deterministic(splits):
    tr, va, _ = splits
    a = train(cfg(), tr, va)
    b = train(cfg(), tr, va)
    assert json.dumps(a.log) == json.dumps(b.log)
    assert len(a.log) == 6 and all(set(LOG_KEYS) <= set(r) for r in a.log)
    c = train(cfg(seed=1), tr, va)
    assert c.log[0]["total"] != a.log[0]["total"]


def test_resume_reproduces_log(splits, tmp_path):
    tr, va, _ = splits
    full = train(cfg(), tr, va)
    first = train(cfg(), tr, va, steps=2)
    path = save_checkpoint(first.checkpoint, tmp_path / "mid.ckpt")
    rest = train(cfg(), tr, va, steps=4, resume=load_checkpoint(path))
    assert json.dumps(first.log + rest.log) == json.dumps(full.log)
    for (_, p), (_, q) in zip(full.model.named_parameters(), rest.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_use_fol_false_has_zero_fol_columns(splits):
    tr, va, _ = splits
    res = train(cfg(use_fol=False), tr, va)
    assert all(r[k] == 0.0 for r in res.log for k in ("F_EI", "F_ET", "F_FI", "F_FT", "L_distance"))


def test_best_checkpoint_tracks_validation(splits):
    tr, va, te = splits
    res = train(cfg(), tr, va)
    assert res.best.extras.get("selected") == "best_val_auc"
    assert any("val_auc" in r for r in res.log)
    model = model_from_checkpoint(res.best)
    records, reports = evaluate(model, te, attributes=["race", "gender"])
    assert len(records) == len(te) and [r.attribute for r in reports] == ["race", "gender"]


def test_train_rejects_small_dataset(splits):
    with pytest.raises(nn.ContractError):
        train(cfg(batch_size=64), splits[1])


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(0)
    ck = Checkpoint(
        config={"a": 1},
        params={"w": rng.normal(size=(2, 3)), "s": np.array(0.5)},
        step=7,
        opt={"lr": 0.1, "step": 7},
        adam_m={"w": np.ones((2, 3)), "s": np.array(0.0)},
        adam_v={"w": np.ones((2, 3)), "s": np.array(0.0)},
        sampler={"main": 3, "groups": {"0": 1}},
    )
    p = save_checkpoint(ck, tmp_path / "x.ckpt")
    back = load_checkpoint(p)
    assert back.step == 7 and back.config == {"a": 1} and back.sampler == ck.sampler
    np.testing.assert_array_equal(back.params["w"], ck.params["w"])
    assert back.params["s"].shape == ()
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


@pytest.mark.parametrize("suite,n", [("fol", 2), ("fom", 2), ("terms", 5), ("layers", 3), ("modality", 3)])
def test_suite_shapes(suite, n):
    assert len(SUITES[suite]) == n


def test_ablation_suite_runs_and_formats(splits):
    rows = run_ablation_suite(cfg(steps=2), tuple(splits), "layers", seeds=[0])
    assert [r.variant for r in rows] == ["Fair-MoE", "w/o EM", "w/o FM"]
    grid = format_grid(rows)
    assert "±" not in grid and "w/o FM" in grid
    rows2 = run_ablation_suite(cfg(steps=2), tuple(splits), "fol", seeds=[0, 1])
    assert "±" in format_grid(rows2)
    with pytest.raises(nn.ContractError):
        run_ablation_suite(cfg(), tuple(splits), "nope")
