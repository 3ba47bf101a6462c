import hashlib
import json
import math

import numpy as np
import pytest
import torch

from retfuse import checkpoint, cli, data_io, losses, training
from retfuse.checkpoint import CheckpointVersionError
from retfuse.config import TrainConfig, load_config, save_config
from retfuse.data_io import RegisteredPair


def tiny(**kw):
    base = dict(toy_mode=True, seed=0, deterministic=True, stage1_epochs=2, stage2_epochs=2,
                max_steps=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return data_io.synthetic_dataset(2, seed=0)


@pytest.fixture(scope="module")
def trained(data):
    cfg = tiny()
    s1 = training.train_stage1(data, cfg)
    s2 = training.train_stage2(data, cfg, s1.checkpoint)
    return cfg, s1, s2


# ---------------------------------------------------------------- configuration

def test_default_schedule():
    cfg = TrainConfig()
    assert (cfg.stage1_epochs, cfg.stage2_epochs, cfg.lr) == (40, 80, 1e-4)
    assert cfg.input_size == (288, 360) and cfg.batch_size == 1
    assert cfg.betas == (0.9, 0.999)


def test_toy_preset():
    cfg = TrainConfig(toy_mode=True)
    assert cfg.input_size == (64, 80)
    assert cfg.encoder.embed_dim == 16 and cfg.encoder.restormer_blocks == 1
    assert cfg.encoder.attention_heads == 2 and cfg.tae.giu_heads == 4
    assert cfg.tae.in_dim == cfg.decoder.embed_dim == 16


def test_lr_halves_at_epoch_twenty():
    cfg = TrainConfig()
    assert cfg.lr_at_epoch(19) == cfg.lr
    assert cfg.lr_at_epoch(20) == 0.5 * cfg.lr
    model = torch.nn.Linear(2, 2)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, cfg.lr_step_epochs, cfg.lr_decay)
    for _ in range(20):
        opt.step()
        sched.step()
    assert opt.param_groups[0]["lr"] == pytest.approx(0.5 * cfg.lr)


def test_yaml_round_trip(tmp_path):
    cfg = tiny(variant="III")
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert back.fingerprint() == cfg.fingerprint()


def test_fingerprint_tracks_architecture_only():
    a = TrainConfig(toy_mode=True)
    assert a.fingerprint() == TrainConfig(toy_mode=True, seed=9, lr=0.1).fingerprint()
    assert a.fingerprint() != a.with_variant("II").fingerprint()
    assert a.fingerprint() != TrainConfig().fingerprint()


@pytest.mark.parametrize("bad", [dict(stage1_epochs=0), dict(lr=-1.0), dict(batch_size=2),
                                 dict(variant="VI"), dict(recon_reduction="max")])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_unknown_field_rejected():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})


@pytest.mark.parametrize("variant,check", [
    ("I", lambda c: not c.uses_graph_loss and c.uses_graph),
    ("II", lambda c: not c.tae.use_g2s),
    ("III", lambda c: not c.decoder.use_base_detail),
    ("IV", lambda c: not c.uses_graph and not c.decoder.use_graph),
    ("V", lambda c: c.tae.attention == "uniform"),
])
def test_variants_switch_one_thing(variant, check):
    cfg = TrainConfig(toy_mode=True).with_variant(variant)
    assert check(cfg)
    assert cfg.with_variant(None).fingerprint() == TrainConfig(toy_mode=True).fingerprint()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_bytes_round_trip(trained, tmp_path):
    _, _, s2 = trained
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save_checkpoint(s2.checkpoint, p1)
    loaded = checkpoint.load_checkpoint(p1)
    checkpoint.save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for k, v in s2.checkpoint.model.items():
        assert torch.equal(v, loaded.model[k])
    assert loaded.epoch == s2.checkpoint.epoch and loaded.stage == 2
    assert loaded.optimizer["state"]


def test_checkpoint_rejects_other_architecture(trained, tmp_path):
    _, s1, _ = trained
    p = tmp_path / "s1.ckpt"
    checkpoint.save_checkpoint(s1.checkpoint, p)
    with pytest.raises(CheckpointVersionError):
        checkpoint.load_checkpoint(p, expect=TrainConfig())


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointVersionError):
        checkpoint.load_checkpoint(p)


def test_checkpoint_format_version(trained, tmp_path):
    _, s1, _ = trained
    raw = checkpoint.checkpoint_bytes(s1.checkpoint)
    bumped = raw.replace(b'"format_version": 1', b'"format_version": 9', 1)
    assert bumped != raw
    p = tmp_path / "v.ckpt"
    p.write_bytes(bumped)
    with pytest.raises(CheckpointVersionError):
        checkpoint.load_checkpoint(p)


# ---------------------------------------------------------------- training

def test_training_is_reproducible(data, trained):
    cfg, s1, s2 = trained
    again1 = training.train_stage1(data, cfg)
    again2 = training.train_stage2(data, cfg, again1.checkpoint)
    assert again1.log == s1.log and again2.log == s2.log
    assert checkpoint.checkpoint_bytes(again2.checkpoint) == checkpoint.checkpoint_bytes(s2.checkpoint)


def test_logs_have_steps_and_epochs(trained, data, tmp_path):
    cfg, s1, _ = trained
    assert [r["kind"] for r in s1.log].count("step") == 3
    assert any(r["kind"] == "epoch" for r in s1.log)
    path = tmp_path / "log.jsonl"
    training.train_stage1(data, cfg, log_path=path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert recs and all("variant" in r for r in recs)


def test_stage_two_needs_stage_one(data, trained):
    cfg, _, s2 = trained
    with pytest.raises(ValueError):
        training.train_stage2(data, cfg, s2.checkpoint)
    with pytest.raises(CheckpointVersionError):
        training.train_stage2(data, cfg.with_variant("III"), trained[1].checkpoint)


def test_variant_four_trains_and_logs(data):
    cfg = tiny(variant="IV", max_steps=2)
    s1 = training.train_stage1(data, cfg)
    s2 = training.train_stage2(data, cfg, s1.checkpoint)
    assert {r["variant"] for r in s2.log} == {"IV"}
    assert all(r["graph"] is None for r in s2.log if r["kind"] == "step")


def test_empty_masks_still_fuse(trained):
    _, _, s2 = trained
    pair = data_io.generate_synthetic_pair(data_io.SyntheticSceneSpec(seed=7))
    empty = np.zeros(pair.shape, dtype=bool)
    pair = RegisteredPair("e", pair.image1, pair.image2, mask1=empty, mask2=empty)
    out = training.fuse(pair, s2.checkpoint)
    assert out.fused.shape == pair.shape
    assert 0 <= out.fused.min() and out.fused.max() <= 1


def test_empty_graph_pair_trains(data):
    pair = data[0]
    empty = np.zeros(pair.shape, dtype=bool)
    blank = RegisteredPair("b", pair.image1, pair.image2, mask1=empty, mask2=empty)
    res = training.train_stage1([blank], tiny(max_steps=2))
    assert all(r["graph"] is None for r in res.log if r["kind"] == "step")


def test_fuse_is_repeatable_and_leaves_weights(trained):
    _, _, s2 = trained
    pair = data_io.generate_synthetic_pair(data_io.SyntheticSceneSpec(seed=8))
    model = training.model_from_checkpoint(s2.checkpoint)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    a = training.fuse(pair, s2.checkpoint, model=model)
    b = training.fuse(pair, s2.checkpoint, model=model)
    assert np.array_equal(a.fused, b.fused)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


def test_fuse_resizes_to_pair(trained):
    _, _, s2 = trained
    pair = data_io.generate_synthetic_pair(data_io.SyntheticSceneSpec(size=(48, 50), seed=1))
    out = training.fuse(pair, s2.checkpoint)
    assert out.fused.shape == (48, 50)
    assert all(math.isfinite(v) for v in out.report.row())


def test_fuse_rejects_mismatched_fingerprint(trained):
    _, _, s2 = trained
    pair = data_io.generate_synthetic_pair(data_io.SyntheticSceneSpec(seed=1))
    with pytest.raises(CheckpointVersionError):
        training.fuse(pair, s2.checkpoint, expect=TrainConfig(toy_mode=True, variant="V"))


def test_non_finite_loss_aborts_with_checkpoint(data, monkeypatch):
    cfg = tiny(max_steps=4, stage1_epochs=3)
    real = losses.recon_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        out = real(*args, **kw)
        return out * float("nan") if calls["n"] > 6 else out

    monkeypatch.setattr(losses, "recon_loss", flaky)
    with pytest.raises(training.TrainingAborted) as info:
        training.train_stage1(data, cfg)
    ck = info.value.checkpoint
    assert ck is not None and ck.stage == 1
    assert all(torch.isfinite(v).all() for v in ck.model.values() if v.is_floating_point())


def test_graph_cache_persists(tmp_path, data):
    cache = training.GraphCache(tmp_path)
    g = cache.get(data[0].mask1)
    files = list(tmp_path.glob("*.graph.json"))
    assert len(files) == 1
    again = training.GraphCache(tmp_path).get(data[0].mask1)
    assert np.array_equal(g.nodes, again.nodes)
    changed = data[0].mask1.copy()
    changed[:5, :5] = True
    training.GraphCache(tmp_path).get(changed)
    assert len(list(tmp_path.glob("*.graph.json"))) == 2


def test_ablation_table_layout():
    from retfuse.metrics import MetricReport
    rows = [training.AblationRow(v, lbl, MetricReport(*[1.0] * 8))
            for v, lbl in [("I", "a"), (None, "full model")]]
    text = training.format_ablation(rows)
    lines = text.splitlines()
    assert lines[0].split() == ["Configuration", "SD", "MI", "VIF", "SSIM"]
    assert lines[-1].startswith("Ours")


# ---------------------------------------------------------------- command line

def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "data"
    recs = [data_io.save_pair(p, ds) for p in data_io.synthetic_dataset(2, seed=3)]
    data_io.write_manifest(ds / "manifest.jsonl", recs)
    before = _digest(ds)
    cfg_path = tmp_path / "toy.yaml"
    save_config(tiny(max_steps=2), cfg_path)
    manifest = str(ds / "manifest.jsonl")

    assert cli.main(["graph-extract", "--data", manifest, "--config", str(cfg_path),
                     "--out", str(tmp_path / "graphs")]) == 0
    assert list((tmp_path / "graphs").glob("*.graph.json"))

    s1, s2 = tmp_path / "s1.ckpt", tmp_path / "s2.ckpt"
    assert cli.main(["train", "--stage", "1", "--config", str(cfg_path), "--data", manifest,
                     "--out", str(s1), "--log", str(tmp_path / "log.jsonl")]) == 0
    assert cli.main(["train", "--stage", "2", "--config", str(cfg_path), "--data", manifest,
                     "--init", str(s1), "--out", str(s2)]) == 0

    rec = recs[0]
    fused = ds / f"{rec['id']}_fused.png"
    attn = tmp_path / "attn.json"
    assert cli.main(["fuse", "--ckpt", str(s2), "--pair", str(ds / rec["image1"]),
                     str(ds / rec["image2"]), "--out", str(fused),
                     "--dump-attention", str(attn)]) == 0
    dump = json.loads(attn.read_text())
    assert set(dump) == {"image1", "image2"} and dump["image1"]["layers"]
    assert "SSIM=" in capsys.readouterr().out

    assert cli.main(["evaluate", "--dir", str(ds), "--baseline", "average",
                     "--out", str(tmp_path / "avg.csv")]) == 0
    assert "mean" in (tmp_path / "avg.csv").read_text()
    assert cli.main(["evaluate", "--dir", str(ds)]) == 1  # second pair has no fused image yet

    after = _digest(ds)
    assert {k: v for k, v in after.items() if k in before} == before


def test_cli_ablate(tmp_path, capsys):
    cfg_path = tmp_path / "toy.yaml"
    save_config(tiny(max_steps=1, stage1_epochs=1, stage2_epochs=1), cfg_path)
    assert cli.main(["ablate", "--variants", "III", "--config", str(cfg_path),
                     "--data", "synthetic:1", "--eval-data", "synthetic:1:50",
                     "--out", str(tmp_path / "t.txt")]) == 0
    lines = (tmp_path / "t.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("III") and lines[2].startswith("Ours")


def test_cli_rejects_unknown_variant():
    with pytest.raises(SystemExit):
        cli.main(["ablate", "--variants", "VII"])
