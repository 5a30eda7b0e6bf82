import dataclasses

import numpy as np
import pytest
import torch

from perimae.backbone import ModelConfig, init_params
from perimae.pretrain import (
    TrainConfig,
    load_checkpoint,
    lr_at,
    read_log,
    run_pretraining,
    save_checkpoint,
    step_seed,
)
from perimae.tokenizer import PatchConfig
from perimae.videodata import (
    ManifestEntry,
    SyntheticSpec,
    generate_dataset,
    generate_periodic_clip,
    save_clip,
    save_manifest,
)

TINY = ModelConfig(
    embed_dim=16,
    enc_depth=1,
    enc_heads=2,
    dec_width=8,
    dec_depth=1,
    dec_heads=2,
    proj_depth=1,
    proj_heads=2,
    patch=PatchConfig(h=8, w=8, t=4, D=16),
    frames=16,
    height=32,
    width=32,
)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("pretrain_data")
    return generate_dataset(
        root,
        {"train": 8, "val": 0, "test": 2},
        frames=16,
        height=32,
        width=32,
        periods=[8],
        amplitude=0.3,
        noise_level=0.02,
        seed=0,
    )


def tiny_train_cfg(**overrides):
    base = dict(
        epochs=2,
        batch_size=4,
        learning_rate=1e-3,
        weight_decay=0.01,
        warmup_steps=2,
        seed=0,
        enable_contrastive=True,
        alpha=0.5,
        mask_ratio=0.75,
        adjacency_window=1,
        checkpoint_every=1000,
    )
    base.update(overrides)
    return TrainConfig(**base)


def params_of(path):
    model, step, _ = load_checkpoint(path)
    return {k: v.clone() for k, v in model.state_dict().items()}, step


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = init_params(TINY, seed=5)
    path = save_checkpoint(model, tmp_path / "m.pt", step=17)
    loaded, step, payload = load_checkpoint(path)
    assert step == 17
    for name, val in model.state_dict().items():
        assert torch.equal(val, loaded.state_dict()[name]), name
    assert payload["model_config"]["embed_dim"] == 16


def test_checkpoint_rejects_config_mismatch(tmp_path):
    model = init_params(TINY, seed=6)
    path = save_checkpoint(model, tmp_path / "m.pt", step=0)
    other = dataclasses.replace(TINY, embed_dim=32, patch=PatchConfig(8, 8, 4, 32))
    with pytest.raises(ValueError, match="embed_dim"):
        load_checkpoint(path, expected_cfg=other)


def test_checkpoint_rejects_missing_and_misshapen_params(tmp_path):
    model = init_params(TINY, seed=7)
    path = save_checkpoint(model, tmp_path / "m.pt", step=0)
    payload = torch.load(path, weights_only=True)
    del payload["params"]["enc_cls"]
    torch.save(payload, tmp_path / "missing.pt")
    with pytest.raises(ValueError, match="enc_cls"):
        load_checkpoint(tmp_path / "missing.pt")

    payload = torch.load(path, weights_only=True)
    payload["params"]["miss_token"] = torch.zeros(3)
    torch.save(payload, tmp_path / "shape.pt")
    with pytest.raises(ValueError, match="miss_token"):
        load_checkpoint(tmp_path / "shape.pt")

    payload = torch.load(path, weights_only=True)
    payload["params"]["extra_thing"] = torch.zeros(3)
    torch.save(payload, tmp_path / "extra.pt")
    with pytest.raises(ValueError, match="extra_thing"):
        load_checkpoint(tmp_path / "extra.pt")


def test_runs_are_bitwise_reproducible(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg()
    ckpt1, log1 = run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "a")
    ckpt2, log2 = run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "b")
    p1, s1 = params_of(ckpt1)
    p2, s2 = params_of(ckpt2)
    assert s1 == s2
    for name in p1:
        assert torch.equal(p1[name], p2[name]), name
    assert read_log(log1) == read_log(log2)


def test_resume_equivalence(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(epochs=4, checkpoint_every=4)  # 8 steps total, ckpt at 4
    ckpt_full, _ = run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "full")
    mid = tmp_path / "interrupted" / "checkpoint_step0000004.pt"
    run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "interrupted")
    assert mid.exists()
    ckpt_resumed, _ = run_pretraining(
        cfg, tiny_manifest, TINY, tmp_path / "resumed", resume_from=mid
    )
    full, _ = params_of(ckpt_full)
    resumed, _ = params_of(ckpt_resumed)
    for name in full:
        assert torch.equal(full[name], resumed[name]), name


def test_contrastive_disabled_logs_zero(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(enable_contrastive=False)
    _, log = run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "nolc")
    records = read_log(log)
    assert records
    assert all(r["L_c"] == 0.0 for r in records)
    assert all(r["triplet_count"] == 0 for r in records)


def test_warm_phase_delays_contrastive(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(epochs=3, contrastive_start_step=3)
    _, log = run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "warm")
    records = read_log(log)
    assert all(r["L_c"] == 0.0 for r in records if r["step"] < 3)
    assert any(r["L_c"] > 0.0 for r in records if r["step"] >= 3)


def test_log_records_have_required_fields(tiny_manifest, tmp_path):
    cfg = tiny_train_cfg(epochs=1)
    _, log = run_pretraining(cfg, tiny_manifest, TINY, tmp_path / "log")
    for record in read_log(log):
        for key in ("step", "L_r", "L_c", "L_total", "triplet_count", "skipped_anchors"):
            assert key in record


def test_training_reduces_reconstruction_loss(tmp_path):
    # 50 noiseless clips, tiny model, 200 steps
    manifest = generate_dataset(
        tmp_path / "data",
        {"train": 50},
        frames=16,
        height=32,
        width=32,
        periods=[8],
        amplitude=0.3,
        noise_level=0.0,
        seed=1,
    )
    cfg = tiny_train_cfg(epochs=29, batch_size=8, learning_rate=2e-3, warmup_steps=10,
                        enable_contrastive=False)
    # 50 clips / batch 8 -> 7 steps per epoch; 29 epochs -> 203 steps
    _, log = run_pretraining(cfg, manifest, TINY, tmp_path / "trend")
    records = read_log(log)
    assert len(records) == 203
    first = np.mean([r["L_r"] for r in records[:3]])
    last = np.mean([r["L_r"] for r in records[-3:]])
    assert last < first


def test_clip_validation_named_rejection(tmp_path):
    spec = SyntheticSpec(T=8, H=32, W=32, period=4, amplitude=0.3, noise_level=0.0)
    clip = generate_periodic_clip(spec, seed=0)
    save_clip(clip, tmp_path / "short_clip")
    save_manifest([ManifestEntry(path="short_clip.npy", split="train")], tmp_path / "m.json")
    cfg = tiny_train_cfg(epochs=1)
    with pytest.raises(ValueError, match="short_clip"):
        run_pretraining(cfg, tmp_path / "m.json", TINY, tmp_path / "out")

    clip_nohint = generate_periodic_clip(
        SyntheticSpec(T=16, H=32, W=32, period=8, amplitude=0.3, noise_level=0.0), seed=0
    )
    clip_nohint.period_hint = None
    save_clip(clip_nohint, tmp_path / "nohint")
    save_manifest([ManifestEntry(path="nohint.npy", split="train")], tmp_path / "m2.json")
    with pytest.raises(ValueError, match="period"):
        run_pretraining(cfg, tmp_path / "m2.json", TINY, tmp_path / "out2")


def test_lr_schedule_shape():
    cfg = tiny_train_cfg(learning_rate=1.0, warmup_steps=10)
    assert lr_at(cfg, 0, 100) == pytest.approx(0.1)
    assert lr_at(cfg, 9, 100) == pytest.approx(1.0)
    assert lr_at(cfg, 10, 100) == pytest.approx(1.0)
    assert lr_at(cfg, 99, 100) < 0.01
    assert lr_at(cfg, 55, 100) == pytest.approx(0.5, abs=1e-2)


def test_step_seed_is_stable_and_distinct():
    assert step_seed(0, 5, 2) == step_seed(0, 5, 2)
    assert step_seed(0, 5, 2) != step_seed(0, 5, 3)
    assert step_seed(0, 5, 2) != step_seed(0, 6, 2)
    assert step_seed(1, 5, 2) != step_seed(0, 5, 2)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mask_ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig(mask_mode="random", enable_contrastive=True)
    TrainConfig(mask_mode="random", enable_contrastive=False)
