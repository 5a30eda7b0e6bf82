import json

import numpy as np
import pytest

from perimae.cli import main, read_similarity_csv, write_similarity_csv
from perimae.config import ConfigError, load_run_config
from perimae.objective import SimilarityMatrix
from perimae.pretrain import read_log
from perimae.videodata import load_manifest


def write_config(path, **overrides):
    cfg = {
        "data": {
            "out_dir": str(path.parent / "data"),
            "n_train": 6,
            "n_val": 0,
            "n_test": 4,
            "frames": 16,
            "height": 32,
            "width": 32,
            "periods": [4, 8],
            "amplitude": 0.3,
            "noise_level": 0.02,
            "seed": 0,
            "write_masks": True,
        },
        "model": {
            "embed_dim": 16,
            "enc_depth": 1,
            "enc_heads": 2,
            "dec_width": 8,
            "dec_depth": 1,
            "dec_heads": 2,
            "proj_depth": 1,
            "proj_heads": 2,
            "patch_h": 8,
            "patch_w": 8,
            "patch_t": 4,
        },
        "pretrain": {
            "epochs": 2,
            "batch_size": 4,
            "learning_rate": 1e-3,
            "warmup_steps": 2,
            "seed": 0,
            "enable_contrastive": True,
            "checkpoint_every": 1000,
        },
        "finetune": {
            "task": "classification",
            "epochs": 10,
            "learning_rate": 0.05,
            "n_classes": 2,
            "seed": 0,
        },
        "output": {"run_dir": str(path.parent / "run")},
    }
    for section, payload in overrides.items():
        cfg.setdefault(section, {}).update(payload)
    path.write_text(json.dumps(cfg))
    return cfg


def test_gen_data_is_idempotent(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path)
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    first = {
        p.name: p.read_bytes() for p in sorted((tmp_path / "data").iterdir())
    }
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    second = {
        p.name: p.read_bytes() for p in sorted((tmp_path / "data").iterdir())
    }
    assert first == second
    entries = load_manifest(tmp_path / "data" / "manifest.json")
    assert len(entries) == 10


def test_full_cli_pipeline(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path)
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    run_dir = tmp_path / "run"
    assert (run_dir / "pretrain" / "checkpoint_final.pt").exists()
    log = read_log(run_dir / "pretrain" / "train_log.jsonl")
    assert len(log) == 4  # 6 clips / batch 4 -> 2 steps/epoch, 2 epochs

    assert main(["finetune", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "task checkpoint" in out
    report_path = run_dir / "finetune" / "metrics.json"
    report = json.loads(report_path.read_text())

    assert main(["evaluate", "--config", str(cfg_path)]) == 0
    eval_out = capsys.readouterr().out
    recomputed = json.loads(eval_out)
    assert recomputed == report

    clip_path = tmp_path / "data" / "clip_test_0000.npy"
    sim_path = tmp_path / "sim.csv"
    assert main([
        "inspect-sim",
        "--config", str(cfg_path),
        "--checkpoint", str(run_dir / "pretrain" / "checkpoint_final.pt"),
        "--clip", str(clip_path),
        "--out", str(sim_path),
    ]) == 0
    s = read_similarity_csv(sim_path)
    assert s.shape == (4, 4)
    assert np.array_equal(s, s.T)
    assert np.array_equal(np.diag(s), np.zeros(4))
    header = sim_path.read_text().splitlines()[0]
    assert header == "# n_t=4"


def test_pretrain_contrastive_off_logs_zero(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, pretrain={"enable_contrastive": False})
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert main(["pretrain", "--config", str(cfg_path)]) == 0
    log = read_log(tmp_path / "run" / "pretrain" / "train_log.jsonl")
    assert all(r["L_c"] == 0.0 for r in log)


def test_unknown_config_key_is_named(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg = write_config(cfg_path)
    cfg["pretrain"]["learning_rat"] = 1e-3
    del cfg["pretrain"]["learning_rate"]
    cfg_path.write_text(json.dumps(cfg))
    assert main(["gen-data", "--config", str(cfg_path)]) == 2
    err = capsys.readouterr().err
    assert "pretrain.learning_rat" in err


def test_unknown_section_and_bad_type(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg = write_config(cfg_path)
    cfg["pretraining"] = {}
    cfg_path.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="pretraining"):
        load_run_config(cfg_path)

    cfg = write_config(cfg_path)
    cfg["model"]["embed_dim"] = "big"
    cfg_path.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="model.embed_dim"):
        load_run_config(cfg_path)


def test_invalid_values_fail_with_nonzero_exit(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, pretrain={"mask_ratio": 1.5})
    assert main(["gen-data", "--config", str(cfg_path)]) == 2
    assert "mask_ratio" in capsys.readouterr().err


def test_unknown_subcommand_exits_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x.json"])
    assert exc.value.code != 0


def test_similarity_csv_round_trip(tmp_path):
    s = np.array([[0.0, 1.25], [1.25, 0.0]])
    write_similarity_csv(SimilarityMatrix(S=s), tmp_path / "s.csv")
    back = read_similarity_csv(tmp_path / "s.csv")
    assert np.array_equal(back, s)


def test_seed_override_changes_data(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path)
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    base = (tmp_path / "data" / "clip_train_0000.npy").read_bytes()
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "99"]) == 0
    changed = (tmp_path / "data" / "clip_train_0000.npy").read_bytes()
    assert base != changed
