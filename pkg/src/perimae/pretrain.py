"""Self-supervised pretraining loop: batching, optimization schedule, seeding,
checkpointing, and the contrastive-loss ablation switch.

Reproducibility discipline: the trajectory is a pure function of (seed,
config, manifest order) on one device. Per-epoch batch order and per-step
mask/mining randomness are derived from the base seed with counter-based seed
sequences rather than stateful generators, so resuming from a checkpoint at
step s replays exactly the steps an uninterrupted run would have taken.
Batch losses are reduced in manifest order, giving a fixed reduction order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import (
    ModelConfig,
    VideoModel,
    init_params,
    model_config_from_dict,
    model_config_to_dict,
)
from .objective import training_step
from .videodata import load_clip, load_manifest, resolve_clip_path

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining settings. ``contrastive_start_step`` > 0 runs an initial
    reconstruction-only warm phase before the periodic contrastive term kicks
    in; ``enable_contrastive=False`` disables it entirely."""

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1.5e-4
    weight_decay: float = 0.05
    warmup_steps: int = 100
    seed: int = 0
    enable_contrastive: bool = True
    alpha: float = 0.5
    mask_ratio: float = 0.75
    mask_mode: str = "uniform_frame"
    adjacency_window: int = 1
    checkpoint_every: int = 500
    contrastive_start_step: int = 0
    detach_encoder_for_contrastive: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.adjacency_window < 1:
            raise ValueError(f"adjacency_window must be >= 1, got {self.adjacency_window}")
        if self.mask_mode not in ("uniform_frame", "random"):
            raise ValueError(f"mask_mode must be uniform_frame or random, got {self.mask_mode!r}")
        if self.mask_mode == "random" and self.enable_contrastive:
            raise ValueError("contrastive training requires mask_mode=uniform_frame")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


# -- seeding helpers --------------------------------------------------------


def _derived_seed(*entropy: int) -> int:
    state = np.random.SeedSequence([abs(int(e)) for e in entropy]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def step_seed(base_seed: int, step: int, slot: int) -> int:
    """Seed for the mask/mining randomness of one clip slot within one step."""
    return _derived_seed(base_seed, 0xA5, step, slot)


def epoch_order(base_seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([abs(int(base_seed)), 0xE0, int(epoch)])
    return rng.permutation(n)


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    model: VideoModel,
    path: str | Path,
    *,
    step: int,
    optimizer: torch.optim.Optimizer | None = None,
    train_config: TrainConfig | None = None,
) -> Path:
    """Write all named parameter arrays plus configs and the step counter."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": model_config_to_dict(model.cfg),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_config": asdict(train_config) if train_config is not None else None,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: str | Path, expected_cfg: ModelConfig | None = None
) -> tuple[VideoModel, int, dict]:
    """Rebuild the model from a checkpoint; fails loudly on any mismatch.

    Returns (model, step, payload); the raw payload gives access to the
    optimizer state and training config for resuming.
    """
    payload = torch.load(Path(path), weights_only=True)
    cfg = model_config_from_dict(payload["model_config"])
    if expected_cfg is not None and cfg != expected_cfg:
        for key, value in model_config_to_dict(expected_cfg).items():
            if model_config_to_dict(cfg)[key] != value:
                raise ValueError(
                    f"checkpoint model_config mismatch at {key!r}: "
                    f"{model_config_to_dict(cfg)[key]} != {value}"
                )
        raise ValueError("checkpoint model_config mismatch")
    model = VideoModel(cfg)
    expected_state = model.state_dict()
    params = payload["params"]
    for name in sorted(expected_state):
        if name not in params:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if tuple(params[name].shape) != tuple(expected_state[name].shape):
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {tuple(params[name].shape)}, "
                f"expected {tuple(expected_state[name].shape)}"
            )
    for name in sorted(params):
        if name not in expected_state:
            raise ValueError(f"checkpoint has unexpected parameter {name!r}")
    model.load_state_dict(params)
    return model, int(payload["step"]), payload


# -- training loop ------------------------------------------------------------


def _load_training_clips(
    manifest_path: str | Path, model_cfg: ModelConfig, split: str = "train"
) -> list[torch.Tensor]:
    """Load and validate the training clips; any violation is a named rejection."""
    entries = [e for e in load_manifest(manifest_path) if e.split == split]
    if not entries:
        raise ValueError(f"manifest has no clips in split {split!r}")
    clips: list[torch.Tensor] = []
    for entry in entries:
        clip = load_clip(resolve_clip_path(manifest_path, entry.path).with_suffix(""))
        name = entry.path
        if (clip.T, clip.H, clip.W) != (model_cfg.frames, model_cfg.height, model_cfg.width):
            raise ValueError(
                f"clip {name}: dims {(clip.T, clip.H, clip.W)} do not match model "
                f"{(model_cfg.frames, model_cfg.height, model_cfg.width)}"
            )
        if clip.period_hint is None:
            raise ValueError(f"clip {name}: missing period annotation (complete cycle required)")
        if clip.period_hint > clip.T:
            raise ValueError(f"clip {name}: period {clip.period_hint} exceeds length {clip.T}")
        clips.append(torch.from_numpy(np.ascontiguousarray(clip.frames, dtype=np.float32)))
    return clips


def run_pretraining(
    cfg: TrainConfig,
    manifest_path: str | Path,
    model_cfg: ModelConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
) -> tuple[Path, Path]:
    """Train on the manifest's train split; returns (final checkpoint, log path).

    Writes periodic checkpoints (every ``checkpoint_every`` optimizer steps),
    a final checkpoint, and an append-only log with one JSON record per step:
    step, L_r, L_c, L_total, triplet_count, skipped_anchors.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = _load_training_clips(manifest_path, model_cfg)
    n = len(clips)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    if resume_from is not None:
        model, start_step, payload = load_checkpoint(resume_from, expected_cfg=model_cfg)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        if payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
        log_mode = "a"
    else:
        model = init_params(model_cfg, cfg.seed)
        optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        start_step = 0
        log_mode = "w"

    log_path = out / "train_log.jsonl"
    model.train()
    with open(log_path, log_mode) as log:
        for step in range(start_step, total_steps):
            epoch, batch_idx = divmod(step, steps_per_epoch)
            order = epoch_order(cfg.seed, epoch, n)
            batch = order[batch_idx * cfg.batch_size : (batch_idx + 1) * cfg.batch_size]
            lr = lr_at(cfg, step, total_steps)
            for group in optimizer.param_groups:
                group["lr"] = lr

            contrastive_now = cfg.enable_contrastive and step >= cfg.contrastive_start_step
            optimizer.zero_grad()
            losses = []
            reports = []
            for slot, clip_idx in enumerate(batch):
                report, loss = training_step(
                    model,
                    clips[int(clip_idx)],
                    mask_ratio=cfg.mask_ratio,
                    mask_mode=cfg.mask_mode,
                    alpha=cfg.alpha,
                    adjacency_window=cfg.adjacency_window,
                    enable_contrastive=contrastive_now,
                    detach_encoder_for_contrastive=cfg.detach_encoder_for_contrastive,
                    seed=step_seed(cfg.seed, step, slot),
                )
                losses.append(loss)
                reports.append(report)
            torch.stack(losses).mean().backward()
            optimizer.step()

            record = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "L_r": float(np.mean([r.L_r for r in reports])),
                "L_c": float(np.mean([r.L_c for r in reports])),
                "L_total": float(np.mean([r.L_total for r in reports])),
                "triplet_count": int(sum(r.triplet_count for r in reports)),
                "skipped_anchors": int(sum(r.skipped_anchors for r in reports)),
            }
            log.write(json.dumps(record) + "\n")

            if (step + 1) % cfg.checkpoint_every == 0 and (step + 1) < total_steps:
                save_checkpoint(
                    model,
                    out / f"checkpoint_step{step + 1:07d}.pt",
                    step=step + 1,
                    optimizer=optimizer,
                    train_config=cfg,
                )

    final_path = save_checkpoint(
        model,
        out / "checkpoint_final.pt",
        step=total_steps,
        optimizer=optimizer,
        train_config=cfg,
    )
    return final_path, log_path


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
