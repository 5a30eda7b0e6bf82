"""Declarative run configuration: a single JSON file with sections for data,
model, pretraining, fine-tuning, and output paths.

Every key is validated before any work starts; unknown keys are errors that
name the first offending dotted path. Omitted keys fall back to documented
defaults, after which the typed config objects run their own invariant
checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .adapt import AugmentConfig, FinetuneConfig
from .backbone import ModelConfig
from .pretrain import TrainConfig
from .tokenizer import PatchConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    out_dir: str = "data"
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    frames: int = 32
    height: int = 64
    width: int = 64
    periods: tuple[int, ...] = (8, 16)
    amplitude: float = 0.3
    noise_level: float = 0.05
    seed: int = 0
    write_masks: bool = False


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    model: ModelConfig
    pretrain: TrainConfig
    finetune_task: str
    finetune: FinetuneConfig
    run_dir: str


_DATA_KEYS = {
    "out_dir": str,
    "n_train": int,
    "n_val": int,
    "n_test": int,
    "frames": int,
    "height": int,
    "width": int,
    "periods": list,
    "amplitude": (int, float),
    "noise_level": (int, float),
    "seed": int,
    "write_masks": bool,
}

_MODEL_KEYS = {
    "embed_dim": int,
    "enc_depth": int,
    "enc_heads": int,
    "dec_width": int,
    "dec_depth": int,
    "dec_heads": int,
    "proj_depth": int,
    "proj_heads": int,
    "patch_h": int,
    "patch_w": int,
    "patch_t": int,
    "frames": int,
    "height": int,
    "width": int,
    "mlp_ratio": (int, float),
}

_PRETRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": (int, float),
    "weight_decay": (int, float),
    "warmup_steps": int,
    "seed": int,
    "enable_contrastive": bool,
    "alpha": (int, float),
    "mask_ratio": (int, float),
    "mask_mode": str,
    "adjacency_window": int,
    "checkpoint_every": int,
    "contrastive_start_step": int,
    "detach_encoder_for_contrastive": bool,
}

_FINETUNE_KEYS = {
    "task": str,
    "epochs": int,
    "batch_size": int,
    "learning_rate": (int, float),
    "weight_decay": (int, float),
    "label_fraction": (int, float),
    "freeze_encoder": bool,
    "n_classes": int,
    "seed": int,
    "use_augment": bool,
    "augment": dict,
}

_AUGMENT_KEYS = {
    "rotate_deg": (int, float),
    "translate_frac": (int, float),
    "scale_min": (int, float),
    "scale_max": (int, float),
    "erase_patch": int,
    "hflip": bool,
    "vflip": bool,
    "mode": str,
}

_OUTPUT_KEYS = {"run_dir": str}

_SECTIONS = {
    "data": _DATA_KEYS,
    "model": _MODEL_KEYS,
    "pretrain": _PRETRAIN_KEYS,
    "finetune": _FINETUNE_KEYS,
    "output": _OUTPUT_KEYS,
}


def _check_section(name: str, payload: dict, keys: dict) -> None:
    if not isinstance(payload, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    for key, value in payload.items():
        if key not in keys:
            raise ConfigError(f"unknown config key: {name}.{key}")
        expected = keys[key]
        if not isinstance(value, expected) or (
            expected is int and isinstance(value, bool)
        ):
            raise ConfigError(
                f"config key {name}.{key} has wrong type "
                f"{type(value).__name__}"
            )


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    for section in raw:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config key: {section}")
    for section, keys in _SECTIONS.items():
        _check_section(section, raw.get(section, {}), keys)
    ft_raw = dict(raw.get("finetune", {}))
    aug_raw = ft_raw.pop("augment", None)
    if aug_raw is not None:
        _check_section("finetune.augment", aug_raw, _AUGMENT_KEYS)

    data_raw = dict(raw.get("data", {}))
    if "periods" in data_raw:
        periods = data_raw["periods"]
        if not all(isinstance(p, int) and not isinstance(p, bool) for p in periods):
            raise ConfigError("config key data.periods must be a list of integers")
        data_raw["periods"] = tuple(periods)
    try:
        data = DataConfig(**data_raw)

        model_raw = dict(raw.get("model", {}))
        patch = PatchConfig(
            h=model_raw.pop("patch_h", 16),
            w=model_raw.pop("patch_w", 16),
            t=model_raw.pop("patch_t", 4),
            D=model_raw.get("embed_dim", 64),
        )
        model_defaults = {"frames": data.frames, "height": data.height, "width": data.width}
        model_defaults.update(model_raw)
        model = ModelConfig(patch=patch, **model_defaults)

        pretrain = TrainConfig(**raw.get("pretrain", {}))

        task = ft_raw.pop("task", "classification")
        augment = AugmentConfig(**aug_raw) if aug_raw is not None else None
        finetune = FinetuneConfig(augment=augment, **ft_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if task not in ("classification", "segmentation"):
        raise ConfigError(f"finetune.task must be classification or segmentation, got {task!r}")

    run_dir = raw.get("output", {}).get("run_dir", "runs/default")
    return RunConfig(
        data=data,
        model=model,
        pretrain=pretrain,
        finetune_task=task,
        finetune=finetune,
        run_dir=run_dir,
    )
