"""Downstream adaptation and evaluation: augmentation recipe, classification
head (average pooling + single linear layer), lightweight token-to-patch
segmentation decoder, fine-tuning with optional label subsampling, and
self-similarity inspection of a trained encoder.

At inference nothing is masked: the encoder sees the full token grid, so
predictions are trivially independent of any masking choice.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .backbone import (
    LatentTokens,
    VideoModel,
    model_config_from_dict,
    model_config_to_dict,
)
from .masking import apply_mask, full_visible_plan, sample_uniform_frame_mask
from .metrics import classification_metrics, overlap_metrics, roc_auc, surface_metrics
from .objective import SimilarityMatrix, self_similarity
from .pretrain import epoch_order, load_checkpoint
from .tokenizer import PatchGrid, unpatchify
from .videodata import VideoClip, load_clip, load_manifest, resolve_clip_path

TASKS = ("classification", "segmentation")


@dataclass
class LabeledClip:
    """A clip with either an integer class label or a per-pixel label map."""

    clip: VideoClip
    label: int | None = None
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.label is None and self.mask is None:
            raise ValueError("labeled clip needs a class label or a mask")
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != self.clip.frames.shape[:3]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match clip "
                    f"{self.clip.frames.shape[:3]}"
                )
            if mask.min() < 0:
                raise ValueError("mask labels must be >= 0")
            self.mask = mask.astype(np.int64)


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation recipe; classification mode restricts itself to flips."""

    rotate_deg: float = 15.0
    translate_frac: float = 0.10
    scale_min: float = 0.9
    scale_max: float = 1.4
    erase_patch: int = 16
    hflip: bool = True
    vflip: bool = True
    mode: str = "segmentation"

    def __post_init__(self) -> None:
        if self.mode not in ("segmentation", "classification"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")
        if self.scale_min > self.scale_max:
            raise ValueError("scale_min must not exceed scale_max")
        if self.erase_patch < 0:
            raise ValueError("erase_patch must be >= 0")


def hflip_clip(frames: np.ndarray) -> np.ndarray:
    return frames[:, :, ::-1].copy()


def vflip_clip(frames: np.ndarray) -> np.ndarray:
    return frames[:, ::-1, :].copy()


def _affine_params(
    theta_deg: float, translate: tuple[float, float], scale: float, h: int, w: int
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-mapping matrix/offset for rotate-scale-about-center + translate.

    Convention matches scipy.ndimage.affine_transform: output[o] is sampled at
    input coordinate (matrix @ o + offset).
    """
    theta = math.radians(theta_deg)
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    forward = scale * rot
    inv = np.linalg.inv(forward)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array(translate)
    offset = center - inv @ (center + shift)
    return inv, offset


def _warp_clip(
    frames: np.ndarray,
    mask: np.ndarray | None,
    matrix: np.ndarray,
    offset: np.ndarray,
) -> tuple[np.ndarray, np.ndarray | None]:
    t = frames.shape[0]
    out = np.empty_like(frames)
    for i in range(t):
        for c in range(frames.shape[3]):
            out[i, :, :, c] = ndimage.affine_transform(
                frames[i, :, :, c], matrix, offset=offset, order=1, mode="constant", cval=0.0
            )
    out = np.clip(out, 0.0, 1.0)
    mask_out = None
    if mask is not None:
        mask_out = np.empty_like(mask)
        for i in range(t):
            mask_out[i] = ndimage.affine_transform(
                mask[i], matrix, offset=offset, order=0, mode="constant", cval=0
            )
    return out, mask_out


def augment(
    sample: LabeledClip, cfg: AugmentConfig, rng: np.random.Generator
) -> LabeledClip:
    """Apply the augmentation recipe; geometry hits image and mask identically.

    Masks are warped with nearest-neighbor lookup so every output foreground
    pixel maps back to an input foreground pixel under the inverse transform.
    Random erasing zeroes one erase_patch x erase_patch spatial block across
    all frames of the image only.
    """
    frames = sample.clip.frames
    mask = sample.mask
    h, w = frames.shape[1], frames.shape[2]

    if cfg.mode == "segmentation":
        theta = float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
        dy = float(rng.uniform(-cfg.translate_frac, cfg.translate_frac)) * h
        dx = float(rng.uniform(-cfg.translate_frac, cfg.translate_frac)) * w
        scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
        if (theta, dy, dx, scale) != (0.0, 0.0, 0.0, 1.0):
            matrix, offset = _affine_params(theta, (dy, dx), scale, h, w)
            frames, mask = _warp_clip(frames, mask, matrix, offset)
        else:
            frames = frames.copy()
            mask = None if mask is None else mask.copy()
    else:
        frames = frames.copy()
        mask = None if mask is None else mask.copy()

    if cfg.hflip and rng.integers(2) == 1:
        frames = hflip_clip(frames)
        if mask is not None:
            mask = mask[:, :, ::-1].copy()
    if cfg.vflip and rng.integers(2) == 1:
        frames = vflip_clip(frames)
        if mask is not None:
            mask = mask[:, ::-1, :].copy()

    if cfg.mode == "segmentation" and cfg.erase_patch > 0:
        patch = min(cfg.erase_patch, h, w)
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        frames[:, y0 : y0 + patch, x0 : x0 + patch, :] = 0.0

    clip = VideoClip(frames, sample.clip.period_hint, sample.clip.source_id)
    return LabeledClip(clip=clip, label=sample.label, mask=mask)


# -- inference-time encoding --------------------------------------------------


def encode_full(model: VideoModel, frames: torch.Tensor) -> LatentTokens:
    """Encode the complete token grid (mask ratio 0)."""
    token_grid = model.embed(frames)
    plan = full_visible_plan(model.cfg.n_t, model.cfg.n_s)
    return model.encode(apply_mask(token_grid, plan))


def clip_feature(model: VideoModel, frames: torch.Tensor) -> torch.Tensor:
    """Average-pooled encoder output (class latent included), shape (D,)."""
    latents = encode_full(model, frames)
    return torch.cat([latents.cls_latent[None, :], latents.latents], dim=0).mean(dim=0)


def classify(frames: torch.Tensor, model: VideoModel, head: nn.Linear) -> torch.Tensor:
    """Class scores for one clip: pooled feature through a single linear layer."""
    if head.in_features != model.cfg.embed_dim:
        raise ValueError(
            f"head expects {head.in_features} features, model emits {model.cfg.embed_dim}"
        )
    return head(clip_feature(model, frames))


def decode_segmentation(
    frames: torch.Tensor, model: VideoModel, seg_head: nn.Linear, n_classes: int
) -> torch.Tensor:
    """Per-pixel class scores of shape (T, H, W, n_classes + 1).

    The head maps each token latent to per-pixel logits for its patch; the
    patch grid is then reassembled into the score volume.
    """
    cfg = model.cfg
    out_dim = (n_classes + 1) * cfg.patch.t * cfg.patch.h * cfg.patch.w
    if seg_head.out_features != out_dim:
        raise ValueError(
            f"segmentation head emits {seg_head.out_features} values per token, "
            f"expected {out_dim}"
        )
    latents = encode_full(model, frames)
    dense = latents.latents.reshape(cfg.n_t, cfg.n_s, cfg.embed_dim)
    logits = seg_head(dense)
    grid = PatchGrid(
        patches=logits,
        n_t=cfg.n_t,
        n_h=cfg.height // cfg.patch.h,
        n_w=cfg.width // cfg.patch.w,
        channels=n_classes + 1,
    )
    return unpatchify(grid, cfg.patch, cfg.height, cfg.width, cfg.frames)


def predict_mask(scores: torch.Tensor) -> np.ndarray:
    """Argmax labels; ties resolve to the lowest class index (class 0 first)."""
    return scores.detach().numpy().argmax(axis=-1)


def similarity_for_clip(
    model: VideoModel,
    frames: torch.Tensor,
    mask_ratio: float = 0.0,
    seed: int = 0,
) -> SimilarityMatrix:
    """Temporal self-similarity of a clip under the given encoder.

    By default the encoder runs unmasked so the matrix reflects the learned
    representation rather than mask noise; a positive mask_ratio samples one
    seeded uniform-frame mask instead.
    """
    token_grid = model.embed(frames)
    if mask_ratio > 0.0:
        rng = np.random.default_rng([abs(int(seed)), 0x51])
        plan = sample_uniform_frame_mask(model.cfg.n_t, model.cfg.n_s, mask_ratio, rng)
    else:
        plan = full_visible_plan(model.cfg.n_t, model.cfg.n_s)
    with torch.no_grad():
        latents = model.encode(apply_mask(token_grid, plan))
        z = model.project_frames(latents)
    return self_similarity(z)


# -- fine-tuning ---------------------------------------------------------------


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    label_fraction: float = 1.0
    freeze_encoder: bool = True
    n_classes: int = 2
    seed: int = 0
    use_augment: bool = False
    augment: AugmentConfig | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        # classification needs >= 2 classes; segmentation counts foreground
        # classes, so 1 is the minimum either way
        if self.n_classes < 1:
            raise ValueError(f"need at least 1 class, got {self.n_classes}")


def load_labeled_clips(
    manifest_path: str | Path, split: str, task: str
) -> list[LabeledClip]:
    entries = [e for e in load_manifest(manifest_path) if e.split == split]
    if not entries:
        raise ValueError(f"manifest has no clips in split {split!r}")
    samples: list[LabeledClip] = []
    for entry in entries:
        clip = load_clip(resolve_clip_path(manifest_path, entry.path).with_suffix(""))
        if task == "classification":
            if entry.label is None:
                raise ValueError(f"clip {entry.path}: classification needs a label")
            samples.append(LabeledClip(clip=clip, label=int(entry.label)))
        elif task == "segmentation":
            if entry.mask_path is None:
                raise ValueError(f"clip {entry.path}: segmentation needs a mask")
            mask = np.load(resolve_clip_path(manifest_path, entry.mask_path))
            samples.append(LabeledClip(clip=clip, label=entry.label, mask=mask))
        else:
            raise ValueError(f"unknown task {task!r}")
    return samples


def _subsample_labels(
    samples: list[LabeledClip], fraction: float, seed: int, task: str
) -> list[LabeledClip]:
    """Deterministic stratified subsample keeping at least one item per class."""
    if fraction >= 1.0:
        return list(samples)
    rng = np.random.default_rng([abs(int(seed)), 0x1AB])
    if task == "classification":
        by_class: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            by_class.setdefault(int(s.label), []).append(i)
        chosen: list[int] = []
        for c in sorted(by_class):
            idx = np.array(by_class[c])
            rng.shuffle(idx)
            keep = max(1, math.floor(fraction * len(idx)))
            chosen.extend(int(i) for i in idx[:keep])
        return [samples[i] for i in sorted(chosen)]
    idx = rng.permutation(len(samples))
    keep = max(1, math.floor(fraction * len(samples)))
    return [samples[int(i)] for i in sorted(idx[:keep])]


def _init_head(in_features: int, out_features: int, seed: int) -> nn.Linear:
    head = nn.Linear(in_features, out_features)
    gen = torch.Generator().manual_seed(abs(int(seed)) + 7)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.02, generator=gen)
        head.bias.zero_()
    return head


def _frames_tensor(clip: VideoClip) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(clip.frames, dtype=np.float32))


def evaluate_model(
    model: VideoModel,
    head: nn.Linear,
    task: str,
    n_classes: int,
    samples: Sequence[LabeledClip],
    split: str = "test",
) -> dict:
    """Deterministic metric report on a labeled sample list (no augmentation)."""
    model.eval()
    if task == "classification":
        scores = []
        labels = []
        with torch.no_grad():
            for s in samples:
                scores.append(classify(_frames_tensor(s.clip), model, head).numpy())
                labels.append(int(s.label))
        scores = np.stack(scores)
        labels = np.array(labels)
        preds = scores.argmax(axis=1)
        acc, prec, rec, f1 = classification_metrics(preds, labels)
        report = {
            "task": task,
            "split": split,
            "split_size": len(samples),
            "accuracy": acc,
            "precision": prec,
            "recall": rec,
            "f1": f1,
        }
        if n_classes == 2 and len(set(labels.tolist())) == 2:
            report["auroc"] = roc_auc(scores[:, 1] - scores[:, 0], labels)
        return report

    per_class: dict[int, dict[str, list[float]]] = {
        c: {"dice": [], "iou": [], "hd95": [], "assd": []} for c in range(1, n_classes + 1)
    }
    with torch.no_grad():
        for s in samples:
            pred = predict_mask(
                decode_segmentation(_frames_tensor(s.clip), model, head, n_classes)
            )
            for c in range(1, n_classes + 1):
                dice, iou = overlap_metrics(pred, s.mask, c)
                per_class[c]["dice"].append(dice)
                per_class[c]["iou"].append(iou)
                try:
                    hd95, assd = surface_metrics(pred == c, s.mask == c)
                    per_class[c]["hd95"].append(hd95)
                    per_class[c]["assd"].append(assd)
                except ValueError:
                    pass  # empty boundary: reported as missing, excluded from means
    classes = {}
    for c, vals in per_class.items():
        classes[str(c)] = {
            "dice": float(np.mean(vals["dice"])),
            "iou": float(np.mean(vals["iou"])),
            "hd95": float(np.mean(vals["hd95"])) if vals["hd95"] else None,
            "assd": float(np.mean(vals["assd"])) if vals["assd"] else None,
        }
    hd_known = [v["hd95"] for v in classes.values() if v["hd95"] is not None]
    assd_known = [v["assd"] for v in classes.values() if v["assd"] is not None]
    return {
        "task": task,
        "split": split,
        "split_size": len(samples),
        "per_class": classes,
        "mean_dice": float(np.mean([v["dice"] for v in classes.values()])),
        "mean_iou": float(np.mean([v["iou"] for v in classes.values()])),
        "mean_hd95": float(np.mean(hd_known)) if hd_known else None,
        "mean_assd": float(np.mean(assd_known)) if assd_known else None,
    }


def finetune(
    task: str,
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    cfg: FinetuneConfig,
    out_dir: str | Path | None = None,
) -> tuple[VideoModel, nn.Linear, dict]:
    """Train a task head on the manifest's train split and score the test split.

    The encoder stays frozen (and bitwise untouched) unless
    ``freeze_encoder=False``. ``label_fraction`` subsamples the training
    labels deterministically for label-efficiency runs. Frozen classification
    runs as a linear probe on precomputed standardized features, one
    full-batch step per epoch, with the standardization folded back into the
    returned head; all other combinations train with mini-batches through the
    network. Returns (model, head, report); when ``out_dir`` is given, also
    writes the task checkpoint, the JSON report, and a flat text metric table.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    model, _, _ = load_checkpoint(checkpoint_path)
    train_samples = load_labeled_clips(manifest_path, "train", task)
    test_samples = load_labeled_clips(manifest_path, "test", task)
    train_samples = _subsample_labels(train_samples, cfg.label_fraction, cfg.seed, task)

    if task == "classification":
        if cfg.n_classes < 2:
            raise ValueError(f"classification needs >= 2 classes, got {cfg.n_classes}")
        n_out = cfg.n_classes
        head = _init_head(model.cfg.embed_dim, n_out, cfg.seed)
        labels = [int(s.label) for s in train_samples]
        if max(labels) >= n_out:
            raise ValueError(
                f"label {max(labels)} out of range for n_classes={cfg.n_classes}"
            )
    else:
        patch = model.cfg.patch
        n_out = (cfg.n_classes + 1) * patch.t * patch.h * patch.w
        head = _init_head(model.cfg.embed_dim, n_out, cfg.seed)
        for s in train_samples:
            if s.mask.max() > cfg.n_classes:
                raise ValueError(
                    f"mask label {int(s.mask.max())} out of range for "
                    f"n_classes={cfg.n_classes}"
                )

    if cfg.freeze_encoder:
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        trainable = list(head.parameters())
    else:
        model.train()
        trainable = list(model.parameters()) + list(head.parameters())
    ce = nn.CrossEntropyLoss()
    aug_cfg = cfg.augment
    if cfg.use_augment and aug_cfg is None:
        aug_cfg = AugmentConfig(mode="classification" if task == "classification" else "segmentation")

    n = len(train_samples)
    if task == "classification" and cfg.freeze_encoder and not cfg.use_augment:
        # Linear probe on precomputed pooled features: standardize, run
        # full-batch steps (one per configured epoch), then fold the
        # standardization into the head so classify() reproduces the probe.
        with torch.no_grad():
            feats = torch.stack(
                [clip_feature(model, _frames_tensor(s.clip)) for s in train_samples]
            )
        labels = torch.tensor([int(s.label) for s in train_samples])
        mu = feats.mean(dim=0)
        sd = feats.std(dim=0, unbiased=False) + 1e-8
        feats_std = (feats - mu) / sd
        optimizer = torch.optim.AdamW(
            head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        for _ in range(cfg.epochs):
            optimizer.zero_grad()
            ce(head(feats_std), labels).backward()
            optimizer.step()
        with torch.no_grad():
            folded_weight = head.weight / sd[None, :]
            head.bias.copy_(head.bias - head.weight @ (mu / sd))
            head.weight.copy_(folded_weight)
    else:
        optimizer = torch.optim.AdamW(
            trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        for epoch in range(cfg.epochs):
            order = epoch_order(cfg.seed, epoch, n)
            for b in range(steps_per_epoch):
                batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                optimizer.zero_grad()
                losses = []
                for slot, i in enumerate(batch):
                    sample = train_samples[int(i)]
                    if cfg.use_augment:
                        rng = np.random.default_rng(
                            [abs(int(cfg.seed)), 0xA6, epoch, b, slot]
                        )
                        sample = augment(sample, aug_cfg, rng)
                    frames = _frames_tensor(sample.clip)
                    if task == "classification":
                        scores = classify(frames, model, head)
                        losses.append(ce(scores[None], torch.tensor([sample.label])))
                    else:
                        scores = decode_segmentation(frames, model, head, cfg.n_classes)
                        losses.append(
                            ce(
                                scores.reshape(-1, cfg.n_classes + 1),
                                torch.from_numpy(sample.mask.reshape(-1)),
                            )
                        )
                torch.stack(losses).mean().backward()
                optimizer.step()

    report = evaluate_model(model, head, task, cfg.n_classes, test_samples)
    report["label_fraction"] = cfg.label_fraction
    report["n_train_used"] = n
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_task_checkpoint(out / "task_checkpoint.pt", model, head, task, cfg)
        (out / "metrics.json").write_text(json.dumps(report, indent=1) + "\n")
        (out / "metrics.txt").write_text(format_metric_table(report))
    return model, head, report


def save_task_checkpoint(
    path: str | Path,
    model: VideoModel,
    head: nn.Linear,
    task: str,
    cfg: FinetuneConfig,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    aug = asdict(cfg.augment) if cfg.augment is not None else None
    ft = asdict(cfg)
    ft["augment"] = aug
    torch.save(
        {
            "model_config": model_config_to_dict(model.cfg),
            "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "head_weight": head.weight.detach().clone(),
            "head_bias": head.bias.detach().clone(),
            "task": task,
            "finetune_config": ft,
        },
        path,
    )
    return path


def load_task_checkpoint(path: str | Path) -> tuple[VideoModel, nn.Linear, str, FinetuneConfig]:
    payload = torch.load(Path(path), weights_only=True)
    cfg = model_config_from_dict(payload["model_config"])
    model = VideoModel(cfg)
    model.load_state_dict(payload["params"])
    weight = payload["head_weight"]
    head = nn.Linear(weight.shape[1], weight.shape[0])
    with torch.no_grad():
        head.weight.copy_(weight)
        head.bias.copy_(payload["head_bias"])
    ft = dict(payload["finetune_config"])
    aug = ft.pop("augment", None)
    ft_cfg = FinetuneConfig(augment=AugmentConfig(**aug) if aug else None, **ft)
    return model, head, payload["task"], ft_cfg


def evaluate_task(task_checkpoint: str | Path, manifest_path: str | Path) -> dict:
    """Recompute the test-split metric report from a saved task checkpoint.

    Deterministic, so it reproduces the report finetune emitted for the same
    manifest (including the training-subsample size, which is re-derived from
    the saved seed and label fraction).
    """
    model, head, task, cfg = load_task_checkpoint(task_checkpoint)
    test_samples = load_labeled_clips(manifest_path, "test", task)
    report = evaluate_model(model, head, task, cfg.n_classes, test_samples)
    report["label_fraction"] = cfg.label_fraction
    try:
        train_samples = load_labeled_clips(manifest_path, "train", task)
        report["n_train_used"] = len(
            _subsample_labels(train_samples, cfg.label_fraction, cfg.seed, task)
        )
    except ValueError:
        report["n_train_used"] = None
    return report


def format_metric_table(report: dict) -> str:
    """Flat tabular text export of a metric report."""
    lines: list[str] = []
    if report["task"] == "classification":
        cols = ["accuracy", "precision", "recall", "f1"] + (
            ["auroc"] if "auroc" in report else []
        )
        header = f"{'task':<16}" + "".join(f"{c:>12}" for c in cols)
        row = f"{report['task']:<16}" + "".join(f"{report[c]:>12.4f}" for c in cols)
        lines += [header, row]
    else:
        header = f"{'class':<8}{'dice':>10}{'iou':>10}{'hd95':>10}{'assd':>10}"
        lines.append(header)

        def fmt(v) -> str:
            return f"{v:>10.4f}" if v is not None else f"{'n/a':>10}"

        for c, vals in sorted(report["per_class"].items()):
            lines.append(
                f"{c:<8}" + fmt(vals["dice"]) + fmt(vals["iou"]) + fmt(vals["hd95"]) + fmt(vals["assd"])
            )
        lines.append(
            f"{'mean':<8}"
            + fmt(report["mean_dice"])
            + fmt(report["mean_iou"])
            + fmt(report["mean_hd95"])
            + fmt(report["mean_assd"])
        )
    return "\n".join(lines) + "\n"
