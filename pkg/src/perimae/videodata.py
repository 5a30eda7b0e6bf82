"""Synthetic periodic video clips and cycle-normalization preprocessing.

Clips emulate ultrasound-like cyclic motion: a bright soft-edged ellipse whose
radius oscillates sinusoidally over a fixed period, corrupted by multiplicative
speckle noise. Every frame is a deterministic function of (frame index mod
period, seed), so generated clips are exactly periodic, which the rest of the
pipeline relies on for phase-level supervision-free learning.

Also provides the cycle-normalization helpers used to turn arbitrary-length or
half-cycle material into fixed-length clips covering at least one full cycle:
reverse padding, cyclic length fitting, and spatial resizing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

__all__ = [
    "VideoClip",
    "SyntheticSpec",
    "generate_periodic_clip",
    "generate_segmentation_clip",
    "reverse_pad",
    "fit_to_length",
    "normalize_clip",
    "save_clip",
    "load_clip",
    "ManifestEntry",
    "save_manifest",
    "load_manifest",
    "generate_dataset",
]


@dataclass
class VideoClip:
    """A T x H x W x 3 real-valued video with all pixels in [0, 1].

    ``period_hint`` is the number of frames per motion cycle when known
    (synthetic clips always carry it); ``source_id`` is a free-form label
    used in manifests and error messages.
    """

    frames: np.ndarray
    period_hint: int | None = None
    source_id: str = ""

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or frames.shape[3] != 3:
            raise ValueError(f"frames must have shape (T, H, W, 3), got {frames.shape}")
        if min(frames.shape[:3]) < 1:
            raise ValueError(f"clip has an empty axis: {frames.shape}")
        if not np.issubdtype(frames.dtype, np.floating):
            raise ValueError(f"frames must be floating point, got {frames.dtype}")
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.period_hint is not None:
            period = int(self.period_hint)
            if not 2 <= period <= frames.shape[0]:
                raise ValueError(
                    f"period_hint {period} outside [2, T={frames.shape[0]}]"
                )
            self.period_hint = period
        self.frames = frames

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic pulsating-ellipse clip.

    ``period`` is frames per cycle; ``amplitude`` the relative radius
    modulation depth; ``noise_level`` the standard deviation of the
    multiplicative speckle factor. T must cover at least one full cycle.
    """

    T: int
    H: int
    W: int
    period: int
    amplitude: float = 0.3
    noise_level: float = 0.0
    phase_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.T < 1 or self.H < 1 or self.W < 1:
            raise ValueError(f"T, H, W must be positive, got ({self.T}, {self.H}, {self.W})")
        if self.period < 2:
            raise ValueError(f"period must be >= 2, got {self.period}")
        if self.T < self.period:
            raise ValueError(
                f"T={self.T} is shorter than one cycle (period={self.period})"
            )
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"amplitude must lie in [0, 1], got {self.amplitude}")
        if self.noise_level < 0.0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        if not 0.0 <= self.phase_offset < 2.0 * math.pi:
            raise ValueError(f"phase_offset must lie in [0, 2*pi), got {self.phase_offset}")


def _render_cycle(spec: SyntheticSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one full cycle of frames plus the per-phase foreground masks.

    Returns (frames, masks) with shapes (period, H, W, 3) and (period, H, W).
    The geometry jitter and the per-phase speckle fields are all drawn from a
    single seeded generator in a fixed order, so the output is a pure function
    of (spec, seed).
    """
    rng = np.random.default_rng([int(seed), 0x5EED])
    h, w = spec.H, spec.W

    cy = h * (0.5 + 0.08 * rng.uniform(-1.0, 1.0))
    cx = w * (0.5 + 0.08 * rng.uniform(-1.0, 1.0))
    ry0 = h * (0.26 + 0.04 * rng.uniform(-1.0, 1.0))
    rx0 = w * (0.20 + 0.04 * rng.uniform(-1.0, 1.0))
    fg = rng.uniform(0.72, 0.92)
    bg = rng.uniform(0.06, 0.16)

    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]

    frames = np.empty((spec.period, h, w, 3), dtype=np.float32)
    masks = np.empty((spec.period, h, w), dtype=np.uint8)
    for phase in range(spec.period):
        scale = 1.0 + spec.amplitude * math.sin(
            2.0 * math.pi * phase / spec.period + spec.phase_offset
        )
        ry = max(ry0 * scale, 1e-6)
        rx = max(rx0 * scale, 1e-6)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        soft = expit((1.0 - d) / 0.06)
        gray = bg + (fg - bg) * soft
        if spec.noise_level > 0.0:
            speckle = 1.0 + spec.noise_level * rng.standard_normal((h, w))
            gray = gray * speckle
        gray = np.clip(gray, 0.0, 1.0)
        frames[phase] = np.repeat(gray[:, :, None], 3, axis=2).astype(np.float32)
        masks[phase] = (d <= 1.0).astype(np.uint8)
    return frames, masks


def generate_periodic_clip(spec: SyntheticSpec, seed: int) -> VideoClip:
    """Generate a periodic clip; frame f depends only on (f mod period, seed)."""
    cycle, _ = _render_cycle(spec, seed)
    idx = np.arange(spec.T) % spec.period
    return VideoClip(
        frames=cycle[idx].copy(),
        period_hint=spec.period,
        source_id=f"synthetic-p{spec.period}-s{seed}",
    )


def generate_segmentation_clip(spec: SyntheticSpec, seed: int) -> tuple[VideoClip, np.ndarray]:
    """Generate a clip together with its T x H x W foreground label map.

    Labels: 0 = background, 1 = ellipse interior (pre-noise geometry).
    """
    cycle, cycle_masks = _render_cycle(spec, seed)
    idx = np.arange(spec.T) % spec.period
    clip = VideoClip(
        frames=cycle[idx].copy(),
        period_hint=spec.period,
        source_id=f"synthetic-p{spec.period}-s{seed}",
    )
    return clip, cycle_masks[idx].copy()


def reverse_pad(half_cycle_frames: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Mirror a half-cycle sequence f_1..f_K into f_1..f_K, f_{K-1}..f_2.

    The output has length 2K - 2 and, tiled, is exactly periodic with period
    2K - 2. Endpoints are not duplicated so the tiling has no repeated frames
    at the turning points.
    """
    frames = np.asarray(half_cycle_frames)
    k = frames.shape[0]
    if k < 2:
        raise ValueError(f"need at least 2 frames to mirror, got {k}")
    return np.concatenate([frames, frames[k - 2:0:-1]], axis=0)


def fit_to_length(clip: VideoClip, t_target: int) -> VideoClip:
    """Crop or cyclically tile a clip to exactly ``t_target`` frames.

    Longer clips are cropped to the first t_target frames. Shorter clips are
    tiled; when no period hint is available the clip is first reverse padded
    so the tiling is a plausible full cycle. The period hint is carried over
    whenever it still describes the output, otherwise dropped.
    """
    if t_target < 1:
        raise ValueError(f"t_target must be >= 1, got {t_target}")
    t = clip.T
    if t >= t_target:
        hint = clip.period_hint
        if hint is not None and hint > t_target:
            hint = None
        return VideoClip(clip.frames[:t_target].copy(), hint, clip.source_id)

    if clip.period_hint is None and t >= 2:
        base = reverse_pad(clip.frames)
        cycle_len = base.shape[0]
    else:
        base = clip.frames
        if clip.period_hint is not None and t % clip.period_hint == 0:
            cycle_len = clip.period_hint
        else:
            cycle_len = t
    idx = np.arange(t_target) % base.shape[0]
    hint = cycle_len if 2 <= cycle_len <= t_target else None
    return VideoClip(base[idx].copy(), hint, clip.source_id)


def normalize_clip(
    clip: VideoClip | np.ndarray,
    h_out: int,
    w_out: int,
) -> VideoClip:
    """Resize a clip to h_out x w_out with bilinear interpolation.

    Accepts a VideoClip or a raw (T, H, W), (T, H, W, 1) or (T, H, W, 3)
    array; single-channel sources are replicated to 3 channels. Resizing a
    clip to its own size returns the frames unchanged.
    """
    if h_out < 1 or w_out < 1:
        raise ValueError(f"target size must be positive, got ({h_out}, {w_out})")
    if isinstance(clip, VideoClip):
        frames = clip.frames
        period_hint = clip.period_hint
        source_id = clip.source_id
    else:
        frames = np.asarray(clip)
        period_hint = None
        source_id = ""
    if frames.ndim == 3:
        frames = frames[:, :, :, None]
    if frames.ndim != 4:
        raise ValueError(f"expected 3 or 4 axes, got shape {frames.shape}")
    if frames.shape[3] == 1:
        frames = np.repeat(frames, 3, axis=3)
    if frames.shape[3] != 3:
        raise ValueError(f"unsupported channel count {frames.shape[3]}")

    if frames.shape[1] != h_out or frames.shape[2] != w_out:
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
        x = x.permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(h_out, w_out), mode="bilinear", align_corners=False)
        frames = x.permute(0, 2, 3, 1).clamp_(0.0, 1.0).numpy()
    else:
        frames = frames.astype(np.float32, copy=True)
    return VideoClip(frames, period_hint, source_id)


# --------------------------------------------------------------------------
# On-disk layout: <base>.npy holds the raw array, <base>.meta is a
# human-readable key-value sidecar, and a JSON manifest lists clips with
# their split assignment and optional labels.
# --------------------------------------------------------------------------


def save_clip(
    clip: VideoClip, basepath: str | Path, extra: dict[str, object] | None = None
) -> None:
    """Write <base>.npy plus a key-value .meta sidecar.

    ``extra`` records provenance such as the generating spec and seed; unknown
    keys are preserved as text and ignored by :func:`load_clip`.
    """
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.save(base.with_suffix(".npy"), clip.frames.astype(np.float32))
    lines = [
        f"T: {clip.T}",
        f"H: {clip.H}",
        f"W: {clip.W}",
        f"period_hint: {'' if clip.period_hint is None else clip.period_hint}",
        f"source_id: {clip.source_id}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key}: {value}")
    base.with_suffix(".meta").write_text("\n".join(lines) + "\n")


def load_clip(basepath: str | Path) -> VideoClip:
    base = Path(basepath)
    frames = np.load(base.with_suffix(".npy"))
    meta: dict[str, str] = {}
    for line in base.with_suffix(".meta").read_text().splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            meta[key.strip()] = value.strip()
    hint = meta.get("period_hint", "")
    return VideoClip(
        frames=frames,
        period_hint=int(hint) if hint else None,
        source_id=meta.get("source_id", ""),
    )


@dataclass
class ManifestEntry:
    """One clip in a dataset manifest; paths are relative to the manifest."""

    path: str
    split: str
    label: int | None = None
    mask_path: str | None = None
    period: int | None = None


def save_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    payload = [
        {
            "path": e.path,
            "split": e.split,
            "label": e.label,
            "mask_path": e.mask_path,
            "period": e.period,
        }
        for e in entries
    ]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"clips": payload}, indent=1) + "\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    payload = json.loads(Path(path).read_text())
    return [
        ManifestEntry(
            path=rec["path"],
            split=rec["split"],
            label=rec.get("label"),
            mask_path=rec.get("mask_path"),
            period=rec.get("period"),
        )
        for rec in payload["clips"]
    ]


def resolve_clip_path(manifest_path: str | Path, entry_path: str) -> Path:
    return Path(manifest_path).parent / entry_path


def generate_dataset(
    out_dir: str | Path,
    counts: dict[str, int],
    *,
    frames: int,
    height: int,
    width: int,
    periods: Sequence[int],
    amplitude: float = 0.3,
    noise_level: float = 0.05,
    seed: int = 0,
    write_masks: bool = False,
) -> Path:
    """Write a synthetic dataset and its manifest; returns the manifest path.

    Periods alternate round-robin within each split so classes stay balanced;
    the class label of a clip is the index of its period in ``periods``. Every
    clip's content is a pure function of (parameters, seed), so regenerating
    with the same arguments reproduces identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    periods = list(periods)
    if not periods:
        raise ValueError("periods must be nonempty")
    rng = np.random.default_rng([int(seed), 0xDA7A])
    entries: list[ManifestEntry] = []
    clip_index = 0
    for split in ("train", "val", "test"):
        n = int(counts.get(split, 0))
        for i in range(n):
            period = periods[i % len(periods)]
            spec = SyntheticSpec(
                T=frames,
                H=height,
                W=width,
                period=period,
                amplitude=amplitude,
                noise_level=noise_level,
                phase_offset=float(rng.uniform(0.0, 2.0 * math.pi - 1e-9)),
            )
            clip_seed = int(seed) * 1_000_003 + clip_index
            name = f"clip_{split}_{i:04d}"
            mask_rel = None
            if write_masks:
                clip, mask = generate_segmentation_clip(spec, clip_seed)
                mask_rel = f"{name}_mask.npy"
                np.save(out / mask_rel, mask)
            else:
                clip = generate_periodic_clip(spec, clip_seed)
            save_clip(
                clip,
                out / name,
                extra={
                    "seed": clip_seed,
                    "spec_period": spec.period,
                    "spec_amplitude": spec.amplitude,
                    "spec_noise_level": spec.noise_level,
                    "spec_phase_offset": spec.phase_offset,
                },
            )
            entries.append(
                ManifestEntry(
                    path=f"{name}.npy",
                    split=split,
                    label=periods.index(period),
                    mask_path=mask_rel,
                    period=period,
                )
            )
            clip_index += 1
    manifest_path = out / "manifest.json"
    save_manifest(entries, manifest_path)
    return manifest_path
