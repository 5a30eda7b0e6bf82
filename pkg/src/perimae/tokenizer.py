"""Spatio-temporal patchification and token embedding.

A clip of shape (T, H, W, c) is cut into non-overlapping t x h x w blocks and
arranged as a grid of N_T temporal groups by N_S spatial positions, each patch
flattened to c*t*h*w raw pixel values. Patch order is stable: temporal-major,
then row-major over spatial tiles; all downstream index math relies on it.

Embedding is a single linear map of the flattened patch plus a trainable
positional table with one vector per (temporal group, spatial position). A
strided 3D convolution over non-overlapping blocks computes exactly this
linear map, so the flattened form is used directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class PatchConfig:
    """Patch geometry (spatial h x w, temporal depth t) and embedding width D."""

    h: int = 16
    w: int = 16
    t: int = 4
    D: int = 64

    def __post_init__(self) -> None:
        if self.h < 1 or self.w < 1 or self.t < 1:
            raise ValueError(f"patch dims must be positive, got ({self.h}, {self.w}, {self.t})")
        if self.D < 1:
            raise ValueError(f"embedding width must be >= 1, got {self.D}")

    def patch_dim(self, channels: int = 3) -> int:
        return channels * self.t * self.h * self.w

    def grid_shape(self, frames: int, height: int, width: int) -> tuple[int, int]:
        """(N_T, N_S) for a clip of the given dimensions; validates divisibility."""
        check_divisibility(self, frames, height, width)
        return frames // self.t, (height // self.h) * (width // self.w)


def check_divisibility(cfg: PatchConfig, frames: int, height: int, width: int) -> None:
    if frames % cfg.t != 0:
        raise ValueError(f"temporal axis: T={frames} not divisible by t={cfg.t}")
    if height % cfg.h != 0:
        raise ValueError(f"height axis: H={height} not divisible by h={cfg.h}")
    if width % cfg.w != 0:
        raise ValueError(f"width axis: W={width} not divisible by w={cfg.w}")


@dataclass
class PatchGrid:
    """Raw pixel patches: (N_T, N_S, c*t*h*w), spatial tiles in row-major order."""

    patches: torch.Tensor
    n_t: int
    n_h: int
    n_w: int
    channels: int

    @property
    def n_s(self) -> int:
        return self.n_h * self.n_w

    @property
    def n_total(self) -> int:
        return self.n_t * self.n_s


def _as_tensor(frames: np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(frames, torch.Tensor):
        return frames
    return torch.from_numpy(np.ascontiguousarray(frames))


def patchify(frames: np.ndarray | torch.Tensor, cfg: PatchConfig) -> PatchGrid:
    """Rearrange a (T, H, W, c) clip into a PatchGrid. Lossless."""
    x = _as_tensor(frames)
    if x.ndim != 4:
        raise ValueError(f"expected (T, H, W, c), got shape {tuple(x.shape)}")
    t_len, height, width, channels = x.shape
    check_divisibility(cfg, t_len, height, width)
    n_t = t_len // cfg.t
    n_h = height // cfg.h
    n_w = width // cfg.w
    x = x.reshape(n_t, cfg.t, n_h, cfg.h, n_w, cfg.w, channels)
    x = x.permute(0, 2, 4, 1, 3, 5, 6)
    patches = x.reshape(n_t, n_h * n_w, cfg.t * cfg.h * cfg.w * channels)
    return PatchGrid(patches=patches, n_t=n_t, n_h=n_h, n_w=n_w, channels=channels)


def unpatchify(
    grid: PatchGrid,
    cfg: PatchConfig,
    height: int,
    width: int,
    frames: int,
) -> torch.Tensor:
    """Exact inverse of :func:`patchify`; returns a (T, H, W, c) tensor."""
    n_t = frames // cfg.t
    n_h = height // cfg.h
    n_w = width // cfg.w
    check_divisibility(cfg, frames, height, width)
    expected = (n_t, n_h * n_w, cfg.t * cfg.h * cfg.w * grid.channels)
    if tuple(grid.patches.shape) != expected:
        raise ValueError(
            f"grid shape {tuple(grid.patches.shape)} inconsistent with "
            f"target dims (expected {expected})"
        )
    x = grid.patches.reshape(n_t, n_h, n_w, cfg.t, cfg.h, cfg.w, grid.channels)
    x = x.permute(0, 3, 1, 4, 2, 5, 6)
    return x.reshape(frames, height, width, grid.channels)


@dataclass
class TokenGrid:
    """Embedded tokens (N_T, N_S, D) plus the positional table that was added."""

    tokens: torch.Tensor
    pos_embed: torch.Tensor

    @property
    def n_t(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_s(self) -> int:
        return self.tokens.shape[1]


class TokenEmbedder(nn.Module):
    """Linear patch projection plus a fully learned positional table."""

    def __init__(self, patch_dim: int, n_t: int, n_s: int, embed_dim: int) -> None:
        super().__init__()
        self.patch_dim = patch_dim
        self.weight = nn.Parameter(torch.zeros(patch_dim, embed_dim))
        self.pos = nn.Parameter(torch.zeros(n_t, n_s, embed_dim))

    def forward(self, grid: PatchGrid) -> TokenGrid:
        patches = grid.patches
        if patches.shape[-1] != self.patch_dim:
            raise ValueError(
                f"patch dim {patches.shape[-1]} does not match projection "
                f"input {self.patch_dim}"
            )
        if (patches.shape[0], patches.shape[1]) != tuple(self.pos.shape[:2]):
            raise ValueError(
                f"grid {tuple(patches.shape[:2])} does not match positional "
                f"table {tuple(self.pos.shape[:2])}"
            )
        tokens = patches.to(self.weight.dtype) @ self.weight + self.pos
        return TokenGrid(tokens=tokens, pos_embed=self.pos)


def embed_tokens(grid: PatchGrid, embedder: TokenEmbedder) -> TokenGrid:
    return embedder(grid)
