"""Masking strategies over the (temporal group, spatial position) token grid.

Three modes:

* ``random``: a uniformly random subset of all positions.
* ``uniform_frame``: each temporal group independently masks the same number
  of positions, so per-group visible counts are identical and per-group
  embeddings stay comparable.
* ``consistent``: a uniform_frame plan whose anchor row has been copied onto
  designated partner rows, so those groups hide exactly the same spatial
  positions.

Masked counts always round down (floor), so the visible set is never smaller
than the ratio implies, and every row keeps at least one visible position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
import torch

from .tokenizer import TokenGrid

MASK_MODES = ("random", "uniform_frame", "consistent")


@dataclass
class MaskPlan:
    """Boolean mask matrix M over (N_T, N_S); True marks a masked position."""

    M: np.ndarray
    ratio: float
    mode: str

    def __post_init__(self) -> None:
        m = np.asarray(self.M)
        if m.ndim != 2 or m.dtype != np.bool_:
            raise ValueError(f"M must be a 2D boolean matrix, got {m.shape} {m.dtype}")
        if self.mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mode!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio must lie in [0, 1), got {self.ratio}")
        if bool(m.all(axis=1).any()):
            raise ValueError("every row must keep at least one visible position")
        self.M = m

    @property
    def n_t(self) -> int:
        return self.M.shape[0]

    @property
    def n_s(self) -> int:
        return self.M.shape[1]

    @property
    def n_masked(self) -> int:
        return int(self.M.sum())

    def masked_per_row(self) -> np.ndarray:
        return self.M.sum(axis=1)

    def visible_per_row(self) -> np.ndarray:
        return (~self.M).sum(axis=1)


def full_visible_plan(n_t: int, n_s: int) -> MaskPlan:
    """An all-visible plan, as used at inference time."""
    return MaskPlan(M=np.zeros((n_t, n_s), dtype=bool), ratio=0.0, mode="uniform_frame")


def _check_dims(n_t: int, n_s: int, ratio: float) -> None:
    if n_t < 1 or n_s < 1:
        raise ValueError(f"grid dims must be positive, got ({n_t}, {n_s})")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"ratio must lie in [0, 1), got {ratio}")


def sample_random_mask(
    n_t: int, n_s: int, ratio: float, rng: np.random.Generator
) -> MaskPlan:
    """Mask a uniformly random subset of exactly floor(ratio * N_T * N_S) positions.

    Redraws (deterministically, from the same generator) in the rare event a
    row comes out fully masked.
    """
    _check_dims(n_t, n_s, ratio)
    total = n_t * n_s
    k = math.floor(ratio * total)
    for _ in range(200):
        m = np.zeros(total, dtype=bool)
        m[rng.choice(total, size=k, replace=False)] = True
        m = m.reshape(n_t, n_s)
        if not m.all(axis=1).any():
            return MaskPlan(M=m, ratio=ratio, mode="random")
    raise ValueError(
        f"could not sample a random mask keeping every row visible "
        f"(n_t={n_t}, n_s={n_s}, ratio={ratio})"
    )


def sample_uniform_frame_mask(
    n_t: int, n_s: int, ratio: float, rng: np.random.Generator
) -> MaskPlan:
    """Mask exactly floor(ratio * N_S) positions independently in every row."""
    _check_dims(n_t, n_s, ratio)
    k = math.floor(ratio * n_s)
    if k >= n_s:
        raise ValueError(f"per-row masked count {k} leaves no visible position")
    m = np.zeros((n_t, n_s), dtype=bool)
    for j in range(n_t):
        m[j, rng.choice(n_s, size=k, replace=False)] = True
    return MaskPlan(M=m, ratio=ratio, mode="uniform_frame")


def replicate_mask_rows(
    plan: MaskPlan, anchor: int, partners: Iterable[int]
) -> MaskPlan:
    """Copy the anchor row's mask onto each partner row.

    Produces a ``consistent`` plan; per-row masked counts are preserved by
    construction because a row is replaced by another row with the same count.
    """
    if plan.mode != "uniform_frame":
        raise ValueError(f"can only replicate rows of a uniform_frame plan, got {plan.mode!r}")
    partners = sorted(set(int(p) for p in partners))
    anchor = int(anchor)
    if not 0 <= anchor < plan.n_t:
        raise ValueError(f"anchor row {anchor} out of range [0, {plan.n_t})")
    for p in partners:
        if not 0 <= p < plan.n_t:
            raise ValueError(f"partner row {p} out of range [0, {plan.n_t})")
    if anchor in partners:
        raise ValueError(f"anchor row {anchor} cannot be its own partner")
    m = plan.M.copy()
    for p in partners:
        m[p] = m[anchor]
    return MaskPlan(M=m, ratio=plan.ratio, mode="consistent")


@dataclass
class VisibleTokens:
    """Visible tokens in scan order (group-major, ascending spatial index).

    ``tokens`` is (V, D); ``coords`` is (V, 2) holding the original
    (temporal group, spatial position) of each token; ``group_counts`` gives
    the number of visible tokens per temporal group.
    """

    tokens: torch.Tensor
    coords: torch.Tensor
    group_counts: tuple[int, ...]

    @property
    def n_t(self) -> int:
        return len(self.group_counts)

    def group_slices(self) -> Iterator[tuple[int, slice]]:
        offset = 0
        for j, count in enumerate(self.group_counts):
            yield j, slice(offset, offset + count)
            offset += count


def apply_mask(tokens: TokenGrid, plan: MaskPlan) -> VisibleTokens:
    """Select the visible tokens of each temporal group, preserving order.

    Token values are not altered; the coordinate map allows exact scattering
    back into the full grid.
    """
    if (tokens.n_t, tokens.n_s) != (plan.n_t, plan.n_s):
        raise ValueError(
            f"token grid {(tokens.n_t, tokens.n_s)} does not match "
            f"mask {(plan.n_t, plan.n_s)}"
        )
    visible = ~plan.M
    rows, cols = np.nonzero(visible)  # row-major: group-major ascending order
    coords = torch.from_numpy(np.stack([rows, cols], axis=1).astype(np.int64))
    flat = tokens.tokens.reshape(tokens.n_t * tokens.n_s, -1)
    sel = torch.from_numpy((rows * plan.n_s + cols).astype(np.int64))
    out = flat[sel]
    group_counts = tuple(int(c) for c in visible.sum(axis=1))
    return VisibleTokens(tokens=out, coords=coords, group_counts=group_counts)
