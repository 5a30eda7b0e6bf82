"""Training objective: masked reconstruction loss, temporal self-similarity,
threshold-based triplet mining, the periodic contrastive (triplet) loss, and
the two-pass training step that combines them.

The two passes exist to break a circular dependency: the mask that makes
group embeddings comparable is defined per mined triple, but mining needs
embeddings first. Pass 1 therefore uses a uniform-frame mask to produce the
self-similarity matrix and mine triples (mining decisions are constants with
no gradient); pass 2 re-encodes under a consistent mask per triple and
measures the triplet loss there. Gradients from the total loss flow through
both passes' network computations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .backbone import VideoModel
from .masking import (
    MaskPlan,
    apply_mask,
    replicate_mask_rows,
    sample_random_mask,
    sample_uniform_frame_mask,
)
from .tokenizer import patchify

SIMILARITY_METRIC = "l2-on-unit-normalized"


@dataclass
class SimilarityMatrix:
    """Pairwise distances between per-group embeddings; symmetric, zero diagonal."""

    S: np.ndarray
    metric: str = SIMILARITY_METRIC

    @property
    def n_t(self) -> int:
        return self.S.shape[0]


@dataclass
class TripletSet:
    """Mined (anchor, positive, negative) group triples.

    ``thres_per_anchor`` holds every anchor's threshold (the mean of its
    off-diagonal similarity row), aligned with anchor index; anchors whose
    positive or negative candidate set came up empty are skipped and counted.
    """

    triples: list[tuple[int, int, int]]
    thres_per_anchor: list[float]
    adjacency_window: int
    skipped_anchors: int


@dataclass
class LossReport:
    """Per-step scalar losses and counters; L_total is the exact sum."""

    L_r: float
    L_c: float
    L_total: float
    masked_patch_count: int
    triplet_count: int
    skipped_anchors: int


def _unit_rows(z: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cannot normalize a zero-norm embedding row")
    return z / norms


def self_similarity(z: torch.Tensor | np.ndarray) -> SimilarityMatrix:
    """Distance matrix S[i, j] = ||z_i/|z_i| - z_j/|z_j||| over group embeddings."""
    if isinstance(z, torch.Tensor):
        z = z.detach().numpy()
    za = np.asarray(z, dtype=np.float64)
    if za.ndim != 2 or za.shape[0] < 2:
        raise ValueError(f"need at least 2 embedding rows, got shape {za.shape}")
    norms = np.sqrt((za * za).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero-norm embedding row")
    zu = za / norms
    diff = zu[:, None, :] - zu[None, :, :]
    s = np.sqrt((diff * diff).sum(axis=-1))
    return SimilarityMatrix(S=s)


def candidate_sets(
    S: SimilarityMatrix | np.ndarray, adjacency_window: int
) -> tuple[list[float], list[list[int]], list[list[int]]]:
    """Per-anchor threshold, positive candidates, and negative candidates.

    For anchor a: thres(a) is the mean of S[a, j] over j != a; positives are
    the j != a with S[a, j] strictly below thres(a); negatives are the j with
    S[a, j] >= thres(a) and |j - a| > adjacency_window. Candidate lists are
    in ascending index order.
    """
    s = S.S if isinstance(S, SimilarityMatrix) else np.asarray(S)
    n = s.shape[0]
    if adjacency_window < 1:
        raise ValueError(f"adjacency_window must be >= 1, got {adjacency_window}")
    thres: list[float] = []
    positives: list[list[int]] = []
    negatives: list[list[int]] = []
    for a in range(n):
        off = [s[a, j] for j in range(n) if j != a]
        th = float(sum(off) / len(off))
        thres.append(th)
        positives.append([j for j in range(n) if j != a and s[a, j] < th])
        negatives.append(
            [j for j in range(n) if s[a, j] >= th and abs(j - a) > adjacency_window]
        )
    return thres, positives, negatives


def mine_triplets(
    S: SimilarityMatrix | np.ndarray,
    adjacency_window: int,
    rng: np.random.Generator,
) -> TripletSet:
    """One triple per anchor, drawn uniformly from its candidate product set.

    Anchors are visited in ascending order; for each anchor with nonempty
    candidate sets the positive is drawn first, then the negative (one
    ``rng.integers`` call each, over the ascending candidate list). Anchors
    with an empty side are skipped and counted.
    """
    s = S.S if isinstance(S, SimilarityMatrix) else np.asarray(S)
    n = s.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 temporal groups to mine triples, got {n}")
    thres, positives, negatives = candidate_sets(s, adjacency_window)
    triples: list[tuple[int, int, int]] = []
    skipped = 0
    for a in range(n):
        pos, neg = positives[a], negatives[a]
        if not pos or not neg:
            skipped += 1
            continue
        p = pos[int(rng.integers(len(pos)))]
        q = neg[int(rng.integers(len(neg)))]
        triples.append((a, p, q))
    return TripletSet(
        triples=triples,
        thres_per_anchor=thres,
        adjacency_window=adjacency_window,
        skipped_anchors=skipped,
    )


def triplet_loss(
    z: torch.Tensor,
    triples: TripletSet | Sequence[tuple[int, int, int]],
    alpha: float,
) -> torch.Tensor:
    """Mean over triples of max(0, d(a, p) - d(a, n) + alpha).

    Distances are Euclidean on unit-normalized rows of z, matching
    :func:`self_similarity`.
    """
    if alpha < 0:
        raise ValueError(f"margin must be >= 0, got {alpha}")
    triple_list = triples.triples if isinstance(triples, TripletSet) else list(triples)
    if not triple_list:
        raise ValueError("triplet loss is undefined for an empty triple set")
    n = z.shape[0]
    for a, p, q in triple_list:
        if not (0 <= a < n and 0 <= p < n and 0 <= q < n):
            raise ValueError(f"triple ({a}, {p}, {q}) out of range for {n} rows")
    zu = _unit_rows(z)
    terms = []
    for a, p, q in triple_list:
        d_ap = torch.linalg.vector_norm(zu[a] - zu[p])
        d_an = torch.linalg.vector_norm(zu[a] - zu[q])
        terms.append(torch.clamp(d_ap - d_an + alpha, min=0.0))
    return torch.stack(terms).mean()


def reconstruction_loss(
    pred: torch.Tensor, target: torch.Tensor, plan: MaskPlan
) -> torch.Tensor:
    """Mean over masked patches of each patch's mean squared pixel error.

    Visible patches never enter the computation, so perturbing their
    predictions leaves the loss bitwise unchanged.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if tuple(pred.shape[:2]) != (plan.n_t, plan.n_s):
        raise ValueError(
            f"grid {tuple(pred.shape[:2])} does not match mask {(plan.n_t, plan.n_s)}"
        )
    mask = torch.from_numpy(plan.M)
    if int(mask.sum()) == 0:
        raise ValueError("reconstruction loss is undefined with zero masked patches")
    per_patch = ((pred - target.to(pred.dtype)) ** 2).mean(dim=-1)
    return per_patch[mask].mean()


def total_loss(l_r: float | torch.Tensor, l_c: float | torch.Tensor) -> float | torch.Tensor:
    """Unweighted sum of the two loss terms."""
    for name, value in (("reconstruction", l_r), ("contrastive", l_c)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"{name} loss is not finite: {v}")
    return l_r + l_c


def _step_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([abs(int(seed)), stream])


def training_step(
    model: VideoModel,
    frames: torch.Tensor,
    *,
    mask_ratio: float = 0.75,
    mask_mode: str = "uniform_frame",
    alpha: float = 0.5,
    adjacency_window: int = 1,
    enable_contrastive: bool = True,
    detach_encoder_for_contrastive: bool = False,
    seed: int = 0,
    debug_checks: bool = False,
) -> tuple[LossReport, torch.Tensor]:
    """One two-pass training step on a single clip; returns (report, loss).

    The returned loss tensor is differentiable; the report carries plain
    floats with L_total computed as the exact sum of the reported L_r and
    L_c. An empty mined triple set yields L_c = 0 for the step and training
    proceeds on reconstruction alone. ``debug_checks`` re-verifies the
    similarity-matrix and mined-triple invariants on every step.
    """
    cfg = model.cfg
    grid = patchify(frames, cfg.patch)
    token_grid = model.embedder(grid)
    n_t, n_s = cfg.n_t, cfg.n_s

    mask_rng = _step_rng(seed, 1)
    if mask_mode == "uniform_frame":
        plan = sample_uniform_frame_mask(n_t, n_s, mask_ratio, mask_rng)
    elif mask_mode == "random":
        if enable_contrastive:
            raise ValueError("contrastive training requires uniform_frame masking")
        plan = sample_random_mask(n_t, n_s, mask_ratio, mask_rng)
    else:
        raise ValueError(f"unsupported training mask mode {mask_mode!r}")

    visible = apply_mask(token_grid, plan)
    latents = model.encode(visible)
    pred = model.reconstruct(latents, plan)
    l_r = reconstruction_loss(pred, grid.patches.detach(), plan)

    l_c = torch.zeros((), dtype=l_r.dtype)
    triplet_count = 0
    skipped = 0
    if enable_contrastive and n_t >= 3:
        with torch.no_grad():
            z_pass1 = model.project_frames(latents)
            sim = self_similarity(z_pass1)
        mined = mine_triplets(sim, adjacency_window, _step_rng(seed, 2))
        skipped = mined.skipped_anchors
        if debug_checks:
            assert np.array_equal(sim.S, sim.S.T), "similarity matrix not symmetric"
            assert np.array_equal(np.diag(sim.S), np.zeros(n_t)), "nonzero diagonal"
            for a, p, q in mined.triples:
                thr = mined.thres_per_anchor[a]
                assert sim.S[a, p] < thr <= sim.S[a, q], "triple violates threshold"
                assert abs(a - q) > adjacency_window, "negative inside adjacency window"
                assert p != a and q != a
        if mined.triples:
            # One consistent-mask pass per triple; identical visible counts
            # let all passes run batched.
            visibles_c = [
                apply_mask(token_grid, replicate_mask_rows(plan, a, (p, q)))
                for a, p, q in mined.triples
            ]
            latents_c = model.encode_batch(visibles_c)
            if detach_encoder_for_contrastive:
                for lat in latents_c:
                    lat.latents = lat.latents.detach()
            z_trip = model.project_groups_batch(latents_c, mined.triples)
            terms = []
            d_ap_values = []
            for b in range(z_trip.shape[0]):
                zu = _unit_rows(z_trip[b])
                d_ap = torch.linalg.vector_norm(zu[0] - zu[1])
                d_an = torch.linalg.vector_norm(zu[0] - zu[2])
                terms.append(torch.clamp(d_ap - d_an + alpha, min=0.0))
                d_ap_values.append(float(d_ap.detach()))
            l_c = torch.stack(terms).mean()
            triplet_count = len(mined.triples)
            if debug_checks:
                lc = float(l_c.detach())
                assert 0.0 <= lc <= alpha + max(d_ap_values) + 1e-9, "L_c out of bounds"

    loss = l_r + l_c
    report = LossReport(
        L_r=float(l_r.detach()),
        L_c=float(l_c.detach()),
        L_total=float(l_r.detach()) + float(l_c.detach()),
        masked_patch_count=plan.n_masked,
        triplet_count=triplet_count,
        skipped_anchors=skipped,
    )
    return report, loss


def similarity_phase_means(
    S: SimilarityMatrix | np.ndarray, groups_per_cycle: int
) -> tuple[float, float]:
    """Mean distance at in-phase lags vs anti-phase lags.

    A lag L is in-phase when it is a positive multiple of groups_per_cycle
    and anti-phase when it lands half a cycle off. Requires an even
    groups_per_cycle >= 2 and a matrix large enough to contain both kinds.
    """
    s = S.S if isinstance(S, SimilarityMatrix) else np.asarray(S)
    n = s.shape[0]
    if groups_per_cycle < 2 or groups_per_cycle % 2 != 0:
        raise ValueError(f"groups_per_cycle must be even and >= 2, got {groups_per_cycle}")
    half = groups_per_cycle // 2
    in_vals: list[float] = []
    anti_vals: list[float] = []
    for lag in range(1, n):
        vals = [float(s[i, i + lag]) for i in range(n - lag)]
        if lag % groups_per_cycle == 0:
            in_vals.extend(vals)
        elif lag % groups_per_cycle == half:
            anti_vals.extend(vals)
    if not in_vals or not anti_vals:
        raise ValueError(
            f"matrix of size {n} has no complete in-phase/anti-phase lag pair "
            f"for groups_per_cycle={groups_per_cycle}"
        )
    return float(np.mean(in_vals)), float(np.mean(anti_vals))
