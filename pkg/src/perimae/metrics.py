"""Evaluation metrics: overlap (Dice, IoU), surface distances (HD95, ASSD),
AUROC, and classification scores.

Surface metrics use 4-connectivity boundaries (a foreground pixel with at
least one background 4-neighbor, counting pixels outside the array as
background) and exact Euclidean distance transforms. Volumetric inputs are
scored per frame and averaged, skipping frames where either mask is empty.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage


def overlap_metrics(
    pred_mask: np.ndarray, true_mask: np.ndarray, class_id: int
) -> tuple[float, float]:
    """(dice, iou) for one class; two empty masks count as perfect agreement."""
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    p = pred_mask == class_id
    g = true_mask == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0, 1.0
    inter = int((p & g).sum())
    union = np_ + ng - inter
    dice = 2.0 * inter / (np_ + ng)
    iou = inter / union if union else 1.0
    return float(dice), float(iou)


def _boundary(mask2d: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbor (image edge counts)."""
    m = np.asarray(mask2d, dtype=bool)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def _frame_surface_distances(
    pred2d: np.ndarray, true2d: np.ndarray, spacing: tuple[float, float]
) -> tuple[float, float] | None:
    bp = _boundary(pred2d)
    bt = _boundary(true2d)
    if not bp.any() or not bt.any():
        return None
    dist_to_true = ndimage.distance_transform_edt(~bt, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~bp, sampling=spacing)
    d_pt = dist_to_true[bp]
    d_tp = dist_to_pred[bt]
    pooled = np.concatenate([d_pt, d_tp])
    hd95 = float(np.percentile(pooled, 95))
    assd = float((d_pt.mean() + d_tp.mean()) / 2.0)
    return hd95, assd


def surface_metrics(
    pred_mask: np.ndarray,
    true_mask: np.ndarray,
    spacing: tuple[float, float] = (1.0, 1.0),
) -> tuple[float, float]:
    """(hd95, assd) between binary mask boundaries, in spacing units.

    2D inputs are scored directly; 3D (T, H, W) inputs are scored per frame
    then averaged. Frames where either boundary is empty are reported as
    missing and excluded from the average; if no frame is scorable the call
    is rejected.
    """
    pred_mask = np.asarray(pred_mask).astype(bool)
    true_mask = np.asarray(true_mask).astype(bool)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {true_mask.shape}")
    if pred_mask.ndim == 2:
        frames = [(pred_mask, true_mask)]
    elif pred_mask.ndim == 3:
        frames = [(pred_mask[i], true_mask[i]) for i in range(pred_mask.shape[0])]
    else:
        raise ValueError(f"masks must be 2D or 3D, got {pred_mask.ndim}D")
    hd_vals: list[float] = []
    assd_vals: list[float] = []
    for p2d, t2d in frames:
        result = _frame_surface_distances(p2d, t2d, spacing)
        if result is not None:
            hd_vals.append(result[0])
            assd_vals.append(result[1])
    if not hd_vals:
        raise ValueError("no frame has nonempty boundaries on both sides")
    return float(np.mean(hd_vals)), float(np.mean(assd_vals))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability a positive outscores a negative, with ties counted half.

    Computed as the Mann-Whitney statistic from midranks, so it is invariant
    under any strictly increasing transform of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = _midranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def classification_metrics(
    pred: np.ndarray, labels: np.ndarray
) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1).

    Binary problems score class 1 as the positive class; anything with more
    than two classes is macro-averaged over the classes observed in either
    array. Zero-division cases contribute 0 and raise a warning.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape or pred.ndim != 1:
        raise ValueError("pred and labels must be 1D arrays of equal length")
    if len(pred) == 0:
        raise ValueError("cannot score an empty prediction set")
    accuracy = float((pred == labels).mean())
    classes = np.unique(np.concatenate([labels, pred]))
    if set(classes.tolist()) <= {0, 1}:
        classes = np.array([1])
    precisions, recalls, f1s = [], [], []
    for c in classes:
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        if tp + fp == 0:
            warnings.warn(f"class {c}: no predicted positives, precision set to 0")
            prec = 0.0
        else:
            prec = tp / (tp + fp)
        if tp + fn == 0:
            warnings.warn(f"class {c}: no true positives, recall set to 0")
            rec = 0.0
        else:
            rec = tp / (tp + fn)
        if prec + rec == 0:
            f1 = 0.0
        else:
            f1 = 2 * prec * rec / (prec + rec)
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(f1)
    return (
        accuracy,
        float(np.mean(precisions)),
        float(np.mean(recalls)),
        float(np.mean(f1s)),
    )
