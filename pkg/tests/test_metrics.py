import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perimae.metrics import (
    classification_metrics,
    overlap_metrics,
    roc_auc,
    surface_metrics,
)


# -- overlap -------------------------------------------------------------------


def test_dice_iou_identical_masks():
    m = np.zeros((10, 10), dtype=int)
    m[2:6, 2:6] = 1
    dice, iou = overlap_metrics(m, m, 1)
    assert dice == 1.0 and iou == 1.0


def test_dice_iou_disjoint_masks():
    a = np.zeros((10, 10), dtype=int)
    b = np.zeros((10, 10), dtype=int)
    a[0:2, 0:2] = 1
    b[5:7, 5:7] = 1
    dice, iou = overlap_metrics(a, b, 1)
    assert dice == 0.0 and iou == 0.0


def test_dice_iou_half_overlap_closed_form():
    # |P| = |G| = 100, |P n G| = 50 -> dice 0.5, iou 1/3
    a = np.zeros((20, 20), dtype=int)
    b = np.zeros((20, 20), dtype=int)
    a.flat[0:100] = 1
    b.flat[50:150] = 1
    dice, iou = overlap_metrics(a, b, 1)
    assert dice == pytest.approx(0.5, abs=1e-15)
    assert iou == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_dice_iou_both_empty_convention():
    z = np.zeros((5, 5), dtype=int)
    assert overlap_metrics(z, z, 1) == (1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), thresh_a=st.floats(0.2, 0.8), thresh_b=st.floats(0.2, 0.8))
def test_dice_iou_algebraic_relation(seed, thresh_a, thresh_b):
    rng = np.random.default_rng(seed)
    a = (rng.random((12, 12)) < thresh_a).astype(int)
    b = (rng.random((12, 12)) < thresh_b).astype(int)
    dice, iou = overlap_metrics(a, b, 1)
    assert iou <= dice + 1e-12
    assert dice <= 2 * iou / (1 + iou) + 1e-12


# -- surface -------------------------------------------------------------------


def test_surface_metrics_identical():
    m = np.zeros((12, 12), dtype=bool)
    m[3:8, 3:8] = True
    hd95, assd = surface_metrics(m, m)
    assert hd95 == 0.0 and assd == 0.0


def test_surface_metrics_parallel_translate_offset_three():
    a = np.zeros((12, 16), dtype=bool)
    b = np.zeros((12, 16), dtype=bool)
    a[4, 2:10] = True
    b[7, 2:10] = True
    hd95, assd = surface_metrics(a, b)
    assert hd95 == pytest.approx(3.0, abs=1e-12)
    assert assd == pytest.approx(3.0, abs=1e-12)


def test_surface_metrics_symmetric():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16)) < 0.3
    b = rng.random((16, 16)) < 0.3
    assert surface_metrics(a, b) == surface_metrics(b, a)


def test_surface_metrics_respects_spacing():
    a = np.zeros((12, 12), dtype=bool)
    b = np.zeros((12, 12), dtype=bool)
    a[4, 3:7] = True
    b[6, 3:7] = True
    hd95, assd = surface_metrics(a, b, spacing=(2.0, 1.0))
    assert hd95 == pytest.approx(4.0, abs=1e-12)
    assert assd == pytest.approx(4.0, abs=1e-12)


def test_surface_metrics_empty_rejected_and_frames_averaged():
    m = np.zeros((8, 8), dtype=bool)
    full = np.zeros((8, 8), dtype=bool)
    full[2:5, 2:5] = True
    with pytest.raises(ValueError):
        surface_metrics(m, full)
    # volumetric: frame 0 empty on one side (skipped), frame 1 offset by 2
    pred = np.zeros((2, 12, 12), dtype=bool)
    true = np.zeros((2, 12, 12), dtype=bool)
    true[0, 2:4, 2:4] = True
    pred[1, 4, 3:7] = True
    true[1, 6, 3:7] = True
    hd95, assd = surface_metrics(pred, true)
    assert hd95 == pytest.approx(2.0, abs=1e-12)
    assert assd == pytest.approx(2.0, abs=1e-12)


def _directed_hausdorff(a_pts, b_pts):
    best = 0.0
    for p in a_pts:
        d = min(np.hypot(p[0] - q[0], p[1] - q[1]) for q in b_pts)
        best = max(best, d)
    return best


def test_hd95_and_assd_bounded_by_exact_hausdorff():
    from perimae.metrics import _boundary

    rng = np.random.default_rng(7)
    for _ in range(10):
        a = rng.random((10, 10)) < 0.35
        b = rng.random((10, 10)) < 0.35
        if not (_boundary(a).any() and _boundary(b).any()):
            continue
        hd95, assd = surface_metrics(a, b)
        pa = np.argwhere(_boundary(a))
        pb = np.argwhere(_boundary(b))
        exact = max(_directed_hausdorff(pa, pb), _directed_hausdorff(pb, pa))
        assert hd95 <= exact + 1e-9
        assert assd <= exact + 1e-9


# -- auroc ---------------------------------------------------------------------


def test_roc_auc_perfect_separation():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    labels = np.array([0, 0, 1, 1])
    assert roc_auc(scores, labels) == 1.0


def test_roc_auc_all_ties():
    scores = np.full(6, 0.5)
    labels = np.array([0, 1, 0, 1, 0, 1])
    assert roc_auc(scores, labels) == 0.5


def test_roc_auc_four_point_closed_form():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])
    assert roc_auc(scores, labels) == pytest.approx(0.75, abs=1e-15)


def test_roc_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.random(50)
    labels = (rng.random(50) < 0.4).astype(int)
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(3 * scores) + 7, labels) == pytest.approx(base, abs=1e-12)
    assert roc_auc(np.tanh(scores - 0.5), labels) == pytest.approx(base, abs=1e-12)


def test_roc_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))


# -- classification ------------------------------------------------------------


def test_classification_metrics_perfect():
    y = np.array([0, 1, 1, 0, 1])
    assert classification_metrics(y, y) == (1.0, 1.0, 1.0, 1.0)


def test_classification_metrics_all_wrong_binary():
    pred = np.array([1, 0, 1, 0])
    labels = np.array([0, 1, 0, 1])
    acc, prec, rec, f1 = classification_metrics(pred, labels)
    assert acc == 0.0


def test_classification_metrics_half_right_confusion():
    pred = np.array([1, 1, 0, 0])
    labels = np.array([1, 0, 1, 0])
    acc, prec, rec, f1 = classification_metrics(pred, labels)
    assert (acc, prec, rec, f1) == (0.5, 0.5, 0.5, 0.5)


def test_classification_metrics_macro_multiclass():
    pred = np.array([0, 1, 2, 2])
    labels = np.array([0, 1, 1, 2])
    acc, prec, rec, f1 = classification_metrics(pred, labels)
    assert acc == 0.75
    # per class: 0 -> P=1, R=1; 1 -> P=1, R=0.5; 2 -> P=0.5, R=1
    assert prec == pytest.approx((1.0 + 1.0 + 0.5) / 3, abs=1e-12)
    assert rec == pytest.approx((1.0 + 0.5 + 1.0) / 3, abs=1e-12)


def test_classification_metrics_zero_division_warns():
    pred = np.array([0, 0, 0, 0])
    labels = np.array([0, 0, 1, 1])
    with pytest.warns(UserWarning):
        acc, prec, rec, f1 = classification_metrics(pred, labels)
    assert prec == 0.0 and rec == 0.0 and f1 == 0.0


def test_classification_metrics_empty_rejected():
    with pytest.raises(ValueError):
        classification_metrics(np.array([]), np.array([]))
