import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from occrender.grid import GridGeometry, LabelGrid, SemanticSchema, VisibilityMask
from occrender.metrics import iou

GEO = GridGeometry((4, 4, 2), (0, 0, 0), 0.4)
SCHEMA = SemanticSchema(("a", "b", "c"))


def grid(ids):
    return LabelGrid(GEO, SCHEMA, ids)


def test_identity_is_perfect():
    ids = np.random.default_rng(0).integers(0, 4, GEO.dims)
    r = iou(grid(ids), grid(ids))
    assert np.all(r.iou[r.defined] == 1.0) and r.miou == 1.0


def test_disjoint_class_scores_zero():
    gt = np.full(GEO.dims, 3)
    pred = np.full(GEO.dims, 3)
    gt[0] = 0
    pred[1] = 0
    r = iou(grid(pred), grid(gt))
    assert r.iou[0] == 0.0
    assert math.isnan(r.iou[1]) and math.isnan(r.iou[2])
    assert r.miou == 0.0


def test_half_overlap_counts():
    gt = np.full(GEO.dims, 3)
    pred = np.full(GEO.dims, 3)
    gt.reshape(-1)[:8] = 1
    pred.reshape(-1)[4:12] = 1
    r = iou(grid(pred), grid(gt))
    assert (r.tp[1], r.fp[1], r.fn[1]) == (4, 4, 4)
    assert r.iou[1] == pytest.approx(4 / 12, abs=1e-15)
    assert r.miou == pytest.approx(1 / 3, abs=1e-15)


def brute_iou(pred, gt, mask, k):
    out = []
    for c in range(k):
        tp = fp = fn = 0
        for p, g, m in zip(pred.reshape(-1), gt.reshape(-1), mask.reshape(-1)):
            if not m:
                continue
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        out.append(tp / (tp + fp + fn) if tp + fp + fn else math.nan)
    return out


@settings(max_examples=50)
@given(st.integers(0, 100_000))
def test_matches_brute_force_counts(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, GEO.dims)
    gt = rng.integers(0, 4, GEO.dims)
    mask = rng.random(GEO.dims) > 0.3
    if not mask.any():
        mask[0, 0, 0] = True
    r = iou(grid(pred), grid(gt), VisibilityMask(GEO, mask))
    ref = brute_iou(pred, gt, mask, 3)
    assert np.allclose(r.iou, ref, equal_nan=True, atol=1e-15)
    defined = [x for x in ref if not math.isnan(x)]
    if defined:
        assert r.miou == pytest.approx(np.mean(defined), abs=1e-15)


@settings(max_examples=25)
@given(st.integers(0, 100_000), st.permutations([0, 1, 2]))
def test_class_permutation_permutes_report(seed, perm):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 4, GEO.dims)
    gt = rng.integers(0, 4, GEO.dims)
    lut = np.array(list(perm) + [3])
    a = iou(grid(pred), grid(gt))
    b = iou(grid(lut[pred]), grid(lut[gt]))
    assert np.allclose(b.iou[lut[:3]], a.iou, equal_nan=True)


def test_all_true_mask_equals_unmasked():
    rng = np.random.default_rng(5)
    pred, gt = rng.integers(0, 4, GEO.dims), rng.integers(0, 4, GEO.dims)
    a = iou(grid(pred), grid(gt))
    b = iou(grid(pred), grid(gt), VisibilityMask(GEO, np.ones(GEO.dims, bool)))
    assert np.array_equal(a.iou, b.iou, equal_nan=True) and a.miou == b.miou


def test_errors_outside_mask_are_ignored():
    gt = np.full(GEO.dims, 3)
    gt.reshape(-1)[:8] = 1
    pred = np.full(GEO.dims, 3)
    pred.reshape(-1)[:4] = 1
    pred.reshape(-1)[8:12] = 1  # wrong voxels
    mask = np.ones(GEO.dims, bool)
    mask.reshape(-1)[4:12] = False
    assert iou(grid(pred), grid(gt)).miou == pytest.approx(1 / 3, abs=1e-15)
    assert iou(grid(pred), grid(gt), VisibilityMask(GEO, mask)).miou == 1.0


def test_errors():
    ids = np.zeros(GEO.dims, dtype=int)
    with pytest.raises(ValueError):
        iou(grid(ids), grid(ids), VisibilityMask.none_visible(GEO))
    other = LabelGrid(GridGeometry((4, 4, 3), (0, 0, 0), 0.4), SCHEMA, np.zeros((4, 4, 3), int))
    with pytest.raises(ValueError):
        iou(grid(ids), other)


def test_report_formats():
    gt = np.full(GEO.dims, 3)
    gt[0] = 0
    r = iou(grid(gt), grid(gt))
    doc = r.to_json()
    assert doc["miou"] == 1.0
    assert doc["classes"][1]["iou"] is None
    table = r.to_table()
    assert table.splitlines()[1].split() == ["a", "100.00"]
    assert table.splitlines()[2].split() == ["b", "-"]
    assert table.splitlines()[-1].split() == ["mIoU", "100.00"]
