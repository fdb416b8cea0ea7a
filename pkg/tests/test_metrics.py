import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from densetrf.metrics import (
    HD_UNDEFINED,
    MetricReport,
    aggregate_runs,
    dice,
    evaluate_masks,
    hausdorff,
    iou,
)

from oracles import hausdorff_bruteforce


def mask(shape, pixels):
    m = np.zeros(shape, dtype=bool)
    for p in pixels:
        m[p] = True
    return m


def test_closed_form_overlap():
    a = mask((3, 3), [(0, 0), (0, 1)])
    b = mask((3, 3), [(0, 1), (0, 2)])
    assert dice(a, b) == 0.5
    assert iou(a, b) == 1 / 3


def test_identity_and_disjoint():
    a = mask((4, 4), [(1, 1), (2, 3)])
    assert dice(a, a) == 1.0 and iou(a, a) == 1.0 and hausdorff(a, a) == 0.0
    b = mask((4, 4), [(0, 0)])
    assert dice(a, b) == 0.0 and iou(a, b) == 0.0


def test_empty_conventions():
    empty = np.zeros((5, 5), bool)
    one = mask((5, 5), [(2, 2)])
    assert dice(empty, empty) == 1.0 and iou(empty, empty) == 1.0
    assert dice(one, empty) == 0.0 and iou(empty, one) == 0.0
    assert math.isnan(hausdorff(empty, one)) and math.isnan(hausdorff(empty, empty))
    assert math.isnan(HD_UNDEFINED)


def test_hausdorff_three_four_five():
    assert hausdorff(mask((5, 5), [(0, 0)]), mask((5, 5), [(3, 4)])) == 5.0


def test_shape_mismatch():
    for fn in (dice, iou, hausdorff):
        with pytest.raises(ValueError):
            fn(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


def test_dice_iou_identity_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.random((2, 8, 8)) < rng.random()
        d, j = dice(a, b), iou(a, b)
        assert abs(d - 2 * j / (1 + j)) <= 1e-12


def test_hausdorff_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(50):
        h, w = rng.integers(1, 17, size=2)
        a = rng.random((h, w)) < 0.3
        b = rng.random((h, w)) < 0.3
        got, want = hausdorff(a, b), hausdorff_bruteforce(a, b)
        if math.isnan(want):
            assert math.isnan(got)
        else:
            assert got == want


def test_aggregate_closed_form():
    agg = aggregate_runs([{"dice": 0.7}, {"dice": 0.8}])
    assert agg.mean["dice"] == pytest.approx(0.75, abs=1e-15)
    assert agg.std["dice"] == pytest.approx(math.sqrt(0.005), abs=1e-12)
    assert agg.n == 2 and not agg.single_run


def test_aggregate_single_run():
    agg = aggregate_runs([{"dice": 0.4, "hd": 3.0}])
    assert agg.std == {"dice": 0.0, "hd": 0.0}
    assert agg.single_run


def test_aggregate_matches_scratch_formula():
    rng = np.random.default_rng(2)
    vals = rng.random((5, 3))
    agg = aggregate_runs([dict(zip("abc", row)) for row in vals])
    for i, key in enumerate("abc"):
        col = vals[:, i]
        mu = sum(col) / 5
        sd = math.sqrt(sum((v - mu) ** 2 for v in col) / 4)
        assert abs(agg.mean[key] - mu) <= 1e-12
        assert abs(agg.std[key] - sd) <= 1e-12


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_aggregate_skips_undefined_hd():
    agg = aggregate_runs([{"hd": 2.0}, {"hd": math.nan}, {"hd": 4.0}])
    assert agg.mean["hd"] == 3.0


def test_evaluate_masks_excludes_undefined_hd(caplog):
    gt = np.zeros((2, 4, 4, 2), bool)
    gt[0, 0, 0, 0] = gt[1, 3, 3, 0] = True
    gt[0, 1, 1, 1] = True  # class 1 empty in sample 1
    pred = gt.copy()
    with caplog.at_level(logging.DEBUG, logger="densetrf.metrics"):
        rep = evaluate_masks(pred, gt)
    assert rep.dice == [1.0, 1.0] and rep.iou == [1.0, 1.0]
    assert rep.hd == [0.0, 0.0]
    assert rep.hd_undefined == 1
    assert "undefined" in caplog.text


def test_report_means():
    rep = MetricReport(dice=[0.5, 1.0], iou=[0.25, 1.0], hd=[2.0, math.nan])
    assert rep.mean_dice == 0.75 and rep.mean_iou == 0.625 and rep.mean_hd == 2.0


masks = st.integers(1, 10).flatmap(
    lambda n: st.tuples(arrays(bool, (n, n)), arrays(bool, (n, n)))
)


@settings(max_examples=60, deadline=None)
@given(masks)
def test_symmetry(pair):
    a, b = pair
    assert dice(a, b) == dice(b, a)
    assert iou(a, b) == iou(b, a)
    ha, hb = hausdorff(a, b), hausdorff(b, a)
    assert (math.isnan(ha) and math.isnan(hb)) or ha == hb


@settings(max_examples=60, deadline=None)
@given(masks, st.data())
def test_adding_correct_pixel_is_monotone(pair, data):
    pred, gt = pair
    missed = np.argwhere(gt & ~pred)
    if len(missed) == 0:
        return
    y, x = missed[data.draw(st.integers(0, len(missed) - 1))]
    better = pred.copy()
    better[y, x] = True
    assert dice(better, gt) >= dice(pred, gt)
    assert iou(better, gt) >= iou(pred, gt)


@settings(max_examples=60, deadline=None)
@given(masks)
def test_ranges(pair):
    a, b = pair
    assert 0.0 <= dice(a, b) <= 1.0
    assert 0.0 <= iou(a, b) <= 1.0
