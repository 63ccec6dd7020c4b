import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sdedet import metrics as M
from sdedet.boxes import Detection, GroundTruthBox, iou
from sdedet.errors import DatasetError

from oracles import brute_evaluate
from synth import make_eval_set


def det(box, score, c=0):
    return Detection(tuple(float(v) for v in box), score, c)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------
def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


box = st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 10), st.floats(0, 10)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(box, box)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0 + 1e-12
    if a == b and (a[2] - a[0]) * (a[3] - a[1]) > 0:
        assert v == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# Matching, P/R, F1
# ---------------------------------------------------------------------------
def test_match_rule_traces():
    gt = [(0, 0, 10, 10)]
    m = M.match_detections([det((0, 0, 10, 6), 0.9)], gt, 0.5)
    assert m.counts == M.ConfusionCounts(1, 0, 0)
    m = M.match_detections([det((0, 0, 10, 4), 0.9)], gt, 0.5)
    assert m.counts == M.ConfusionCounts(0, 1, 1)
    m = M.match_detections([det((0, 0, 10, 9), 0.8), det((0, 0, 10, 10), 0.9)], gt, 0.5)
    assert m.tp == (True, False) and m.scores == (0.9, 0.8)


@given(st.lists(st.tuples(box, st.floats(0, 1)), max_size=8), st.lists(box, max_size=8), st.floats(0.1, 0.9))
def test_match_count_identities(dets, gts, thr):
    m = M.match_detections([Detection(b, s) for b, s in dets], gts, thr)
    c = m.counts
    assert c.tp + c.fn == len(gts) and c.tp + c.fp == len(dets)


def test_precision_recall_examples():
    assert M.precision_recall(M.ConfusionCounts(8, 2, 2)) == (0.8, 0.8)
    assert M.precision_recall(M.ConfusionCounts(0, 0, 3)) == (0.0, 0.0)
    assert M.precision_recall(M.ConfusionCounts(5, 0, 0)) == (1.0, 1.0)
    with pytest.raises(ValueError):
        M.ConfusionCounts(-1, 0, 0)


def test_f1_examples():
    assert M.f1(0.7, 0.7) == pytest.approx(0.7)
    assert M.f1(1.0, 0.0) == 0.0
    assert abs(M.f1(0.883, 0.771) - 0.823) <= 0.0005


@given(st.floats(1e-6, 1), st.floats(1e-6, 1))
def test_f1_between_min_and_max(p, r):
    v = M.f1(p, r)
    assert min(p, r) - 1e-12 <= v <= max(p, r) + 1e-12


# ---------------------------------------------------------------------------
# Curves and AP
# ---------------------------------------------------------------------------
GT2 = [(0, 0, 10, 10), (20, 20, 30, 30)]


def test_pr_curve_worked_example():
    dets = [det((0, 0, 10, 10), 0.9), det((50, 50, 60, 60), 0.8), det((20, 20, 30, 30), 0.7)]
    curve = M.pr_curve(dets, GT2, 0.5)
    assert curve.points == ((0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3))
    assert M.average_precision(curve) == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-12)


def test_pr_curve_extremes():
    all_tp = M.pr_curve([det(GT2[0], 0.9), det(GT2[1], 0.8)], GT2)
    assert [p for _, p in all_tp.points] == [1.0, 1.0] and all_tp.points[-1][0] == 1.0
    assert M.average_precision(all_tp) == 1.0
    all_fp = M.pr_curve([det((50, 50, 60, 60), 0.9)], GT2)
    assert all_fp.points == ((0.0, 0.0),)
    assert M.average_precision(M.PRCurve()) == 0.0


def test_pr_curve_validation():
    with pytest.raises(ValueError):
        M.PRCurve(((0.5, 1.0), (0.4, 1.0)))
    with pytest.raises(ValueError):
        M.PRCurve(((1.5, 1.0),))


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 5))
def test_envelope_non_increasing(flags, extra):
    n_gt = sum(flags) + extra
    env = M.precision_envelope(M.curve_from_flags(flags, n_gt))
    assert np.all(np.diff(env) <= 0)


@given(st.lists(st.booleans(), min_size=1, max_size=20), st.integers(0, 3), st.integers(0, 20))
def test_adding_a_true_positive_never_lowers_ap(flags, extra, pos):
    n_gt = sum(flags) + extra + 1
    before = M.average_precision(M.curve_from_flags(flags, n_gt))
    grown = list(flags)
    grown.insert(min(pos, len(grown)), True)
    assert M.average_precision(M.curve_from_flags(grown, n_gt)) >= before - 1e-12


@given(st.lists(st.tuples(box, st.floats(0.01, 0.99)), min_size=1, max_size=8), st.lists(box, min_size=1, max_size=6))
def test_ap_depends_on_rank_only(dets, gts):
    a = [Detection(b, s) for b, s in dets]
    b = [Detection(d.bbox, float(d.score) ** 3) for d in a]
    assert M.average_precision(M.pr_curve(a, gts)) == pytest.approx(M.average_precision(M.pr_curve(b, gts)))


def test_mean_ap_examples():
    assert M.mean_ap([0.4]) == 0.4
    assert M.mean_ap([0.3, 0.3, 0.3]) == pytest.approx(0.3)
    assert M.mean_ap([0.8, 0.6]) == pytest.approx(0.7)


def test_map_range_examples():
    gt = [GroundTruthBox((0, 0, 10, 10))]
    assert M.map_range([det((0, 0, 10, 10), 0.9)], gt) == 1.0
    assert M.map_range([det((0, 0, 10, 5.5), 0.9)], gt) == pytest.approx(0.2)
    assert M.map_range([], gt) == 0.0


# ---------------------------------------------------------------------------
# Dataset evaluation
# ---------------------------------------------------------------------------
def _write(d, name, text):
    d.mkdir(exist_ok=True)
    (d / name).write_text(text)


def test_perfect_predictions(tmp_path):
    _write(tmp_path / "gt", "a.txt", "0 0.5 0.5 0.2 0.2\n0 0.2 0.3 0.1 0.1\n")
    _write(tmp_path / "pred", "a.txt", "0 1.0 0.5 0.5 0.2 0.2\n0 1.0 0.2 0.3 0.1 0.1\n")
    r = M.evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert (r.precision, r.recall, r.f1, r.map50, r.map50_95) == (1.0, 1.0, 1.0, 1.0, 1.0)
    keys = json.loads(r.to_json())
    assert {"precision", "recall", "f1", "map50", "map50_95", "ap_per_threshold"} <= set(keys)


def test_empty_predictions(tmp_path):
    _write(tmp_path / "gt", "a.txt", "0 0.5 0.5 0.2 0.2\n")
    _write(tmp_path / "pred", "a.txt", "")
    r = M.evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert r.recall == 0.0 and r.map50 == 0.0 and r.map50_95 == 0.0 and r.precision == 0.0


def test_unpaired_file_is_named(tmp_path):
    _write(tmp_path / "gt", "a.txt", "")
    _write(tmp_path / "pred", "a.txt", "")
    _write(tmp_path / "pred", "lonely.txt", "")
    with pytest.raises(DatasetError, match="lonely"):
        M.evaluate_dataset(tmp_path / "pred", tmp_path / "gt")


def test_malformed_line_is_located(tmp_path):
    _write(tmp_path / "gt", "a.txt", "0 0.5 0.5 0.2\n")
    _write(tmp_path / "pred", "a.txt", "")
    with pytest.raises(DatasetError, match="a.txt:1"):
        M.evaluate_dataset(tmp_path / "pred", tmp_path / "gt")


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_oracle(tmp_path, seed):
    pred_dir, gt_dir = make_eval_set(tmp_path, seed)
    got = M.evaluate_dataset(pred_dir, gt_dir, conf=0.25)
    want = brute_evaluate(pred_dir, gt_dir, conf=0.25)
    for key in ("precision", "recall", "f1", "map50", "map50_95"):
        assert abs(getattr(got, key) - want[key]) <= 1e-9, key
    np.testing.assert_allclose(got.ap_per_threshold, want["ap_per_threshold"], atol=1e-9, rtol=0)
    assert 0 <= got.map50_95 <= got.map50 <= 1
