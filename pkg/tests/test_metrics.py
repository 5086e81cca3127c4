import numpy as np
import pytest
from hypothesis import given, strategies as st

from jointface.boxes import BBox
from jointface.errors import NoGroundTruth, ShapeMismatch
from jointface.metrics import (attribute_csv, attribute_report, format_attribute_table, match_detections, pr_csv,
                               pr_curve, pr_svg)

from oracles import greedy_match, pr_auc, random_boxes


def test_match_examples():
    g = [BBox(0, 0, 10, 10)]
    assert [m.tp for m in match_detections([(BBox(0, 0, 10, 10), 0.9)], g).matches] == [True]
    r = match_detections([(BBox(0, 0, 10, 10), 0.6), (BBox(0, 0, 10, 10), 0.9)], g)
    assert [(m.index, m.tp) for m in r.matches] == [(1, True), (0, False)]
    assert r.unmatched_gt == 0


def test_match_threshold_is_strict():
    # IoU exactly 0.5: 10x10 gt vs 10x5 pred inside it
    r = match_detections([(BBox(0, 0, 10, 5), 1.0)], [BBox(0, 0, 10, 10)], 0.5)
    assert not r.matches[0].tp and r.unmatched_gt == 1


def test_match_staggered_four():
    gts = [BBox(0, 0, 10, 10), BBox(6, 0, 16, 10)]
    preds = [(BBox(3, 0, 13, 10), 0.9), (BBox(0, 0, 10, 10), 0.8), (BBox(6, 0, 16, 10), 0.7), (BBox(1, 0, 11, 10), 0.6)]
    r = match_detections(preds, gts, 0.3)
    oracle = greedy_match([p[0].as_array() for p in preds], [p[1] for p in preds], [g.as_array() for g in gts], 0.3)
    assert [(m.index, m.tp) for m in r.matches] == oracle


def test_match_oracle_random(rng):
    for _ in range(1000):
        np_, ng = int(rng.integers(0, 8)), int(rng.integers(0, 6))
        preds, gts = random_boxes(rng, np_, 30), random_boxes(rng, ng, 30)
        scores = np.round(rng.random(np_), 1)
        t = float(rng.choice([0.1, 0.3, 0.5]))
        r = match_detections((preds, scores), gts, t)
        assert [(m.index, m.tp) for m in r.matches] == greedy_match(preds, scores, gts, t)
        assert r.tp <= min(np_, ng)
        assert r.unmatched_gt == ng - r.tp


def _result(flags, scores=None, n_gt=None):
    from jointface.metrics import Match, MatchResult
    scores = scores or [1.0 - 0.1 * i for i in range(len(flags))]
    return MatchResult([Match(i, s, f) for i, (s, f) in enumerate(zip(scores, flags))], n_gt, 0)


def test_pr_examples():
    assert pr_curve(_result([True, True], n_gt=2)).auc == 1.0
    assert pr_curve(_result([False, False], n_gt=2)).auc == 0.0
    c = pr_curve(_result([True, False, True], n_gt=2))
    assert c.points == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    # envelope (1, 2/3, 2/3): 0.5 * 1 + 0.5 * (2/3 + 2/3) / 2
    assert c.auc == pytest.approx(0.5 + 1 / 3, abs=1e-12)
    with pytest.raises(NoGroundTruth):
        pr_curve(_result([True], n_gt=0))


def test_pr_oracle_random(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        flags = (rng.random(n) < 0.6).tolist()
        scores = np.round(rng.random(n), 1).tolist()
        n_gt = sum(flags) + int(rng.integers(0, 3)) or 1
        c = pr_curve(_result(flags, scores, n_gt))
        assert c.auc == pytest.approx(pr_auc(scores, flags, n_gt), abs=1e-9)
        assert np.all(np.diff(c.recall) >= 0)
        assert 0.0 <= c.auc <= 1.0


@given(st.lists(st.tuples(st.integers(0, 100), st.booleans()), min_size=1, max_size=15))
def test_auc_invariant_under_monotone_rescaling(items):
    scores = [s / 100 for s, _ in items]
    flags = [f for _, f in items]
    a = pr_curve(_result(flags, scores, len(flags))).auc
    b = pr_curve(_result(flags, [np.exp(3 * s) - 7 for s in scores], len(flags))).auc
    assert a == pytest.approx(b, abs=1e-12)


def test_attribute_report_examples():
    y = np.ones((10, 3), dtype=int)
    assert attribute_report(y, y).mean_error == 0.0
    p = y.copy()
    p[:1, 0] = -1
    p[:2, 1] = -1
    r = attribute_report(p, y)
    assert np.allclose(r.per_attribute_error, [0.1, 0.2, 0.0]) and r.mean_error == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        attribute_report(p[:, :2], y)


@given(st.integers(0, 1000))
def test_attribute_report_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, y = rng.choice([-1, 1], (20, 6)), rng.choice([-1, 1], (20, 6))
    perm = rng.permutation(6)
    a, b = attribute_report(p, y), attribute_report(p[:, perm], y[:, perm])
    assert abs(a.mean_error - b.mean_error) < 1e-12
    assert abs(a.mean_error - a.per_attribute_error.mean()) < 1e-12


def test_report_writers():
    r = attribute_report(np.array([[1, -1]]), np.array([[1, 1]]), ["a", "b"])
    assert attribute_csv({"joint": r}).splitlines() == ["attribute,joint", "a,0.000000", "b,1.000000",
                                                        "mean_error,0.500000"]
    assert "mean_error" in format_attribute_table({"joint": r, "cropped": r})
    c = pr_curve(_result([True, False], n_gt=1))
    assert pr_csv(c).splitlines()[0] == "threshold,recall,precision"
    svg = pr_svg(c)
    assert svg.startswith("<svg") and "<polyline" in svg
