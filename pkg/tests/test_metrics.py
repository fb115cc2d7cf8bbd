import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from masf.errors import DataError
from masf.metrics import (
    IOU_THRESHOLDS,
    EvalReport,
    average_precision,
    evaluate,
    map_over_thresholds,
    match_predictions,
    mean_ap,
    pr_curve,
    precision_recall,
)
from masf.postproc import Detection, GroundTruth


def det(box, score, cls=0):
    return Detection(*box, cls, score)


def gt(box, cls=0):
    return GroundTruth(*box, cls)


# --------------------------------------------------------------------------- matching


def test_match_single_tp():
    flags = match_predictions([det((0, 0, 10, 10), 0.9)], [gt((1, 1, 10, 10))], 0.5)
    assert flags.tolist() == [True]


def test_match_second_cannot_rematch():
    d = [det((0, 0, 10, 10), 0.9), det((0, 0, 10, 9), 0.8)]
    assert match_predictions(d, [gt((0, 0, 10, 10))], 0.5).tolist() == [True, False]


@pytest.mark.parametrize("seed", range(30))
def test_match_equals_exhaustive(seed):
    rng = np.random.default_rng(seed)
    gb = rng.uniform(0, 40, (10, 2))
    gts = [gt((x, y, x + w, y + h)) for (x, y), (w, h) in zip(gb, rng.uniform(4, 15, (10, 2)))]
    dets = []
    for k in range(20):
        base = gts[rng.integers(10)].box
        jitter = rng.normal(0, 2, 4)
        b = (base[0] + jitter[0], base[1] + jitter[1], base[2] + abs(jitter[2]) + 1, base[3] + abs(jitter[3]) + 1)
        dets.append(det(b, float(rng.uniform())))
    dets.sort(key=lambda d: -d.score)
    thr = float(rng.choice(IOU_THRESHOLDS))
    ref = oracles.greedy_match_exhaustive([(d.box, 0, d.score) for d in dets],
                                          [(g.box, 0) for g in gts], thr)
    assert match_predictions(dets, gts, thr).tolist() == ref


# --------------------------------------------------------------------------- P / R


def test_pr_direct():
    p, r = precision_recall([True] * 9 + [False], 10)
    assert p == pytest.approx(0.9) and r == pytest.approx(0.9)


def test_pr_empty():
    assert precision_recall([], 5) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_pr_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    flags = rng.uniform(size=rng.integers(0, 40)) < 0.5
    n_gt = int(flags.sum()) + int(rng.integers(0, 5))
    assert precision_recall(flags, n_gt) == oracles.counting_pr(flags.tolist(), n_gt)


# --------------------------------------------------------------------------- AP


def test_ap_perfect():
    assert average_precision([True], 1) == 1.0


def test_ap_hand_case():
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_all_fp():
    assert average_precision([False] * 4, 3) == 0.0


def test_ap_no_gt_is_zero():
    assert average_precision([False, False], 0) == 0.0


def test_ap_eleven_point():
    # envelope: 1.0 up to recall 0.5, 2/3 up to 1.0
    expected = (6 * 1.0 + 5 * (2 / 3)) / 11
    assert average_precision([True, False, True], 2, "11_point") == pytest.approx(expected)


@pytest.mark.parametrize("seed", range(50))
def test_ap_discrete_oracle(seed):
    rng = np.random.default_rng(seed)
    flags = rng.uniform(size=rng.integers(1, 60)) < rng.uniform(0.1, 0.9)
    n_gt = int(flags.sum()) + int(rng.integers(0, 6))
    assert abs(average_precision(flags, n_gt) - oracles.ap_discrete(flags.tolist(), n_gt)) < 1e-9


def test_pr_curve_points():
    c = pr_curve([True, False, True], 2)
    assert c.points == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]


# --------------------------------------------------------------------------- mAP


def test_mean_ap_simple():
    assert mean_ap({0: 0.4, 1: 0.6}) == pytest.approx(0.5)


def test_threshold_grid():
    assert len(IOU_THRESHOLDS) == 10
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95
    np.testing.assert_allclose(np.diff(IOU_THRESHOLDS), 0.05)


def test_perfect_predictions():
    gts = {"a": [gt((0, 0, 5, 5), 0), gt((10, 10, 20, 30), 1)], "b": [gt((3, 3, 9, 9), 1)]}
    preds = {k: [Detection(*g.box, g.class_id, 0.9) for g in v] for k, v in gts.items()}
    assert map_over_thresholds(preds, gts) == (1.0, 1.0)


def test_no_evaluable_classes():
    with pytest.raises(DataError, match="no evaluable classes"):
        evaluate({"a": [det((0, 0, 1, 1), 0.5)]}, {"a": []})


def test_class_without_gt_is_flagged_and_excluded():
    gts = {"a": [gt((0, 0, 5, 5), 0)]}
    preds = {"a": [det((0, 0, 5, 5), 0.9, 0), det((0, 0, 5, 5), 0.9, 2)]}
    r = evaluate(preds, gts)
    assert r.flagged_classes == [2]
    assert r.per_class_ap == {0: 1.0}


def _random_instance(rng, n_img=4):
    gts, preds = {}, {}
    for i in range(n_img):
        xy = rng.uniform(0, 60, (6, 2))
        g = [gt((x, y, x + w, y + h), int(c)) for (x, y), (w, h), c in
             zip(xy, rng.uniform(3, 15, (6, 2)), rng.integers(0, 3, 6))]
        d = []
        for item in g:
            for _ in range(rng.integers(0, 3)):
                j = rng.normal(0, 1.5, 4)
                d.append(Detection(item.x1 + j[0], item.y1 + j[1], item.x2 + abs(j[2]) + 0.5,
                                   item.y2 + abs(j[3]) + 0.5, item.class_id if rng.uniform() < 0.8 else 0,
                                   float(rng.uniform())))
        gts[i], preds[i] = g, d
    return preds, gts


@pytest.mark.parametrize("seed", range(20))
def test_map5095_not_above_map50(seed):
    preds, gts = _random_instance(np.random.default_rng(seed))
    m50, m5095 = map_over_thresholds(preds, gts)
    assert 0.0 <= m5095 <= m50 <= 1.0


@given(st.integers(0, 10_000))
def test_ap_rank_invariance(seed):
    rng = np.random.default_rng(seed)
    preds, gts = _random_instance(rng, 2)
    warped = {k: [Detection(*d.box, d.class_id, d.score ** 3 * 0.5) for d in v] for k, v in preds.items()}
    assert evaluate(preds, gts).per_class_ap == evaluate(warped, gts).per_class_ap


@pytest.mark.parametrize("seed", range(10))
def test_duplicate_tp_cannot_raise_ap(seed):
    rng = np.random.default_rng(seed)
    preds, gts = _random_instance(rng)
    g = gts[0][0]
    preds[0] = preds[0] + [Detection(*g.box, g.class_id, 1.0)]  # certain TP
    base = evaluate(preds, gts).per_class_ap
    preds[0] = preds[0] + [Detection(*g.box, g.class_id, float(rng.uniform(0, 1)))]
    dup = evaluate(preds, gts).per_class_ap
    assert all(dup[c] <= base[c] + 1e-12 for c in base)


def test_report_json_and_table():
    r = EvalReport({0: 0.5}, 0.5, 0.3, 0.8, 0.6, 1.2, 3.4)
    assert '"map50": 0.5' in r.to_json()
    lines = r.table().splitlines()
    assert lines[0].split("\t")[0].strip() == "P"
    assert "mAP50:95 (%)" in lines[0] and "50.0" in lines[1]
