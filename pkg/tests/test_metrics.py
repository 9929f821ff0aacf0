import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eedet.detection import Detection, GroundTruthBox
from eedet.gate import ScoreCache, score_dataset
from eedet.metrics import average_precision, ee_classification_metrics, evaluate, iou, mean_average_precision, \
    report_from_cache

from conftest import tiny_model


def test_iou_examples():
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_iou_symmetric_bounded(v):
    a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1e-3, max(v[2], v[3]) + 1e-3)
    b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1e-3, max(v[6], v[7]) + 1e-3)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0 <= iou(a, b) <= 1


def test_ap_perfect_and_null():
    gts = {0: [(0, 0, 1, 1)], 1: [(0, 0, .5, .5)]}
    ap, tp, fp, n = average_precision([(0, .9, (0, 0, 1, 1)), (1, .8, (0, 0, .5, .5))], gts)
    assert (ap, tp, fp, n) == (1.0, 2, 0, 2)
    ap, *_ = average_precision([(0, .9, (.6, .6, .9, .9))], gts)
    assert ap == 0.0
    assert average_precision([], gts)[0] == 0.0
    assert average_precision([(0, .9, (0, 0, 1, 1))], {0: []})[0] is None


def test_ap_hand_oracle():
    # three detections, two GTs: ranks TP, FP, TP
    # precision at recall 0.5 is 1, at recall 1.0 is 2/3 -> AP = 0.5*1 + 0.5*2/3
    gts = {0: [(0, 0, .4, .4), (.5, .5, .9, .9)]}
    dets = [(0, .9, (0, 0, .4, .4)), (0, .8, (.1, .6, .2, .7)), (0, .7, (.5, .5, .9, .9))]
    ap, tp, fp, n = average_precision(dets, gts)
    assert ap == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert (tp, fp, n) == (2, 1, 2)


def test_duplicate_detection_is_false_positive():
    gts = {0: [(0, 0, .4, .4)]}
    ap, tp, fp, _ = average_precision([(0, .9, (0, 0, .4, .4)), (0, .8, (0, 0, .4, .4))], gts)
    assert (tp, fp) == (1, 1) and ap == 1.0


@settings(max_examples=40)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8, unique=True), st.integers(0, 10 ** 6))
def test_ap_invariant_to_monotone_score_transform(scores, seed):
    r = np.random.default_rng(seed)
    gts = {0: [(0, 0, .3, .3), (.5, .5, .8, .8)], 1: [(.2, .2, .6, .6)]}
    pool = [(0, (0, 0, .3, .3)), (0, (.5, .5, .8, .8)), (1, (.2, .2, .6, .6)), (1, (.7, .7, .9, .9))]
    dets = [(*pool[int(r.integers(len(pool)))], s) for s in scores]
    a = average_precision([(i, s, b) for i, b, s in dets], gts)
    b = average_precision([(i, s ** 3 + 1, b) for i, b, s in dets], gts)
    assert a == b


def test_confusion_counts_hand_case():
    gt = [[GroundTruthBox(1, (0, 0, .4, .4))], [GroundTruthBox(2, (.5, .5, .9, .9))], []]
    dets = [[Detection(1, .9, (0, 0, .4, .4))], [Detection(1, .8, (.5, .5, .9, .9))], [Detection(2, .5, (0, 0, .2, .2))]]
    m, per, counts = mean_average_precision(dets, gt, 3)
    assert counts[1] == {"tp": 1, "fp": 1, "fn": 0}
    assert counts[2] == {"tp": 0, "fp": 1, "fn": 1}
    assert per == {1: 1.0, 2: 0.0} and m == 0.5


def test_class_without_gt_excluded():
    gt = [[GroundTruthBox(1, (0, 0, .4, .4))]]
    m, per, _ = mean_average_precision([[Detection(1, .9, (0, 0, .4, .4))]], gt, 4)
    assert per == {1: 1.0} and m == 1.0


def test_ee_metrics_hand_case():
    acc, fpr, skip = ee_classification_metrics([0.9, 0.6, 0.3, 0.8], [1, 0, 0, 0], 0.7)
    assert acc == 0.75 and fpr == pytest.approx(1 / 3) and skip == 0.5


def test_inactive_gate_equals_no_ee(tiny_data):
    m = tiny_model()
    test = tiny_data["test"]
    cache = score_dataset(m, test)
    tau = float(min(1.0, max(0.5, cache.p_empty.max() + 1e-3)))
    if cache.p_empty.max() >= 1.0:
        pytest.skip("degenerate scores")
    rep = report_from_cache(cache, test, m.head_cfg.num_classes, tau)
    assert rep.skip_rate == 0 and rep.map == rep.map_no_ee


def test_static_model_eval_and_json(tiny_data):
    m = tiny_model(attach=None)
    rep = evaluate(m, tiny_data["test"])
    assert rep.tau is None and rep.map == rep.map_no_ee
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["metadata"]["interpolation"] == "all-point" and d["metadata"]["iou_threshold"] == 0.5


def test_skipped_images_contribute_nothing(tiny_data):
    test = tiny_data["test"]
    gts = [test.gts(i) for i in range(len(test))]
    perfect = [[Detection(g.class_id, 1.0, g.box) for g in gs] for gs in gts]
    cache = ScoreCache(np.where(test.empty_labels(), 0.95, 0.1), perfect)
    rep = report_from_cache(cache, test, 4, 0.9)
    assert rep.map == rep.map_no_ee == 1.0 and rep.ee_accuracy == 1.0
    cache = ScoreCache(np.full(len(test), 0.95), perfect)
    rep = report_from_cache(cache, test, 4, 0.9)
    assert rep.map == 0.0 and rep.skip_rate == 1.0


def test_evaluation_is_deterministic(tiny_data):
    a = evaluate(tiny_model(), tiny_data["test"], tau=0.7).to_dict()
    b = evaluate(tiny_model(), tiny_data["test"], tau=0.7).to_dict()
    assert a == b
