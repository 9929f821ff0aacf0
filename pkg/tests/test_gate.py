import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eedet.cost import count_macs
from eedet.detection import postprocess
from eedet.gate import (best_operating_point, default_tau_grid, gated_inference, model_anchors, optimize_threshold,
                        pareto_front, read_sweep_csv, score_dataset, threshold_sweep, write_sweep_csv)
from eedet.metrics import ee_classification_metrics

from conftest import tiny_model


def _force_p(model, p):
    logit = np.log(p / (1 - p))
    model.forward_branch = lambda feat: np.array([[0.0, logit]] * len(feat))


def _image(model, seed=0):
    h, w, c = model.backbone_cfg.input_shape
    return np.random.default_rng(seed).random((c, h, w)).astype(np.float32)


def test_skip_at_boundary_example():
    m = tiny_model()
    _force_p(m, 0.70)
    m.eval_counts.clear()
    d = gated_inference(m, _image(m), 0.685)
    assert d.skipped and d.output == []
    assert d.p_empty == pytest.approx(0.70)
    assert not any(k.startswith("head") for k in m.eval_counts)
    assert all(m.eval_counts.get(f"layer{i}", 0) == 0 for i in range(m.attach_layer + 1, m.num_layers + 1))


def test_below_threshold_runs_full_pipeline_once():
    m = tiny_model()
    _force_p(m, 0.49)
    m.eval_counts.clear()
    d = gated_inference(m, _image(m), 0.5)
    assert not d.skipped
    assert all(m.eval_counts[f"layer{i}"] == 1 for i in range(1, m.num_layers + 1))
    assert m.eval_counts["stem"] == 1


@pytest.mark.parametrize("seed", range(3))
def test_tau_one_matches_static_output(seed):
    m = tiny_model(seed=seed)
    img = _image(m, seed)
    d = gated_inference(m, img, 1.0)
    assert not d.skipped
    cls, loc, _ = m.forward_full(img[None])
    ref = postprocess(cls[0], loc[0], model_anchors(m))
    assert d.output == ref


def test_gate_errors():
    m = tiny_model()
    for bad in (0.49, 1.01):
        with pytest.raises(ValueError):
            gated_inference(m, _image(m), bad)
    with pytest.raises(ValueError):
        gated_inference(tiny_model(attach=None), _image(m), 0.7)


def _grid_best(scores, labels):
    return max(np.mean((scores >= (500 + k) / 1000) == labels) for k in range(501))


def test_ten_hand_fixed_scores():
    s = np.array([0.95, 0.91, 0.62, 0.55, 0.80, 0.30, 0.72, 0.51, 0.10, 0.66])
    y = np.array([1, 1, 0, 1, 1, 0, 0, 0, 0, 1], bool)
    tau, acc = optimize_threshold(s, y)
    assert acc == pytest.approx(_grid_best(s, y))
    assert np.mean((s >= tau) == y) == acc
    # plateau between 0.721 and 0.800 all reach 0.8; larger tau wins
    assert acc == pytest.approx(0.8) and tau == 0.8


@pytest.mark.parametrize("seed", range(50))
def test_matches_exhaustive_grid(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(5, 80))
    y = r.random(n) < 0.4
    y[0], y[1] = True, False
    s = np.clip(np.where(y, r.normal(0.75, 0.15, n), r.normal(0.45, 0.2, n)), 0, 1)
    if seed % 5 == 0:
        s = np.round(s, 3)  # scores exactly on grid points
    tau, acc = optimize_threshold(s, y)
    assert 0.5 <= tau <= 1.0
    assert acc >= _grid_best(s, y) - 1e-9
    best = [k for k in range(501) if np.mean((s >= (500 + k) / 1000) == y) == acc]
    assert tau == (500 + max(best)) / 1000


def test_separable_scores():
    s = np.array([0.95, 0.9, 0.92, 0.1, 0.05, 0.0])
    y = np.array([1, 1, 1, 0, 0, 0], bool)
    tau, acc = optimize_threshold(s, y)
    assert acc == 1.0 and 0.1 < tau <= 0.9


def test_single_class_rejected():
    with pytest.raises(ValueError):
        optimize_threshold([0.7, 0.8], [1, 1])
    with pytest.raises(ValueError):
        optimize_threshold([0.7, 0.8], [0, 0])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=30),
       st.floats(0.5, 1), st.floats(0.5, 1))
def test_fpr_and_skip_nest(pairs, t1, t2):
    s = np.array([p for p, _ in pairs])
    y = np.array([b for _, b in pairs])
    lo, hi = sorted((t1, t2))
    _, fpr_lo, skip_lo = ee_classification_metrics(s, y, lo)
    _, fpr_hi, skip_hi = ee_classification_metrics(s, y, hi)
    assert fpr_hi <= fpr_lo and skip_hi <= skip_lo
    assert set(np.nonzero(s >= hi)[0]) <= set(np.nonzero(s >= lo)[0])


def test_tau_one_never_skips_metrics():
    acc, fpr, skip = ee_classification_metrics([0.2, 0.99], [0, 1], 1.0)
    assert skip == 0 and fpr == 0 and acc == 0.5


@pytest.fixture(scope="module")
def swept(tiny_data):
    m = tiny_model()
    test = tiny_data["test"]
    m.eval_counts.clear()
    cache = score_dataset(m, test)
    counts = dict(m.eval_counts)
    pts = threshold_sweep(m, test, cache=cache)
    return m, test, cache, counts, pts


def test_sweep_single_pass_and_monotone(swept):
    m, test, cache, counts, pts = swept
    assert len(pts) == 50 and [p.tau for p in pts] == default_tau_grid()
    assert counts["stem"] == len(test) and counts["ee"] == len(test)
    assert counts[f"layer{m.num_layers}"] == len(test)
    assert all(a.skip_rate >= b.skip_rate for a, b in itertools.pairwise(pts))
    assert all(a.mac_avg <= b.mac_avg for a, b in itertools.pairwise(pts))
    cost = count_macs(m)
    assert all(cost.mac_ee <= p.mac_avg <= cost.mac_full for p in pts)


def test_sweep_csv_round_trip(swept, tmp_path):
    pts = swept[4]
    write_sweep_csv(pts, tmp_path / "s.csv")
    assert read_sweep_csv(tmp_path / "s.csv") == pts
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "tau,map,skip_rate,ee_accuracy,mac_avg"


def test_sweep_rejects_out_of_range(swept):
    m, test, cache, _, _ = swept
    with pytest.raises(ValueError):
        threshold_sweep(m, test, taus=[0.995], cache=cache)


def test_static_output_equivalence(swept):
    m, test, cache, _, _ = swept
    anchors = model_anchors(m)
    for i in range(len(test)):
        cls, loc, _ = m.forward_full(test.tensor(slice(i, i + 1)))
        static = postprocess(cls[0], loc[0], anchors)
        assert cache.detections[i] == static
        d = gated_inference(m, test.tensor(slice(i, i + 1)), 1.0, anchors)
        assert d.output == static


def test_operating_point_and_pareto(swept):
    pts = swept[4]
    j, p = best_operating_point(pts, 0.5, 0.4)
    assert j == pytest.approx(0.2 * max(q.ee_accuracy for q in pts))
    assert p.ee_accuracy == max(q.ee_accuracy for q in pts)
    front = pareto_front(pts)
    assert front
    for f in front:
        assert not any(q.map > f.map and q.mac_avg < f.mac_avg for q in pts)
