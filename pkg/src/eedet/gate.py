"""Early-exit gating at inference time, threshold selection and threshold sweeps."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .cost import average_macs, count_macs
from .detection import generate_anchors, postprocess
from .metrics import ee_classification_metrics, mean_average_precision
from .nn import softmax

TAU_MIN, TAU_MAX = 0.5, 1.0
GRID_STEP = 1e-3


@dataclass
class GateDecision:
    p_empty: float
    skipped: bool
    output: list


@dataclass
class SweepPoint:
    tau: float
    map: float
    skip_rate: float
    ee_accuracy: float
    mac_avg: float


def model_anchors(model):
    hc = model.head_cfg
    return generate_anchors(model.head_shapes(), hc.scales, hc.aspect_ratios)


def _check_tau(tau):
    if not TAU_MIN <= tau <= TAU_MAX:
        raise ValueError(f"tau must lie in [{TAU_MIN}, {TAU_MAX}], got {tau}")


def gated_inference(model, image, tau, anchors=None) -> GateDecision:
    """Run the prefix and branch; stop if P(empty) >= tau, else resume from the cached feature."""
    if model.branch is None:
        raise ValueError("gated inference needs a model with an early-exit branch")
    _check_tau(tau)
    x = np.asarray(image, np.float32)
    if x.ndim == 3:
        x = x[None]
    layer = model.attach_layer
    feat = model.forward_to_layer(x, layer)
    p = float(softmax(model.forward_branch(feat), axis=-1)[0, 1])
    if p >= tau:
        return GateDecision(p, True, [])
    cls, loc = model.forward_from_layer(feat, layer)
    anchors = model_anchors(model) if anchors is None else anchors
    return GateDecision(p, False, postprocess(cls[0], loc[0], anchors))


@dataclass
class ScoreCache:
    """Per-image branch scores and full-pipeline detections from a single pass."""
    p_empty: np.ndarray | None
    detections: list
    raw: tuple | None = None


def score_dataset(model, dataset, batch_size=32, keep_raw=False) -> ScoreCache:
    anchors = model_anchors(model)
    probs, dets, raw_cls, raw_loc = [], [], [], []
    layer = model.attach_layer
    for s in range(0, len(dataset), batch_size):
        x = dataset.tensor(slice(s, s + batch_size))
        if model.branch is not None:
            feat = model.forward_to_layer(x, layer)
            probs.append(softmax(model.forward_branch(feat), axis=-1)[:, 1])
            cls, loc = model.forward_from_layer(feat, layer)
        else:
            cls, loc, _ = model.forward_full(x)
        if keep_raw:
            raw_cls.append(cls)
            raw_loc.append(loc)
        dets.extend(postprocess(c, l, anchors) for c, l in zip(cls, loc))
    p = np.concatenate(probs).astype(np.float64) if probs else None
    raw = (np.concatenate(raw_cls), np.concatenate(raw_loc)) if keep_raw else None
    return ScoreCache(p, dets, raw)


# --------------------------------------------------------------------------
# threshold selection

def _grid_tau(k: int) -> float:
    return (500 + k) / 1000.0


def _accuracy(scores, labels, tau) -> float:
    return float(np.mean((scores >= tau) == labels))


def optimize_threshold(scores, labels, iterations=60):
    """Threshold in [0.5, 1] on the 1e-3 grid maximizing empty/non-empty accuracy.

    A ternary search over the grid gives a first estimate; accuracy is a step
    function of tau, so the result is then snapped to the best breakpoint:
    every constant piece between consecutive cached scores is represented by
    its largest grid tau and the best one wins. Ties go to the larger tau.
    Returns ``(tau, accuracy)``.
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("threshold search needs both empty and non-empty images")
    lo, hi = 0, 500
    for _ in range(iterations):
        if hi - lo < 3:
            break
        m1, m2 = lo + (hi - lo) // 3, hi - (hi - lo) // 3
        if _accuracy(scores, labels, _grid_tau(m1)) > _accuracy(scores, labels, _grid_tau(m2)):
            hi = m2
        else:
            lo = m1
    cands = set(range(lo, hi + 1)) | {500}
    for s in np.unique(scores[(scores >= TAU_MIN) & (scores <= TAU_MAX)]):
        k = int(np.floor(s * 1000 + 1e-9)) - 500
        while k < 500 and _grid_tau(k + 1) <= s:
            k += 1
        while k > 0 and _grid_tau(k) > s:
            k -= 1
        cands.add(max(0, min(500, k)))
    best_k, best_acc = None, -1.0
    for k in sorted(cands):
        a = _accuracy(scores, labels, _grid_tau(k))
        if a >= best_acc:
            best_k, best_acc = k, a
    return _grid_tau(best_k), best_acc


def optimize_model_threshold(model, dataset, batch_size=32, cache=None):
    cache = cache or score_dataset(model, dataset, batch_size)
    return optimize_threshold(cache.p_empty, dataset.empty_labels())


# --------------------------------------------------------------------------
# sweeps

def default_tau_grid():
    return [round(0.5 + 0.01 * i, 2) for i in range(50)]


def threshold_sweep(model, dataset, taus=None, cache=None, batch_size=32) -> list[SweepPoint]:
    """One SweepPoint per tau; model outputs are computed once and re-gated per tau."""
    taus = default_tau_grid() if taus is None else list(taus)
    for t in taus:
        if not 0.5 <= t <= 0.99 + 1e-12:
            raise ValueError("sweep taus must lie in [0.5, 0.99]")
    cache = cache or score_dataset(model, dataset, batch_size)
    cost = count_macs(model)
    y = dataset.empty_labels()
    gts = [dataset.gts(i) for i in range(len(dataset))]
    k = model.head_cfg.num_classes
    points = []
    for t in taus:
        skipped = cache.p_empty >= t
        gated = [[] if s else d for s, d in zip(skipped, cache.detections)]
        m, _, _ = mean_average_precision(gated, gts, k)
        acc, _, skip = ee_classification_metrics(cache.p_empty, y, t)
        points.append(SweepPoint(float(t), m, skip, acc, average_macs(cost.mac_full, cost.mac_ee, skip)))
    return points


SWEEP_COLUMNS = ["tau", "map", "skip_rate", "ee_accuracy", "mac_avg"]


def write_sweep_csv(points, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for p in points:
            w.writerow([repr(getattr(p, c)) for c in SWEEP_COLUMNS])


def read_sweep_csv(path) -> list[SweepPoint]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [SweepPoint(*(float(r[c]) for c in SWEEP_COLUMNS)) for r in rows]


def best_operating_point(points, map_baseline, savings_value):
    """Sweep point maximizing mAP_baseline * S * accuracy (ties: larger tau)."""
    best = None
    for p in points:
        j = map_baseline * savings_value * p.ee_accuracy
        if best is None or j >= best[0]:
            best = (j, p)
    return best


def pareto_front(points):
    """Points not dominated in (higher mAP, lower mac_avg)."""
    out = []
    for p in points:
        dominated = any((q.map >= p.map and q.mac_avg <= p.mac_avg) and (q.map > p.map or q.mac_avg < p.mac_avg)
                        for q in points)
        if not dominated:
            out.append(p)
    return out
