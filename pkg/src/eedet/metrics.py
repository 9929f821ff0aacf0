"""Detection AP/mAP (all-point interpolation, IoU 0.5) and early-exit classification metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

INTERPOLATION = "all-point"
AP_IOU = 0.5


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def average_precision(detections, gts, iou_thresh=AP_IOU):
    """AP for one class.

    detections: list of (image_id, score, box); gts: dict image_id -> list of boxes.
    Returns (ap, tp, fp, n_gt); ap is None when there is no ground truth.
    """
    n_gt = sum(len(v) for v in gts.values())
    dets = sorted(detections, key=lambda d: -d[1])
    used = {k: np.zeros(len(v), bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, (img, _, box) in enumerate(dets):
        cands = gts.get(img, [])
        best, best_j = 0.0, -1
        for j, g in enumerate(cands):
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best >= iou_thresh and not used[img][best_j]:
            tp[i] = 1
            used[img][best_j] = True
        else:
            fp[i] = 1
    if n_gt == 0:
        return None, int(tp.sum()), int(fp.sum()), 0
    if len(dets) == 0:
        return 0.0, 0, 0, n_gt
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return ap, int(tp.sum()), int(fp.sum()), n_gt


def mean_average_precision(dets_per_image, gts_per_image, num_classes, iou_thresh=AP_IOU):
    """dets_per_image: list of lists of Detection; gts_per_image: list of lists of GroundTruthBox.

    ``num_classes`` includes background. Returns (mAP, per-class AP dict, counts dict).
    """
    per_class, counts = {}, {}
    for c in range(1, num_classes):
        dets = [(i, d.score, d.box) for i, ds in enumerate(dets_per_image) for d in ds if d.class_id == c]
        gts = {i: [g.box for g in gs if g.class_id == c] for i, gs in enumerate(gts_per_image)}
        ap, tp, fp, n_gt = average_precision(dets, gts, iou_thresh)
        counts[c] = {"tp": tp, "fp": fp, "fn": n_gt - tp}
        if ap is not None:
            per_class[c] = ap
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return m, per_class, counts


def ee_classification_metrics(p_empty, y, tau):
    """(accuracy, false-positive rate, skip rate) of the rule ``p_empty >= tau``.

    A false positive is a non-empty image (y=0) predicted empty.
    """
    p = np.asarray(p_empty, np.float64)
    y = np.asarray(y).astype(bool)
    pred = p >= tau
    acc = float(np.mean(pred == y)) if len(y) else 0.0
    neg = ~y
    fpr = float(np.mean(pred[neg])) if neg.any() else 0.0
    skip = float(np.mean(pred)) if len(y) else 0.0
    return acc, fpr, skip


@dataclass
class EvalReport:
    map: float
    per_class_ap: dict
    counts: dict
    map_no_ee: float | None = None
    tau: float | None = None
    ee_accuracy: float | None = None
    ee_fpr: float | None = None
    skip_rate: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        d["metadata"] = {"interpolation": INTERPOLATION, "iou_threshold": AP_IOU, **self.metadata}
        return d


def evaluate(model, dataset, tau=None, cache=None, batch_size=32) -> EvalReport:
    """mAP with gating at ``tau`` (or without gating when ``tau`` is None).

    The gated report also carries ``map_no_ee`` so both columns come from one pass.
    """
    from .gate import score_dataset
    cache = cache or score_dataset(model, dataset, batch_size)
    return report_from_cache(cache, dataset, model.head_cfg.num_classes, tau)


def report_from_cache(cache, dataset, k, tau=None) -> EvalReport:
    """EvalReport from cached per-image scores and detections (``k`` includes background)."""
    gts = [dataset.gts(i) for i in range(len(dataset))]
    m_full, per_full, cnt_full = mean_average_precision(cache.detections, gts, k)
    if tau is None or cache.p_empty is None:
        return EvalReport(m_full, per_full, cnt_full, map_no_ee=m_full)
    skipped = cache.p_empty >= tau
    gated = [[] if s else d for s, d in zip(skipped, cache.detections)]
    m, per, cnt = mean_average_precision(gated, gts, k)
    acc, fpr, skip = ee_classification_metrics(cache.p_empty, dataset.empty_labels(), tau)
    return EvalReport(m, per, cnt, map_no_ee=m_full, tau=float(tau), ee_accuracy=acc, ee_fpr=fpr, skip_rate=skip)
