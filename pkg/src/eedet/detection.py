"""Anchors, box coding, matching, NMS and the training losses.

Boxes are normalized ``(xmin, ymin, xmax, ymax)`` unless stated otherwise;
anchors are ``(cx, cy, w, h)``. Class index 0 is background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import log_softmax, softmax

VARIANCES = (0.1, 0.1, 0.2, 0.2)
MATCH_IOU = 0.5
NEG_POS_RATIO = 3
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    box: tuple  # xmin, ymin, xmax, ymax (normalized)

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"invalid box {self.box}")
        if self.class_id < 1:
            raise ValueError("class 0 is reserved for background")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    w0: float = 1.0
    w1: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.w0 <= 0 or self.w1 <= 0:
            raise ValueError("need lam >= 0, w0 > 0, w1 > 0")


# --------------------------------------------------------------------------
# anchors and box arithmetic

def generate_anchors(head_shapes, scales, aspect_ratios) -> np.ndarray:
    """Anchor grid (A, 4) as (cx, cy, w, h), ordered head -> row -> col -> scale -> ratio."""
    out = []
    for (hf, wf), sc, ars in zip(head_shapes, scales, aspect_ratios):
        if hf <= 0 or wf <= 0:
            raise ValueError("feature map shape must be positive")
        if len(sc) == 0:
            raise ValueError("empty scale list")
        for j in range(hf):
            for i in range(wf):
                cx, cy = (i + 0.5) / wf, (j + 0.5) / hf
                for s in sc:
                    for r in ars:
                        out.append((cx, cy, s * np.sqrt(r), s / np.sqrt(r)))
    anchors = np.array(out, dtype=np.float64).reshape(-1, 4)
    corners = np.clip(center_to_corners(anchors), 0.0, 1.0)
    return corners_to_center(corners)


def center_to_corners(b):
    b = np.asarray(b, np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corners_to_center(b):
    b = np.asarray(b, np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def iou_matrix(a, b):
    """Pairwise IoU between corner boxes a (M,4) and b (N,4)."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode_boxes(gt_corners, anchors, variances=VARIANCES):
    """Center-size offsets of corner boxes relative to (cx, cy, w, h) anchors."""
    anchors = np.asarray(anchors, np.float64)
    if np.any(anchors[..., 2:] <= 0):
        raise ValueError("degenerate (zero-area) anchor")
    g = corners_to_center(gt_corners)
    t_xy = (g[..., :2] - anchors[..., :2]) / anchors[..., 2:] / np.array(variances[:2])
    t_wh = np.log(g[..., 2:] / anchors[..., 2:]) / np.array(variances[2:])
    return np.concatenate([t_xy, t_wh], axis=-1)


def decode_boxes(offsets, anchors, variances=VARIANCES):
    anchors = np.asarray(anchors, np.float64)
    if np.any(anchors[..., 2:] <= 0):
        raise ValueError("degenerate (zero-area) anchor")
    o = np.asarray(offsets, np.float64)
    xy = anchors[..., :2] + o[..., :2] * np.array(variances[:2]) * anchors[..., 2:]
    wh = anchors[..., 2:] * np.exp(np.clip(o[..., 2:] * np.array(variances[2:]), -10, 10))
    return center_to_corners(np.concatenate([xy, wh], axis=-1))


# --------------------------------------------------------------------------
# matching

@dataclass
class Assignment:
    labels: np.ndarray   # (A,) class id per anchor, 0 = background
    matched: np.ndarray  # (A,) index of matched GT or -1
    ious: np.ndarray     # (A,) IoU with the matched GT (best IoU for background)

    @property
    def num_positive(self) -> int:
        return int((self.labels > 0).sum())


def match_anchors(anchors, gts, iou_threshold=MATCH_IOU) -> Assignment:
    """Each GT takes its best anchor; any anchor with IoU >= threshold to a GT is positive."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    n = len(anchors)
    labels = np.zeros(n, np.int64)
    matched = np.full(n, -1, np.int64)
    if len(gts) == 0:
        return Assignment(labels, matched, np.zeros(n))
    boxes = np.array([g.box for g in gts], np.float64)
    ious = iou_matrix(center_to_corners(anchors), boxes)  # (A, G)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    pos = best_iou >= iou_threshold
    matched[pos] = best_gt[pos]
    # forced matches, processed in GT order so later GTs win a contested anchor
    for g in range(len(gts)):
        a = int(ious[:, g].argmax())
        matched[a] = g
        best_iou[a] = ious[a, g]
    has = matched >= 0
    labels[has] = np.array([gts[g].class_id for g in matched[has]])
    return Assignment(labels, matched, best_iou)


def build_targets(anchors, gts_per_image, iou_threshold=MATCH_IOU):
    """Per-batch (labels (N,A), loc targets (N,A,4))."""
    n, a = len(gts_per_image), len(anchors)
    labels = np.zeros((n, a), np.int64)
    loc = np.zeros((n, a, 4), np.float64)
    for i, gts in enumerate(gts_per_image):
        asg = match_anchors(anchors, gts, iou_threshold)
        labels[i] = asg.labels
        pos = asg.labels > 0
        if pos.any():
            boxes = np.array([gts[g].box for g in asg.matched[pos]])
            loc[i, pos] = encode_boxes(boxes, anchors[pos])
    return labels, loc


# --------------------------------------------------------------------------
# losses (each returns value and gradient w.r.t. its prediction inputs)

def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(x, -1, 1)


def ssd_loss(cls_logits, loc_pred, labels, loc_targets, neg_pos_ratio=NEG_POS_RATIO):
    """Smooth-L1 localization + softmax CE with hard-negative mining.

    Both terms are normalized by the number of positives in the batch
    (at least 1). Images with no positives still contribute their
    ``neg_pos_ratio`` hardest negatives. Returns ``(L_loc, L_cls, g_cls, g_loc)``.
    """
    cls_logits = np.asarray(cls_logits)
    n, a, k = cls_logits.shape
    logp = log_softmax(cls_logits.astype(np.float64), axis=-1)
    ce = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]  # (N, A)
    pos = labels > 0
    num_pos = pos.sum(axis=1)
    denom = max(int(num_pos.sum()), 1)

    # hard negatives: highest background loss among non-positive anchors
    selected = pos.copy()
    bg_loss = np.where(pos, -np.inf, -logp[..., 0])
    for i in range(n):
        n_neg = min(neg_pos_ratio * max(int(num_pos[i]), 1), a - int(num_pos[i]))
        if n_neg > 0:
            order = np.argsort(-bg_loss[i], kind="stable")[:n_neg]
            selected[i, order] = True

    l_cls = float(ce[selected].sum() / denom)
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    g_cls = (probs - onehot) * selected[..., None] / denom

    diff = np.asarray(loc_pred, np.float64) - loc_targets
    l_loc = float((smooth_l1(diff) * pos[..., None]).sum() / denom)
    g_loc = smooth_l1_grad(diff) * pos[..., None] / denom
    return l_loc, l_cls, g_cls.astype(cls_logits.dtype), g_loc.astype(np.asarray(loc_pred).dtype)


def ee_loss(ee_logits, y, weights: LossWeights):
    """Weighted binary cross-entropy over the 2-way softmax (index 1 = empty).

    Returns ``(L_EE, dL/dlogits)``.
    """
    logits = np.asarray(ee_logits, np.float64)
    y = np.asarray(y, np.float64)
    p = softmax(logits, axis=-1)
    n = len(y)
    p0 = np.maximum(p[:, 0], LOG_CLAMP)
    p1 = np.maximum(p[:, 1], LOG_CLAMP)
    loss = -np.mean(weights.w0 * (1 - y) * np.log(p0) + weights.w1 * y * np.log(p1))
    # d/dz of -w_c log p_c is w_c (p - onehot_c)
    wt = weights.w0 * (1 - y) + weights.w1 * y
    onehot = np.stack([1 - y, y], axis=1)
    grad = wt[:, None] * (p - onehot) / n
    return float(loss), grad.astype(np.asarray(ee_logits).dtype)


def composite_loss(l_loc, l_cls, l_ee, weights: LossWeights) -> float:
    return l_loc + l_cls + weights.lam * l_ee


# --------------------------------------------------------------------------
# post-processing

NMS_IOU = 0.5
SCORE_THRESHOLD = 0.01
TOP_K = 200


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple  # normalized corners


def nms(boxes, scores, iou_threshold=NMS_IOU):
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return keep


def postprocess(cls_logits, loc, anchors, score_threshold=SCORE_THRESHOLD,
                iou_threshold=NMS_IOU, top_k=TOP_K) -> list[Detection]:
    """Decode one image's raw outputs into class-wise NMS-filtered detections."""
    probs = softmax(np.asarray(cls_logits, np.float64), axis=-1)
    boxes = np.clip(decode_boxes(loc, anchors), 0.0, 1.0)
    dets = []
    for c in range(1, probs.shape[1]):
        sc = probs[:, c]
        idx = np.nonzero(sc > score_threshold)[0]
        if idx.size == 0:
            continue
        keep = nms(boxes[idx], sc[idx], iou_threshold)
        dets.extend(Detection(c, float(sc[idx[k]]), tuple(boxes[idx[k]])) for k in keep)
    dets.sort(key=lambda d: -d.score)
    return dets[:top_k]
