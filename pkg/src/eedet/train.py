"""End-to-end training: RMSprop, step-decay schedule, augmentation and logging."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .data import Dataset, remap_boxes
from .detection import (GroundTruthBox, LossWeights, build_targets, composite_loss, ee_loss,
                        ssd_loss)
from .gate import model_anchors, score_dataset
from .metrics import ee_classification_metrics, mean_average_precision

log = logging.getLogger(__name__)

# named RNG substreams derived from the root seed
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2

LOG_COLUMNS = ["epoch", "lr", "L_loc", "L_cls", "L_EE", "L_total", "val_mAP", "val_ee_acc"]


@dataclass
class TrainConfig:
    epochs: int = 100
    optimizer: str = "rmsprop"
    initial_lr: float = 1e-4
    branch_lr: float | None = None
    batch_size: int = 24
    lr_decay: float = 0.95
    decay_every: int = 25
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    mirror_p: float = 0.5
    crop_p: float = 0.5
    brightness_p: float = 0.5
    crop_scale: tuple = (0.6, 1.0)
    pact_l2: float = 1e-4
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer != "rmsprop":
            raise ValueError("only rmsprop is supported")


def derive_empty_labels(boxes_per_image) -> np.ndarray:
    """1 for images without any box, else 0."""
    return np.array([1 if len(b) == 0 else 0 for b in boxes_per_image], np.int64)


def lr_at(epoch: int, cfg: TrainConfig, base: float | None = None) -> float:
    base = cfg.initial_lr if base is None else base
    return base * cfg.lr_decay ** (epoch // cfg.decay_every)


# --------------------------------------------------------------------------
# augmentation (images as float32 in [0, 1], boxes in pixel coordinates)

def mirror(image, boxes):
    w = image.shape[1]
    return image[:, ::-1].copy(), [(c, w - x1, y0, w - x0, y1) for c, x0, y0, x1, y1 in boxes]


def _resize(image, hw):
    h, w = hw
    return np.asarray(Image.fromarray(image.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))


def random_crop(image, boxes, rng, scale_range=(0.6, 1.0), attempts=50):
    """Same-aspect crop resized back to full size; keeps at least one box center."""
    h, w = image.shape
    for _ in range(attempts):
        s = rng.uniform(*scale_range)
        cw, ch = max(1, int(round(w * s))), max(1, int(round(h * s)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        crop = (x0, y0, x0 + cw, y0 + ch)
        kept = [b for b in boxes if x0 <= (b[1] + b[3]) / 2 < x0 + cw and y0 <= (b[2] + b[4]) / 2 < y0 + ch]
        if boxes and not kept:
            continue
        remapped = remap_boxes(kept, crop, retention=0.0)
        sx, sy = w / cw, h / ch
        out_boxes = []
        for c, a, b, cc, d in remapped:
            nb = (c, a * sx, b * sy, cc * sx, d * sy)
            if nb[3] - nb[1] >= 1 and nb[4] - nb[2] >= 1:
                out_boxes.append(nb)
        if boxes and not out_boxes:
            continue
        return _resize(image[y0:y0 + ch, x0:x0 + cw], (h, w)), out_boxes
    return image, list(boxes)


def augment(image, boxes, cfg: TrainConfig, rng):
    """Random mirror, crop and brightness, each applied with its own probability."""
    src = np.asarray(image)
    img = src.astype(np.float32) / 255.0 if src.dtype == np.uint8 else src.astype(np.float32)
    boxes = list(boxes)
    if rng.random() < cfg.mirror_p:
        img, boxes = mirror(img, boxes)
    if rng.random() < cfg.crop_p:
        img, boxes = random_crop(img, boxes, rng, cfg.crop_scale)
    if rng.random() < cfg.brightness_p:
        img = np.clip(img * rng.uniform(0.75, 1.25) + rng.uniform(-0.1, 0.1), 0.0, 1.0)
    return np.ascontiguousarray(img, np.float32), boxes


def _normalized_gts(boxes, hw):
    h, w = hw
    out = []
    for c, x0, y0, x1, y1 in boxes:
        b = (max(0.0, x0 / w), max(0.0, y0 / h), min(1.0, x1 / w), min(1.0, y1 / h))
        if b[2] > b[0] and b[3] > b[1]:
            out.append(GroundTruthBox(int(c), b))
    return out


# --------------------------------------------------------------------------
# optimizer

class RMSprop:
    def __init__(self, named_params, lr_multipliers=None, alpha=0.99, eps=1e-8):
        self.params = dict(named_params)
        self.mult = lr_multipliers or {}
        self.alpha = alpha
        self.eps = eps
        self.square_avg = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr):
        a = self.alpha
        for n, p in self.params.items():
            v = self.square_avg[n]
            v *= a
            v += (1 - a) * p.grad * p.grad
            p.data -= (lr * self.mult.get(n, 1.0)) * p.grad / (np.sqrt(v) + self.eps)

    def state_tensors(self):
        return {f"optim.{n}": v for n, v in self.square_avg.items()}

    def load_state_tensors(self, tensors):
        for n in self.square_avg:
            key = f"optim.{n}"
            if key in tensors:
                self.square_avg[n] = tensors[key].astype(self.square_avg[n].dtype).copy()


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    optimizer: RMSprop | None = None
    epochs_run: int = 0


def _batch_arrays(dataset: Dataset, idx, cfg, rng, augment_on=True):
    imgs, boxes = [], []
    for i in idx:
        if augment_on:
            im, b = augment(dataset.images[i], dataset.boxes[i], cfg, rng)
        else:
            im, b = dataset.images[i].astype(np.float32) / 255.0, list(dataset.boxes[i])
        imgs.append(im)
        boxes.append(b)
    return np.stack(imgs)[:, None], boxes


def train_step(model, x, boxes, anchors, weights: LossWeights):
    """Forward, loss and backward for one batch; gradients are left in ``.grad``."""
    hw = x.shape[2:]
    gts = [_normalized_gts(b, hw) for b in boxes]
    labels, loc_t = build_targets(anchors, gts)
    cls, loc, ee = model.forward_full(x, train=True)
    l_loc, l_cls, g_cls, g_loc = ssd_loss(cls, loc, labels, loc_t)
    l_ee, g_ee = 0.0, None
    if ee is not None:
        y = derive_empty_labels(boxes)
        l_ee, g_ee = ee_loss(ee, y, weights)
        g_ee = (weights.lam * g_ee).astype(ee.dtype)
    total = composite_loss(l_loc, l_cls, l_ee, weights)
    model.zero_grad()
    model.backward(g_cls, g_loc, g_ee)
    return l_loc, l_cls, l_ee, total


def validate(model, val: Dataset, batch_size=32):
    cache = score_dataset(model, val, batch_size)
    gts = [val.gts(i) for i in range(len(val))]
    m, _, _ = mean_average_precision(cache.detections, gts, model.head_cfg.num_classes)
    acc = float("nan")
    if cache.p_empty is not None:
        acc = ee_classification_metrics(cache.p_empty, val.empty_labels(), 0.5)[0]
    return m, acc


def train(model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, weights: LossWeights,
          log_path=None, start_epoch=0, optimizer_state=None, on_epoch_end=None) -> TrainResult:
    """Train in place. ``on_epoch_end(epoch, model, optimizer)`` can checkpoint."""
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    if val_ds is None or len(val_ds) == 0:
        raise ValueError("validation split is empty")
    if model.branch is None:
        weights = LossWeights(0.0, weights.w0, weights.w1)
    anchors = model_anchors(model)
    groups = model.parameter_groups()
    mult = {}
    if cfg.branch_lr is not None:
        mult = {n: cfg.branch_lr / cfg.initial_lr for n, g in groups.items() if g == "branch"}
    opt = RMSprop(model.named_parameters(), mult, cfg.rms_alpha, cfg.rms_eps)
    if optimizer_state:
        opt.load_state_tensors(optimizer_state)
    pact = [p for n, p in model.named_parameters() if groups[n] == "pact"]
    result = TrainResult(optimizer=opt)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "a" if start_epoch else "w", newline="")
        writer = csv.writer(fh)
        if not start_epoch:
            writer.writerow(LOG_COLUMNS)
    try:
        n = len(train_ds)
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, STREAM_SHUFFLE, epoch]).permutation(n)
            rng = np.random.default_rng([cfg.seed, STREAM_AUGMENT, epoch])
            sums = np.zeros(4)
            nb = 0
            for b, s in enumerate(range(0, n, cfg.batch_size)):
                x, boxes = _batch_arrays(train_ds, order[s:s + cfg.batch_size], cfg, rng)
                l_loc, l_cls, l_ee, total = train_step(model, x, boxes, anchors, weights)
                if not math.isfinite(total):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
                for p in pact:
                    p.grad += cfg.pact_l2 * p.data
                opt.step(lr)
                for p in pact:
                    np.maximum(p.data, 1e-3, out=p.data)
                sums += (l_loc, l_cls, l_ee, total)
                nb += 1
            means = sums / nb
            val_map, val_acc = float("nan"), float("nan")
            if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                val_map, val_acc = validate(model, val_ds)
            row = [epoch, lr, *means.tolist(), val_map, val_acc]
            result.log.append(dict(zip(LOG_COLUMNS, row)))
            result.epochs_run += 1
            log.info("epoch %d lr %.3g loss %.4f (loc %.4f cls %.4f ee %.4f) val mAP %.4f ee acc %.4f",
                     epoch, lr, means[3], means[0], means[1], means[2], val_map, val_acc)
            if writer is not None:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
                fh.flush()
            if on_epoch_end is not None:
                on_epoch_end(epoch + 1, model, opt)
    finally:
        if fh is not None:
            fh.close()
    return result
