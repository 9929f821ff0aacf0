"""Synthetic shapes-on-texture detection data plus the crop, letterbox and
tiling procedures used to build early-exit training sets.

Pixel boxes are ``(class, xmin, ymin, xmax, ymax)`` with exclusive max edges,
so a box covering columns 3..7 has ``xmin=3, xmax=8``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .detection import GroundTruthBox

CLASS_NAMES = ("disc", "box")
MID_GRAY = 128
CLIP_RETENTION = 0.25


@dataclass
class SceneSpec:
    height: int = 96
    width: int = 128
    num_classes: int = 2
    objects_per_image: tuple = (1, 3)
    object_size: tuple = (12, 32)
    empty_fraction: float = 0.4
    texture_sigma: float = 6.0
    texture_amplitude: float = 40.0
    noise_std: float = 4.0
    brightness: tuple = (70, 180)

    def __post_init__(self):
        self.objects_per_image = tuple(self.objects_per_image)
        self.object_size = tuple(self.object_size)
        self.brightness = tuple(self.brightness)
        if not 0 <= self.empty_fraction <= 1:
            raise ValueError("empty_fraction must lie in [0, 1]")
        if self.object_size[0] < 8:
            raise ValueError("objects must be at least 8 px")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"renderer supports {len(CLASS_NAMES)} classes")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) uint8
    boxes: list         # per image: list of (class, xmin, ymin, xmax, ymax) pixel coords
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def empty_labels(self) -> np.ndarray:
        from .train import derive_empty_labels
        return derive_empty_labels(self.boxes)

    def gts(self, i) -> list[GroundTruthBox]:
        h, w = self.shape
        return [GroundTruthBox(int(c), (x0 / w, y0 / h, x1 / w, y1 / h)) for c, x0, y0, x1, y1 in self.boxes[i]]

    def tensor(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return (imgs.astype(np.float32) / 255.0)[:, None]

    def subset(self, idx):
        idx = list(idx)
        return Dataset(self.images[idx], [self.boxes[i] for i in idx],
                       [self.names[i] for i in idx] if self.names else [])


# --------------------------------------------------------------------------
# rendering

def _texture(spec: SceneSpec, rng) -> np.ndarray:
    h, w = spec.height, spec.width
    base = rng.uniform(*spec.brightness)
    gy, gx = np.mgrid[0:h, 0:w]
    grad = rng.uniform(-0.3, 0.3) * (gx - w / 2) + rng.uniform(-0.3, 0.3) * (gy - h / 2)
    blob = gaussian_filter(rng.standard_normal((h, w)), spec.texture_sigma)
    blob *= spec.texture_amplitude / max(blob.std(), 1e-6)
    return base + grad + blob


def _object_mask(kind: int, size: int, rng) -> np.ndarray:
    if kind == 1:  # disc
        r = size / 2
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        return (xx - r) ** 2 + (yy - r) ** 2 <= r * r
    # box: axis-aligned rectangle with a hollow core
    bw = size
    bh = int(rng.integers(max(8, size * 2 // 3), size + 1))
    m = np.ones((bh, bw), bool)
    t = max(2, size // 5)
    m[t:bh - t, t:bw - t] = False
    return m


def render_scene(spec: SceneSpec, n_objects: int, rng, max_tries=200):
    """One image plus its tight pixel boxes. Objects never overlap."""
    img = _texture(spec, rng)
    boxes = []
    occupied = []
    for _ in range(n_objects):
        kind = int(rng.integers(1, spec.num_classes + 1))
        size = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
        mask = _object_mask(kind, size, rng)
        mh, mw = mask.shape
        if mh > spec.height or mw > spec.width:
            raise ValueError("object larger than canvas")
        for _ in range(max_tries):
            y0 = int(rng.integers(0, spec.height - mh + 1))
            x0 = int(rng.integers(0, spec.width - mw + 1))
            cand = (x0, y0, x0 + mw, y0 + mh)
            if all(not _rects_touch(cand, o, pad=2) for o in occupied):
                break
        else:
            raise ValueError("infeasible object placement: too many objects for the canvas")
        occupied.append(cand)
        local = img[y0:y0 + mh, x0:x0 + mw].mean()
        level = rng.uniform(10, 50) if local > 128 else rng.uniform(205, 245)
        region = img[y0:y0 + mh, x0:x0 + mw]
        region[mask] = level + rng.normal(0, 3, size=int(mask.sum()))
        ys, xs = np.nonzero(mask)
        boxes.append((kind, x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1))
    img = img + rng.normal(0, spec.noise_std, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes


def _rects_touch(a, b, pad=0) -> bool:
    return not (a[2] + pad <= b[0] or b[2] + pad <= a[0] or a[3] + pad <= b[1] or b[3] + pad <= a[1])


def image_rng(seed: int, index: int):
    # per-image streams so parallel and serial generation agree
    return np.random.default_rng([seed, index])


def generate_dataset(spec: SceneSpec, n_images: int, seed: int) -> Dataset:
    if n_images <= 0:
        raise ValueError("n_images must be positive")
    n_empty = int(round(n_images * spec.empty_fraction))
    order = np.random.default_rng([seed, 0x5EED]).permutation(n_images)
    empty = set(order[:n_empty].tolist())
    images = np.empty((n_images, spec.height, spec.width), np.uint8)
    boxes = []
    lo, hi = spec.objects_per_image
    for i in range(n_images):
        rng = image_rng(seed, i)
        k = 0 if i in empty else int(rng.integers(lo, hi + 1))
        images[i], b = render_scene(spec, k, rng)
        boxes.append(b)
    return Dataset(images, boxes, [f"{i:05d}.png" for i in range(n_images)])


# --------------------------------------------------------------------------
# crops, letterbox, tiles

def _intersection_area(a, b) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def sample_negative_crop(image, boxes, rng, area_range=(0.40, 0.70), attempts=100):
    """Object-free crop rectangle ``(x0, y0, x1, y1)`` covering 40-70% of the image, or None."""
    h, w = image.shape[:2]
    total = h * w
    for _ in range(attempts):
        frac = rng.uniform(*area_range)
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0))) * w / h
        cw = int(round(np.sqrt(frac * total * aspect)))
        ch = int(round(frac * total / max(cw, 1)))
        if not (1 <= cw <= w and 1 <= ch <= h):
            continue
        if not area_range[0] <= cw * ch / total <= area_range[1]:
            continue
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        crop = (x0, y0, x0 + cw, y0 + ch)
        if all(_intersection_area(crop, b[1:]) == 0 for b in boxes):
            return crop
    return None


def remap_boxes(boxes, crop, retention=CLIP_RETENTION):
    """Clip pixel boxes to ``crop`` and express them in crop coordinates.

    Boxes entirely outside are dropped; clipped boxes keeping less than
    ``retention`` of their area are dropped too.
    """
    x0, y0, x1, y1 = crop
    out = []
    for c, bx0, by0, bx1, by1 in boxes:
        cx0, cy0 = max(bx0, x0), max(by0, y0)
        cx1, cy1 = min(bx1, x1), min(by1, y1)
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        area = (bx1 - bx0) * (by1 - by0)
        if (cx1 - cx0) * (cy1 - cy0) < retention * area:
            continue
        out.append((c, cx0 - x0, cy0 - y0, cx1 - x0, cy1 - y0))
    return out


def sample_positive_crop(image, boxes, rng, scale_range=(0.5, 1.0)):
    """Crop around a randomly chosen object; returns ``(crop, remapped_boxes)``."""
    if not boxes:
        raise ValueError("positive crop needs at least one box")
    h, w = image.shape[:2]
    c, bx0, by0, bx1, by1 = boxes[int(rng.integers(len(boxes)))]
    s = rng.uniform(*scale_range)
    cw = int(min(w, max(round(w * s), bx1 - bx0)))
    ch = int(min(h, max(round(h * s), by1 - by0)))
    # crop origin range that keeps the chosen box inside and the crop inside the image
    lo_x, hi_x = max(0, bx1 - cw), min(bx0, w - cw)
    lo_y, hi_y = max(0, by1 - ch), min(by0, h - ch)
    x0 = int(rng.integers(lo_x, hi_x + 1))
    y0 = int(rng.integers(lo_y, hi_y + 1))
    crop = (x0, y0, x0 + cw, y0 + ch)
    return crop, remap_boxes(boxes, crop)


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: float
    pad_y: float

    def apply(self, box):
        x0, y0, x1, y1 = box
        s = self.scale
        return (x0 * s + self.pad_x, y0 * s + self.pad_y, x1 * s + self.pad_x, y1 * s + self.pad_y)

    def invert(self, box):
        x0, y0, x1, y1 = box
        s = self.scale
        return ((x0 - self.pad_x) / s, (y0 - self.pad_y) / s, (x1 - self.pad_x) / s, (y1 - self.pad_y) / s)


def letterbox(image, target_hw):
    """Aspect-preserving resize into ``target_hw`` with symmetric mid-gray padding."""
    th, tw = target_hw
    if th <= 0 or tw <= 0:
        raise ValueError("target size must be positive")
    h, w = image.shape[:2]
    scale = min(th / h, tw / w)
    nh, nw = min(th, int(round(h * scale))), min(tw, int(round(w * scale)))
    resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR))
    out = np.full((th, tw), MID_GRAY, np.uint8)
    py, px = (th - nh) // 2, (tw - nw) // 2
    out[py:py + nh, px:px + nw] = resized
    return out, LetterboxTransform(scale, float(px), float(py))


def tile_image(image, boxes, tile_hw, retention=CLIP_RETENTION):
    """Split into non-overlapping tiles; returns ``[((row, col), tile, boxes)]``."""
    th, tw = tile_hw
    h, w = image.shape[:2]
    if h % th or w % tw:
        pad_h, pad_w = (-h) % th, (-w) % tw
        raise ValueError(f"image {h}x{w} not divisible by tile {th}x{tw}; pad by ({pad_h}, {pad_w})")
    tiles = []
    for r in range(h // th):
        for c in range(w // tw):
            rect = (c * tw, r * th, (c + 1) * tw, (r + 1) * th)
            tiles.append(((r, c), image[rect[1]:rect[3], rect[0]:rect[2]], remap_boxes(boxes, rect, retention)))
    return tiles


def untile(tiles, shape):
    out = np.empty(shape, tiles[0][1].dtype)
    for (r, c), t, _ in tiles:
        th, tw = t.shape[:2]
        out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = t
    return out


def crop_augmented_dataset(source: Dataset, n_negative: int, seed: int, target_hw=None) -> Dataset:
    """Empty-frame augmentation: letterboxed object-free crops plus one
    object-centred crop per positive source image."""
    rng = np.random.default_rng([seed, 0xC409])
    th, tw = target_hw or source.shape
    images, boxes = [], []
    positives = [i for i in range(len(source)) if source.boxes[i]]
    for i in positives:
        crop, remapped = sample_positive_crop(source.images[i], source.boxes[i], rng)
        img, tf = letterbox(source.images[i][crop[1]:crop[3], crop[0]:crop[2]], (th, tw))
        bxs = []
        for c, *b in remapped:
            x0, y0, x1, y1 = tf.apply(b)
            bxs.append((c, int(np.floor(x0)), int(np.floor(y0)), int(np.ceil(x1)), int(np.ceil(y1))))
        images.append(img)
        boxes.append(bxs)
    made = 0
    guard = 0
    while made < n_negative and guard < 100 * max(n_negative, 1):
        guard += 1
        i = int(rng.integers(len(source)))
        crop = sample_negative_crop(source.images[i], source.boxes[i], rng)
        if crop is None:
            continue
        img, _ = letterbox(source.images[i][crop[1]:crop[3], crop[0]:crop[2]], (th, tw))
        images.append(img)
        boxes.append([])
        made += 1
    return Dataset(np.stack(images), boxes, [f"{i:05d}.png" for i in range(len(images))])


# --------------------------------------------------------------------------
# disk format

def save_split(ds: Dataset, root, split: str):
    root = Path(root)
    img_dir = root / split
    img_dir.mkdir(parents=True, exist_ok=True)
    names = ds.names or [f"{i:05d}.png" for i in range(len(ds))]
    records = []
    for name, img, bxs in zip(names, ds.images, ds.boxes):
        Image.fromarray(img, mode="L").save(img_dir / name, optimize=False)
        records.append({"file": f"{split}/{name}", "boxes": [
            {"class": int(c), "xmin": int(x0), "ymin": int(y0), "xmax": int(x1), "ymax": int(y1)}
            for c, x0, y0, x1, y1 in bxs]})
    (root / f"{split}.json").write_text(json.dumps(records, indent=1))


def load_split(root, split: str) -> Dataset:
    root = Path(root)
    records = json.loads((root / f"{split}.json").read_text())
    images = np.stack([np.asarray(Image.open(root / r["file"]).convert("L")) for r in records])
    boxes = [[(b["class"], b["xmin"], b["ymin"], b["xmax"], b["ymax"]) for b in r["boxes"]] for r in records]
    return Dataset(images, boxes, [Path(r["file"]).name for r in records])
