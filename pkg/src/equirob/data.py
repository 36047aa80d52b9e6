"""Synthetic shape datasets with exact per-pixel labels, plus task metrics."""

from dataclasses import dataclass

import numpy as np

from .rng import child_rng

SEG_CLASSES = 4  # background, circle, rectangle, triangle
CLS_CLASSES = 10  # {circle, square} x 5 colors

# Segmentation classes share one base color; the class signal is the
# orientation of a low-amplitude stripe texture.  The cue is high-frequency,
# so bounded perturbations can corrupt it, while the shared color keeps the
# perturbed image off the natural image manifold (no class is "repainted").
_SHAPE_BASE = (0.62, 0.60, 0.58)
_STRIPE_ANGLES = {1: 0.0, 2: np.pi / 2, 3: np.pi / 4}
_STRIPE_AMP = 0.20
_STRIPE_PERIOD = 4.0

_CLS_COLORS = [(0.9, 0.2, 0.2), (0.2, 0.8, 0.3), (0.25, 0.35, 0.9),
               (0.9, 0.8, 0.2), (0.8, 0.3, 0.85)]


@dataclass(frozen=True)
class DatasetSpec:
    task: str  # segmentation | classification
    size: int = 200
    extent: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("segmentation", "classification"):
            raise ValueError(f"unknown task: {self.task}")
        if self.extent < 16:
            raise ValueError("extent must be >= 16")


def _texture(rng, h, w):
    """Smooth low-frequency background texture in [0.05, 0.5] per channel."""
    low = rng.uniform(0.0, 1.0, size=(3, 5, 5))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.floor(ys).astype(int).clip(0, 3)
    x0 = np.floor(xs).astype(int).clip(0, 3)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = np.empty((3, h, w))
    for c in range(3):
        p = low[c]
        img[c] = (p[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
                  + p[np.ix_(y0 + 1, x0)] * fy * (1 - fx)
                  + p[np.ix_(y0, x0 + 1)] * (1 - fy) * fx
                  + p[np.ix_(y0 + 1, x0 + 1)] * fy * fx)
    return 0.05 + 0.45 * img


def _shape_mask(kind, h, w, cx, cy, r, angle):
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    if kind in ("rectangle", "square"):
        return (np.abs(u) <= r) & (np.abs(v) <= r * (0.6 if kind == "rectangle" else 1.0))
    # triangle: equilateral, apex up in the rotated frame
    a = r * 1.6
    return (v <= a / 2) & (v >= -a + np.sqrt(3) * u) & (v >= -a - np.sqrt(3) * u)


def _paint(img, mask, color, rng):
    jitter = rng.uniform(-0.05, 0.05, size=3)
    for c in range(3):
        img[c][mask] = np.clip(color[c] + jitter[c], 0.0, 1.0)


def _paint_striped(img, mask, cls, rng):
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    theta = _STRIPE_ANGLES[cls]
    phase = rng.uniform(0, 2 * np.pi)
    stripe = _STRIPE_AMP * np.sign(np.sin(
        2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / _STRIPE_PERIOD
        + phase))
    jitter = rng.uniform(-0.05, 0.05, size=3)
    for c in range(3):
        img[c][mask] = np.clip(_SHAPE_BASE[c] + jitter[c] + stripe[mask], 0.0, 1.0)


def synth_dataset(spec: DatasetSpec):
    """Deterministic image/label arrays; images (N,3,H,W) in [0,1]."""
    if spec.task == "segmentation":
        return _synth_seg(spec)
    return _synth_cls(spec)


def _synth_seg(spec):
    h = w = spec.extent
    images = np.empty((spec.size, 3, h, w))
    labels = np.zeros((spec.size, h, w), dtype=np.int64)
    kinds = {1: "circle", 2: "rectangle", 3: "triangle"}
    for i in range(spec.size):
        rng = child_rng(spec.seed, "synth-seg", i)
        img = _texture(rng, h, w)
        lab = np.zeros((h, w), dtype=np.int64)
        for cls in rng.permutation([1, 2, 3])[: rng.integers(1, 4)]:
            cx = rng.uniform(0.2 * w, 0.8 * w)
            cy = rng.uniform(0.2 * h, 0.8 * h)
            r = rng.uniform(0.12 * w, 0.22 * w)
            angle = rng.uniform(0, 2 * np.pi)
            mask = _shape_mask(kinds[cls], h, w, cx, cy, r, angle)
            _paint_striped(img, mask, cls, rng)
            lab[mask] = cls
        images[i] = img
        labels[i] = lab
    return images, labels


def _synth_cls(spec):
    h = w = spec.extent
    images = np.empty((spec.size, 3, h, w))
    labels = np.empty(spec.size, dtype=np.int64)
    for i in range(spec.size):
        rng = child_rng(spec.seed, "synth-cls", i)
        cls = int(rng.integers(0, CLS_CLASSES))
        shape = "circle" if cls < 5 else "square"
        color = _CLS_COLORS[cls % 5]
        img = _texture(rng, h, w)
        r = rng.uniform(0.2 * w, 0.35 * w)
        mask = _shape_mask(shape, h, w, w / 2, h / 2, r, rng.uniform(0, 2 * np.pi))
        _paint(img, mask, color, rng)
        images[i] = img
        labels[i] = cls
    return images, labels


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def miou(pred, gt, num_classes):
    """Mean IoU over classes present in pred or gt; absent classes skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.max(initial=0) >= num_classes or gt.max(initial=0) >= num_classes:
        raise ValueError("class index out of range")
    ious = []
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious))


def accuracy(pred, gt):
    return float(np.mean(np.asarray(pred) == np.asarray(gt)))


def metric_for_task(task, num_classes):
    if task == "segmentation":
        return lambda pred, gt: miou(pred, gt, num_classes)
    return lambda pred, gt: accuracy(pred, gt)
