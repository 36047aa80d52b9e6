"""Invertible image/feature transformations with validity masks.

Spatial kinds (hflip, resize, rotate) warp via bilinear sampling on a
normalized [-1,1] grid; color jitter is a per-channel affine intensity map.
Every warp returns a validity mask marking pixels whose bilinear taps all fell
inside the source extent, so losses can restrict to the overlapped region.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import child_rng

RESIZE_RANGE = (0.3, 2.0)
ROTATE_RANGE = (-180.0, 180.0)


@dataclass(frozen=True)
class TransformSpec:
    kind: str  # hflip | resize | rotate | color_jitter
    scale: float = 1.0
    degrees: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if self.kind not in ("hflip", "resize", "rotate", "color_jitter"):
            raise ValueError(f"unknown transform kind: {self.kind}")
        if self.kind == "resize" and not (RESIZE_RANGE[0] <= self.scale <= RESIZE_RANGE[1]):
            raise ValueError(f"resize scale {self.scale} outside {RESIZE_RANGE}")
        if self.kind == "rotate" and not (ROTATE_RANGE[0] <= self.degrees <= ROTATE_RANGE[1]):
            raise ValueError(f"rotate degrees {self.degrees} outside {ROTATE_RANGE}")

    def to_json(self):
        d = {"kind": self.kind}
        if self.kind == "resize":
            d["scale"] = self.scale
        elif self.kind == "rotate":
            d["degrees"] = self.degrees
        elif self.kind == "color_jitter":
            d["brightness"] = self.brightness
            d["contrast"] = self.contrast
        return d

    @staticmethod
    def from_json(d):
        return TransformSpec(**d)


@dataclass
class WarpResult:
    output: ad.Tensor
    validity_mask: np.ndarray  # (N,1,H,W) of {0,1}


def hflip():
    return TransformSpec("hflip")


def resize(scale):
    return TransformSpec("resize", scale=float(scale))


def rotate(degrees):
    return TransformSpec("rotate", degrees=float(degrees))


def color_jitter(brightness, contrast):
    return TransformSpec("color_jitter", brightness=float(brightness),
                         contrast=float(contrast))


def default_transform_set(seed):
    """The default set of 8: 4 resizes, 1 color jitter, 1 hflip, 2 small rotations."""
    rng = child_rng(seed, "transform-set")
    specs = [resize(s) for s in rng.uniform(0.3, 2.0, size=4)]
    specs.append(color_jitter(rng.uniform(-0.2, 0.2), rng.uniform(0.8, 1.2)))
    specs.append(hflip())
    specs.extend(rotate(d) for d in rng.uniform(-15.0, 15.0, size=2))
    return specs


def texture_safe_transform_set():
    """Fixed set of 8 with every downscale kept above ~0.5.

    Aggressive downscales alias fine textures away even on clean images, so
    an equivariance constraint built on them punishes exactly the image
    content a restoration defense is trying to recover. This curated set
    keeps the same composition as ``default_transform_set`` (4 resizes,
    1 color jitter, 1 hflip, 2 small rotations) but holds resize scales in
    a texture-preserving range."""
    return [resize(0.6), resize(0.8), resize(1.3), resize(1.7),
            color_jitter(0.1, 1.1), hflip(), rotate(12.0), rotate(-9.0)]


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def identity_grid(n, h, w):
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx, gy], axis=-1)
    return np.broadcast_to(grid, (n, h, w, 2)).copy()


def rotation_grid(n, h, w, degrees):
    """Grid that rotates the image content by ``degrees`` counter-clockwise."""
    grid = identity_grid(n, h, w)
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    gx = grid[..., 0].copy()
    gy = grid[..., 1].copy()
    # sample source at the point that lands on this output pixel
    grid[..., 0] = c * gx - s * gy
    grid[..., 1] = s * gx + c * gy
    return grid


def _spatial_grid(spec, n, out_hw, inverse=False):
    h, w = out_hw
    if spec.kind == "rotate":
        deg = -spec.degrees if inverse else spec.degrees
        return rotation_grid(n, h, w, deg)
    # resize forward and inverse are both pure resampling onto the target size
    return identity_grid(n, h, w)


def _out_size(spec, h, w):
    if spec.kind == "resize":
        return max(2, round(h * spec.scale)), max(2, round(w * spec.scale))
    return h, w


def apply(spec, x):
    """Transform an image/feature batch; returns output plus validity mask."""
    x = ad.as_tensor(x)
    n, _, h, w = x.shape
    if spec.kind == "hflip":
        return WarpResult(ad.flip_w(x), np.ones((n, 1, h, w)))
    if spec.kind == "color_jitter":
        out = ad.clip01(ad.add_scalar(
            ad.mul_scalar(ad.add_scalar(x, -0.5), spec.contrast),
            0.5 + spec.brightness))
        return WarpResult(out, np.ones((n, 1, h, w)))
    oh, ow = _out_size(spec, h, w)
    grid = _spatial_grid(spec, n, (oh, ow))
    out, mask = ad.bilinear_sample(x, grid)
    return WarpResult(out, mask)


def apply_inverse_to_features(spec, feat, ref_hw=None):
    """Warp a feature map computed on a transformed input back to reference
    geometry. ``ref_hw`` is the reference feature resolution (defaults to the
    input's own size). Color jitter inverts to the identity warp in feature
    space."""
    feat = ad.as_tensor(feat)
    n, _, h, w = feat.shape
    if ref_hw is None:
        ref_hw = (h, w)
    rh, rw = ref_hw
    if spec.kind == "hflip":
        if (h, w) != (rh, rw):
            raise ad.ShapeError("hflip_inverse", feat.shape, (rh, rw))
        return WarpResult(ad.flip_w(feat), np.ones((n, 1, rh, rw)))
    if spec.kind == "color_jitter":
        if (h, w) != (rh, rw):
            raise ad.ShapeError("jitter_inverse", feat.shape, (rh, rw))
        return WarpResult(feat, np.ones((n, 1, rh, rw)))
    grid = _spatial_grid(spec, n, (rh, rw), inverse=True)
    out, mask = ad.bilinear_sample(feat, grid)
    return WarpResult(out, mask)


def warp_mask_back(spec, mask, ref_hw):
    """Pull a forward-warp validity mask back through the inverse warp (no
    gradients); a pulled-back value < 1 means some source tap was invalid."""
    n = mask.shape[0]
    rh, rw = ref_hw
    if spec.kind in ("hflip", "color_jitter"):
        out = mask if spec.kind == "color_jitter" else mask[..., ::-1]
        return (out > 0.999).astype(np.float64)
    grid = _spatial_grid(spec, n, (rh, rw), inverse=True)
    out, back_mask = ad.bilinear_sample(ad.Tensor(mask), grid)
    return ((out.data > 0.999) & (back_mask > 0.5)).astype(np.float64)
