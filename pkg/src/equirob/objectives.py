"""Equivariance and invariance objectives over a transform set.

The equivariance term compares, per spatial position, the reference feature
map against features of a transformed input warped back to reference
geometry; only positions valid under both warps (the overlapped region)
contribute, optionally restricted to a random subsample of positions.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transforms as tf
from .models import task_loss
from .rng import child_rng


@dataclass(frozen=True)
class ConstraintSample:
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"subsample fraction {self.fraction} outside (0,1]")


def _masked_mean(values, mask):
    """Mean of a (N,1,H,W) map over mask-valid positions, per image then
    averaged over the batch. Masks are geometry-only, identical across N."""
    count = mask[0].sum()
    scaled = ad.mul(values, ad.Tensor(np.broadcast_to(mask, values.shape).copy()))
    return ad.mul_scalar(ad.tsum(scaled), 1.0 / (count * values.shape[0]))


def _subsample_mask(mask, sample, spec_index):
    if sample is None or sample.fraction >= 1.0:
        return mask
    rng = child_rng(sample.seed, "constraint-subsample", spec_index)
    flat = mask[0, 0].ravel()
    valid_idx = np.flatnonzero(flat > 0.5)
    keep = max(1, int(round(sample.fraction * valid_idx.size)))
    chosen = rng.choice(valid_idx, size=keep, replace=False)
    sub = np.zeros_like(flat)
    sub[chosen] = 1.0
    return mask * sub.reshape(1, 1, *mask.shape[2:])


def per_spec_equivariance(model, x, spec, ref_feat=None, sample=None, spec_index=0):
    """Mean per-position cosine between warped-back features of g(x) and the
    reference features, over the overlapped region. Returns (Tensor, n_valid)."""
    x = ad.as_tensor(x)
    if ref_feat is None:
        ref_feat = model.features(x)
    warped = tf.apply(spec, x)
    feat_t = model.features(warped.output)
    back = tf.apply_inverse_to_features(spec, feat_t, ref_hw=ref_feat.shape[2:])
    fwd_mask = tf.warp_mask_back(spec, warped.validity_mask, ref_feat.shape[2:])
    mask = back.validity_mask[:1] * fwd_mask[:1]
    mask = _subsample_mask(mask, sample, spec_index)
    n_valid = float(mask.sum())
    if n_valid == 0:
        warnings.warn(f"transform {spec.kind} leaves no valid positions; "
                      "contributing 0 to the equivariance loss")
        return ad.Tensor(0.0), 0
    cos = ad.cosine_similarity(back.output, ref_feat)
    return _masked_mean(cos, mask), n_valid


def equivariance_loss(model, x, specs, sample=None):
    """Sum over transforms of the masked mean cosine; in [-k, k]."""
    if not specs:
        raise ValueError("empty transform list")
    x = ad.as_tensor(x)
    ref_feat = model.features(x)
    total = ad.Tensor(0.0)
    for i, spec in enumerate(specs):
        term, _ = per_spec_equivariance(model, x, spec, ref_feat=ref_feat,
                                        sample=sample, spec_index=i)
        total = ad.add(total, term)
    return total


def invariance_loss(model, x, specs):
    """Sum over transforms of cosine between globally pooled features."""
    if not specs:
        raise ValueError("empty transform list")
    x = ad.as_tensor(x)
    ref = ad.avg_pool_global(model.features(x))
    total = None
    for spec in specs:
        warped = tf.apply(spec, x)
        pooled = ad.avg_pool_global(model.features(warped.output))
        cos = ad.tmean(ad.cosine_similarity(pooled, ref))
        total = cos if total is None else ad.add(total, cos)
    return total


def adaptive_objective(model, x, y, specs, lambda_e):
    """Task loss plus lambda_e times the equivariance term (defense-aware
    attack objective)."""
    if lambda_e < 0:
        raise ValueError("lambda_e must be >= 0")
    loss = task_loss(model, x, y)
    if lambda_e == 0:
        return loss
    return ad.add(loss, ad.mul_scalar(equivariance_loss(model, x, specs), lambda_e))


def equivariance_scores(model, images, specs, sample=None):
    """Per-image normalized equivariance score (loss / k), no gradients."""
    if len(images) == 0:
        raise ValueError("empty dataset")
    scores = []
    for i in range(len(images)):
        loss = equivariance_loss(model, ad.Tensor(images[i:i + 1]), specs, sample)
        scores.append(loss.item() / len(specs))
    return np.array(scores)


def measure_equivariance(model, images, specs, sample=None):
    """Mean normalized equivariance score over a dataset."""
    return float(np.mean(equivariance_scores(model, images, specs, sample)))
