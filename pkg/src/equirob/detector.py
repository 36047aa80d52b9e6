"""Anomaly detection from output-space equivariance, the smoothed-sensitivity
error estimator, AUROC, and the detect-then-defend router."""

import json
import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import transforms as tf
from .defense import defend


def detection_score(model, x, specs):
    """Mean squared deviation between inverse-warped softmax maps of
    transformed inputs and the reference softmax map, summed over transforms.
    Returns one score per image; no gradients are recorded."""
    if not specs:
        raise ValueError("empty transform list")
    x = np.asarray(x, dtype=np.float64)
    probs_ref = _softmax(model.logits(x))
    ref_hw = probs_ref.shape[2:]
    n = x.shape[0]
    scores = np.zeros(n)
    any_valid = np.zeros(n, dtype=bool)
    for spec in specs:
        warped = tf.apply(spec, ad.Tensor(x))
        probs_t = _softmax(model.logits(warped.output.data))
        back = tf.apply_inverse_to_features(spec, ad.Tensor(probs_t), ref_hw=ref_hw)
        fwd_mask = tf.warp_mask_back(spec, warped.validity_mask, ref_hw)
        mask = back.validity_mask * fwd_mask
        count = mask[0].sum() * probs_ref.shape[1]
        if count == 0:
            continue
        any_valid[:] = True
        diff = (back.output.data - probs_ref) ** 2 * mask
        scores += diff.sum(axis=(1, 2, 3)) / count
    if not any_valid.any():
        raise ValueError("all transforms produced empty validity masks")
    return scores


def _softmax(logits):
    if logits.ndim == 2:
        logits = logits[:, :, None, None]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def error_estimate(sigma_scores, B):
    """sqrt(2/pi) * mean(sqrt(sigma^2 + B^2)): the smoothed-sensitivity
    estimator of the average per-pixel prediction error."""
    sigma = np.asarray(sigma_scores, dtype=np.float64)
    if sigma.size == 0:
        raise ValueError("empty sensitivity list")
    if (sigma < 0).any() or B < 0:
        raise ValueError("sensitivities and B must be >= 0")
    return float(np.sqrt(2.0 / np.pi) * np.mean(np.sqrt(sigma ** 2 + B ** 2)))


def auroc(scores_pos, scores_neg):
    """Mann-Whitney rank AUROC; ties count half. Positives are expected to
    score higher."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both score lists must be nonempty")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class Calibration:
    threshold: float
    quantile: float = 0.95
    B: float = 0.0
    clean_score_summary: dict = None

    def to_json(self):
        return {"threshold": self.threshold, "quantile": self.quantile,
                "B": self.B, "clean_score_summary": self.clean_score_summary}

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @staticmethod
    def load(path):
        with open(path) as f:
            return Calibration(**json.load(f))


def calibrate(clean_scores, quantile=0.95, B=0.0):
    """Threshold from held-out clean scores only (default: 95th percentile)."""
    scores = np.asarray(clean_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty calibration set")
    return Calibration(threshold=float(np.quantile(scores, quantile)),
                       quantile=quantile, B=B,
                       clean_score_summary={"mean": float(scores.mean()),
                                            "max": float(scores.max()),
                                            "n": int(scores.size)})


def detect_then_defend(model, x, calibration, defense_cfg, specs=None, ledger=None):
    """Route each image: defend only when its detection score crosses the
    calibrated threshold. Appends per-image routing/timing dicts to ``ledger``."""
    x = np.asarray(x, dtype=np.float64)
    specs = specs if specs is not None else defense_cfg.specs
    preds = []
    for i in range(x.shape[0]):
        xi = x[i:i + 1]
        t0 = time.perf_counter()
        pred = model.predict(xi)[0]
        t_infer = time.perf_counter() - t0
        t0 = time.perf_counter()
        score = float(detection_score(model, xi, specs)[0])
        t_detect = time.perf_counter() - t0
        defended = score > calibration.threshold
        t_defend = 0.0
        if defended:
            t0 = time.perf_counter()
            pred = model.predict(defend(model, xi, defense_cfg))[0]
            t_defend = time.perf_counter() - t0
        preds.append(pred)
        if ledger is not None:
            ledger.append({"index": i, "score": score, "defended": bool(defended),
                           "inference_s": t_infer, "detection_s": t_detect,
                           "defense_s": t_defend})
    return np.stack(preds)


# ---------------------------------------------------------------------------
# toy corruption suite
# ---------------------------------------------------------------------------

def corrupt(images, kind, severity, seed=0):
    """Apply a synthetic corruption; images stay in [0,1]."""
    rng = np.random.default_rng(seed)
    x = np.asarray(images, dtype=np.float64)
    if kind == "gaussian_noise":
        out = x + rng.normal(0.0, 0.08 * severity, size=x.shape)
    elif kind == "shot_noise":
        lam = 60.0 / severity
        out = rng.poisson(x * lam) / lam
    elif kind == "blur":
        from scipy.ndimage import gaussian_filter
        out = gaussian_filter(x, sigma=(0, 0, 0.5 * severity, 0.5 * severity))
    elif kind == "contrast":
        factor = 1.0 / (1.0 + 0.6 * severity)
        out = (x - x.mean(axis=(2, 3), keepdims=True)) * factor \
            + x.mean(axis=(2, 3), keepdims=True)
    elif kind == "quantize":
        levels = max(2, 16 // severity)
        out = np.round(x * (levels - 1)) / (levels - 1)
    else:
        raise ValueError(f"unknown corruption kind: {kind}")
    return np.clip(out, 0.0, 1.0)


CORRUPTIONS = ("gaussian_noise", "shot_noise", "blur", "contrast", "quantize")
