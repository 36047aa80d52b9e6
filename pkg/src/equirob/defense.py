"""Test-time recalibration: noisy projected gradient ascent on the
equivariance (or invariance) objective inside an L-infinity ball, with the
noise level annealed linearly to zero so the final steps are pure MAP ascent.
Also provides the random-noise baseline and the no-op mode."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .objectives import ConstraintSample, equivariance_loss, invariance_loss
from .rng import child_rng

OBJECTIVES = ("equivariance", "invariance", "random_noise", "none")


@dataclass
class DefenseConfig:
    objective: str = "equivariance"
    epsilon_v: float = 6.0 / 255.0
    steps: int = 20
    step_size: float = 0.0  # 0 -> 2 * epsilon_v
    specs: list = field(default_factory=list)
    sample: ConstraintSample = None
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown defense objective: {self.objective}")
        if self.epsilon_v < 0 or self.steps < 0:
            raise ValueError("epsilon_v and steps must be >= 0")

    @property
    def eta(self):
        return self.step_size if self.step_size > 0 else 2.0 * self.epsilon_v

    def to_json(self):
        return {"objective": self.objective, "epsilon_v": self.epsilon_v,
                "steps": self.steps, "step_size": self.step_size,
                "specs": [s.to_json() for s in self.specs],
                "sample": None if self.sample is None else
                {"fraction": self.sample.fraction, "seed": self.sample.seed},
                "seed": self.seed}


def noise_sigma(t, steps):
    """Annealed noise level at step t in 1..steps; zero from step T-1 on."""
    return max((steps - 1 - t) / steps, 0.0)


def _normalize(grad):
    # global L2 normalization per image
    flat = grad.reshape(grad.shape[0], -1)
    norms = np.maximum(np.linalg.norm(flat, axis=1), 1e-12)
    return grad / norms.reshape(-1, *([1] * (grad.ndim - 1)))


def _project(x_new, x_in, eps_v):
    return np.clip(np.clip(x_new, x_in - eps_v, x_in + eps_v), 0.0, 1.0)


def defend(model, x_in, cfg: DefenseConfig, step_callback=None):
    """Return the recalibrated input x' with max|x' - x_in| <= epsilon_v.

    Noise streams are seeded per image, so defending a batch equals defending
    each image alone. ``step_callback(t, x)`` is invoked after every step
    (used by tests to check the ball invariant mid-run).
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    if cfg.objective == "none" or cfg.epsilon_v == 0:
        return x_in.copy()
    n = x_in.shape[0]
    if cfg.objective == "random_noise":
        delta = np.empty_like(x_in)
        for i in range(n):
            delta[i] = child_rng(cfg.seed, "defense/random-noise", i).uniform(
                -cfg.epsilon_v, cfg.epsilon_v, size=x_in.shape[1:])
        return _project(x_in + delta, x_in, cfg.epsilon_v)
    if cfg.steps == 0:
        import warnings
        warnings.warn("defense with 0 steps returns the input unchanged")
        return x_in.copy()
    rngs = [child_rng(cfg.seed, "defense/sgld", i) for i in range(n)]
    x = x_in.copy()
    for t in range(1, cfg.steps + 1):
        xt = ad.Tensor(x, requires_grad=True)
        if cfg.objective == "equivariance":
            loss = equivariance_loss(model, xt, cfg.specs, cfg.sample)
        else:
            loss = invariance_loss(model, xt, cfg.specs)
        ad.backward(loss)
        g = _normalize(xt.grad)
        sigma = noise_sigma(t, cfg.steps)
        noise = np.stack([r.standard_normal(x_in.shape[1:]) for r in rngs])
        x = x + cfg.eta * np.sign(g + sigma * noise)
        x = _project(x, x_in, cfg.epsilon_v)
        if step_callback is not None:
            step_callback(t, x)
    return x


def predict_with_defense(model, x_in, cfg: DefenseConfig):
    """Defend then predict; argmax ties break toward the lower class index."""
    return model.predict(defend(model, x_in, cfg))


def sweep_epsilon_v(model, clean, labels, attacked, eps_list, cfg, metric):
    """Clean/robust metric per defense bound; metric(pred, gt) -> float."""
    from dataclasses import replace

    rows = []
    for eps_v in eps_list:
        c = replace(cfg, epsilon_v=float(eps_v), step_size=0.0)
        clean_pred = predict_with_defense(model, clean, c)
        robust_pred = predict_with_defense(model, attacked, c)
        rows.append({"epsilon_v": float(eps_v),
                     "clean": metric(clean_pred, labels),
                     "robust": metric(robust_pred, labels)})
    return rows
