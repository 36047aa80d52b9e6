"""L-infinity bounded gradient attacks: FGSM, IFGSM, PGD, MIM, the
defense-aware joint objective, targeted variants, and BPDA against the full
recalibration defense."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import task_loss
from .objectives import adaptive_objective
from .rng import child_rng

METHODS = ("fgsm", "ifgsm", "pgd", "mim", "adaptive", "bpda")


@dataclass
class AttackConfig:
    method: str = "pgd"
    epsilon: float = 4.0 / 255.0
    steps: int = 20
    step_size: float = 0.0  # 0 -> epsilon/4 (fgsm: epsilon)
    lambda_e: float = 0.0
    specs: list = field(default_factory=list)  # transform set for adaptive mode
    mim_decay: float = 1.0
    random_start: bool = True  # pgd/bpda only
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method: {self.method}")
        if self.epsilon <= 0 or self.steps < 1:
            raise ValueError("epsilon must be > 0 and steps >= 1")
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be >= 0")

    @property
    def alpha(self):
        if self.step_size > 0:
            return self.step_size
        return self.epsilon if self.method == "fgsm" else self.epsilon / 4.0

    def to_json(self):
        return {"method": self.method, "epsilon": self.epsilon, "steps": self.steps,
                "step_size": self.step_size, "lambda_e": self.lambda_e,
                "specs": [s.to_json() for s in self.specs],
                "mim_decay": self.mim_decay, "random_start": self.random_start,
                "seed": self.seed}


def _project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _random_start(x, eps, seed):
    # per-image noise stream so batched and single-image attacks agree
    delta = np.empty_like(x)
    for i in range(x.shape[0]):
        delta[i] = child_rng(seed, "attack/random-start", i).uniform(
            -eps, eps, size=x.shape[1:])
    return _project(x + delta, x, eps)


def _objective_grad(model, x_adv, y, cfg):
    xt = ad.Tensor(x_adv, requires_grad=True)
    if cfg.method == "adaptive":
        loss = adaptive_objective(model, xt, y, cfg.specs, cfg.lambda_e)
    else:
        loss = task_loss(model, xt, y)
    ad.backward(loss)
    return xt.grad


def attack(model, x, y, cfg: AttackConfig, target=None):
    """Run the configured attack; returns x_a with max|x_a - x| <= epsilon.

    ``target`` switches to targeted mode (descend the task loss toward the
    target labels); only fgsm/ifgsm/pgd/mim support it.
    """
    x = np.asarray(x, dtype=np.float64)
    if target is not None:
        if cfg.method == "adaptive":
            raise ValueError("adaptive attack does not support targeted mode")
        if np.array_equal(np.asarray(target), np.asarray(y)):
            raise ValueError("target labels equal ground truth everywhere")
    eps = cfg.epsilon
    steps = 1 if cfg.method == "fgsm" else cfg.steps
    alpha = cfg.alpha
    if cfg.method in ("pgd", "bpda") and cfg.random_start:
        x_adv = _random_start(x, eps, cfg.seed)
    else:
        x_adv = x.copy()
    momentum = np.zeros_like(x)
    labels = y if target is None else target
    sign = -1.0 if target is not None else 1.0
    for _ in range(steps):
        grad = _objective_grad(model, x_adv, labels, cfg)
        if cfg.method == "mim":
            norm = np.abs(grad).mean(axis=tuple(range(1, grad.ndim)), keepdims=True)
            momentum = cfg.mim_decay * momentum + grad / np.maximum(norm, 1e-12)
            grad = momentum
        x_adv = _project(x_adv + sign * alpha * np.sign(grad), x, eps)
    return x_adv


def targeted_attack(model, x, target_labels, y, cfg: AttackConfig):
    """Minimize the task loss toward ``target_labels`` inside the eps-ball."""
    return attack(model, x, y, cfg, target=target_labels)


def bpda_attack(model, defense_cfg, x, y, cfg: AttackConfig):
    """Adaptive Attack II: run the defense forward each outer step and treat
    it as identity in the backward pass (straight-through). Returns
    (x_a, info) where info counts inner/outer backward evaluations."""
    from .defense import defend

    x = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    alpha = cfg.alpha
    if cfg.random_start:
        x_adv = _random_start(x, eps, cfg.seed)
    else:
        x_adv = x.copy()
    inner_active = defense_cfg.epsilon_v > 0 and defense_cfg.objective != "none"
    inner_per_step = defense_cfg.steps if inner_active and \
        defense_cfg.objective in ("equivariance", "invariance") else 0
    for _ in range(cfg.steps):
        x_def = defend(model, x_adv, defense_cfg)
        grad = _objective_grad(model, x_def, y, cfg)
        # straight-through: apply the gradient at h(x) directly to x
        x_adv = _project(x_adv + alpha * np.sign(grad), x, eps)
    info = {"outer_steps": cfg.steps, "inner_steps": inner_per_step,
            "inner_backward_evals": cfg.steps * inner_per_step,
            "outer_backward_evals": cfg.steps}
    return x_adv, info
