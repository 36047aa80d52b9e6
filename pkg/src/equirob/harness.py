"""Experiment orchestration: dataset synthesis, training, attack/defense
grids, detector block, sweeps, and deterministic CSV/JSON report emission."""

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as dat
from . import models as nn
from . import transforms as tf
from .attacks import AttackConfig, attack, bpda_attack, targeted_attack
from .defense import DefenseConfig, defend, sweep_epsilon_v
from .detector import (CORRUPTIONS, auroc, calibrate, corrupt, detect_then_defend,
                       detection_score)
from .objectives import ConstraintSample, equivariance_scores
from .rng import child_seed


@dataclass
class ExperimentConfig:
    task: str = "segmentation"
    seed: int = 0
    train_size: int = 200
    eval_size: int = 100
    extent: int = 32
    channels: int = 12
    epochs: int = 150
    lr: float = 0.05
    lr_decay: float = 0.98
    batch_size: int = 32
    adversarial_eps: float = 0.0
    noise_sigma: float = 0.05
    epsilon: float = 36.0 / 255.0
    attacks: list = field(default_factory=lambda: ["pgd"])
    defenses: list = field(default_factory=lambda: ["none", "random_noise",
                                                    "invariance", "equivariance"])
    epsilon_v: float = 0.0  # 0 -> 0.75 * epsilon
    defense_steps: int = 20
    attack_steps: int = 20
    lambda_e: float = 1000.0
    sample_fraction: float = 1.0
    transforms: list = None  # JSON spec list; None -> default set of 8
    detector_quantile: float = 0.95
    corruption_severity: int = 2

    def __post_init__(self):
        if self.epsilon_v == 0.0:
            self.epsilon_v = 0.75 * self.epsilon

    def to_json(self):
        d = dict(self.__dict__)
        return d

    @staticmethod
    def from_json(d):
        known = {k: v for k, v in d.items() if k in ExperimentConfig.__dataclass_fields__}
        return ExperimentConfig(**known)

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _specs_for(cfg):
    if cfg.transforms is None:
        return tf.texture_safe_transform_set()
    return [tf.TransformSpec.from_json(s) for s in cfg.transforms]


def load_config(path):
    with open(path) as f:
        return ExperimentConfig.from_json(json.load(f))


def make_datasets(cfg):
    train = dat.synth_dataset(dat.DatasetSpec(cfg.task, cfg.train_size, cfg.extent,
                                              seed=child_seed(cfg.seed, "data/train")))
    evald = dat.synth_dataset(dat.DatasetSpec(cfg.task, cfg.eval_size, cfg.extent,
                                              seed=child_seed(cfg.seed, "data/eval")))
    return train, evald


def train_model(cfg, out_dir=None):
    (xtr, ytr), _ = make_datasets(cfg)
    desc = nn.descriptor_for(cfg.task, channels=cfg.channels)
    model = nn.build_model(desc, seed=child_seed(cfg.seed, "model-init"))
    tcfg = nn.TrainConfig(epochs=cfg.epochs, lr=cfg.lr, lr_decay=cfg.lr_decay,
                          batch_size=cfg.batch_size,
                          seed=child_seed(cfg.seed, "train"),
                          adversarial_eps=cfg.adversarial_eps,
                          noise_sigma=cfg.noise_sigma)
    history = nn.train(model, xtr, ytr, tcfg)
    if out_dir is not None:
        path = Path(out_dir) / "model.eqck"
        ckpt.save_model(str(path), model,
                        train_meta={"epochs": cfg.epochs, "seed": cfg.seed,
                                    "adversarial_eps": cfg.adversarial_eps,
                                    "final_loss": history[-1] if history else None})
    return model, history


def attack_config(cfg, method, specs):
    return AttackConfig(method=method, epsilon=cfg.epsilon, steps=cfg.attack_steps,
                        lambda_e=cfg.lambda_e if method == "adaptive" else 0.0,
                        specs=specs if method == "adaptive" else [],
                        seed=child_seed(cfg.seed, "attack/" + method))


def defense_config(cfg, objective, specs):
    sample = None
    if cfg.sample_fraction < 1.0:
        sample = ConstraintSample(cfg.sample_fraction,
                                  seed=child_seed(cfg.seed, "subsample"))
    return DefenseConfig(objective=objective, epsilon_v=cfg.epsilon_v,
                         steps=cfg.defense_steps, specs=specs, sample=sample,
                         seed=child_seed(cfg.seed, "defense/" + objective))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def write_report(out_dir, rows, meta, ledger=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in rows for k in r})
    front = [k for k in ("attack", "defense") if k in keys]
    keys = front + [k for k in keys if k not in front]
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])
    with open(out / "report.json", "w") as f:
        json.dump({"meta": meta, "rows": rows}, f, indent=2, sort_keys=True)
    if ledger:
        with open(out / "ledger.jsonl", "w") as f:
            for entry in ledger:
                f.write(json.dumps(entry, sort_keys=True) + "\n")


def run_experiment(cfg, out_dir, model=None):
    """Full pipeline: train, attack grid, defense grid, equivariance block,
    detector block, timing ledger; writes report.csv/report.json/ledger.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = _specs_for(cfg)
    metric = dat.metric_for_task(cfg.task, 4 if cfg.task == "segmentation" else 10)
    if model is None:
        model, _ = train_model(cfg, out_dir=out)
    ckpt_hash = hashlib.sha256((out / "model.eqck").read_bytes()).hexdigest()[:16] \
        if (out / "model.eqck").exists() else ""
    _, (xev, yev) = make_datasets(cfg)

    t0 = time.perf_counter()
    clean_pred = model.predict(xev)
    t_infer = (time.perf_counter() - t0) / len(xev)
    clean_metric = metric(clean_pred, yev)

    rows = []
    ledger = []
    attacked_sets = {}
    for method in cfg.attacks:
        acfg = attack_config(cfg, method, specs)
        if method == "bpda":
            dcfg = defense_config(cfg, "equivariance", specs)
            xa, info = bpda_attack(model, dcfg, xev, yev, acfg)
            ledger.append({"stage": "attack", "method": method, **info})
        else:
            xa = attack(model, xev, yev, acfg)
        attacked_sets[method] = xa
        ckpt.save_images(str(out / f"attacked_{method}.eqck"), xa,
                         {"method": method, "epsilon": cfg.epsilon,
                          "seed": acfg.seed, "clean": "eval-set"})

    t_defend = None
    for method, xa in attacked_sets.items():
        for objective in cfg.defenses:
            dcfg = defense_config(cfg, objective, specs)
            t0 = time.perf_counter()
            x_def = defend(model, xa, dcfg)
            dt = (time.perf_counter() - t0) / len(xev)
            if objective == "equivariance":
                t_defend = dt
            robust = metric(model.predict(x_def), yev)
            x_clean_def = defend(model, xev, dcfg)
            rows.append({"attack": method, "defense": objective,
                         "clean_metric": metric(model.predict(x_clean_def), yev),
                         "robust_metric": robust,
                         "config_hash": cfg.hash(), "checkpoint_hash": ckpt_hash})

    # equivariance measurement block (clean / attacked / restored)
    ref_attack = cfg.attacks[0]
    xa = attacked_sets[ref_attack]
    dcfg = defense_config(cfg, "equivariance", specs)
    sub = min(len(xev), 100)
    eq_clean = equivariance_scores(model, xev[:sub], specs)
    eq_att = equivariance_scores(model, xa[:sub], specs)
    eq_rest = equivariance_scores(model, defend(model, xa[:sub], dcfg), specs)
    eq_row = {"attack": ref_attack, "defense": "equivariance-measurement",
              "equi_clean": float(eq_clean.mean()),
              "equi_attacked": float(eq_att.mean()),
              "equi_restored": float(eq_rest.mean()),
              "config_hash": cfg.hash(), "checkpoint_hash": ckpt_hash}
    rows.append(eq_row)

    # detector block: adversarial + corruption AUROC against clean scores
    t0 = time.perf_counter()
    s_clean = detection_score(model, xev, specs)
    t_detect = (time.perf_counter() - t0) / len(xev)
    det_row = {"attack": ref_attack, "defense": "detector",
               "auroc_adversarial": auroc(detection_score(model, xa, specs), s_clean),
               "config_hash": cfg.hash(), "checkpoint_hash": ckpt_hash}
    for kind in CORRUPTIONS:
        xc = corrupt(xev, kind, cfg.corruption_severity,
                     seed=child_seed(cfg.seed, "corrupt/" + kind))
        det_row[f"auroc_{kind}"] = auroc(detection_score(model, xc, specs), s_clean)
    rows.append(det_row)

    # detect-then-defend routing on a clean + attacked mix
    cal = calibrate(s_clean, quantile=cfg.detector_quantile)
    cal.save(str(out / "calibration.json"))
    route_ledger = []
    routed = detect_then_defend(model, xev, cal, dcfg, specs, ledger=route_ledger)
    rows.append({"attack": "none", "defense": "detect-then-defend",
                 "clean_metric": metric(routed, yev),
                 "always_defend_clean_metric":
                     metric(model.predict(defend(model, xev, dcfg)), yev),
                 "vanilla_clean_metric": clean_metric,
                 "config_hash": cfg.hash(), "checkpoint_hash": ckpt_hash})
    ledger.extend({"stage": "route", **e} for e in route_ledger)
    ledger.append({"stage": "timing", "inference_s_per_image": t_infer,
                   "detection_s_per_image": t_detect,
                   "defense_s_per_image": t_defend,
                   "bpda_weaker_than_pgd_alarm": _bpda_alarm(rows)})

    rows.append({"attack": "none", "defense": "none", "clean_metric": clean_metric,
                 "robust_metric": clean_metric, "config_hash": cfg.hash(),
                 "checkpoint_hash": ckpt_hash})
    write_report(out, rows, {"config": cfg.to_json(), "config_hash": cfg.hash(),
                             "checkpoint_hash": ckpt_hash}, ledger)
    return rows


def _bpda_alarm(rows):
    """True when BPDA under the equivariance defense is *weaker* than PGD,
    which would indicate a broken adaptive attack."""
    by = {(r.get("attack"), r.get("defense")): r for r in rows}
    pgd = by.get(("pgd", "equivariance"))
    bpda = by.get(("bpda", "equivariance"))
    if pgd is None or bpda is None:
        return None
    return bool(bpda["robust_metric"] > pgd["robust_metric"] + 0.02)


def run_epsv_sweep(cfg, out_dir, eps_list=None, model=None):
    eps_list = eps_list if eps_list is not None else [i / 255.0 for i in
                                                      (0, 1, 2, 4, 6, 8, 10)]
    specs = _specs_for(cfg)
    metric = dat.metric_for_task(cfg.task, 4 if cfg.task == "segmentation" else 10)
    if model is None:
        model, _ = train_model(cfg, out_dir=out_dir)
    _, (xev, yev) = make_datasets(cfg)
    xa = attack(model, xev, yev, attack_config(cfg, "pgd", specs))
    dcfg = defense_config(cfg, "equivariance", specs)
    rows = sweep_epsilon_v(model, xev, yev, xa, eps_list, dcfg, metric)
    for r in rows:
        r["config_hash"] = cfg.hash()
    write_report(out_dir, rows, {"config": cfg.to_json(), "sweep": "epsilon_v"})
    _write_svg(Path(out_dir) / "sweep_epsv.svg",
               [r["epsilon_v"] for r in rows],
               {"clean": [r["clean"] for r in rows],
                "robust": [r["robust"] for r in rows]})
    return rows


def run_constraint_sweep(cfg, out_dir, fractions=(0.01, 0.05, 0.1, 0.25, 0.5, 1.0),
                         model=None):
    specs = _specs_for(cfg)
    metric = dat.metric_for_task(cfg.task, 4 if cfg.task == "segmentation" else 10)
    if model is None:
        model, _ = train_model(cfg, out_dir=out_dir)
    _, (xev, yev) = make_datasets(cfg)
    xa = attack(model, xev, yev, attack_config(cfg, "pgd", specs))
    feat_hw = model.features(np.zeros((1, 3, cfg.extent, cfg.extent))).shape[2:]
    rows = []
    for frac in fractions:
        c = replace(cfg, sample_fraction=float(frac))
        dcfg = defense_config(c, "equivariance", specs)
        robust = metric(model.predict(defend(model, xa, dcfg)), yev)
        rows.append({"fraction": float(frac),
                     "num_constraints": int(round(frac * feat_hw[0] * feat_hw[1])),
                     "robust": robust, "config_hash": cfg.hash()})
    write_report(out_dir, rows, {"config": cfg.to_json(), "sweep": "constraints"})
    _write_svg(Path(out_dir) / "sweep_constraints.svg",
               [r["num_constraints"] for r in rows], {"robust": [r["robust"] for r in rows]})
    return rows


ABLATION_TRANSFORMS = {
    "flip": [tf.hflip()],
    "resize": [tf.resize(0.7), tf.resize(1.4)],
    "rotation<=15": [tf.rotate(-12.0), tf.rotate(12.0)],
    "rotation>=90": [tf.rotate(120.0), tf.rotate(-120.0)],
}


def run_transform_ablation(cfg, out_dir, model=None):
    """Robust metric per single-transform defense for both objectives."""
    metric = dat.metric_for_task(cfg.task, 4 if cfg.task == "segmentation" else 10)
    if model is None:
        model, _ = train_model(cfg, out_dir=out_dir)
    _, (xev, yev) = make_datasets(cfg)
    xa = attack(model, xev, yev, attack_config(cfg, "pgd", _specs_for(cfg)))
    rows = []
    for name, specs in ABLATION_TRANSFORMS.items():
        for objective in ("equivariance", "invariance"):
            dcfg = defense_config(cfg, objective, specs)
            robust = metric(model.predict(defend(model, xa, dcfg)), yev)
            rows.append({"transform": name, "objective": objective,
                         "robust": robust, "config_hash": cfg.hash()})
    write_report(out_dir, rows, {"config": cfg.to_json(), "sweep": "transform-ablation"})
    return rows


def _write_svg(path, xs, series, width=480, height=320):
    """Tiny line-plot emitter for sweep curves; no plotting deps."""
    xs = [float(v) for v in xs]
    lo_x, hi_x = min(xs), max(xs) or 1.0
    all_y = [v for ys in series.values() for v in ys]
    lo_y, hi_y = min(all_y), max(all_y)
    span_x = (hi_x - lo_x) or 1.0
    span_y = (hi_y - lo_y) or 1.0
    colors = ["#1f77b4", "#d62728", "#2ca02c"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for ci, (name, ys) in enumerate(series.items()):
        pts = " ".join(
            f"{20 + (x - lo_x) / span_x * (width - 40):.1f},"
            f"{height - 20 - (y - lo_y) / span_y * (height - 40):.1f}"
            for x, y in zip(xs, ys))
        color = colors[ci % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="25" y="{20 + 15 * ci}" fill="{color}" '
                     f'font-size="12">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
