"""Command-line entry point.

Subcommands: train, attack, defend, detect, eval, sweep-epsv,
sweep-constraints, ablate-transforms, report. All take a JSON experiment
config via --config; --seed and --out override the config's values.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _build_parser():
    p = argparse.ArgumentParser(prog="equirob",
                                description="Equivariance-restoring adversarial "
                                            "defense toolkit")
    p.add_argument("--config", type=str, help="path to experiment config JSON")
    p.add_argument("--seed", type=int, help="override master seed")
    p.add_argument("--out", type=str, default="out", help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="numba thread cap (kernels are single-threaded; kept "
                        "for interface stability)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "attack", "defend", "detect", "eval", "sweep-epsv",
                 "sweep-constraints", "ablate-transforms", "report"):
        sp = sub.add_parser(name)
        if name == "attack":
            sp.add_argument("--method", default="pgd")
        if name == "report":
            sp.add_argument("--dir", default=None,
                            help="report directory (defaults to --out)")
    return p


def _load_cfg(args):
    from .harness import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads:
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))

    from . import checkpoint as ckpt
    from . import data as dat
    from . import harness as hz
    from .defense import defend
    from .detector import calibrate, detection_score

    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "train":
        model, history = hz.train_model(cfg, out_dir=out)
        metric = dat.metric_for_task(cfg.task, 4 if cfg.task == "segmentation" else 10)
        _, (xev, yev) = hz.make_datasets(cfg)
        print(f"final train loss {history[-1]:.4f}  "
              f"clean eval metric {metric(model.predict(xev), yev):.4f}")
        print(f"checkpoint written to {out / 'model.eqck'}")
    elif args.command == "attack":
        model, _ = _model(cfg, out, hz, ckpt)
        specs = hz._specs_for(cfg)
        _, (xev, yev) = hz.make_datasets(cfg)
        acfg = hz.attack_config(cfg, args.method, specs)
        if args.method == "bpda":
            from .attacks import bpda_attack
            xa, info = bpda_attack(model, hz.defense_config(cfg, "equivariance", specs),
                                   xev, yev, acfg)
            print(json.dumps(info))
        else:
            from .attacks import attack
            xa = attack(model, xev, yev, acfg)
        path = out / f"attacked_{args.method}.eqck"
        ckpt.save_images(str(path), xa, {"method": args.method,
                                         "epsilon": cfg.epsilon, "seed": acfg.seed})
        print(f"attacked set written to {path}")
    elif args.command == "defend":
        model, _ = _model(cfg, out, hz, ckpt)
        specs = hz._specs_for(cfg)
        metric = dat.metric_for_task(cfg.task, 4 if cfg.task == "segmentation" else 10)
        _, (xev, yev) = hz.make_datasets(cfg)
        xa_path = out / "attacked_pgd.eqck"
        xa = ckpt.load_images(str(xa_path))[0] if xa_path.exists() else xev
        dcfg = hz.defense_config(cfg, "equivariance", specs)
        x_def = defend(model, xa, dcfg)
        print(f"robust metric after defense: {metric(model.predict(x_def), yev):.4f}")
    elif args.command == "detect":
        model, _ = _model(cfg, out, hz, ckpt)
        specs = hz._specs_for(cfg)
        _, (xev, _) = hz.make_datasets(cfg)
        scores = detection_score(model, xev, specs)
        cal = calibrate(scores, quantile=cfg.detector_quantile)
        cal.save(str(out / "calibration.json"))
        print(f"clean-score threshold (q={cfg.detector_quantile}): "
              f"{cal.threshold:.6g}")
    elif args.command == "eval":
        rows = hz.run_experiment(cfg, out)
        print(f"wrote {out / 'report.csv'} ({len(rows)} rows)")
    elif args.command == "sweep-epsv":
        rows = hz.run_epsv_sweep(cfg, out)
        for r in rows:
            print(f"eps_v={r['epsilon_v']:.6f} clean={r['clean']:.4f} "
                  f"robust={r['robust']:.4f}")
    elif args.command == "sweep-constraints":
        rows = hz.run_constraint_sweep(cfg, out)
        for r in rows:
            print(f"constraints={r['num_constraints']} robust={r['robust']:.4f}")
    elif args.command == "ablate-transforms":
        rows = hz.run_transform_ablation(cfg, out)
        for r in rows:
            print(f"{r['transform']:>13} {r['objective']:>12} "
                  f"robust={r['robust']:.4f}")
    elif args.command == "report":
        rdir = Path(getattr(args, "dir", None) or out)
        with open(rdir / "report.json") as f:
            report = json.load(f)
        for row in report["rows"]:
            print(json.dumps(row, sort_keys=True))
    return 0


def _model(cfg, out, hz, ckpt):
    path = out / "model.eqck"
    if path.exists():
        return ckpt.load_model(str(path))
    model, history = hz.train_model(cfg, out_dir=out)
    return model, {"history": history}


if __name__ == "__main__":
    sys.exit(main())
