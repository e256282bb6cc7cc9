#!/usr/bin/env python3
"""Desk-scale base-to-new experiment.

Trains prompts on the first 4 of 8 synthetic classes (3 modes, 16 shots,
50 epochs) and evaluates base/new accuracy and the harmonic mean, for the
full model (eta 0.01) and the eta 0 ablation, over a list of seeds.  Writes
one run directory per (arm, seed) plus a comparison JSON.

Usage:
    python scripts/run_base_to_new.py --out /tmp/b2n [--seeds 0..9]
        [--regularizer ct|ot] [--epochs 50] [--test-shots 20]
"""

import argparse
import json
import os
import sys

import numpy as np

from pbprompt.experiment import ExperimentSpec, SyntheticSpec, run_experiment
from pbprompt.training import RunConfig


def parse_seeds(text):
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def run(out_dir, seeds, regularizer="ct", epochs=50, test_shots=20, eta=0.01):
    data = SyntheticSpec(
        classes=8, modes=3, shots=16, test_shots=test_shots, seed=0
    )
    arms = {}
    for name, arm_eta in (("full", eta), ("ablation", 0.0)):
        cfg = RunConfig(eta=arm_eta, epochs=epochs, regularizer=regularizer)
        spec = ExperimentSpec(
            config=cfg,
            out_dir=os.path.join(out_dir, name),
            seeds=seeds,
            synthetic=data,
            base_count=4,
        )
        arms[name] = run_experiment(spec)

    comparison = {"seeds": seeds, "per_seed": [], "strict_wins": 0}
    for full_run, abl_run in zip(arms["full"]["runs"], arms["ablation"]["runs"]):
        record = {
            "seed": full_run["seed"],
            "full_h": full_run["h"],
            "ablation_h": abl_run["h"],
            "delta_h": full_run["h"] - abl_run["h"],
        }
        comparison["per_seed"].append(record)
        if full_run["h"] > abl_run["h"]:
            comparison["strict_wins"] += 1
    comparison["mean_h_full"] = float(np.mean([r["full_h"] for r in comparison["per_seed"]]))
    comparison["mean_h_ablation"] = float(
        np.mean([r["ablation_h"] for r in comparison["per_seed"]])
    )
    with open(os.path.join(out_dir, "comparison.json"), "w", encoding="utf-8") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return comparison


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", required=True)
    parser.add_argument("--seeds", default="0..9")
    parser.add_argument("--regularizer", choices=["ct", "ot"], default="ct")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--test-shots", type=int, default=20)
    parser.add_argument("--eta", type=float, default=0.01)
    args = parser.parse_args()
    comparison = run(
        args.out,
        parse_seeds(args.seeds),
        regularizer=args.regularizer,
        epochs=args.epochs,
        test_shots=args.test_shots,
        eta=args.eta,
    )
    print(json.dumps(comparison, indent=2, sort_keys=True))
    wins = comparison["strict_wins"]
    n = len(comparison["per_seed"])
    print(
        f"mean H: full {comparison['mean_h_full']:.4f} vs "
        f"ablation {comparison['mean_h_ablation']:.4f}; strict wins {wins}/{n}",
        file=sys.stderr,
    )


if __name__ == "__main__":
    main()
