#!/usr/bin/env python3
"""Monte Carlo sample-count ablation.

Trains one model, then sweeps the prediction sample count S (plus the
mean-latent mode) and reports test accuracy and the across-seed variance of
the winning probability, mirroring the sampling-count study.

Usage:
    python scripts/run_sampling_ablation.py [--samples 1,5,20] [--repeats 40]
"""

import argparse
import json

import numpy as np

from pbprompt.encoders import SyntheticVLP
from pbprompt.training import RunConfig, TrainData, predict, train


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--samples", default="1,5,20")
    parser.add_argument("--repeats", type=int, default=40)
    parser.add_argument("--epochs", type=int, default=20)
    args = parser.parse_args()
    sample_counts = [int(s) for s in args.samples.split(",")]

    vlp = SyntheticVLP(seed=0, num_classes=4, modes=2)
    train_bundle = vlp.make_bundle(shots=16, seed=0, purpose="train")
    test_bundle = vlp.make_bundle(shots=10, seed=0, purpose="test")
    cfg = RunConfig(epochs=args.epochs, seed=0)
    model, _ = train(TrainData.from_bundle(train_bundle), vlp, cfg)

    data = TrainData.from_bundle(test_bundle)
    report = {}
    image = (data.globals[0], data.patches[0])
    for s_count in sample_counts:
        eval_cfg = RunConfig(epochs=args.epochs, seed=0, samples=s_count)
        hits = 0
        for i in range(data.n_images):
            probs = predict(
                (data.globals[i], data.patches[i]), model, vlp, eval_cfg,
                seed=i, class_embeddings=data.class_embeddings,
            )
            hits += int(np.argmax(probs) == data.labels[i])
        tops = [
            predict(image, model, vlp, eval_cfg, seed=r,
                    class_embeddings=data.class_embeddings).max()
            for r in range(args.repeats)
        ]
        report[f"S={s_count}"] = {
            "accuracy": hits / data.n_images,
            "top_prob_variance": float(np.var(tops)),
        }
    mean_cfg = RunConfig(epochs=args.epochs, seed=0, samples=1)
    hits = 0
    for i in range(data.n_images):
        probs = predict(
            (data.globals[i], data.patches[i]), model, vlp, mean_cfg,
            seed=i, class_embeddings=data.class_embeddings, mode="mean",
        )
        hits += int(np.argmax(probs) == data.labels[i])
    report["mean-latent"] = {"accuracy": hits / data.n_images, "top_prob_variance": 0.0}
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
