"""Experiment orchestration: dataset sourcing, per-seed runs, output files.

All output files are deterministic functions of the experiment spec; nothing
timestamped goes into them (progress chatter stays on stderr).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bundle import load_bundle, write_bundle
from .encoders import SyntheticVLP
from .errors import ParameterError
from .promptgen import save_checkpoint
from .training import (
    Metrics,
    RunConfig,
    TrainData,
    eval_base_to_new,
    train,
)


@dataclass
class SyntheticSpec:
    """Parameters of a generated dataset."""

    classes: int = 8
    modes: int = 3
    shots: int = 16
    test_shots: int = 20
    noise: float = 0.5
    d: int = 64
    patches: int = 16
    seed: int = 0
    mode_spread: float = 1.0
    bg_patches: int | None = None
    shortcut_patches: int | None = None
    shortcut_scale: float = 2.0


@dataclass
class ExperimentSpec:
    """One training experiment: a single dataset source, a config, seeds."""

    config: RunConfig
    out_dir: str
    seeds: list
    synthetic: SyntheticSpec | None = None
    bundle_dir: str | None = None
    base_count: int | None = None

    def validate(self) -> None:
        if (self.synthetic is None) == (self.bundle_dir is None):
            raise ParameterError(
                "exactly one dataset source (synthetic or bundle) must be set"
            )
        if not self.seeds:
            raise ParameterError("seed list must be nonempty")


def generate_dataset(spec: SyntheticSpec, out_dir: str, prompt_len: int = 4) -> dict:
    """Write train.pbeb / test.pbeb / meta.json under ``out_dir``."""
    vlp = SyntheticVLP(
        seed=spec.seed,
        d=spec.d,
        num_patches=spec.patches,
        prompt_len=prompt_len,
        num_classes=spec.classes,
        modes=spec.modes,
        noise_scale=spec.noise,
        mode_spread=spec.mode_spread,
        bg_patches=spec.bg_patches,
        shortcut_patches=spec.shortcut_patches,
        shortcut_scale=spec.shortcut_scale,
    )
    os.makedirs(out_dir, exist_ok=True)
    train_bundle = vlp.make_bundle(spec.shots, seed=spec.seed, purpose="train")
    test_bundle = vlp.make_bundle(spec.test_shots, seed=spec.seed, purpose="test")
    write_bundle(train_bundle, os.path.join(out_dir, "train.pbeb"))
    write_bundle(test_bundle, os.path.join(out_dir, "test.pbeb"))
    meta = {"vlp": vlp.to_meta(), "shots": spec.shots, "test_shots": spec.test_shots}
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta


def load_dataset(bundle_dir: str):
    """(vlp, train bundle, test bundle) for a generated dataset directory."""
    meta_path = os.path.join(bundle_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(
            f"{bundle_dir} has no meta.json; training needs the synthetic "
            "encoder parameters (real bundles support analysis only)"
        )
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    vlp = SyntheticVLP.from_meta(meta["vlp"])
    train_bundle = load_bundle(os.path.join(bundle_dir, "train.pbeb"))
    test_path = os.path.join(bundle_dir, "test.pbeb")
    test_bundle = load_bundle(test_path) if os.path.exists(test_path) else None
    return vlp, train_bundle, test_bundle


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trace(trace: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in trace:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def metrics_report(metrics: Metrics, accuracy: float | None = None) -> dict:
    return {
        "base": metrics.base,
        "new": metrics.new,
        "h": metrics.h,
        "accuracy": accuracy,
        "per_class": {str(k): v for k, v in sorted(metrics.per_class.items())},
    }


def run_single_seed(spec: ExperimentSpec, seed: int) -> dict:
    """Train one seed, evaluate base/new if a split is configured, write files.

    Returns the summary dict that also lands in ``<out>/seed-<n>/metrics.json``.
    """
    spec.validate()
    if spec.synthetic is not None:
        data_dir = os.path.join(spec.out_dir, "data")
        if not os.path.exists(os.path.join(data_dir, "meta.json")):
            generate_dataset(spec.synthetic, data_dir, spec.config.prompt_len)
        vlp, train_bundle, test_bundle = load_dataset(data_dir)
    else:
        vlp, train_bundle, test_bundle = load_dataset(spec.bundle_dir)

    cfg = spec.config.with_overrides(seed=seed)
    num_classes = train_bundle.num_classes
    base_count = spec.base_count if spec.base_count is not None else num_classes
    base_classes = list(range(base_count))
    new_classes = list(range(base_count, num_classes))

    data = TrainData.from_bundle(train_bundle, base_classes)
    model, train_metrics = train(data, vlp, cfg)

    run_dir = os.path.join(spec.out_dir, f"seed-{seed}")
    os.makedirs(run_dir, exist_ok=True)
    save_checkpoint(model, step=len(train_metrics.loss_trace), path=os.path.join(run_dir, "checkpoint.pbck"))
    write_trace(train_metrics.loss_trace, os.path.join(run_dir, "trace.ndjson"))

    summary = {
        "seed": seed,
        "train_accuracy": train_metrics.train_accuracy,
        "max_ot_residual": train_metrics.max_ot_residual,
        "base": None,
        "new": None,
        "h": None,
    }
    if new_classes and test_bundle is not None:
        metrics = eval_base_to_new(
            model, vlp, base_classes, new_classes, cfg, test_bundle, eval_seed=seed
        )
        summary.update(base=metrics.base, new=metrics.new, h=metrics.h)
        summary["per_class"] = {str(k): v for k, v in sorted(metrics.per_class.items())}
    _dump_json(summary, os.path.join(run_dir, "metrics.json"))
    return summary


def run_experiment(spec: ExperimentSpec) -> dict:
    """All seeds of an experiment; parallel across seeds when PBP_THREADS > 1."""
    spec.validate()
    os.makedirs(spec.out_dir, exist_ok=True)
    if spec.synthetic is not None:
        # Materialize the dataset up front so parallel seed workers never race.
        data_dir = os.path.join(spec.out_dir, "data")
        if not os.path.exists(os.path.join(data_dir, "meta.json")):
            generate_dataset(spec.synthetic, data_dir, spec.config.prompt_len)
    workers = int(os.environ.get("PBP_THREADS", "1"))
    if workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_single_seed, [spec] * len(spec.seeds), spec.seeds))
    else:
        results = [run_single_seed(spec, s) for s in spec.seeds]
    hs = [r["h"] for r in results if r["h"] is not None]
    summary = {
        "seeds": list(spec.seeds),
        "runs": results,
        "mean_h": float(np.mean(hs)) if hs else None,
        "mean_train_accuracy": float(
            np.mean([r["train_accuracy"] for r in results])
        ),
    }
    _dump_json(summary, os.path.join(spec.out_dir, "summary.json"))
    return summary
