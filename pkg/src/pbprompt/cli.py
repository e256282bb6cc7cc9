"""Command-line surface: gen-data, train, eval, viz.

Config precedence is command-line flag > JSON config file > built-in
default.  Exit codes: 0 success, 1 usage, 2 numeric abort, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bundle import load_bundle
from .errors import (
    BundleFormatError,
    ConvergenceError,
    NaNLossError,
    NumericDegeneracyError,
    ParameterError,
    PBPromptError,
)
from .experiment import (
    ExperimentSpec,
    SyntheticSpec,
    generate_dataset,
    load_dataset,
    run_experiment,
    _dump_json,
)
from .promptgen import load_checkpoint
from .training import (
    RunConfig,
    encode_class_prompts,
    evaluate_split,
    harmonic_mean,
)
from .transport import (
    class_probs,
    plan_patch_to_prompt,
    plan_prompt_to_patch,
    write_plan_csv,
    write_plan_pgm,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_seeds(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def _build_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            data.update(json.load(fh))
    cfg = RunConfig.from_dict(data)
    overrides = {}
    for flag, name in (
        ("eta", "eta"),
        ("lam", "lam"),
        ("samples", "samples"),
        ("regularizer", "regularizer"),
        ("tau", "tau"),
        ("epochs", "epochs"),
        ("lr", "lr"),
        ("kl_weight", "kl_weight"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides)


def _add_config_flags(p: _Parser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON file of RunConfig fields")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--regularizer", choices=["ct", "ot", "none"], default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--kl-weight", dest="kl_weight", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="pbprompt")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--modes", type=int, default=3)
    gen.add_argument("--shots", type=int, default=16)
    gen.add_argument("--test-shots", type=int, default=20)
    gen.add_argument("--noise", type=float, default=0.5)
    gen.add_argument("--dim", type=int, default=64)
    gen.add_argument("--patches", type=int, default=16)
    gen.add_argument("--bg-patches", type=int, default=None)
    gen.add_argument("--shortcut-patches", type=int, default=None)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train one or more seeds")
    _add_config_flags(tr)
    tr.add_argument("--seeds", default=None, help="N or N..M (inclusive)")
    tr.add_argument("--bundle", default=None, help="dataset directory from gen-data")
    tr.add_argument("--classes", type=int, default=None, help="synthetic dataset classes")
    tr.add_argument("--modes", type=int, default=None)
    tr.add_argument("--shots", type=int, default=None)
    tr.add_argument("--noise", type=float, default=None)
    tr.add_argument("--base-count", type=int, default=None,
                    help="train on the first N classes, evaluate base/new")
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_config_flags(ev)
    ev.add_argument("--checkpoint", default=None,
                    help="omit to score the frozen label-embedding classifier")
    ev.add_argument("--bundle", required=True, help="dataset directory")
    ev.add_argument("--split", choices=["base", "new", "all"], default="all")
    ev.add_argument("--base-count", type=int, default=None)
    ev.add_argument("--use-train-split", action="store_true",
                    help="score train.pbeb instead of test.pbeb")
    ev.add_argument("--out", default=None, help="where to write metrics JSON")

    vz = sub.add_parser("viz", help="export transport plans for one image")
    _add_config_flags(vz)
    vz.add_argument("--checkpoint", default=None)
    vz.add_argument("--bundle", required=True, help="dataset directory or .pbeb file")
    vz.add_argument("--image", type=int, required=True)
    vz.add_argument("--class", dest="class_index", type=int, required=True)
    vz.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        classes=args.classes,
        modes=args.modes,
        shots=args.shots,
        test_shots=args.test_shots,
        noise=args.noise,
        d=args.dim,
        patches=args.patches,
        bg_patches=args.bg_patches,
        shortcut_patches=args.shortcut_patches,
        seed=args.seed,
    )
    if min(spec.classes, spec.modes, spec.shots) < 1:
        raise ParameterError("classes, modes and shots must all be >= 1")
    generate_dataset(spec, args.out)
    print(f"wrote dataset to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    seeds = _parse_seeds(args.seeds) if args.seeds else [cfg.seed]
    synthetic = None
    if args.bundle is None:
        synthetic = SyntheticSpec(
            classes=args.classes or 8,
            modes=args.modes or 3,
            shots=args.shots or 16,
            noise=args.noise if args.noise is not None else 0.5,
            seed=cfg.seed,
        )
    spec = ExperimentSpec(
        config=cfg,
        out_dir=args.out,
        seeds=seeds,
        synthetic=synthetic,
        bundle_dir=args.bundle,
        base_count=args.base_count,
    )
    summary = run_experiment(spec)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    vlp, train_bundle, test_bundle = load_dataset(args.bundle)
    bundle = train_bundle if args.use_train_split else (test_bundle or train_bundle)
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        if model.generator.d != bundle.d:
            raise ParameterError(
                f"checkpoint dimension {model.generator.d} != bundle dimension {bundle.d}"
            )

    def split_accuracy(ids):
        if model is None:
            return _frozen_accuracy(bundle, ids, cfg.tau)
        return evaluate_split(model, vlp, cfg, bundle, ids, eval_seed=cfg.seed)

    base_count = args.base_count
    if base_count is None and args.split in ("base", "new"):
        base_count = bundle.num_classes // 2
    base_ids = list(range(base_count)) if base_count is not None else []
    new_ids = list(range(base_count, bundle.num_classes)) if base_count is not None else []

    report = {"base": None, "new": None, "h": None, "accuracy": None, "per_class": {}}
    if args.split in ("base", "all") and base_ids:
        acc, pc = split_accuracy(base_ids)
        report["base"] = acc
        report["per_class"].update({str(k): v for k, v in pc.items()})
    if args.split in ("new", "all") and new_ids:
        acc, pc = split_accuracy(new_ids)
        report["new"] = acc
        report["per_class"].update({str(k): v for k, v in pc.items()})
    if report["base"] is not None and report["new"] is not None:
        report["h"] = harmonic_mean(report["base"], report["new"])
    if args.split == "all":
        acc, pc = split_accuracy(list(range(bundle.num_classes)))
        report["accuracy"] = acc
        if not report["per_class"]:
            report["per_class"] = {str(k): v for k, v in pc.items()}
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        _dump_json(report, args.out)
    return EXIT_OK


def _frozen_accuracy(bundle, class_ids, tau):
    """Zero-shot scoring with the label embeddings as the prompt outputs."""
    sub = bundle.subset_classes(class_ids)
    hits = {c: 0 for c in class_ids}
    counts = {c: 0 for c in class_ids}
    total = 0
    for i in range(sub.n_images):
        sims = sub.class_embeddings @ sub.globals[i]
        pred = int(np.argmax(sims))
        original = class_ids[int(sub.labels[i])]
        counts[original] += 1
        if pred == int(sub.labels[i]):
            total += 1
            hits[original] += 1
    per_class = {c: hits[c] / counts[c] for c in class_ids if counts[c]}
    return total / sub.n_images, per_class


def _viz_prompt_embeddings(args, cfg, bundle, vlp):
    """(C, d) prompt output matrix: trained mean-latent prompts, or e_c frozen."""
    if args.checkpoint:
        if vlp is None:
            raise ParameterError(
                "viz with a checkpoint needs a generated dataset directory "
                "(meta.json) so the text encoder can be rebuilt"
            )
        model, _ = load_checkpoint(args.checkpoint)
        with ad.no_grad():
            prompts, _, _ = encode_class_prompts(
                model,
                vlp,
                Tensor(bundle.class_embeddings),
                np.zeros(bundle.class_embeddings.shape),
                deterministic=True,
            )
        return prompts.values
    return bundle.class_embeddings


def cmd_viz(args) -> int:
    cfg = _build_config(args)
    bundle_path = args.bundle
    vlp = None
    if os.path.isdir(bundle_path):
        vlp, train_bundle, test_bundle = load_dataset(bundle_path)
        bundle = test_bundle or train_bundle
    else:
        bundle = load_bundle(bundle_path)
    if not 0 <= args.image < bundle.n_images:
        raise ParameterError(
            f"image index {args.image} outside [0, {bundle.n_images})"
        )
    if not 0 <= args.class_index < bundle.num_classes:
        raise ParameterError(
            f"class index {args.class_index} outside [0, {bundle.num_classes})"
        )

    prompt_matrix = _viz_prompt_embeddings(args, cfg, bundle, vlp)
    patches = Tensor(bundle.patches[args.image])
    prompts = Tensor(prompt_matrix)
    global_t = Tensor(bundle.globals[args.image])
    probs = class_probs(global_t, prompts, cfg.tau)
    forward = plan_patch_to_prompt(patches, prompts, probs).probabilities.values
    reverse = plan_prompt_to_patch(patches, prompts).probabilities.values

    os.makedirs(args.out, exist_ok=True)
    write_plan_csv(forward, os.path.join(args.out, "plan.csv"))
    column = forward[:, args.class_index]
    write_plan_pgm(_as_grid(column), os.path.join(args.out, "heatmap.pgm"))
    rev_row = reverse[args.class_index]
    write_plan_csv(rev_row.reshape(1, -1), os.path.join(args.out, "reverse_plan.csv"))
    write_plan_pgm(_as_grid(rev_row), os.path.join(args.out, "reverse_heatmap.pgm"))
    print(f"wrote plan exports to {args.out}", file=sys.stderr)
    return EXIT_OK


def _as_grid(values: np.ndarray) -> np.ndarray:
    """Reshape M values to a square patch grid when M is a perfect square."""
    m = values.size
    side = int(round(m**0.5))
    if side * side == m:
        return values.reshape(side, side)
    return values.reshape(1, m)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "viz": cmd_viz,
    }
    try:
        return handlers[args.command](args)
    except NaNLossError as err:
        diagnostic = {"error": "nan-loss", "step": err.step, "components": err.components}
        print(json.dumps(diagnostic), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConvergenceError, NumericDegeneracyError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except BundleFormatError as err:
        print(f"load error: {err}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO
    except PBPromptError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
