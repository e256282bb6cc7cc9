"""Command line: embed-exporter export --model ID --images DIR --classes FILE --out PATH."""

import argparse
import logging
import sys

from .export import ExportJob, export, read_class_file


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embed-exporter")
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="write a PBEB bundle of embeddings")
    exp.add_argument("--model", required=True,
                     help="Hugging Face model id, or random-clip:SEED:DIM:IMG:PATCH")
    exp.add_argument("--images", required=True,
                     help="directory with one subdirectory per class name")
    exp.add_argument("--classes", required=True, help="file with one class name per line")
    exp.add_argument("--out", required=True, help="bundle output path")
    exp.add_argument("--no-normalize", action="store_true",
                     help="store raw (not unit-norm) embeddings")
    exp.add_argument("--layer", type=int, default=-1,
                     help="vision transformer layer for patch tokens (default: final)")
    exp.add_argument("--batch-size", type=int, default=16)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    args = build_parser().parse_args(argv)
    job = ExportJob(
        model_id=args.model,
        image_dir=args.images,
        class_names=read_class_file(args.classes),
        out_path=args.out,
        normalize=not args.no_normalize,
        layer=args.layer,
        batch_size=args.batch_size,
    )
    try:
        manifest = export(job)
    except (FileNotFoundError, RuntimeError, ValueError) as err:
        print(f"export failed: {err}", file=sys.stderr)
        return 1
    print(
        f"exported {manifest['n_images']} images ({manifest['c']} classes, "
        f"d={manifest['d']}, m={manifest['m']}) to {manifest['out']}",
        file=sys.stderr,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
