"""Export job: images + class names -> one PBEB bundle plus a manifest.

The image directory holds one subdirectory per class name; every decodable
image inside a listed class directory is exported.  Undecodable files are
skipped with a warning and recorded in the sidecar manifest; unlisted paths
are recorded as unlabeled.  Zero exported images is a hard error.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .bundle_writer import bundle_bytes, write_bundle_atomic
from .models import VisionLanguageModel, load_model

log = logging.getLogger("embed_exporter")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


@dataclass
class ExportJob:
    model_id: str
    image_dir: str
    class_names: list
    out_path: str
    normalize: bool = True
    layer: int = -1
    batch_size: int = 16

    def validate(self) -> None:
        if not self.class_names:
            raise ValueError("class list must be nonempty")
        if not os.path.isdir(self.image_dir):
            raise FileNotFoundError(f"image directory {self.image_dir} does not exist")


def read_class_file(path: str) -> list:
    """One class name per line; blank lines and #-comments are ignored."""
    names = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                names.append(line)
    return names


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _collect_images(job: ExportJob):
    """(path, label) pairs under class subdirectories, plus skipped paths."""
    wanted = {name: idx for idx, name in enumerate(job.class_names)}
    found = []
    skipped = []
    for root, _, files in os.walk(job.image_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            if os.path.splitext(name)[1].lower() not in IMAGE_SUFFIXES:
                continue
            class_dir = os.path.basename(os.path.dirname(path))
            if class_dir in wanted:
                found.append((path, wanted[class_dir]))
            else:
                skipped.append({"path": path, "reason": "not under a listed class"})
    found.sort()
    return found, skipped


def export(job: ExportJob) -> dict:
    """Run the export; returns the manifest that is also written alongside."""
    from PIL import Image, UnidentifiedImageError

    job.validate()
    model = load_model(job.model_id)
    entries, skipped = _collect_images(job)

    pixel_rows, labels, exported = [], [], []
    for path, label in entries:
        try:
            with Image.open(path) as img:
                pixel_rows.append(model.preprocess(img))
        except (UnidentifiedImageError, OSError) as err:
            log.warning("skipping undecodable image %s: %s", path, err)
            skipped.append({"path": path, "reason": f"undecodable: {err}"})
            continue
        labels.append(label)
        exported.append(path)
    if not pixel_rows:
        raise RuntimeError("no images could be exported")

    globals_rows, patch_rows = [], []
    for start in range(0, len(pixel_rows), job.batch_size):
        batch = np.stack(pixel_rows[start : start + job.batch_size])
        g, p = model.encode_images(batch, layer=job.layer)
        globals_rows.append(g)
        patch_rows.append(p)
    globals_ = np.concatenate(globals_rows)
    patches = np.concatenate(patch_rows)
    class_embeddings = _class_embeddings(model, job.class_names)

    if job.normalize:
        globals_ = _normalize_rows(globals_)
        patches = _normalize_rows(patches)
        class_embeddings = _normalize_rows(class_embeddings)

    data = bundle_bytes(
        class_embeddings, globals_, patches, np.asarray(labels), job.normalize
    )
    write_bundle_atomic(data, job.out_path)

    manifest = {
        "model": job.model_id,
        "out": job.out_path,
        "d": model.embed_dim,
        "m": model.patch_grid,
        "c": len(job.class_names),
        "n_images": len(exported),
        "layer": job.layer,
        "normalized": job.normalize,
        "skipped": skipped,
    }
    manifest_path = job.out_path + ".manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _class_embeddings(model: VisionLanguageModel, class_names) -> np.ndarray:
    """Average the text embeddings of each class's comma-separated variants."""
    rows = []
    for name in class_names:
        variants = [v.strip() for v in name.split(",") if v.strip()]
        embeds = model.encode_texts(variants)
        rows.append(_normalize_rows(embeds).mean(axis=0))
    return np.stack(rows)
