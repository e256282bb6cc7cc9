"""Writer for the PBEB embedding-bundle format.

Layout (little-endian): magic "PBEB", u32 version, u32 header length, UTF-8
JSON header {"d","m","c","n_images","normalized","dtype"}, then the payload:
class embeddings (C*d f32) followed per image by [global d f32, patches
M*d f32, label u32], no padding.
"""

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"PBEB"
VERSION = 1


def bundle_bytes(class_embeddings, globals_, patches, labels, normalized=True) -> bytes:
    class_embeddings = np.asarray(class_embeddings, dtype=np.float32)
    globals_ = np.asarray(globals_, dtype=np.float32)
    patches = np.asarray(patches, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    c, d = class_embeddings.shape
    n, m, d2 = patches.shape
    if d2 != d or globals_.shape != (n, d) or labels.shape != (n,):
        raise ValueError(
            f"inconsistent shapes: classes {class_embeddings.shape}, "
            f"globals {globals_.shape}, patches {patches.shape}, labels {labels.shape}"
        )
    header = json.dumps(
        {"d": d, "m": m, "c": c, "n_images": n, "normalized": bool(normalized),
         "dtype": "f32"},
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    parts.append(class_embeddings.astype("<f4").tobytes())
    for i in range(n):
        parts.append(globals_[i].astype("<f4").tobytes())
        parts.append(patches[i].astype("<f4").tobytes())
        parts.append(struct.pack("<I", int(labels[i])))
    return b"".join(parts)


def write_bundle_atomic(data: bytes, path: str) -> None:
    """Write via a temp file in the destination directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".pbeb.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
