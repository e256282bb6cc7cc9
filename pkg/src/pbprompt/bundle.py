"""Binary serialization of embedding bundles.

Layout (little-endian):

    magic "PBEB" (4 bytes)
    format version  u32
    header length   u32
    header          UTF-8 JSON {"d", "m", "c", "n_images", "normalized", "dtype"}
    payload         class_embeddings C*d f32,
                    then per image [global d f32, patches M*d f32, label u32]

No padding anywhere; identical bundles serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .encoders import EmbeddingBundle
from .errors import (
    BadMagicError,
    BadVersionError,
    BundleFormatError,
    TruncatedPayloadError,
)

MAGIC = b"PBEB"
VERSION = 1
_HEADER_KEYS = ("d", "m", "c", "n_images", "normalized", "dtype")


def _header_bytes(bundle: EmbeddingBundle) -> bytes:
    header = {
        "d": bundle.d,
        "m": bundle.num_patches,
        "c": bundle.num_classes,
        "n_images": bundle.n_images,
        "normalized": bundle.normalized,
        "dtype": "f32",
    }
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def write_bundle(bundle: EmbeddingBundle, path) -> None:
    """Serialize a validated bundle; I/O errors propagate with path context."""
    bundle.validate()
    header = _header_bytes(bundle)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    parts.append(bundle.class_embeddings.astype("<f4").tobytes())
    for i in range(bundle.n_images):
        parts.append(bundle.globals[i].astype("<f4").tobytes())
        parts.append(bundle.patches[i].astype("<f4").tobytes())
        parts.append(struct.pack("<I", int(bundle.labels[i])))
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as err:
        raise OSError(f"cannot write bundle to {path}: {err}") from err


def _read_header(fh, path) -> dict:
    magic = fh.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    fixed = fh.read(8)
    if len(fixed) != 8:
        raise TruncatedPayloadError(f"{path}: file ends inside the fixed header")
    version, header_len = struct.unpack("<II", fixed)
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    raw = fh.read(header_len)
    if len(raw) != header_len:
        raise TruncatedPayloadError(f"{path}: file ends inside the JSON header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise BundleFormatError(f"{path}: header is not valid JSON: {err}") from err
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise BundleFormatError(f"{path}: header missing keys {missing}")
    if header["dtype"] != "f32":
        raise BundleFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    return header


def read_bundle_header(path) -> dict:
    """Magic/version/header only; the payload is never touched."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_bundle(path) -> EmbeddingBundle:
    """Read, decode and fully validate a bundle file."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    d, m, c = header["d"], header["m"], header["c"]
    n = header["n_images"]
    class_bytes = c * d * 4
    image_bytes = (d + m * d) * 4 + 4
    expected = class_bytes + n * image_bytes
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    class_embeddings = np.frombuffer(payload, "<f4", count=c * d).astype(np.float64)
    class_embeddings = class_embeddings.reshape(c, d)
    globals_ = np.empty((n, d))
    patches = np.empty((n, m, d))
    labels = np.empty(n, dtype=np.int64)
    offset = class_bytes
    for i in range(n):
        globals_[i] = np.frombuffer(payload, "<f4", count=d, offset=offset)
        offset += d * 4
        patches[i] = np.frombuffer(payload, "<f4", count=m * d, offset=offset).reshape(m, d)
        offset += m * d * 4
        labels[i] = struct.unpack_from("<I", payload, offset)[0]
        offset += 4
    bundle = EmbeddingBundle(
        d=d,
        num_patches=m,
        num_classes=c,
        class_embeddings=class_embeddings,
        globals=globals_,
        patches=patches,
        labels=labels,
        normalized=bool(header["normalized"]),
    )
    bundle.validate()
    return bundle
