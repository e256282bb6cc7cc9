"""Frozen synthetic encoder pair and the in-memory embedding bundle.

The synthetic encoders stand in for a pre-trained vision-language model: a
patch/image encoder that emits unit-norm shared-space vectors, and a text
encoder that maps a prompt token sequence to one unit-norm vector.  All
weights are pure functions of the construction seed and never receive
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BundleValidationError,
    DimensionError,
    NumericDegeneracyError,
    ParameterError,
)
from .seeding import child_rng

NORM_TOL = 1e-6


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class EmbeddingBundle:
    """Frozen shared-space embeddings for a set of images and class names.

    ``class_embeddings`` is (C, d); ``globals`` is (N, d); ``patches`` is
    (N, M, d); ``labels`` is (N,) int.  When ``normalized`` is set every
    stored vector must be unit-norm to within 1e-6.
    """

    d: int
    num_patches: int
    num_classes: int
    class_embeddings: np.ndarray
    globals: np.ndarray
    patches: np.ndarray
    labels: np.ndarray
    normalized: bool = True

    @property
    def n_images(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        c, m, d = self.num_classes, self.num_patches, self.d
        if self.class_embeddings.shape != (c, d):
            raise BundleValidationError(
                f"class_embeddings shape {self.class_embeddings.shape} != ({c}, {d})"
            )
        n = self.n_images
        if self.globals.shape != (n, d):
            raise BundleValidationError(
                f"globals shape {self.globals.shape} != ({n}, {d})"
            )
        if self.patches.shape != (n, m, d):
            raise BundleValidationError(
                f"patches shape {self.patches.shape} != ({n}, {m}, {d})"
            )
        bad = np.nonzero((self.labels < 0) | (self.labels >= c))[0]
        if bad.size:
            raise BundleValidationError(
                f"image {bad[0]} has label {self.labels[bad[0]]} outside [0, {c})"
            )
        if self.normalized:
            self._check_norms("class embedding", self.class_embeddings)
            self._check_norms("global feature", self.globals)
            self._check_norms("patch row", self.patches.reshape(-1, d))

    @staticmethod
    def _check_norms(what: str, rows: np.ndarray) -> None:
        norms = np.linalg.norm(rows, axis=-1)
        bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
        if bad.size:
            i = int(bad[0])
            raise BundleValidationError(
                f"{what} {i} has norm {norms[i]:.8f}, expected 1 within {NORM_TOL}"
            )

    def subset_classes(self, class_ids) -> "EmbeddingBundle":
        """Images and embeddings restricted to ``class_ids``; labels remapped."""
        class_ids = list(class_ids)
        remap = {c: i for i, c in enumerate(class_ids)}
        keep = np.isin(self.labels, class_ids)
        labels = np.array([remap[int(y)] for y in self.labels[keep]], dtype=np.int64)
        return EmbeddingBundle(
            d=self.d,
            num_patches=self.num_patches,
            num_classes=len(class_ids),
            class_embeddings=self.class_embeddings[class_ids],
            globals=self.globals[keep],
            patches=self.patches[keep],
            labels=labels,
            normalized=self.normalized,
        )


class SyntheticVLP:
    """Frozen encoder pair, a pure function of (seed, d, M, b, classes, modes).

    Each class has a generative center plus per-mode offsets; images of a
    (class, mode) pair are Gaussian clouds around that center in raw space,
    then pushed through a frozen projection onto the unit sphere.  The text
    side mean-pools the prompt tokens, applies a frozen linear map and tanh,
    and normalizes.
    """

    def __init__(
        self,
        seed: int,
        d: int = 64,
        num_patches: int = 16,
        prompt_len: int = 4,
        num_classes: int = 8,
        modes: int = 3,
        noise_scale: float = 0.5,
        mode_spread: float = 1.0,
        bg_patches: int | None = None,
        bg_pool: int = 8,
        shortcut_patches: int | None = None,
        shortcut_scale: float = 2.0,
    ):
        if min(d, num_patches, num_classes, modes) < 1 or prompt_len < 0:
            raise ParameterError("all SyntheticVLP extents must be positive")
        # Default layout: roughly 7/16 background and 3/16 shortcut patches.
        if bg_patches is None:
            bg_patches = round(num_patches * 7 / 16)
        if shortcut_patches is None:
            shortcut_patches = round(num_patches * 3 / 16)
        if bg_patches < 0 or shortcut_patches < 0:
            raise ParameterError("patch-group counts must be nonnegative")
        if bg_patches + shortcut_patches >= num_patches:
            raise ParameterError(
                "bg_patches + shortcut_patches must leave at least one signal patch"
            )
        self.seed = int(seed)
        self.d = d
        self.num_patches = num_patches
        self.prompt_len = prompt_len
        self.num_classes = num_classes
        self.modes = modes
        self.noise_scale = float(noise_scale)
        self.mode_spread = float(mode_spread)
        self.bg_patches = int(bg_patches)
        self.bg_pool = int(bg_pool)
        self.shortcut_patches = int(shortcut_patches)
        self.shortcut_scale = float(shortcut_scale)

        rng = child_rng(self.seed, "vlp-weights")
        self.image_proj = rng.standard_normal((d, d)) / np.sqrt(d)
        self.text_proj = rng.standard_normal((d, d)) / np.sqrt(d)
        self.class_centers = rng.standard_normal((num_classes, d))
        self.mode_offsets = mode_spread * rng.standard_normal((num_classes, modes, d))
        # A shared pool of class-uninformative background directions; every
        # image carries the same background layout, so only the signal and
        # shortcut slots distinguish classes while the global feature gets
        # diluted.
        self.bg_directions = rng.standard_normal((max(self.bg_pool, 1), d))
        # Per-class shortcut directions: a second class-specific cue carried
        # by a few strong patches.  The label embeddings are derived from the
        # signal centers only, so prompts grounded in the signal transfer to
        # held-out classes while shortcut-grounded prompts do not.
        self.shortcut_directions = shortcut_scale * rng.standard_normal(
            (num_classes, d)
        )
        # Label embeddings live in the shared space: the projected, normalized
        # noiseless class center, mirroring a name embedding aligned with the
        # class's visual signal.
        self.class_embeddings = _normalize_rows(self.class_centers @ self.image_proj.T)
        # Frozen tensors (requires_grad stays False, so no gradients ever land).
        self._text_proj_t = Tensor(self.text_proj)
        self._text_proj_tt = Tensor(self.text_proj.T)

    def encode_image(self, class_id: int, mode_id: int, noise_seed: int):
        """One synthetic image: (global_feature (d,), patches (M, d)), both unit-norm.

        Fixed slot layout: signal patches around the class/mode center first,
        then shortcut patches around the class's shortcut direction, then
        background patches around pool directions shared by every class.
        """
        if not (0 <= class_id < self.num_classes):
            raise ParameterError(
                f"class_id {class_id} outside [0, {self.num_classes})"
            )
        if not (0 <= mode_id < self.modes):
            raise ParameterError(f"mode_id {mode_id} outside [0, {self.modes})")
        rng = child_rng(noise_seed, "img-noise", class_id, mode_id)
        center = self.class_centers[class_id] + self.mode_offsets[class_id, mode_id]
        signal_count = self.num_patches - self.bg_patches - self.shortcut_patches
        raw = np.empty((self.num_patches, self.d))
        raw[:signal_count] = center
        for slot in range(self.shortcut_patches):
            raw[signal_count + slot] = self.shortcut_directions[class_id]
        for slot in range(self.bg_patches):
            raw[signal_count + self.shortcut_patches + slot] = self.bg_directions[
                slot % self.bg_pool
            ]
        raw += self.noise_scale * rng.standard_normal((self.num_patches, self.d))
        patches = _normalize_rows(raw @ self.image_proj.T)
        global_feature = patches.mean(axis=0)
        global_feature = global_feature / np.linalg.norm(global_feature)
        return global_feature, patches

    def encode_text(self, prompt_tokens: Tensor) -> Tensor:
        """Prompt tokens ((b+1) x d) -> unit-norm d-vector, differentiable in the tokens."""
        expected = (self.prompt_len + 1, self.d)
        if prompt_tokens.shape != expected:
            raise DimensionError(
                f"encode_text expects token shape {expected}, got {prompt_tokens.shape}"
            )
        pooled = prompt_tokens.mean(axis=0)
        h = ad.tanh(ad.matmul(self._text_proj_t, pooled))
        return ad.unit_normalize(h)

    def encode_text_batch(self, prompt_tokens: Tensor) -> Tensor:
        """encode_text over a (C, b+1, d) stack of prompts at once -> (C, d)."""
        n = self.prompt_len + 1
        if prompt_tokens.ndim != 3 or prompt_tokens.shape[1:] != (n, self.d):
            raise DimensionError(
                f"encode_text_batch expects (C, {n}, {self.d}), "
                f"got {prompt_tokens.shape}"
            )
        pooled = prompt_tokens.mean(axis=1)
        h = ad.tanh(ad.matmul(pooled, self._text_proj_tt))
        norms_sq = (h * h).sum(axis=-1, keepdims=True)
        if np.any(norms_sq.values == 0.0):
            raise NumericDegeneracyError("zero-norm text embedding in batch")
        return h / ad.sqrt(norms_sq)

    def make_bundle(
        self, shots: int, seed: int, purpose: str = "train"
    ) -> EmbeddingBundle:
        """``shots`` images per class, modes cycled round-robin per class."""
        if shots < 1:
            raise ParameterError("shots must be >= 1")
        globals_, patches_, labels = [], [], []
        for c in range(self.num_classes):
            for s in range(shots):
                mode = s % self.modes
                img_seed = child_rng(seed, "img-seed-" + purpose, c, s).integers(2**31)
                g, p = self.encode_image(c, mode, int(img_seed))
                globals_.append(g)
                patches_.append(p)
                labels.append(c)
        return EmbeddingBundle(
            d=self.d,
            num_patches=self.num_patches,
            num_classes=self.num_classes,
            class_embeddings=self.class_embeddings.copy(),
            globals=np.stack(globals_),
            patches=np.stack(patches_),
            labels=np.array(labels, dtype=np.int64),
            normalized=True,
        )

    def to_meta(self) -> dict:
        return {
            "seed": self.seed,
            "d": self.d,
            "m": self.num_patches,
            "b": self.prompt_len,
            "classes": self.num_classes,
            "modes": self.modes,
            "noise": self.noise_scale,
            "mode_spread": self.mode_spread,
            "bg_patches": self.bg_patches,
            "bg_pool": self.bg_pool,
            "shortcut_patches": self.shortcut_patches,
            "shortcut_scale": self.shortcut_scale,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "SyntheticVLP":
        return cls(
            seed=meta["seed"],
            d=meta["d"],
            num_patches=meta["m"],
            prompt_len=meta["b"],
            num_classes=meta["classes"],
            modes=meta["modes"],
            noise_scale=meta["noise"],
            mode_spread=meta.get("mode_spread", 1.0),
            bg_patches=meta.get("bg_patches", 7),
            bg_pool=meta.get("bg_pool", 8),
            shortcut_patches=meta.get("shortcut_patches", 3),
            shortcut_scale=meta.get("shortcut_scale", 2.0),
        )
