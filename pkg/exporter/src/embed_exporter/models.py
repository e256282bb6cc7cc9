"""Model loading and encoding for the exporter.

Two kinds of model identifiers are supported:

- A Hugging Face model id (e.g. ``openai/clip-vit-base-patch16``), loaded
  with ``CLIPModel.from_pretrained`` plus its tokenizer.  Needs the weights
  to be cached or downloadable.
- ``random-clip:SEED:DIM:IMAGE_SIZE:PATCH_SIZE`` builds a small randomly
  initialized CLIP architecture from a config (fully offline) with a
  deterministic hash tokenizer.  It exercises the identical export path and
  is what the tests use.

Patch embeddings are taken post-projection into the shared space: the chosen
transformer layer's patch tokens go through the final layer norm and the
visual projection, landing in the same space as the image and text features.
"""

import hashlib
import re

import numpy as np
import torch
from transformers import CLIPModel

CLIP_PIXEL_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_PIXEL_STD = np.array([0.26862954, 0.26130258, 0.27577711])

_RANDOM_ID = re.compile(r"^random-clip:(\d+):(\d+):(\d+):(\d+)$")


class VisionLanguageModel:
    """A frozen CLIP-style encoder pair behind a small uniform surface."""

    def __init__(self, model: CLIPModel, tokenizer):
        self.model = model.eval()
        self.tokenizer = tokenizer
        for p in self.model.parameters():
            p.requires_grad_(False)

    @property
    def image_size(self) -> int:
        return self.model.config.vision_config.image_size

    @property
    def patch_grid(self) -> int:
        cfg = self.model.config.vision_config
        return (cfg.image_size // cfg.patch_size) ** 2

    @property
    def embed_dim(self) -> int:
        return self.model.config.projection_dim

    def preprocess(self, image) -> np.ndarray:
        """PIL image -> CHW float array resized and normalized CLIP-style."""
        from PIL import Image

        size = self.image_size
        image = image.convert("RGB").resize((size, size), Image.BICUBIC)
        arr = np.asarray(image, dtype=np.float64) / 255.0
        arr = (arr - CLIP_PIXEL_MEAN) / CLIP_PIXEL_STD
        return arr.transpose(2, 0, 1)

    @torch.no_grad()
    def encode_images(self, pixel_batch: np.ndarray, layer: int = -1):
        """(B,3,H,W) -> (globals (B,d), patches (B,M,d)), not yet normalized."""
        pixels = torch.as_tensor(pixel_batch, dtype=torch.float32)
        out = self.model.vision_model(pixel_values=pixels, output_hidden_states=True)
        globals_ = self.model.visual_projection(out.pooler_output)
        tokens = out.hidden_states[layer][:, 1:, :]
        tokens = self.model.vision_model.post_layernorm(tokens)
        patches = self.model.visual_projection(tokens)
        return globals_.numpy().astype(np.float64), patches.numpy().astype(np.float64)

    @torch.no_grad()
    def encode_texts(self, texts) -> np.ndarray:
        """Class-name strings -> (N, d) shared-space embeddings."""
        ids, mask = self.tokenizer(texts)
        out = self.model.text_model(
            input_ids=torch.as_tensor(ids), attention_mask=torch.as_tensor(mask)
        )
        features = self.model.text_projection(out.pooler_output)
        return features.numpy().astype(np.float64)


class HashTokenizer:
    """Deterministic whitespace tokenizer mapping words to stable ids.

    Stand-in for a trained tokenizer when running the offline random-clip
    models; ids are blake2 hashes of the words folded into the vocabulary.
    """

    def __init__(self, vocab_size: int, bos: int, eos: int, pad: int, max_len: int):
        self.vocab_size = vocab_size
        self.bos, self.eos, self.pad = bos, eos, pad
        self.max_len = max_len

    def _word_id(self, word: str) -> int:
        digest = hashlib.blake2s(word.lower().encode("utf-8"), digest_size=4).digest()
        span = self.vocab_size - 3
        return 3 + int.from_bytes(digest, "little") % span

    def __call__(self, texts):
        rows = []
        for text in texts:
            ids = [self.bos] + [self._word_id(w) for w in text.split()][: self.max_len - 2]
            ids.append(self.eos)
            rows.append(ids)
        width = max(len(r) for r in rows)
        ids = np.full((len(rows), width), self.pad, dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=np.int64)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = row
            mask[i, : len(row)] = 1
        return ids, mask


class HFTokenizer:
    def __init__(self, tokenizer):
        self.tokenizer = tokenizer

    def __call__(self, texts):
        enc = self.tokenizer(list(texts), padding=True, return_tensors="np")
        return enc["input_ids"], enc["attention_mask"]


def _build_random_clip(seed: int, dim: int, image_size: int, patch_size: int):
    from transformers import CLIPConfig

    vision = dict(
        hidden_size=max(dim, 32),
        intermediate_size=2 * max(dim, 32),
        num_hidden_layers=2,
        num_attention_heads=2,
        image_size=image_size,
        patch_size=patch_size,
        projection_dim=dim,
    )
    text = dict(
        hidden_size=max(dim, 32),
        intermediate_size=2 * max(dim, 32),
        num_hidden_layers=2,
        num_attention_heads=2,
        vocab_size=1000,
        max_position_embeddings=32,
        projection_dim=dim,
        bos_token_id=1,
        eos_token_id=2,
        pad_token_id=0,
    )
    config = CLIPConfig(text_config=text, vision_config=vision, projection_dim=dim)
    torch.manual_seed(seed)
    model = CLIPModel(config)
    tokenizer = HashTokenizer(vocab_size=1000, bos=1, eos=2, pad=0, max_len=32)
    return VisionLanguageModel(model, tokenizer)


def load_model(identifier: str) -> VisionLanguageModel:
    match = _RANDOM_ID.match(identifier)
    if match:
        seed, dim, image_size, patch_size = (int(g) for g in match.groups())
        return _build_random_clip(seed, dim, image_size, patch_size)
    from transformers import AutoTokenizer

    model = CLIPModel.from_pretrained(identifier)
    tokenizer = HFTokenizer(AutoTokenizer.from_pretrained(identifier))
    return VisionLanguageModel(model, tokenizer)
