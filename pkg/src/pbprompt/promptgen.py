"""Hierarchical stochastic prompt generation.

A per-class diagonal Gaussian posterior conditioned on the label embedding
produces a latent vector by reparameterized sampling; a single 8-head
self-attention block with a residual connection decodes it, together with
learnable prefix and position embeddings, into the prefix token sequence.
The prior over the latent is N(label embedding, I).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    BadMagicError,
    BadVersionError,
    DimensionError,
    ParameterError,
    TruncatedPayloadError,
)
from .seeding import child_rng

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"PBCK"
CHECKPOINT_VERSION = 1


@dataclass
class VariationalPosterior:
    """Two fully-connected d->d layers producing the posterior mean and log-variance."""

    mean_weight: Tensor
    mean_bias: Tensor
    logvar_weight: Tensor
    logvar_bias: Tensor

    @classmethod
    def init(cls, d: int) -> "VariationalPosterior":
        # Identity mean and zero log-variance make the posterior coincide
        # with the contextual prior at initialization (KL starts at 0).
        return cls(
            mean_weight=Tensor(np.eye(d), requires_grad=True),
            mean_bias=Tensor(np.zeros(d), requires_grad=True),
            logvar_weight=Tensor(np.zeros((d, d)), requires_grad=True),
            logvar_bias=Tensor(np.zeros(d), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.mean_weight, self.mean_bias, self.logvar_weight, self.logvar_bias]


@dataclass
class PromptGenParams:
    """Prefix embeddings, position embeddings, and the attention block weights."""

    prefix: Tensor  # (b, d)
    pos: Tensor  # (b+1, d)
    wq: Tensor  # (d, d), columns split across heads
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @classmethod
    def init(cls, d: int, prompt_len: int, heads: int, seed: int) -> "PromptGenParams":
        if heads < 1 or d % heads != 0:
            raise ParameterError(f"head count {heads} must divide d {d}")
        rng = child_rng(seed, "promptgen-init")
        def w(*shape):
            return Tensor(INIT_STD * rng.standard_normal(shape), requires_grad=True)
        return cls(
            prefix=w(prompt_len, d),
            pos=w(prompt_len + 1, d),
            wq=w(d, d),
            wk=w(d, d),
            wv=w(d, d),
            wo=w(d, d),
            heads=heads,
        )

    @property
    def prompt_len(self) -> int:
        return self.prefix.shape[0]

    @property
    def d(self) -> int:
        return self.pos.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.prefix, self.pos, self.wq, self.wk, self.wv, self.wo]


@dataclass
class LatentSample:
    """A reparameterized draw: latent = mean + exp(logvar/2) * noise, exactly."""

    latent: Tensor
    noise: np.ndarray


@dataclass
class PromptModel:
    """All learnable parameters of the prompt tuner."""

    posterior: VariationalPosterior
    generator: PromptGenParams

    @classmethod
    def init(cls, d: int, prompt_len: int, heads: int, seed: int) -> "PromptModel":
        return cls(
            posterior=VariationalPosterior.init(d),
            generator=PromptGenParams.init(d, prompt_len, heads, seed),
        )

    def parameters(self) -> list[Tensor]:
        return self.posterior.parameters() + self.generator.parameters()


def posterior_params(post: VariationalPosterior, label_embedding: Tensor):
    """Affine mean and clamped log-variance of the class posterior."""
    d = post.mean_weight.shape[0]
    if label_embedding.shape != (d,):
        raise DimensionError(
            f"label embedding shape {label_embedding.shape} != ({d},)"
        )
    mu = ad.matmul(post.mean_weight, label_embedding) + post.mean_bias
    logvar_raw = ad.matmul(post.logvar_weight, label_embedding) + post.logvar_bias
    return mu, ad.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)


def posterior_params_batch(post: VariationalPosterior, label_embeddings: Tensor):
    """posterior_params over a (C, d) stack of label embeddings at once."""
    d = post.mean_weight.shape[0]
    if label_embeddings.ndim != 2 or label_embeddings.shape[1] != d:
        raise DimensionError(
            f"label embeddings shape {label_embeddings.shape} incompatible with d={d}"
        )
    mu = ad.matmul(label_embeddings, post.mean_weight.T) + post.mean_bias
    logvar_raw = ad.matmul(label_embeddings, post.logvar_weight.T) + post.logvar_bias
    return mu, ad.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)


def sample_latent(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> LatentSample:
    """Reparameterized draw; gradient flows to mu and logvar, never to the noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != mu.shape or logvar.shape != mu.shape:
        raise DimensionError(
            f"sample_latent shapes disagree: mu {mu.shape}, logvar {logvar.shape}, "
            f"noise {noise.shape}"
        )
    sigma = ad.exp(logvar * 0.5)
    latent = mu + sigma * Tensor(noise)
    return LatentSample(latent=latent, noise=noise)


def kl_to_prior(mu: Tensor, logvar: Tensor, label_embedding: Tensor) -> Tensor:
    """Closed-form KL from N(mu, diag exp(logvar)) to N(label_embedding, I)."""
    diff = mu - label_embedding
    terms = ad.exp(logvar) + diff * diff - 1.0 - logvar
    return terms.sum() * 0.5


def generate_prefix_batch(gen: PromptGenParams, latents: Tensor) -> Tensor:
    """Decode a (C, d) stack of latent class vectors into (C, b, d) prefixes.

    Per class the input sequence is [latent + PE_1, w_1 + PE_2, ...,
    w_b + PE_{b+1}]; one multi-head self-attention block with a residual
    connection follows, and the first output token (the transformed latent)
    is dropped.  All heads and classes run as stacked matrix products.
    """
    b, d = gen.prefix.shape
    if latents.ndim != 2 or latents.shape[1] != d:
        raise DimensionError(f"latents shape {latents.shape} incompatible with d={d}")
    c = latents.shape[0]
    n = b + 1
    first = (latents + gen.pos.narrow(0, 0, 1)).reshape((c, 1, d))
    rest = (gen.prefix + gen.pos.narrow(0, 1, b)).reshape((1, b, d))
    seq = ad.concat([first, ad.broadcast_to(rest, (c, b, d))], axis=1)

    heads = gen.heads
    dh = d // heads
    flat = seq.reshape((c * n, d))

    def split_heads(w):
        proj = ad.matmul(flat, w).reshape((c, n, heads, dh))
        return ad.permute(proj, (0, 2, 1, 3))  # (c, heads, n, dh)

    q = split_heads(gen.wq)
    k = split_heads(gen.wk)
    v = split_heads(gen.wv)
    scores = ad.matmul(q, k.T) * (1.0 / np.sqrt(dh))
    attn = ad.softmax_stable(scores, temperature=1.0, axis=-1)
    context = ad.permute(ad.matmul(attn, v), (0, 2, 1, 3)).reshape((c * n, d))
    out = flat + ad.matmul(context, gen.wo)
    return out.reshape((c, n, d)).narrow(1, 1, b)


def generate_prefix(gen: PromptGenParams, latent: Tensor) -> Tensor:
    """Decode one latent class vector into the b prefix tokens."""
    b, d = gen.prefix.shape
    if latent.shape != (d,):
        raise DimensionError(f"latent shape {latent.shape} != ({d},)")
    return generate_prefix_batch(gen, latent.reshape((1, d))).reshape((b, d))


def build_prompt(prefix_tokens: Tensor, label_embedding: Tensor) -> Tensor:
    """Concatenate the prefix tokens and the label token: (b+1, d)."""
    if prefix_tokens.ndim != 2 or label_embedding.ndim != 1:
        raise DimensionError(
            f"build_prompt expects (b, d) and (d,), got {prefix_tokens.shape} "
            f"and {label_embedding.shape}"
        )
    d = label_embedding.shape[0]
    if prefix_tokens.shape[1] != d:
        raise DimensionError(
            f"prefix token dim {prefix_tokens.shape[1]} != label dim {d}"
        )
    return ad.concat([prefix_tokens, label_embedding.reshape((1, d))], axis=0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _model_arrays(model: PromptModel) -> list[np.ndarray]:
    # Declared serialization order; load_checkpoint relies on it.
    return [t.values for t in model.parameters()]


def save_checkpoint(model: PromptModel, step: int, path) -> None:
    header = {
        "d": model.generator.d,
        "b": model.generator.prompt_len,
        "heads": model.generator.heads,
        "step": int(step),
    }
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(raw)), raw]
    for arr in _model_arrays(model):
        parts.append(arr.astype("<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as err:
        raise OSError(f"cannot write checkpoint to {path}: {err}") from err


def load_checkpoint(path) -> tuple[PromptModel, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"{path}: bad checkpoint magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    d, b, heads = header["d"], header["b"], header["heads"]
    shapes = [
        (d, d), (d,), (d, d), (d,),  # posterior
        (b, d), (b + 1, d), (d, d), (d, d), (d, d), (d, d),  # generator
    ]
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    if len(payload) != expected:
        raise TruncatedPayloadError(
            f"{path}: checkpoint payload has {len(payload)} bytes, expected {expected}"
        )
    arrays = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(payload, "<f4", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset += count * 4
    posterior = VariationalPosterior(
        mean_weight=Tensor(arrays[0], requires_grad=True),
        mean_bias=Tensor(arrays[1], requires_grad=True),
        logvar_weight=Tensor(arrays[2], requires_grad=True),
        logvar_bias=Tensor(arrays[3], requires_grad=True),
    )
    generator = PromptGenParams(
        prefix=Tensor(arrays[4], requires_grad=True),
        pos=Tensor(arrays[5], requires_grad=True),
        wq=Tensor(arrays[6], requires_grad=True),
        wk=Tensor(arrays[7], requires_grad=True),
        wv=Tensor(arrays[8], requires_grad=True),
        wo=Tensor(arrays[9], requires_grad=True),
        heads=heads,
    )
    return PromptModel(posterior=posterior, generator=generator), header["step"]
