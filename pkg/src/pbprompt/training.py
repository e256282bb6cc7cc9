"""Combined-ELBO objective, SGD training loop, prediction, and metrics.

Per step and per class the pipeline is: posterior from the label embedding,
one reparameterized latent draw, prefix generation, prompt assembly, text
encoding, then the categorical likelihood; the loss adds the class-averaged
KL to the contextual prior and the weighted transport regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, zero_grads
from .encoders import EmbeddingBundle, SyntheticVLP
from .errors import (
    NaNLossError,
    ParameterError,
    ProtocolError,
    UndefinedMetricError,
)
from .promptgen import (
    LOGVAR_MIN,
    PromptModel,
    generate_prefix_batch,
    posterior_params_batch,
)
from .seeding import child_rng
from .transport import class_probs, cost_matrix, ct_loss, sinkhorn_plan

REGULARIZERS = ("ct", "ot", "none")


@dataclass
class RunConfig:
    """Every knob of a training/evaluation run; JSON configs mirror the field names."""

    tau: float = 0.01
    eta: float = 0.01
    lam: float = 0.5
    samples: int = 20
    prompt_len: int = 4
    heads: int = 8
    lr: float = 2e-3
    warmup_epochs: int = 1
    warmup_lr: float = 1e-5
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    kl_weight: float = 1.0
    detach_p: bool = False
    regularizer: str = "ct"
    momentum: float = 0.0
    deterministic_spg: bool = False
    literal_kl_sign: bool = False
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 200
    sinkhorn_tol: float = 1e-6

    def validate(self) -> None:
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.eta < 0:
            raise ParameterError(f"eta must be nonnegative, got {self.eta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.samples < 1:
            raise ParameterError(f"samples must be >= 1, got {self.samples}")
        for name in ("prompt_len", "heads", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.warmup_epochs < 0:
            raise ParameterError("warmup_epochs must be nonnegative")
        if self.regularizer not in REGULARIZERS:
            raise ParameterError(
                f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def with_overrides(self, **overrides) -> "RunConfig":
        cfg = replace(self, **{k: v for k, v in overrides.items() if v is not None})
        cfg.validate()
        return cfg


@dataclass
class Metrics:
    """Evaluation and training bookkeeping; unused fields stay None/empty."""

    base: float | None = None
    new: float | None = None
    h: float | None = None
    per_class: dict = field(default_factory=dict)
    train_accuracy: float | None = None
    loss_trace: list = field(default_factory=list)
    max_ot_residual: float | None = None


@dataclass
class TrainData:
    """Training view: arrays plus the label-embedding rows for its classes."""

    globals: np.ndarray  # (N, d)
    patches: np.ndarray  # (N, M, d)
    labels: np.ndarray  # (N,), already remapped to [0, C)
    class_embeddings: np.ndarray  # (C, d)

    @classmethod
    def from_bundle(cls, bundle: EmbeddingBundle, class_ids=None) -> "TrainData":
        if class_ids is not None:
            bundle = bundle.subset_classes(class_ids)
        return cls(
            globals=bundle.globals,
            patches=bundle.patches,
            labels=bundle.labels,
            class_embeddings=bundle.class_embeddings,
        )

    @property
    def n_images(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_embeddings)


def encode_class_prompts(
    model: PromptModel,
    vlp: SyntheticVLP,
    class_embeddings: Tensor,
    noise: np.ndarray,
    deterministic: bool = False,
):
    """Posterior -> latents -> prefixes -> prompts -> text embeddings, all classes.

    Returns (prompt embeddings (C, d), mu (C, d), logvar (C, d)).  With
    ``deterministic`` the log-variance is pinned at its clamp floor and the
    latents are exactly the posterior means.
    """
    mu, logvar = posterior_params_batch(model.posterior, class_embeddings)
    if deterministic:
        logvar = Tensor(np.full(mu.shape, LOGVAR_MIN))
        noise = np.zeros(mu.shape)
    latents = mu + ad.exp(logvar * 0.5) * Tensor(noise)
    prefixes = generate_prefix_batch(model.generator, latents)
    c, d = mu.shape
    prompts = ad.concat([prefixes, class_embeddings.reshape((c, 1, d))], axis=1)
    return vlp.encode_text_batch(prompts), mu, logvar


def elbo_loss(
    image: tuple,
    label: int,
    model: PromptModel,
    vlp: SyntheticVLP,
    cfg: RunConfig,
    noise: np.ndarray,
    class_embeddings: np.ndarray,
):
    """Total loss and its (nll, kl, ct) components for one image.

    ``noise`` is a (C, d) array of standard-normal draws, one row per class.
    The KL enters with positive sign (standard negative ELBO) and is averaged
    over classes; ``cfg.literal_kl_sign`` flips it for comparison runs.
    Components weighted by zero are skipped and reported as 0.0.
    """
    num_classes, d = class_embeddings.shape
    if not 0 <= label < num_classes:
        raise ParameterError(f"label {label} outside [0, {num_classes})")
    global_values, patch_values = image
    global_t = Tensor(global_values)
    embeds_t = Tensor(class_embeddings)

    prompt_embeds, mu, logvar = encode_class_prompts(
        model, vlp, embeds_t, noise, cfg.deterministic_spg
    )
    probs = class_probs(global_t, prompt_embeds, cfg.tau)
    nll = -ad.log(probs.narrow(0, label, 1).reshape(()))

    components = {}
    total = nll
    components["nll"] = nll.item()

    if cfg.kl_weight != 0.0:
        diff = mu - embeds_t
        kl_terms = ad.exp(logvar) + diff * diff - 1.0 - logvar
        kl = kl_terms.sum() * (0.5 / num_classes)
        signed = -kl if cfg.literal_kl_sign else kl
        total = total + signed * cfg.kl_weight
        components["kl"] = kl.item()
    else:
        components["kl"] = 0.0

    ot_residual = None
    if cfg.eta != 0.0 and cfg.regularizer != "none":
        patches_t = Tensor(patch_values)
        if cfg.regularizer == "ct":
            reg = ct_loss(patches_t, prompt_embeds, probs, cfg.lam, cfg.detach_p)
        else:
            cost = cost_matrix(patches_t, prompt_embeds)
            m = patch_values.shape[0]
            plan, _ = sinkhorn_plan(
                cost.values,
                np.full(m, 1.0 / m),
                probs.values,
                eps=cfg.sinkhorn_eps,
                max_iters=cfg.sinkhorn_iters,
                tol=cfg.sinkhorn_tol,
            )
            ot_residual = max(
                np.max(np.abs(plan.sum(axis=1) - 1.0 / m)),
                np.max(np.abs(plan.sum(axis=0) - probs.values)),
            )
            reg = (Tensor(plan) * cost).sum()
        total = total + reg * cfg.eta
        components["ct"] = reg.item()
    else:
        components["ct"] = 0.0

    components["ot_residual"] = ot_residual
    return total, components


def lr_schedule(step: int, steps_per_epoch: int, cfg: RunConfig) -> float:
    """Constant warmup, then a cosine ramp from the base rate down to zero.

    Post-warmup progress runs over [0, 1] inclusive, so the last step of the
    run gets exactly zero.
    """
    warm_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warm_steps:
        return cfg.warmup_lr
    total = cfg.epochs * steps_per_epoch
    span = total - warm_steps
    i = step - warm_steps
    progress = 0.0 if span <= 1 else i / (span - 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(data: TrainData, vlp: SyntheticVLP, cfg: RunConfig, on_step=None):
    """SGD over all learnable parameters; deterministic given cfg.seed.

    Returns (model, Metrics) with the full per-step loss trace.  Aborts with
    NaNLossError (carrying step index and components) on a non-finite loss.
    """
    cfg.validate()
    if data.n_images == 0:
        raise ParameterError("training data is empty")
    d = data.class_embeddings.shape[1]
    model = PromptModel.init(d, cfg.prompt_len, cfg.heads, seed=cfg.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.values) for p in params] if cfg.momentum else None

    steps_per_epoch = math.ceil(data.n_images / cfg.batch_size)
    trace = []
    max_residual = None
    step = 0
    for epoch in range(cfg.epochs):
        order = child_rng(cfg.seed, "shuffle", epoch).permutation(data.n_images)
        for start in range(0, data.n_images, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            lr = lr_schedule(step, steps_per_epoch, cfg)
            zero_grads(params)
            agg = {"nll": 0.0, "kl": 0.0, "ct": 0.0, "total": 0.0}
            for idx in batch:
                noise = _latent_noise(cfg, step, data.num_classes, d)
                total, comps = elbo_loss(
                    (data.globals[idx], data.patches[idx]),
                    int(data.labels[idx]),
                    model,
                    vlp,
                    cfg,
                    noise,
                    data.class_embeddings,
                )
                if not np.isfinite(total.item()):
                    raise NaNLossError(step, comps)
                if len(batch) == 1:
                    backward(total)
                else:
                    backward(total * (1.0 / len(batch)))
                for key in ("nll", "kl", "ct"):
                    agg[key] += comps[key] / len(batch)
                agg["total"] += total.item() / len(batch)
                if comps["ot_residual"] is not None:
                    max_residual = (
                        comps["ot_residual"]
                        if max_residual is None
                        else max(max_residual, comps["ot_residual"])
                    )
            record = {
                "step": step,
                "lr": lr,
                "nll": agg["nll"],
                "kl": agg["kl"],
                "ct": agg["ct"],
                "total": agg["total"],
            }
            trace.append(record)
            if on_step is not None:
                on_step(record)
            _sgd_update(params, velocity, lr, cfg.momentum)
            step += 1

    metrics = Metrics(loss_trace=trace, max_ot_residual=max_residual)
    metrics.train_accuracy = _accuracy(
        model, vlp, cfg, data, seed=cfg.seed, tag="train-eval"
    )
    return model, metrics


def _latent_noise(cfg: RunConfig, step: int, num_classes: int, d: int) -> np.ndarray:
    if cfg.deterministic_spg:
        return np.zeros((num_classes, d))
    rows = [
        child_rng(cfg.seed, "latent", step, c).standard_normal(d)
        for c in range(num_classes)
    ]
    return np.stack(rows)


def _sgd_update(params, velocity, lr: float, momentum: float) -> None:
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        if velocity is not None:
            velocity[i] = momentum * velocity[i] + p.grad
            p.values = p.values - lr * velocity[i]
        else:
            p.values = p.values - lr * p.grad


def predict(
    image: tuple,
    model: PromptModel,
    vlp: SyntheticVLP,
    cfg: RunConfig,
    seed: int,
    class_embeddings: np.ndarray,
    mode: str = "sample",
) -> np.ndarray:
    """Class probabilities, averaged over cfg.samples latent draws per class.

    ``mode="mean"`` skips sampling and uses the posterior mean latent.
    """
    if mode not in ("sample", "mean"):
        raise ParameterError(f"predict mode must be 'sample' or 'mean', got {mode!r}")
    global_values, _ = image
    num_classes, d = class_embeddings.shape
    acc = np.zeros(num_classes)
    draws = 1 if mode == "mean" else cfg.samples
    with ad.no_grad():
        global_t = Tensor(global_values)
        embeds_t = Tensor(class_embeddings)
        for s in range(draws):
            if mode == "mean":
                noise = np.zeros((num_classes, d))
                deterministic = True
            else:
                noise = np.stack(
                    [
                        child_rng(seed, "predict", s, c).standard_normal(d)
                        for c in range(num_classes)
                    ]
                )
                deterministic = cfg.deterministic_spg
            prompt_embeds, _, _ = encode_class_prompts(
                model, vlp, embeds_t, noise, deterministic
            )
            probs = class_probs(global_t, prompt_embeds, cfg.tau)
            acc += probs.values
    return acc / draws


def _accuracy(model, vlp, cfg, data: TrainData, seed: int, tag: str) -> float:
    hits = 0
    for i in range(data.n_images):
        probs = predict(
            (data.globals[i], data.patches[i]),
            model,
            vlp,
            cfg,
            seed=int(child_rng(seed, tag, i).integers(2**31)),
            class_embeddings=data.class_embeddings,
        )
        hits += int(np.argmax(probs) == data.labels[i])
    return hits / data.n_images


def harmonic_mean(base: float, new: float) -> float:
    """2*base*new / (base + new); undefined when both are zero."""
    if base < 0 or new < 0:
        raise ParameterError("accuracies must be nonnegative")
    if base == 0 and new == 0:
        raise UndefinedMetricError("harmonic mean undefined for base = new = 0")
    return 2.0 * base * new / (base + new)


def evaluate_split(
    model: PromptModel,
    vlp: SyntheticVLP,
    cfg: RunConfig,
    bundle: EmbeddingBundle,
    class_ids,
    eval_seed: int,
) -> tuple[float, dict]:
    """Accuracy over the bundle images whose labels fall in ``class_ids``.

    Images are classified among exactly those classes; also returns
    per-class accuracies keyed by the original class id.
    """
    class_ids = list(class_ids)
    data = TrainData.from_bundle(bundle, class_ids)
    if data.n_images == 0:
        raise ProtocolError(f"no evaluation images for classes {class_ids}")
    hits_total = 0
    hits = {c: 0 for c in class_ids}
    counts = {c: 0 for c in class_ids}
    for i in range(data.n_images):
        probs = predict(
            (data.globals[i], data.patches[i]),
            model,
            vlp,
            cfg,
            seed=int(child_rng(eval_seed, "split-eval", i).integers(2**31)),
            class_embeddings=data.class_embeddings,
        )
        original = class_ids[int(data.labels[i])]
        counts[original] += 1
        if int(np.argmax(probs)) == int(data.labels[i]):
            hits_total += 1
            hits[original] += 1
    per_class = {c: hits[c] / counts[c] for c in class_ids if counts[c]}
    return hits_total / data.n_images, per_class


def eval_base_to_new(
    model: PromptModel,
    vlp: SyntheticVLP,
    base_classes,
    new_classes,
    cfg: RunConfig,
    test_bundle: EmbeddingBundle,
    eval_seed: int = 0,
) -> Metrics:
    """Accuracy on disjoint base and new class splits plus their harmonic mean.

    New-class prompts come from never-trained-on label embeddings through the
    shared posterior and generator.
    """
    base_classes = list(base_classes)
    new_classes = list(new_classes)
    overlap = set(base_classes) & set(new_classes)
    # An identical split is allowed as the degenerate sanity case (new
    # accuracy must then equal base accuracy); any partial overlap is a
    # protocol violation.
    if overlap and set(base_classes) != set(new_classes):
        raise ProtocolError(f"base and new class sets overlap: {sorted(overlap)}")
    base_acc, base_pc = evaluate_split(
        model, vlp, cfg, test_bundle, base_classes, eval_seed
    )
    new_acc, new_pc = evaluate_split(
        model, vlp, cfg, test_bundle, new_classes, eval_seed
    )
    per_class = {**base_pc, **new_pc}
    return Metrics(
        base=base_acc,
        new=new_acc,
        h=harmonic_mean(base_acc, new_acc),
        per_class=per_class,
    )
