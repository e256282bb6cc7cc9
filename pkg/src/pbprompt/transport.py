"""Conditional-transport alignment between patch and prompt distributions.

Both directions have closed-form row-stochastic plans: patch-to-prompt rows
are softmaxes over (log class-prob + dot product) and prompt-to-patch rows
are softmaxes over dot products.  Costs are 1 - cosine, which on unit-norm
supports is 1 minus the dot product.  An entropic-OT Sinkhorn solver is
included as an ablation baseline only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConvergenceError, NumericDegeneracyError, ParameterError

PATCH_TO_PROMPT = "patch_to_prompt"
PROMPT_TO_PATCH = "prompt_to_patch"


@dataclass
class TransportPlan:
    """Row-stochastic conditional probabilities plus the (M, C) cost matrix."""

    probabilities: Tensor
    direction: str
    cost: Tensor


def class_probs(global_feature: Tensor, prompt_embeds: Tensor, tau: float) -> Tensor:
    """Categorical class distribution from similarities at temperature tau.

    Inputs are unit-norm, so the cosine similarity is the plain dot product.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    sims = ad.matmul(prompt_embeds, global_feature)
    return ad.softmax_stable(sims, temperature=tau)


def cost_matrix(patches: Tensor, prompt_embeds: Tensor) -> Tensor:
    """Entry (m, c) = 1 - patch_m . prompt_c, in [0, 2] on unit-norm rows."""
    for name, t in (("patch", patches), ("prompt", prompt_embeds)):
        norms = np.linalg.norm(t.values, axis=-1)
        if np.any(norms == 0.0):
            raise NumericDegeneracyError(f"zero-norm {name} row in cost_matrix")
    return 1.0 - ad.matmul(patches, prompt_embeds.T)


def plan_patch_to_prompt(patches: Tensor, prompt_embeds: Tensor, p: Tensor) -> TransportPlan:
    """(M, C) plan: row m is a softmax over classes of log p_c + u_m . g_c.

    Zero class probabilities contribute -inf logits and receive exactly zero
    plan mass; negative probabilities are rejected.
    """
    if np.any(p.values < 0):
        raise ParameterError("class probabilities must be nonnegative")
    logits = ad.matmul(patches, prompt_embeds.T) + ad.log(p)
    plan = ad.softmax_stable(logits, temperature=1.0, axis=-1)
    return TransportPlan(
        probabilities=plan,
        direction=PATCH_TO_PROMPT,
        cost=cost_matrix(patches, prompt_embeds),
    )


def plan_prompt_to_patch(patches: Tensor, prompt_embeds: Tensor) -> TransportPlan:
    """(C, M) plan: row c is a softmax over patches of g_c . u_m.

    The class probabilities do not enter the plan here; they weight the
    outer sum of the prompt-to-patch transport cost instead.
    """
    logits = ad.matmul(prompt_embeds, patches.T)
    plan = ad.softmax_stable(logits, temperature=1.0, axis=-1)
    return TransportPlan(
        probabilities=plan,
        direction=PROMPT_TO_PATCH,
        cost=cost_matrix(patches, prompt_embeds),
    )


def ct_loss(
    patches: Tensor,
    prompt_embeds: Tensor,
    p: Tensor,
    lam: float,
    detach_p: bool = False,
) -> Tensor:
    """Bidirectional conditional-transport cost, lam-weighted.

    lam * (patch-to-prompt term) + (1 - lam) * (prompt-to-patch term); both
    terms are convex combinations of costs in [0, 2], so the loss is too.
    Gradients flow through the class probabilities unless ``detach_p``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    p_used = p.detach() if detach_p else p
    num_patches = patches.shape[0]

    forward = plan_patch_to_prompt(patches, prompt_embeds, p_used)
    cost = forward.cost
    loss_ug = (cost * forward.probabilities).sum() * (1.0 / num_patches)

    reverse = plan_prompt_to_patch(patches, prompt_embeds)
    per_class = (cost.T * reverse.probabilities).sum(axis=1)
    loss_gu = (p_used * per_class).sum()

    return loss_ug * lam + loss_gu * (1.0 - lam)


def sinkhorn_plan(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    eps: float = 0.05,
    max_iters: int = 200,
    tol: float = 1e-6,
) -> tuple[np.ndarray, int]:
    """Entropic-OT plan by log-domain Sinkhorn iterations.

    Returns (plan, iteration count) once both marginal residuals (max
    absolute deviation) are within ``tol``; raises ConvergenceError carrying
    the final residual otherwise.  The OT loss is <plan, cost>.
    """
    if not eps > 0:
        raise ParameterError(f"entropic regularization must be positive, got {eps}")
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if cost.shape != (a.size, b.size):
        raise ParameterError(
            f"cost shape {cost.shape} does not match marginals ({a.size}, {b.size})"
        )
    for name, w in (("a", a), ("b", b)):
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ParameterError(f"marginal {name} must lie on the simplex")

    with np.errstate(divide="ignore"):
        log_a = np.log(a)
        log_b = np.log(b)
    kernel = -cost / eps
    log_u = np.zeros_like(a)
    log_v = np.zeros_like(b)
    plan = None
    residual = np.inf
    for it in range(1, max_iters + 1):
        log_u = log_a - _logsumexp(kernel + log_v[None, :], axis=1)
        log_v = log_b - _logsumexp(kernel + log_u[:, None], axis=0)
        plan = np.exp(log_u[:, None] + kernel + log_v[None, :])
        residual = max(
            np.max(np.abs(plan.sum(axis=1) - a)),
            np.max(np.abs(plan.sum(axis=0) - b)),
        )
        if residual <= tol:
            return plan, it
    raise ConvergenceError(
        f"sinkhorn did not reach tol {tol} after {max_iters} iterations "
        f"(residual {residual:.3e})",
        residual=float(residual),
    )


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    shift = np.max(x, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - shift), axis=axis)) + np.squeeze(shift, axis)
    return out


# ---------------------------------------------------------------------------
# plan export
# ---------------------------------------------------------------------------

def write_plan_csv(matrix: np.ndarray, path) -> None:
    """Rows of comma-separated values at 9 significant digits."""
    matrix = np.atleast_2d(np.asarray(matrix))
    lines = [",".join(f"{v:.9g}" for v in row) for row in matrix]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_plan_pgm(matrix: np.ndarray, path) -> None:
    """8-bit ASCII PGM (P2), normalized so the matrix maximum maps to 255."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    peak = matrix.max()
    scaled = np.zeros_like(matrix) if peak <= 0 else matrix / peak
    pixels = np.rint(255.0 * scaled).astype(int)
    h, w = pixels.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in pixels)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
