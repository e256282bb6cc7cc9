"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.  The desk-scale experiment criteria share one
module-scoped set of runs.
"""

import json
import math
import sys

import numpy as np
import pytest

from pbprompt import autodiff as ad
from pbprompt.autodiff import Tensor, backward, zero_grads
from pbprompt.encoders import SyntheticVLP
from pbprompt.promptgen import PromptModel
from pbprompt.seeding import child_rng
from pbprompt.training import (
    RunConfig,
    TrainData,
    elbo_loss,
    encode_class_prompts,
    harmonic_mean,
    lr_schedule,
    train,
)
from pbprompt.transport import (
    class_probs,
    cost_matrix,
    ct_loss,
    plan_patch_to_prompt,
    plan_prompt_to_patch,
)

from oracles import (
    finite_difference_gradient,
    gradient_close,
    monte_carlo_kl,
    naive_ct_loss,
    naive_forward_plan,
    naive_reverse_plan,
)


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"[{status}] {name}"
    if detail:
        line += f" ({detail})"
    print(line, file=sys.stderr)


# ---------------------------------------------------------------------------
# 1. harmonic-mean reproduction
# ---------------------------------------------------------------------------

def test_c1_harmonic_mean_reproduction():
    first = harmonic_mean(82.66, 63.22)
    second = harmonic_mean(80.47, 71.69)
    ok = abs(first - 71.65) <= 0.01 and abs(second - 75.83) <= 0.01
    report("harmonic-mean reproduction", ok, f"{first:.4f}, {second:.4f}")
    assert abs(first - 71.65) <= 0.01
    assert abs(second - 75.83) <= 0.01


# ---------------------------------------------------------------------------
# 2. brute-force CT equivalence
# ---------------------------------------------------------------------------

def test_c2_brute_force_ct_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        m = int(rng.integers(1, 6))
        c = int(rng.integers(1, 5))
        d = int(rng.integers(2, 9))
        u = rng.standard_normal((m, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = rng.standard_normal((c, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        p = rng.dirichlet(np.ones(c))
        lam = float(rng.uniform())
        got = ct_loss(Tensor(u), Tensor(g), Tensor(p), lam=lam).item()
        want = naive_ct_loss(u, g, p, lam)
        worst = max(worst, abs(got - want))
        fw = plan_patch_to_prompt(Tensor(u), Tensor(g), Tensor(p)).probabilities.values
        rv = plan_prompt_to_patch(Tensor(u), Tensor(g)).probabilities.values
        worst = max(worst, float(np.max(np.abs(fw - naive_forward_plan(u, g, p)))))
        worst = max(worst, float(np.max(np.abs(rv - naive_reverse_plan(u, g)))))
    report("brute-force CT equivalence", worst < 1e-12, f"max dev {worst:.2e}")
    assert worst < 1e-12


# ---------------------------------------------------------------------------
# 3. gradient suite over the full objective
# ---------------------------------------------------------------------------

def test_c3_full_objective_gradient_suite():
    rng = np.random.default_rng(99)
    failures = []
    for instance in range(20):
        d = int(rng.choice([4, 6, 8]))
        c = int(rng.integers(2, 4))
        m = int(rng.integers(2, 5))
        vlp = SyntheticVLP(
            seed=instance, d=d, num_patches=m, prompt_len=2,
            num_classes=c, modes=1, bg_patches=0, shortcut_patches=0,
        )
        model = PromptModel.init(d, 2, 2, seed=instance)
        for p in model.parameters():
            p.values = 0.4 * rng.standard_normal(p.values.shape)
        image = vlp.encode_image(int(rng.integers(c)), 0, noise_seed=instance)
        label = int(rng.integers(c))
        noise = rng.standard_normal((c, d))
        cfg = RunConfig(
            tau=float(rng.uniform(0.3, 1.0)),
            eta=float(rng.uniform(0.1, 1.0)),
            lam=float(rng.choice([0.3, 0.5, 0.7])),
            kl_weight=float(rng.uniform(0.3, 1.0)),
            prompt_len=2,
            heads=2,
        )

        def value():
            total, _ = elbo_loss(
                image, label, model, vlp, cfg, noise, vlp.class_embeddings
            )
            return total.item()

        params = model.parameters()
        zero_grads(params)
        total, _ = elbo_loss(image, label, model, vlp, cfg, noise, vlp.class_embeddings)
        backward(total)
        fds = finite_difference_gradient(value, [p.values for p in params], h=1e-5)
        for p, fd in zip(params, fds):
            if not gradient_close(p.grad, fd, 1e-4):
                failures.append(instance)
                break
    report(
        "gradient suite (full objective vs finite differences)",
        not failures,
        f"20 instances, failures: {failures}",
    )
    assert not failures


# ---------------------------------------------------------------------------
# 4. KL closed form vs Monte Carlo
# ---------------------------------------------------------------------------

def test_c4_kl_monte_carlo_oracle():
    from pbprompt.promptgen import kl_to_prior

    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        d = int(rng.integers(2, 9))
        mu = rng.standard_normal(d)
        logvar = rng.uniform(-1.5, 1.5, d)
        prior_mean = rng.standard_normal(d)
        closed = kl_to_prior(Tensor(mu), Tensor(logvar), Tensor(prior_mean)).item()
        mc = monte_carlo_kl(mu, logvar, prior_mean, 10**6, np.random.default_rng(500 + trial))
        worst = max(worst, abs(closed - mc) / abs(closed))
    report("KL closed form vs 1e6-sample Monte Carlo", worst < 0.01, f"max rel dev {worst:.4f}")
    assert worst < 0.01


# ---------------------------------------------------------------------------
# 5. transport-plan invariants
# ---------------------------------------------------------------------------

def test_c5_transport_plan_invariants():
    rng = np.random.default_rng(11)
    ok = True
    for _ in range(1000):
        m = int(rng.integers(1, 8))
        c = int(rng.integers(1, 6))
        d = int(rng.integers(2, 10))
        u = rng.standard_normal((m, d))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = rng.standard_normal((c, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        p = rng.dirichlet(np.ones(c))
        fw = plan_patch_to_prompt(Tensor(u), Tensor(g), Tensor(p)).probabilities.values
        rv = plan_prompt_to_patch(Tensor(u), Tensor(g)).probabilities.values
        cost = cost_matrix(Tensor(u), Tensor(g)).values
        loss = ct_loss(Tensor(u), Tensor(g), Tensor(p), lam=float(rng.uniform())).item()
        ok &= bool(np.all(fw >= 0) and np.all(rv >= 0))
        ok &= bool(np.max(np.abs(fw.sum(axis=1) - 1)) <= 1e-9)
        ok &= bool(np.max(np.abs(rv.sum(axis=1) - 1)) <= 1e-9)
        ok &= bool(np.all(cost >= -1e-12) and np.all(cost <= 2 + 1e-12))
        ok &= bool(-1e-12 <= loss <= 2 + 1e-12)
        if not ok:
            break
    report("transport-plan invariants (1000 instances)", ok)
    assert ok


# ---------------------------------------------------------------------------
# 6. degenerate reduction: bitwise CoOp-style trace
# ---------------------------------------------------------------------------

def _reference_coop_trace(data: TrainData, vlp: SyntheticVLP, cfg: RunConfig, steps: int):
    """Deterministic prompt-tuning loop: cross-entropy only, no sampling."""
    d = data.class_embeddings.shape[1]
    model = PromptModel.init(d, cfg.prompt_len, cfg.heads, seed=cfg.seed)
    params = model.parameters()
    steps_per_epoch = math.ceil(data.n_images / cfg.batch_size)
    embeds_t = Tensor(data.class_embeddings)
    trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = child_rng(cfg.seed, "shuffle", epoch).permutation(data.n_images)
        for idx in order:
            if step >= steps:
                return trace
            lr = lr_schedule(step, steps_per_epoch, cfg)
            zero_grads(params)
            prompts, _, _ = encode_class_prompts(
                model, vlp, embeds_t,
                np.zeros_like(data.class_embeddings), deterministic=True,
            )
            probs = class_probs(Tensor(data.globals[idx]), prompts, cfg.tau)
            nll = -ad.log(probs.narrow(0, int(data.labels[idx]), 1).reshape(()))
            backward(nll)
            for p in params:
                if p.grad is not None:
                    p.values = p.values - lr * p.grad
            trace.append(
                {"step": step, "lr": lr, "nll": nll.item(), "kl": 0.0,
                 "ct": 0.0, "total": nll.item()}
            )
            step += 1
    return trace


def test_c6_degenerate_reduction_bitwise():
    vlp = SyntheticVLP(seed=21, d=16, num_patches=8, prompt_len=2,
                       num_classes=3, modes=2)
    bundle = vlp.make_bundle(shots=5, seed=21)
    data = TrainData.from_bundle(bundle)
    cfg = RunConfig(
        epochs=7, eta=0.0, kl_weight=0.0, deterministic_spg=True,
        prompt_len=2, heads=2, samples=1, seed=13,
    )
    _, metrics = train(data, vlp, cfg)
    got = metrics.loss_trace[:100]
    want = _reference_coop_trace(data, vlp, cfg, steps=100)
    ok = len(got) == 100 and got == want
    first_diff = next(
        (i for i, (a, b) in enumerate(zip(got, want)) if a != b), None
    )
    report("degenerate reduction: bitwise CoOp-equivalent trace",
           ok, f"100 steps, first difference: {first_diff}")
    assert ok


# ---------------------------------------------------------------------------
# 7-9. desk-scale experiments (shared runs)
# ---------------------------------------------------------------------------

SEEDS = list(range(10))


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    sys.path.insert(0, "scripts")
    from run_base_to_new import run

    out = tmp_path_factory.mktemp("desk")
    comparison = run(str(out / "ct"), SEEDS, regularizer="ct")
    return out, comparison


def test_c7_desk_scale_base_to_new(desk_runs):
    _, comparison = desk_runs
    mean_full = comparison["mean_h_full"]
    mean_abl = comparison["mean_h_ablation"]
    wins = comparison["strict_wins"]
    ok = mean_full >= mean_abl and wins >= 6
    report(
        "desk-scale base-to-new: mean H and strict wins",
        ok,
        f"mean H {mean_full:.4f} vs {mean_abl:.4f}, strict wins {wins}/10",
    )
    assert mean_full >= mean_abl, "mean H of the full model fell below the ablation"
    assert wins >= 6, (
        f"only {wins}/10 seeds strictly improved H. Known limitation: at "
        "regularizer weight 0.01 over 3200 SGD steps the transport term's "
        "integrated parameter displacement stays below the evaluation flip "
        "threshold (the cross-entropy stalls at margins of 4-5 tau, where its "
        "1/tau-amplified gradients still dominate the bounded transport "
        "gradients by 2+ orders), so both arms coincide at evaluation "
        "resolution; amplified working points move H but with task-dependent "
        "sign. A systematic per-seed win is not reproducible at this scale."
    )


def test_c8_sinkhorn_ablation_completes(desk_runs, tmp_path):
    sys.path.insert(0, "scripts")
    from run_base_to_new import run

    # Same task and protocol with the entropic-OT regularizer; two seeds keep
    # the gate within its runtime budget while still executing the full loop.
    comparison = run(str(tmp_path / "ot"), [0, 1], regularizer="ot")
    residuals = []
    for arm in ("full", "ablation"):
        for seed in (0, 1):
            metrics = json.loads(
                (tmp_path / "ot" / arm / f"seed-{seed}" / "metrics.json").read_text()
            )
            if metrics["max_ot_residual"] is not None:
                residuals.append(metrics["max_ot_residual"])
    ok = bool(residuals) and max(residuals) <= 1e-6
    report(
        "sinkhorn ablation completes with residuals <= 1e-6",
        ok,
        f"max residual {max(residuals):.2e}" if residuals else "no residuals",
    )
    assert residuals and max(residuals) <= 1e-6
    assert comparison["mean_h_full"] > 0


def test_c9_determinism_byte_identical(desk_runs, tmp_path):
    sys.path.insert(0, "scripts")
    from run_base_to_new import run

    out, _ = desk_runs
    rerun = tmp_path / "rerun"
    run(str(rerun), [0], regularizer="ct")
    ok = True
    for name in ("trace.ndjson", "metrics.json"):
        a = (out / "ct" / "full" / "seed-0" / name).read_bytes()
        b = (rerun / "full" / "seed-0" / name).read_bytes()
        ok &= a == b
    report("determinism: byte-identical trace and metrics", ok)
    assert ok
