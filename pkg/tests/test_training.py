"""Objective oracle, schedule, training loop, prediction, and metrics tests."""

import math

import numpy as np
import pytest

from pbprompt.autodiff import Tensor, backward, zero_grads
from pbprompt.encoders import SyntheticVLP
from pbprompt.errors import (
    NaNLossError,
    ParameterError,
    ProtocolError,
    UndefinedMetricError,
)
from pbprompt.promptgen import PromptModel
from pbprompt.training import (
    Metrics,
    RunConfig,
    TrainData,
    elbo_loss,
    encode_class_prompts,
    eval_base_to_new,
    harmonic_mean,
    lr_schedule,
    predict,
    train,
)
from pbprompt.transport import class_probs

from oracles import finite_difference_gradient, gradient_close, naive_elbo


def _small_setup(num_classes=2, m=3, d=4, b=2, heads=2, seed=0):
    vlp = SyntheticVLP(
        seed=seed, d=d, num_patches=m, prompt_len=b,
        num_classes=num_classes, modes=1,
    )
    model = PromptModel.init(d, b, heads, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.parameters():
        p.values = 0.3 * rng.standard_normal(p.values.shape)
    image = vlp.encode_image(0, 0, noise_seed=seed)
    noise = rng.standard_normal((num_classes, d))
    return vlp, model, image, noise


def _oracle_args(model, vlp, image, label, noise, cfg):
    post, gen = model.posterior, model.generator
    return dict(
        image_global=image[0],
        image_patches=image[1],
        label=label,
        class_embeddings=vlp.class_embeddings,
        noise=noise,
        mean_w=post.mean_weight.values,
        mean_b=post.mean_bias.values,
        logvar_w=post.logvar_weight.values,
        logvar_b=post.logvar_bias.values,
        prefix=gen.prefix.values,
        pos=gen.pos.values,
        wq=gen.wq.values,
        wk=gen.wk.values,
        wv=gen.wv.values,
        wo=gen.wo.values,
        heads=gen.heads,
        text_proj=vlp.text_proj,
        tau=cfg.tau,
        eta=cfg.eta,
        lam=cfg.lam,
        kl_weight=cfg.kl_weight,
    )


def test_elbo_matches_scalar_oracle():
    vlp, model, image, noise = _small_setup()
    cfg = RunConfig(tau=0.5, eta=0.3, lam=0.5, kl_weight=0.7, prompt_len=2, heads=2)
    total, comps = elbo_loss(image, 1, model, vlp, cfg, noise, vlp.class_embeddings)
    expected, expected_comps = naive_elbo(**_oracle_args(model, vlp, image, 1, noise, cfg))
    assert abs(total.item() - expected) < 1e-10
    for key in ("nll", "kl", "ct"):
        assert abs(comps[key] - expected_comps[key]) < 1e-10


def test_elbo_degenerate_reduction_is_pure_cross_entropy():
    vlp, model, image, noise = _small_setup()
    cfg = RunConfig(
        tau=0.5, eta=0.0, kl_weight=0.0, prompt_len=2, heads=2,
        deterministic_spg=True,
    )
    total, comps = elbo_loss(image, 0, model, vlp, cfg, noise, vlp.class_embeddings)
    # Recompute the cross-entropy through the same primitives.
    prompts, _, _ = encode_class_prompts(
        model, vlp, Tensor(vlp.class_embeddings),
        np.zeros_like(noise), deterministic=True,
    )
    probs = class_probs(Tensor(image[0]), prompts, cfg.tau)
    assert total.item() == -math.log(probs.values[0])
    assert comps["kl"] == 0.0 and comps["ct"] == 0.0


def test_elbo_rejects_bad_label():
    vlp, model, image, noise = _small_setup()
    cfg = RunConfig(prompt_len=2, heads=2)
    with pytest.raises(ParameterError):
        elbo_loss(image, 7, model, vlp, cfg, noise, vlp.class_embeddings)


def test_elbo_decomposition_bitwise():
    vlp, model, image, noise = _small_setup()
    cfg = RunConfig(tau=0.4, eta=0.2, lam=0.5, kl_weight=0.9, prompt_len=2, heads=2)
    total, comps = elbo_loss(image, 1, model, vlp, cfg, noise, vlp.class_embeddings)
    recombined = comps["nll"] + cfg.kl_weight * comps["kl"] + cfg.eta * comps["ct"]
    assert total.item() == recombined


def test_full_elbo_gradients_match_finite_differences():
    vlp, model, image, noise = _small_setup(num_classes=3, m=3, d=6, b=2, heads=2)
    cfg = RunConfig(tau=0.6, eta=0.4, lam=0.5, kl_weight=0.8, prompt_len=2, heads=2)

    def value():
        total, _ = naive_args_total()
        return total

    def naive_args_total():
        return naive_elbo(**_oracle_args(model, vlp, image, 2, noise, cfg))

    params = model.parameters()
    zero_grads(params)
    total, _ = elbo_loss(image, 2, model, vlp, cfg, noise, vlp.class_embeddings)
    backward(total)
    fds = finite_difference_gradient(value, [p.values for p in params])
    for p, fd in zip(params, fds):
        assert gradient_close(p.grad, fd, 1e-4)


def test_gradients_stay_out_of_frozen_encoders():
    vlp, model, image, noise = _small_setup()
    cfg = RunConfig(tau=0.5, eta=0.1, lam=0.5, prompt_len=2, heads=2)
    params = model.parameters()
    zero_grads(params)
    total, _ = elbo_loss(image, 0, model, vlp, cfg, noise, vlp.class_embeddings)
    backward(total)
    assert all(p.grad is not None for p in params)
    assert vlp._text_proj_t.grad is None
    assert vlp._text_proj_tt.grad is None


def test_lr_schedule_paper_values():
    cfg = RunConfig(epochs=5, warmup_epochs=1, warmup_lr=1e-5, lr=2e-3)
    steps_per_epoch = 10
    for step in range(10):
        assert lr_schedule(step, steps_per_epoch, cfg) == 1e-5
    assert lr_schedule(10, steps_per_epoch, cfg) == 2e-3
    assert lr_schedule(49, steps_per_epoch, cfg) == pytest.approx(0.0, abs=1e-18)


def test_lr_schedule_monotone_after_warmup():
    cfg = RunConfig(epochs=4, warmup_epochs=1)
    rates = [lr_schedule(s, 8, cfg) for s in range(32)]
    assert all(r == cfg.warmup_lr for r in rates[:8])
    post = rates[8:]
    assert all(a >= b for a, b in zip(post, post[1:]))


def test_train_single_class_nll_is_zero():
    vlp = SyntheticVLP(seed=3, d=8, num_patches=4, prompt_len=2, num_classes=1, modes=1)
    bundle = vlp.make_bundle(shots=1, seed=3)
    cfg = RunConfig(epochs=1, eta=0.0, kl_weight=0.0, prompt_len=2, heads=2, samples=2)
    _, metrics = train(TrainData.from_bundle(bundle), vlp, cfg)
    assert metrics.loss_trace[0]["nll"] == 0.0


def test_trace_decomposition_bitwise_at_every_step():
    vlp = SyntheticVLP(seed=15, d=8, num_patches=4, prompt_len=2, num_classes=2, modes=1)
    bundle = vlp.make_bundle(shots=3, seed=15)
    cfg = RunConfig(epochs=2, eta=0.3, kl_weight=0.7, prompt_len=2, heads=2, samples=1)
    _, metrics = train(TrainData.from_bundle(bundle), vlp, cfg)
    for record in metrics.loss_trace:
        recombined = record["nll"] + cfg.kl_weight * record["kl"] + cfg.eta * record["ct"]
        assert record["total"] == recombined


def test_train_trace_is_deterministic():
    vlp = SyntheticVLP(seed=4, d=8, num_patches=4, prompt_len=2, num_classes=2, modes=1)
    bundle = vlp.make_bundle(shots=2, seed=4)
    cfg = RunConfig(epochs=3, prompt_len=2, heads=2, seed=9, samples=2)
    _, m1 = train(TrainData.from_bundle(bundle), vlp, cfg)
    _, m2 = train(TrainData.from_bundle(bundle), vlp, cfg)
    assert m1.loss_trace == m2.loss_trace
    assert m1.train_accuracy == m2.train_accuracy


def test_train_smoke_task_reaches_high_accuracy():
    # 4 classes x 2 modes x 16 shots, 50 epochs.
    vlp = SyntheticVLP(seed=1, d=64, num_patches=16, prompt_len=4,
                       num_classes=4, modes=2)
    bundle = vlp.make_bundle(shots=16, seed=1)
    cfg = RunConfig(epochs=50, seed=0)
    _, metrics = train(TrainData.from_bundle(bundle), vlp, cfg)
    assert metrics.train_accuracy >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_aborts_on_nan_with_diagnostics():
    # A huge learning rate overflows the parameters within a few steps.
    vlp = SyntheticVLP(seed=5, d=8, num_patches=4, prompt_len=2, num_classes=2, modes=1)
    bundle = vlp.make_bundle(shots=2, seed=5)
    cfg = RunConfig(epochs=5, lr=1e30, warmup_epochs=0, prompt_len=2, heads=2, samples=1)
    with pytest.raises(NaNLossError) as exc:
        train(TrainData.from_bundle(bundle), vlp, cfg)
    assert exc.value.step > 0
    assert "nll" in exc.value.components


def test_predict_probabilities_sum_to_one():
    vlp, model, image, _ = _small_setup()
    cfg = RunConfig(samples=5, prompt_len=2, heads=2)
    probs = predict(image, model, vlp, cfg, seed=1, class_embeddings=vlp.class_embeddings)
    assert abs(probs.sum() - 1.0) <= 1e-9


def test_predict_single_zero_noise_sample_equals_mean_mode():
    vlp, model, image, _ = _small_setup()
    cfg = RunConfig(samples=1, prompt_len=2, heads=2, deterministic_spg=True)
    sampled = predict(image, model, vlp, cfg, seed=5, class_embeddings=vlp.class_embeddings)
    mean_mode = predict(
        image, model, vlp, cfg, seed=5, class_embeddings=vlp.class_embeddings, mode="mean"
    )
    assert np.array_equal(sampled, mean_mode)


def test_predict_variance_shrinks_with_more_samples():
    vlp, model, image, _ = _small_setup(d=8, b=2, heads=2)
    variances = []
    for samples in (1, 5, 20):
        cfg = RunConfig(samples=samples, prompt_len=2, heads=2, tau=0.5)
        tops = [
            predict(image, model, vlp, cfg, seed=s,
                    class_embeddings=vlp.class_embeddings).max()
            for s in range(60)
        ]
        variances.append(np.var(tops))
    assert variances[0] > variances[1] > variances[2]


def test_harmonic_mean_reference_rows():
    assert harmonic_mean(82.66, 63.22) == pytest.approx(71.65, abs=0.01)
    assert harmonic_mean(80.47, 71.69) == pytest.approx(75.83, abs=0.01)


def test_harmonic_mean_equal_arguments():
    assert harmonic_mean(0.42, 0.42) == pytest.approx(0.42, abs=1e-15)


def test_harmonic_mean_undefined_and_invalid():
    with pytest.raises(UndefinedMetricError):
        harmonic_mean(0.0, 0.0)
    with pytest.raises(ParameterError):
        harmonic_mean(-0.1, 0.5)


def _trained_toy():
    vlp = SyntheticVLP(seed=6, d=16, num_patches=4, prompt_len=2,
                       num_classes=4, modes=1)
    bundle = vlp.make_bundle(shots=4, seed=6)
    test_bundle = vlp.make_bundle(shots=4, seed=7, purpose="test")
    cfg = RunConfig(epochs=5, prompt_len=2, heads=2, samples=3)
    model, _ = train(TrainData.from_bundle(bundle, [0, 1]), vlp, cfg)
    return vlp, model, cfg, test_bundle


def test_eval_degenerate_split_new_equals_base():
    vlp, model, cfg, test_bundle = _trained_toy()
    metrics = eval_base_to_new(
        model, vlp, [0, 1], [0, 1], cfg, test_bundle, eval_seed=3
    )
    assert metrics.new == metrics.base
    assert metrics.h == pytest.approx(metrics.base)


def test_eval_partial_overlap_is_protocol_error():
    vlp, model, cfg, test_bundle = _trained_toy()
    with pytest.raises(ProtocolError):
        eval_base_to_new(model, vlp, [0, 1], [1, 2], cfg, test_bundle)


def test_untrained_model_scores_near_chance():
    # An untrained model assigns every image of a class to one essentially
    # arbitrary class, so a single task scores anywhere in {0, 1/C, ...};
    # chance level (1/C) emerges as the mean over tasks by label symmetry.
    from pbprompt.training import evaluate_split

    accs = []
    for task_seed in range(24):
        vlp = SyntheticVLP(seed=100 + task_seed, d=32, num_patches=8,
                           prompt_len=2, num_classes=4, modes=1)
        test_bundle = vlp.make_bundle(shots=3, seed=9, purpose="test")
        model = PromptModel.init(32, 2, 2, seed=123 + task_seed)
        cfg = RunConfig(prompt_len=2, heads=2, samples=2)
        acc, _ = evaluate_split(
            model, vlp, cfg, test_bundle, [0, 1, 2, 3], eval_seed=11
        )
        accs.append(acc)
    assert 0.10 <= np.mean(accs) <= 0.45


def test_config_validation():
    with pytest.raises(ParameterError):
        RunConfig(tau=0.0).validate()
    with pytest.raises(ParameterError):
        RunConfig(lam=1.5).validate()
    with pytest.raises(ParameterError):
        RunConfig(regularizer="wat").validate()
    with pytest.raises(ParameterError):
        RunConfig.from_dict({"not_a_field": 1})


def test_config_round_trip():
    cfg = RunConfig(eta=0.5, samples=3)
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg
