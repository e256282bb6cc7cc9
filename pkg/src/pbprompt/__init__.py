"""Bayesian prompt tuning with conditional-transport regularization.

Label-specific stochastic prompts are generated hierarchically (a variational
latent per class decoded by a self-attention generator) and aligned to visual
patch embeddings through a bidirectional conditional-transport cost, all on
top of frozen desk-scale encoders with a full reverse-mode gradient graph.
"""

from .autodiff import (
    Tensor,
    backward,
    cosine_sim,
    matmul,
    no_grad,
    reduce,
    softmax_stable,
)
from .bundle import load_bundle, read_bundle_header, write_bundle
from .encoders import EmbeddingBundle, SyntheticVLP
from .promptgen import (
    LatentSample,
    PromptGenParams,
    PromptModel,
    VariationalPosterior,
    build_prompt,
    generate_prefix,
    kl_to_prior,
    load_checkpoint,
    posterior_params,
    sample_latent,
    save_checkpoint,
)
from .training import (
    Metrics,
    RunConfig,
    TrainData,
    elbo_loss,
    eval_base_to_new,
    harmonic_mean,
    lr_schedule,
    predict,
    train,
)
from .transport import (
    TransportPlan,
    class_probs,
    cost_matrix,
    ct_loss,
    plan_patch_to_prompt,
    plan_prompt_to_patch,
    sinkhorn_plan,
)

__version__ = "0.1.0"
