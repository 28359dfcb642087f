"""sfglab: a guidance laboratory for score-based generative models.

Everything runs on analytically tractable toy densities (Gaussian mixtures
and a branching fractal manifold) where log densities, scores, Hessians and
saddle regions are available in closed form, so every guidance strategy can
be checked against exact oracles.
"""

__version__ = "0.1.0"

from .datasets import (
    FractalSpec,
    GmmSpec,
    LabeledPointSet,
    make_fractal,
    make_outlier_gmm,
    make_saddle_gmm,
    make_simplex_gmm,
    make_two_gaussian,
    sample_gmm,
)
from .oracle import (
    EigPair,
    SmoothedGmm,
    classifier_grad,
    classify_region,
    full_spectrum,
    hessian,
    log_density,
    score,
    smooth,
)
from .model import (
    OracleModel,
    ScoreModel,
    TrainConfig,
    eps_to_flow,
    eps_to_score,
    esm_loss,
    flow_to_eps,
    load_checkpoint,
    predict_eps,
    save_checkpoint,
    score_to_eps,
    train,
)
from .guidance import (
    GuidanceSpec,
    SfgState,
    autoguidance,
    cfg,
    classifier_guidance,
    interval_cfg,
    sfg_init,
    sfg_on_score,
    sfg_step,
)
from .sampler import (
    Schedule,
    Trajectories,
    attach_guidance,
    euler_flow_sample,
    flow_time_schedule,
    heun_sample,
    sigma_schedule,
)
from .evaluation import (
    EvalReport,
    coverage_entropy,
    curvature_field,
    esm_by_region,
    gaussian_frechet,
    outlier_rate,
    sweep,
)
