"""pinflow: physics-informed neural particle flow for the Bayesian update.

A deterministic log-homotopy transport of prior samples to posterior
samples, driven by a small MLP trained unsupervised on the residual of the
governing continuity-equation balance, plus SVGD / annealed-MALA baselines,
distribution metrics, and benchmark task generators.
"""

from .densities import (
    DiagGaussian,
    GaussianMixture,
    GridSpec,
    HomotopyPotential,
    TdoaLikelihood,
    conjugate_posterior,
    dual_eval,
    grid_posterior_sample,
    log_density,
    sample,
    score,
)
from .homotopy import (
    Oracle1DField,
    build_features,
    feature_width,
    mass_conservation_check,
    oracle_flow_1d,
    residual,
    step_loss,
)
from .metrics import MetricConfig, energy_distance, sliced_wasserstein
from .neuralflow import (
    FlowNetwork,
    OptimizerState,
    adam_step,
    forward,
    init,
    init_optimizer,
    jvp_input,
    load_checkpoint,
    loss_gradient,
    save_checkpoint,
)
from .baselines import AnnealConfig, SvgdConfig, annealed_mcmc, svgd
from .taskgen import (
    Dataset,
    Task,
    gen_gauss1d,
    gen_gmm4d,
    gen_gmm4d_ood,
    gen_tdoa,
    generate,
    inference_preset,
    load_tasks,
    sample_ground_truth,
    write_dataset,
)
from .trainer import TrainConfig, TrainLog, ablate_features, train
from .transporter import TransportConfig, TransportResult, transport, transport_fixed

__version__ = "0.1.0"
