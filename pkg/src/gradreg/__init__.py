"""Gradient-norm regularized adaptive optimization at desk scale.

Adaptive optimizers (Adam, RMSProp) with learning-rate warmup, two-point
gradient-norm regularization and its warmup schedules, plus the variance
analysis of the adaptive learning rate under decaying gradient noise with
Monte Carlo validation.
"""

from .numerics import (
    NonFiniteError,
    RngState,
    as_vector,
    finite_diff_grad,
    gaussian_sample,
    l2_norm,
)
from .objectives import (
    Batch,
    Dataset,
    MlpClassifier,
    Objective,
    QuadraticObjective,
    load_dataset_csv,
    random_spd_matrix,
    save_dataset_csv,
    synth_dataset,
)
from .optim import (
    POLICIES,
    AdamState,
    ConfigError,
    RmsPropState,
    TrainConfig,
    TrainRecord,
    TrainResult,
    WarmupSchedule,
    adam_step,
    adaptive_lr_psi,
    gr_params_at,
    grad_clip,
    load_train_setup,
    lr_at,
    momentum_phi,
    read_trace,
    rmsprop_step,
    train,
    write_trace,
)
from .regularizer import (
    GrConfig,
    PenalizedObjective,
    gr_gradient,
    gr_gradient_parts,
    perturbation,
    sam_gradient,
)
from .theory import (
    McEstimate,
    MomentPair,
    MonotonicityReport,
    TheoryParams,
    exact_var_constant_sigma,
    log_var_derivative,
    mc_var_psi,
    moment_sums,
    monotonicity_condition,
    monotonicity_scan,
    read_surface_csv,
    taylor_variance,
    var_psi_closed,
    var_psi_gamma_zero_limit,
    var_psi_k_form,
    var_surface,
    write_surface_csv,
)

__version__ = "0.1.0"
