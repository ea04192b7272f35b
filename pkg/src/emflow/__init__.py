"""Missing-data imputation with a normalizing flow and online EM in its
latent space."""

from .baseline_em import batch_em_fit, batch_em_impute, observed_loglik
from .data import (
    DataMatrix,
    FeatureScaler,
    ImputedDataset,
    MaskMatrix,
    apply_scaler,
    fit_scaler,
    initial_impute,
    invert_scaler,
    read_data_csv,
    read_mask_csv,
    write_data_csv,
    write_mask_csv,
)
from .engine import (
    ImputationRun,
    TrainConfig,
    load_checkpoint,
    reimputation_phase,
    run,
    save_checkpoint,
    training_phase,
)
from .estimators import BatchEMImputer, EMFlowImputer
from .evaluate import (
    column_mean_impute,
    column_median_impute,
    kfold_benchmark,
    rmse_missing,
)
from .exceptions import (
    ConfigError,
    EmflowError,
    NonFiniteError,
    NotPositiveDefiniteError,
    ValidationError,
)
from .flow import (
    CouplingLayer,
    FlowModel,
    composite_loss,
    load_flow,
    log_likelihood,
    nll_loss,
    reinit_flow,
    save_flow,
)
from .gaussian import (
    ConditionalGaussian,
    GaussianParams,
    batch_em_estimates,
    conditional,
    impute_row,
    log_density,
    padded_conditional_cov,
)
from .masking import mar_mask, mcar_mask
from .online_em import (
    EmConfig,
    OnlineEmState,
    em_update,
    init_from_batch,
    robustify,
    step_size,
)

__version__ = "0.1.0"

__all__ = [
    "BatchEMImputer",
    "ConditionalGaussian",
    "ConfigError",
    "CouplingLayer",
    "DataMatrix",
    "EMFlowImputer",
    "EmConfig",
    "EmflowError",
    "FeatureScaler",
    "FlowModel",
    "GaussianParams",
    "ImputationRun",
    "ImputedDataset",
    "MaskMatrix",
    "NonFiniteError",
    "NotPositiveDefiniteError",
    "OnlineEmState",
    "TrainConfig",
    "ValidationError",
    "apply_scaler",
    "batch_em_estimates",
    "batch_em_fit",
    "batch_em_impute",
    "column_mean_impute",
    "column_median_impute",
    "composite_loss",
    "conditional",
    "em_update",
    "fit_scaler",
    "impute_row",
    "initial_impute",
    "init_from_batch",
    "invert_scaler",
    "kfold_benchmark",
    "load_checkpoint",
    "load_flow",
    "log_density",
    "log_likelihood",
    "mar_mask",
    "mcar_mask",
    "nll_loss",
    "observed_loglik",
    "padded_conditional_cov",
    "read_data_csv",
    "read_mask_csv",
    "reimputation_phase",
    "reinit_flow",
    "rmse_missing",
    "robustify",
    "run",
    "save_checkpoint",
    "save_flow",
    "step_size",
    "training_phase",
    "write_data_csv",
    "write_mask_csv",
]
