"""Transfer learning for high-dimensional quantile regression with a smoothed loss.

The package provides the penalized smoothed-quantile solver, the two-step
transfer estimator, adaptive source detection, a communication-efficient
distributed variant, and a Monte-Carlo experiment harness with a CLI.
"""

from .core import (
    CoefVector,
    DataValidationError,
    Dataset,
    DimensionMismatchError,
    NumericalBlowupError,
    check_loss,
    empirical_check_loss,
    pool_datasets,
    split_by_site,
)
from .detection import (
    DetectionParams,
    DetectionReport,
    detect_transferable,
    split_target,
    trans_sqr,
    transferability_indices,
)
from .distributed import (
    CommStats,
    DistributedParams,
    PilotSample,
    SiteHandle,
    distributed_oracle_trans_sqr,
    draw_pilot,
    local_gradient,
    surrogate_step,
)
from .selection import (
    CvConfig,
    bic_select,
    cv_select,
    default_bandwidth,
    fold_assignments,
    lambda_grid,
)
from .simulation import (
    CoefficientSet,
    ResultsTable,
    ScenarioConfig,
    gen_coefficients,
    gen_dataset,
    run_experiment,
    true_quantile_beta,
)
from .smoothing import (
    Kernel,
    kernel_cdf,
    smoothed_loss,
    smoothed_objective_and_grad,
    smoothed_quantile,
)
from .solver import FitConfig, SqrFit, fit_l1_sqr, kkt_gap, soft_threshold
from .transfer import TransferEstimate, TransferParams, debias, oracle_trans_sqr

__version__ = "0.1.0"
