"""EM estimation for constrained multivariate autoregressive state-space models.

Models have linear-Gaussian state and observation equations with every
parameter matrix expressed through a linear design ``vec(M_t) = f_t + D_t v``
over a small set of free values.  Supports missing observations, partially
deterministic (zero-variance) model rows, fixed or stochastic initial
states, and time-varying designs.
"""

from .driver import EMConfig, FitResult, em_fit, em_step, kemcheck, mc_init_search
from .errors import (
    FilterInconsistencyError,
    FitError,
    IdentifiabilityError,
    ModelSpecError,
)
from .expectations import ExpectationSet, compute_expectations, ir_matrix
from .kalman import (
    FilterOutput,
    SmootherOutput,
    TimeSeriesData,
    kalman_filter,
    kalman_smoother,
)
from .linalg import MaskSelector, kron, masked_inverse, svd_rank, unvec, vec
from .model import (
    FreeParams,
    MaterializedParams,
    ModelSpec,
    ParamDesign,
    build_from_symbolic,
    builder,
    covariate_design,
    fixed_design,
    materialize,
    materialize_params,
    simulate,
    validate_spec,
)
from .updates import expected_loglik

__all__ = [
    "EMConfig", "ExpectationSet", "FilterInconsistencyError", "FilterOutput",
    "FitError", "FitResult", "FreeParams", "IdentifiabilityError",
    "MaskSelector", "MaterializedParams", "ModelSpec", "ModelSpecError",
    "ParamDesign", "SmootherOutput", "TimeSeriesData", "build_from_symbolic",
    "builder", "compute_expectations", "covariate_design", "em_fit", "em_step",
    "expected_loglik", "fixed_design", "ir_matrix", "kalman_filter",
    "kalman_smoother", "kemcheck", "kron", "masked_inverse", "materialize",
    "materialize_params", "mc_init_search", "simulate", "svd_rank", "unvec",
    "validate_spec", "vec",
]
