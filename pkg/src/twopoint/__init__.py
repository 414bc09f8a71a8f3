"""Two-point treatment-effect estimation and inference calibrated by a
resistant population's conditional variance."""

from .att import (
    AttEstimate,
    ConstantEffectResult,
    att_sign_diagnostic,
    att_two_point,
    constant_effect_estimate,
    constant_effect_variance,
)
from .errors import TwoPointError
from .estimate import (
    PointFailure,
    TwoPointFit,
    delta_squared,
    estimate_grid,
    prepare_residual_caches,
    two_point_estimate,
)
from .inference import (
    CiPair,
    VarComponents,
    confidence_intervals,
    estimate_components,
    infer_grid,
    v_beta_u_sq,
    v_delta_sq,
    v_tau_sq,
)
from .kernels import (
    BandwidthSet,
    KernelSpec,
    LocalFit,
    constrained_group_fit,
    kernel_eval,
    local_linear_fit,
)
from .simlab import DgpSpec, SimDraw, generate
from .smoothers import (
    Dataset,
    MomentEstimates,
    ResistantSample,
    fit_cond_variance,
    fit_mean,
    fit_propensity,
    fit_resistant_variance,
    nw_moment,
    select_bandwidth_cv,
    select_bandwidths,
    undersmooth,
    undersmooth_bandwidths,
)

__all__ = [
    "AttEstimate",
    "BandwidthSet",
    "CiPair",
    "ConstantEffectResult",
    "Dataset",
    "DgpSpec",
    "KernelSpec",
    "LocalFit",
    "MomentEstimates",
    "PointFailure",
    "ResistantSample",
    "SimDraw",
    "TwoPointError",
    "TwoPointFit",
    "VarComponents",
    "att_sign_diagnostic",
    "att_two_point",
    "confidence_intervals",
    "constant_effect_estimate",
    "constant_effect_variance",
    "constrained_group_fit",
    "delta_squared",
    "estimate_components",
    "estimate_grid",
    "fit_cond_variance",
    "fit_mean",
    "fit_propensity",
    "fit_resistant_variance",
    "generate",
    "infer_grid",
    "kernel_eval",
    "local_linear_fit",
    "nw_moment",
    "prepare_residual_caches",
    "select_bandwidth_cv",
    "select_bandwidths",
    "two_point_estimate",
    "undersmooth",
    "undersmooth_bandwidths",
    "v_beta_u_sq",
    "v_delta_sq",
    "v_tau_sq",
]

__version__ = "0.1.0"
