"""Amplitude and phase modelling of pitch curves with crossed random effects."""

from .exceptions import WarpfitError
from .fpca import EigenBasis, FunctionalPCA, fit_fpca, project, reconstruct, select_components, variance_table
from .mvlme import (
    FittedModel,
    ModelSpec,
    MultivariateLME,
    build_design,
    correlation_report,
    direct_reml_oracle,
    fit,
    profiled_reml_deviance,
)
from .pipeline import PipelineConfig, SyntheticSpec, reconstruct_report, run, simulate
from .prep import CurveSmoother, RawCurve, SampledCurve, load_corpus, screen_missing, smooth_curve
from .register import (
    AUCRegistration,
    PairwiseRegistration,
    RegistrationResult,
    estimate_h_inverse,
    invert_warp,
    pairwise_warp,
    register_auc,
    register_class,
)
from .simplex import CLRTransformer, WarpingFunction, clr_forward, clr_inverse, log_derivative_curve

__version__ = "0.1.0"
