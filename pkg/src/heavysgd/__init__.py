"""Simulation and verification toolkit for SGD under heavy-tailed gradient noise."""

__version__ = "0.1.0"

from .errors import (
    DegenerateSampleError,
    DivergenceError,
    EstimationError,
    HeavySgdError,
    InsufficientDataError,
    LogDomainError,
    NonConvergenceError,
    ParameterError,
)
from .stable import (
    NoiseLaw,
    ParetoParams,
    RngStream,
    StableParams,
    hill_tail_index,
    sample_pareto,
    sample_stable,
    self_similarity_test,
    stable_char_fn,
)
from .ppd import SymMatrix, classify_cones, contraction_check, ppd_margin, signed_power
from .sgd_core import (
    AffineGradient,
    Experiment,
    MultiplicativeNoise,
    NoiseSpec,
    SgdTrace,
    StepSchedule,
    checkpoint_plan,
    replicate,
    scaled_pr_error,
    sgd_run,
)
from .models import GlmOracle, GlmSpec, LinearModelSpec, OlsOracle, find_glm_optimum, hessian_at
from .analysis import (
    check_p_expand,
    check_phi_sum,
    check_rho_exp,
    check_vecexpandp,
    fabian_recursion,
    fit_rate,
    moment_curve,
    stable_limit_diagnostic,
)
