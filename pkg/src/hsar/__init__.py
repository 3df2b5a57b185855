"""Marginal maximum likelihood for hierarchical spatial autoregressive models
with measurement error and missing responses."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DirectPathRefused,
    HSARError,
    MissingDataPresent,
    NonFiniteLikelihood,
    NotConverged,
    NotPositiveDefinite,
    RankDeficientDesign,
    SingularInformation,
)
from .sparse_core import SparseMatrix  # noqa: E402
from .cholesky import CholeskyFactor, factor, solve_spd  # noqa: E402
from .weights import SpatialWeights, rook_grid, row_normalize, rho_interval  # noqa: E402
from .model import Dataset, ModelKind, Params, complete_loglik  # noqa: E402
from .estimator import (  # noqa: E402
    FitOptions,
    FitResult,
    Method,
    fit,
    fit_fml,
    fit_oml,
    lc_direct,
    lc_param,
)
from .inference import StdErrors, cov_beta, observed_info_zeta, standard_errors  # noqa: E402
from .simulate import SimConfig, StudyReport, run_study, simulate_one  # noqa: E402
from .bench import BenchResult, bench_kernel  # noqa: E402

__all__ = [
    "__version__",
    "HSARError",
    "NotPositiveDefinite",
    "RankDeficientDesign",
    "MissingDataPresent",
    "NonFiniteLikelihood",
    "NotConverged",
    "SingularInformation",
    "DirectPathRefused",
    "SparseMatrix",
    "CholeskyFactor",
    "factor",
    "solve_spd",
    "SpatialWeights",
    "rook_grid",
    "row_normalize",
    "rho_interval",
    "Dataset",
    "ModelKind",
    "Params",
    "complete_loglik",
    "FitOptions",
    "FitResult",
    "Method",
    "fit",
    "fit_fml",
    "fit_oml",
    "lc_param",
    "lc_direct",
    "StdErrors",
    "cov_beta",
    "observed_info_zeta",
    "standard_errors",
    "SimConfig",
    "StudyReport",
    "run_study",
    "simulate_one",
    "BenchResult",
    "bench_kernel",
]
