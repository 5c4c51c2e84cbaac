"""Kernel estimators of continuous-treatment dose-response curves ``m(t)``
and derivative effect curves ``theta(t)``, with and without positivity."""

from .crossfit import (
    ESTIMATORS,
    FoldAssignment,
    UniformBand,
    crossfit_curve,
    make_folds,
    multiplier_bootstrap_band,
)
from .data import (
    DimensionMismatchError,
    DoseCurveError,
    EmptyWindowError,
    EstimationConfig,
    EstimationError,
    EvalGrid,
    NonFiniteError,
    ObservationSet,
    ValidationError,
    validate,
)
from .estimates import CurveEstimate, PointEstimate, pointwise_ci
from .io import emit_report, load_csv
from .kernels import Bandwidth, KernelSpec, bandwidth_rule, eval_kernel, kernel_moment
from .nopositivity import integrate_theta, m_c, theta_c_dr, theta_c_ipw, theta_c_ra, variance_theta_c_dr
from .nuisance import BasisConfig, NuisanceFitter, NuisanceSet
from .positivity import (
    ipw_variant_bias_diag,
    m_dr,
    m_ipw,
    m_ra,
    theta_dr,
    theta_ipw,
    theta_ra,
    variance_theta_dr,
)
from .simulation import DgpSpec, EstimatorSpec, SimulationReport, gen_dgp1, gen_dgp2, run_monte_carlo

__version__ = "0.1.0"
