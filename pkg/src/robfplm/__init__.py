"""Robust estimation for semi-functional linear regression models.

B-spline approximations of the slope function and the nonparametric
component, S/MM-estimation with a robust residual scale, RBIC selection of
the basis dimensions, a monotone modification of the nonparametric fit and a
Monte Carlo harness.
"""

from .bspline import (AffineMap, FunctionalSample, SplineBasis, basis_eval, inner_products,
                      make_basis, trapezoid_weights)
from .errors import FplmError
from .model import (Dataset, FplmFit, build_design, fit, flag_outliers, monotone_modify,
                    predict, prediction_metrics)
from .rho import RhoFunction, huber, quadratic, tukey
from .scale import MScaleSpec, mscale
from .selection import SelectionGrid, SelectionResult, dimension_range, rbic, select_dimensions
from .simulation import (MonteCarloReport, SimulationConfig, compute_metrics, run_study,
                         simulate, true_beta, true_eta)
from .solver import RegressionFit, SolverControl, m_estimate_noscale, mm_step, ols, s_estimate

__version__ = "0.1.0"
