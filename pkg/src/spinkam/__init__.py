"""Quasi-periodic attractors of the dissipative spin-orbit problem at configurable precision."""
from .model import ModelParams, Variant, conformal_factor, lbar_nbar
from .numerics import PrecisionError, format_scalar, get_precision, parse_scalar, set_precision, working_precision
from .fourier import FourierSeries, sobolev_seminorm
from .flowmap import TaylorConfig, poincare_map, poincare_map_grid
from .kam import (ContinuationConfig, ContinuationRecord, ContinuationStall, ConvergenceError, TorusSolution,
                  continue_family, frequency, integrable_torus, invariance_error, newton_step, solve_torus)
from .bundles import adapted_frame, min_angle, reduce_bundles
from .analysis import ObservableSpec, RotationConfig, breakdown_report, rotation_number

__version__ = "0.1.0"
