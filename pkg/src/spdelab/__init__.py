"""Numerical laboratory for a reaction-diffusion SPDE driven through a fast
random dynamical boundary condition, its Robin-boundary reduction, the
rescaled deviation processes, and the control-based rate functional."""

__version__ = "0.1.0"

from .mesh import (SpatialMesh, DiscreteOperator, FieldState, build_interval_mesh,
                   build_rectangle_mesh, assemble_operators, coercivity_diagnostics,
                   neumann_map)
from .noise import (CovarianceSpec, NoiseIncrement, StreamConfig, Sampler,
                    build_sampler, sample_increment, coupled_streams,
                    default_covariance)
from .dynamics import (Nonlinearity, SystemConfig, PathRecord, make_nonlinearity,
                       step_full, step_effective, step_deviation_limit,
                       step_controlled, simulate_path, weak_residual,
                       default_initial_state)
from .deviations import (DeviationRecord, RateProblem, RateResult, deviation_path,
                         normal_deviation_gap, forward_control_map, rate_function,
                         ldp_tail_scaling)
from .montecarlo import (EnsembleConfig, EnsembleStats, RateFit, run_ensemble,
                         fit_rate, confidence_interval, wilson_interval)
from .config import ExperimentSpec, parse_config
