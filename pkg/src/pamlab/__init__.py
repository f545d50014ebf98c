"""Simulation toolkit for multiplicative stochastic heat equations on the torus."""

from .errors import (BlowupError, DegeneracyError, DegeneracyWarning, DomainError, NumericError,
                     OrderingError, PamlabError, PositivityError)
from .noise import NoiseStream, parse_seed, stream_keys
from .reaction import ReactionSpec, allen_cahn, check_high_noise, fisher_kpp, linear, preset
from .solver import SolverConfig, TrajectoryState, Recorder, evolve, initial_state, step_pam, step_she
from .torus import Field, Grid, convolve, heat_kernel
from .coupling import build_schedule, evolve_coupled_pam_pair, run_staged_coupling
from .stats import simulate_ensemble, lyapunov_estimate, tail_sum_check

__version__ = "0.1.0"
