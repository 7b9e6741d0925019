"""Two-scale Markov-modulated small-noise diffusions: simulation, averaging and the rate function."""

from .averaging import Path, averaged_drift, lln_diagnostic, solve_averaged_ode
from .experiments import EventSpec, eps_sweep, ldp_compare, mc_rare_event, tilted_convergence
from .fastchain import nu, rate_matrix, stationary
from .model import Model, ModelConfigError, Probe, build_model, model_to_config, validate_model
from .perturb import perturb_triple, uniqueness_check, zero_cost_triple
from .ratefn import RateOptions, local_rate, path_rate
from .rng import seed_streams
from .simulator import FeedbackControls, batch_simulate, simulate, simulate_controlled

__version__ = "0.1.0"
