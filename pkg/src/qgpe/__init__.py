"""Time-dependent variational dynamics of continuous matrix product states
for the Lieb-Liniger gas, with linear response and reference oracles."""

from .errors import *  # noqa: F401,F403
from .cmps import (
    UniformCMPS,
    FiniteCMPS,
    BoundaryCondition,
    GaugeTransform,
    gauge_transform,
    left_canonicalize,
    random_uniform_state,
    save_checkpoint,
    load_checkpoint,
)
from .tdvp import (
    LiebLinigerParams,
    qgpe_rhs_uniform,
    qgpe_rhs_finite,
    uniform_energy,
    finite_energy,
    imaginary_time_ground_state,
    imaginary_time_finite,
    real_time_evolve,
    chemical_potential_for_gamma,
    ground_state_at_gamma,
)
from .bdg import prepare_bundle, solve_response, excitation_spectrum, sweep_k
from .oracle import bethe_ground_energy, bogoliubov_dispersion

__version__ = "0.1.0"
