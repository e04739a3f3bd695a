"""Stable maximum-likelihood identification of linear state-space models.

EM with latent disturbances: the E-step is a Gaussian smoother, and the
M-step maximizes a convex lower bound that certifies stability of every
iterate. A classical latent-states EM is included as a baseline.
"""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Dimensions,
    ExplicitModel,
    ImplicitModel,
    make_random_stable_system,
    mass_spring_damper,
    sample_trajectory,
    spectral_radius,
)
from .inference import disturbance_smoother, kalman_filter, log_likelihood, rts_smoother  # noqa: E402
from .em_disturbances import default_initial_model, em_dist_run  # noqa: E402
from .em_states import SingularModelError, em_states_run  # noqa: E402

__all__ = [
    "__version__",
    "Dimensions",
    "ExplicitModel",
    "ImplicitModel",
    "make_random_stable_system",
    "mass_spring_damper",
    "sample_trajectory",
    "spectral_radius",
    "disturbance_smoother",
    "kalman_filter",
    "log_likelihood",
    "rts_smoother",
    "default_initial_model",
    "em_dist_run",
    "SingularModelError",
    "em_states_run",
]
