"""Dynamic active vision spaces on a hemispherical camera action manifold."""

from .errors import (
    ConfigError,
    DavsError,
    DegenerateError,
    InvalidInputError,
    NonConvergenceError,
    NumericalFailureError,
)
from .karcher import FrechetProblem, karcher_mean, solve_karcher
from .manifold import DavsManifold, SoiKeypointSet, TangentFrame, build_davs, sample_direction, tangent_frame
from .sphere import SphereChart, SpherePoint, TangentVector, exp_map, geodesic_distance, log_map

__version__ = "0.1.0"
