"""Two-layer quasi-geostrophic channel model with transport noise and
particle-filter data assimilation."""

from .grid import (
    Grid,
    StationSet,
    coarse_grain,
    make_equidistant_stations,
    sample_at_stations,
)
from .elliptic import (
    EllipticError,
    EllipticWorkspace,
    StratificationParams,
    build_workspace,
    invert_pv,
    velocities_from_psi,
)

__all__ = [
    "Grid",
    "StationSet",
    "coarse_grain",
    "make_equidistant_stations",
    "sample_at_stations",
    "EllipticError",
    "EllipticWorkspace",
    "StratificationParams",
    "build_workspace",
    "invert_pv",
    "velocities_from_psi",
]
