"""Lattice Gaussian field toolkit: block-hierarchical geometry, discrete
elliptic solvers, exact Gaussian integration, dipole-gas integrands and a
one-step coarse-graining algebra, with a verification harness over all of it.
"""

__version__ = "0.1.0"

from .geometry import (
    Grid,
    TorusLattice,
    SiteField,
    torus_distance,
    forward_derivative,
    gradient_square,
    directed_gradient_square,
    outer_boundary,
    blocks_at_scale,
)
from .polymers import Polymer, PolymerFamily

__all__ = [
    "Grid",
    "TorusLattice",
    "SiteField",
    "Polymer",
    "PolymerFamily",
    "torus_distance",
    "forward_derivative",
    "gradient_square",
    "directed_gradient_square",
    "outer_boundary",
    "blocks_at_scale",
    "__version__",
]
