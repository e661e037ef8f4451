"""rieszlab: a numerical laboratory for Riesz/Coulomb gases and potential theory.

Capabilities: weighted equilibrium measures and Frostman conditions, envelope
(projection) operators, mean-field free-energy minimizers and temperature
scans, finite-N Gibbs gases with Metropolis sampling and thermodynamic
integration, orthogonal-polynomial and Christoffel-Darboux diagnostics,
capacities and carrier criteria, and the explicit pathological measures that
exhibit zeroth- and second-order phase transitions at desk scale.
"""

from .core import (DiagonalRule, KernelConfig, PotentialField, energy,
                   free_energy_functional, kernel_eval, potential_eval,
                   relative_entropy, weighted_energy)
from .geometry import GridSet
from .measures import BallUnionMeasure, GridMeasure, l1_distance, w1_distance_1d

__all__ = [
    "KernelConfig", "DiagonalRule", "PotentialField", "GridSet",
    "GridMeasure", "BallUnionMeasure", "l1_distance", "w1_distance_1d",
    "kernel_eval", "potential_eval", "energy", "weighted_energy",
    "relative_entropy", "free_energy_functional",
]

__version__ = "0.1.0"
