"""Measures: nonnegative weights on grid cells, and analytic ball unions.

BallUnionMeasure keeps radii in log space: the pathological constructions
use radii far below the smallest positive double, but every formula that
touches them (self energies, capacities) only ever needs log(radius).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, InvalidInput
from .geometry import GridSet, same_grid

_MASS_RTOL = 1e-12


@dataclass
class GridMeasure:
    grid: GridSet
    weights: np.ndarray
    total_mass: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.grid.n_cells,):
            raise InvalidInput("one weight per active cell required")
        if np.any(self.weights < 0):
            raise InvalidInput("weights must be nonnegative")
        s = float(self.weights.sum())
        if not np.isclose(s, self.total_mass, rtol=_MASS_RTOL, atol=1e-300):
            raise InvalidInput(
                f"weights sum to {s!r}, expected total mass {self.total_mass!r}")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def uniform(grid: GridSet) -> "GridMeasure":
        w = np.full(grid.n_cells, 1.0 / grid.n_cells)
        return GridMeasure(grid, w, 1.0)

    @staticmethod
    def from_weights(grid: GridSet, weights) -> "GridMeasure":
        w = np.asarray(weights, dtype=float)
        return GridMeasure(grid, w, float(w.sum()))

    @staticmethod
    def from_density(grid: GridSet, density, normalize: bool = True) -> "GridMeasure":
        """Cell masses density(center) * cell_volume; density is vectorized."""
        vals = np.asarray(density(grid.points), dtype=float)
        w = vals * grid.cell_volume
        if np.any(w < 0):
            raise InvalidInput("density must be nonnegative")
        if normalize:
            w = w / w.sum()
        return GridMeasure(grid, w, float(w.sum()))

    @staticmethod
    def from_cell_masses(grid: GridSet, masses) -> "GridMeasure":
        return GridMeasure.from_weights(grid, masses)

    # -- basic queries -----------------------------------------------------

    @property
    def is_probability(self) -> bool:
        return np.isclose(self.total_mass, 1.0, rtol=_MASS_RTOL)

    def normalized(self) -> "GridMeasure":
        return GridMeasure(self.grid, self.weights / self.total_mass, 1.0)

    def support_mask(self, atom_threshold_rel: float = 1e-8) -> np.ndarray:
        """Cells carrying more than atom_threshold_rel x the uniform weight."""
        cut = atom_threshold_rel * self.total_mass / self.grid.n_cells
        return self.weights > cut

    def mean(self, values) -> float:
        return float(np.dot(self.weights, values) / self.total_mass)


def l1_distance(mu: GridMeasure, nu: GridMeasure) -> float:
    """Total absolute difference of cell masses (equals the L1 density distance)."""
    if not same_grid(mu.grid, nu.grid):
        raise GridMismatch("measures live on different grids")
    return float(np.abs(mu.weights - nu.weights).sum())


def w1_distance_1d(mu: GridMeasure, nu: GridMeasure, axis: int = 0) -> float:
    """Wasserstein-1 distance for measures on a common 1d-parametrized grid."""
    if not same_grid(mu.grid, nu.grid):
        raise GridMismatch("measures live on different grids")
    x = mu.grid.points[:, axis]
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cdf_gap = np.cumsum(mu.weights[order] - nu.weights[order])
    return float(np.sum(np.abs(cdf_gap[:-1]) * np.diff(xs)))


@dataclass
class BallUnionMeasure:
    """Weighted union of uniform balls: sum_i w_i * Uniform(B(c_i, r_i)).

    component_dim is the intrinsic dimension of the balls: 1 for the
    interval-supported constructions (balls of R embedded in the plane),
    otherwise the ambient dimension.
    """

    centers: np.ndarray          # (M, d)
    log_radii: np.ndarray        # (M,)
    weights: np.ndarray          # (M,)
    normalized: bool = True
    support_box: tuple | None = None   # nominal support (lo, hi) per axis
    component_dim: int | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.log_radii = np.asarray(self.log_radii, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.component_dim is None:
            self.component_dim = self.centers.shape[1]
        M = len(self.centers)
        if self.log_radii.shape != (M,) or self.weights.shape != (M,):
            raise InvalidInput("components must share one center/radius/weight each")
        if np.any(~np.isfinite(self.log_radii)):
            raise InvalidInput("radii must be positive (finite log)")
        if np.any(self.weights < 0):
            raise InvalidInput("weights must be nonnegative")
        if self.normalized and not np.isclose(self.weights.sum(), 1.0, rtol=_MASS_RTOL):
            raise InvalidInput("normalized measure must have unit mass")

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.centers)

    @property
    def radii(self) -> np.ndarray:
        """Radii as doubles; may underflow to zero for extreme components."""
        return np.exp(self.log_radii)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @staticmethod
    def from_radii(centers, radii, weights, normalized=True, support_box=None,
                   component_dim=None):
        radii = np.asarray(radii, dtype=float)
        if np.any(radii <= 0):
            raise InvalidInput("radii must be positive")
        return BallUnionMeasure(centers, np.log(radii), weights,
                                normalized, support_box, component_dim)

    def normalized_copy(self) -> "BallUnionMeasure":
        return BallUnionMeasure(self.centers, self.log_radii,
                                self.weights / self.weights.sum(), True,
                                self.support_box, self.component_dim)

    # -- exact ball-mass queries --------------------------------------------

    def ball_mass(self, z, r: float) -> float:
        """Mass of the closed ball B(z, r), exact per component.

        For interval components (component_dim == 1) the overlap is computed
        along the first axis inside the d-dimensional query ball.
        """
        z = np.asarray(z, dtype=float)
        eps = self.radii
        total = 0.0
        for c, w, e, le in zip(self.centers, self.weights, eps, self.log_radii):
            if w == 0.0:
                continue
            if self.component_dim == 1 and self.d > 1:
                gap2 = r * r - float(np.sum((z[1:] - c[1:]) ** 2))
                if gap2 <= 0:
                    continue
                half = math.sqrt(gap2)
                s = abs(z[0] - c[0])
                if e < 1e-15 * max(half, 1e-300) or le < np.log(max(half, 1e-300)) - 34:
                    total += w if s <= half else 0.0
                else:
                    total += w * _ball_overlap_fraction(1, s, e, half)
                continue
            s = float(np.linalg.norm(c - z))
            if e < 1e-15 * max(r, 1e-300) or le < np.log(max(r, 1e-300)) - 34:
                total += w if s <= r else 0.0
                continue
            total += w * _ball_overlap_fraction(self.component_dim, s, e, r)
        return total

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw points: component by weight, then uniform in the ball."""
        idx = rng.choice(self.n_components, size=size,
                         p=self.weights / self.total_mass)
        m = self.component_dim
        u = np.zeros((size, self.d))
        g = rng.standard_normal((size, m))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        radial = rng.random(size) ** (1.0 / m)
        u[:, :m] = g * radial[:, None]
        return self.centers[idx] + self.radii[idx][:, None] * u

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        comps = []
        for c, lr, w in zip(self.centers, self.log_radii, self.weights):
            comps.append({
                "center": [float(v) for v in c],
                "radius": float(np.exp(lr)),
                "log_radius": float(lr),
                "weight": float(w),
            })
        out = {"components": comps, "normalized": bool(self.normalized)}
        if self.support_box is not None:
            out["support_box"] = [[float(a), float(b)] for a, b in self.support_box]
        if self.component_dim != self.d:
            out["component_dim"] = int(self.component_dim)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @staticmethod
    def from_json_dict(data: dict) -> "BallUnionMeasure":
        comps = data["components"]
        centers = np.array([c["center"] for c in comps], dtype=float)
        log_radii = np.array(
            [c["log_radius"] if "log_radius" in c else np.log(c["radius"])
             for c in comps], dtype=float)
        weights = np.array([c["weight"] for c in comps], dtype=float)
        box = data.get("support_box")
        if box is not None:
            box = tuple((float(a), float(b)) for a, b in box)
        return BallUnionMeasure(centers, log_radii, weights,
                                bool(data.get("normalized", True)), box,
                                data.get("component_dim"))

    @staticmethod
    def from_json(text: str) -> "BallUnionMeasure":
        return BallUnionMeasure.from_json_dict(json.loads(text))


def _ball_overlap_fraction(d: int, s: float, e: float, r: float) -> float:
    """Fraction of B(c, e) inside B(z, r) with |c - z| = s."""
    if s + e <= r:
        return 1.0
    if s >= r + e:
        return 0.0
    if d == 1:
        overlap = min(s + e, r) - max(s - e, -r)
        return max(overlap, 0.0) / (2 * e)
    if d == 2:
        return _lens_area(r, e, s) / (np.pi * e**2)
    if d == 3:
        return _sphere_cap_volume(r, e, s) / (4.0 / 3.0 * np.pi * e**3)
    raise InvalidInput(f"ball overlap not implemented for d={d}")


def _lens_area(R: float, r: float, s: float) -> float:
    # area of intersection of disks radius R and r at center distance s
    a = r**2 * np.arccos(np.clip((s**2 + r**2 - R**2) / (2 * s * r), -1, 1))
    b = R**2 * np.arccos(np.clip((s**2 + R**2 - r**2) / (2 * s * R), -1, 1))
    inner = max((-s + r + R) * (s + r - R) * (s - r + R) * (s + r + R), 0.0)
    return a + b - 0.5 * np.sqrt(inner)


def _sphere_cap_volume(R: float, r: float, s: float) -> float:
    # volume of intersection of balls radius R and r at center distance s
    return (np.pi * (R + r - s) ** 2
            * (s**2 + 2 * s * r - 3 * r**2 + 2 * s * R + 6 * r * R - 3 * R**2)
            / (12 * s))
