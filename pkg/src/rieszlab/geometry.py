"""Grid discretizations of compact sets in R^d.

A GridSet is a finite family of congruent cells (centers, edge h, intrinsic
cell dimension m <= d).  Full-dimensional sets use axis-aligned lattice cells;
curves (interval embedded in the plane, circle) use segments/arcs; surfaces
(sphere) use near-equal-area patches.  Lattice-backed grids carry integer
cell indices so pair interactions can be applied by FFT convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class GridSet:
    d: int
    points: np.ndarray          # (n, d) cell centers
    h: float                    # cell edge (arc length for circle cells)
    cell_dim: int               # intrinsic dimension of one cell
    cell_volume: float          # cell_dim-volume of one cell
    kind: str = "points"
    params: tuple = ()
    lattice: np.ndarray | None = None         # (n, k) integer indices
    lattice_axes: tuple | None = None         # ambient axes the lattice spans
    lattice_origin: np.ndarray | None = None  # center of cell with index 0
    lattice_shape: tuple | None = None        # bounding index box

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != self.d:
            raise InvalidInput("points must be an (n, d) array")
        if len(self.points) == 0:
            raise InvalidInput("active cell set is empty")
        if self.h <= 0:
            raise InvalidInput("cell edge h must be positive")

    @property
    def n_cells(self) -> int:
        return len(self.points)

    # -- constructors -----------------------------------------------------

    @staticmethod
    def interval(a: float, b: float, h: float, d: int = 2) -> "GridSet":
        """Segment [a, b] x {0}^(d-1), split into 1d cells of length h."""
        n = max(1, int(round((b - a) / h)))
        h_eff = (b - a) / n
        centers_x = a + (np.arange(n) + 0.5) * h_eff
        pts = np.zeros((n, d))
        pts[:, 0] = centers_x
        return GridSet(
            d=d, points=pts, h=h_eff, cell_dim=1, cell_volume=h_eff,
            kind="interval", params=(a, b),
            lattice=np.arange(n, dtype=np.int64)[:, None],
            lattice_axes=(0,),
            lattice_origin=pts[0].copy(),
            lattice_shape=(n,),
        )

    @staticmethod
    def box(bounds, h: float) -> "GridSet":
        """Axis-aligned box given as ((lo_1, hi_1), ..., (lo_d, hi_d))."""
        bounds = tuple((float(lo), float(hi)) for lo, hi in bounds)
        d = len(bounds)
        ns = [max(1, int(round((hi - lo) / h))) for lo, hi in bounds]
        h_eff = (bounds[0][1] - bounds[0][0]) / ns[0]
        axes = [lo + (np.arange(n) + 0.5) * h_eff for (lo, _), n in zip(bounds, ns)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        idx = np.stack(
            [m.ravel() for m in np.meshgrid(*[np.arange(n) for n in ns], indexing="ij")],
            axis=1,
        ).astype(np.int64)
        return GridSet(
            d=d, points=pts, h=h_eff, cell_dim=d, cell_volume=h_eff**d,
            kind="box", params=bounds,
            lattice=idx, lattice_axes=tuple(range(d)),
            lattice_origin=np.array([lo + 0.5 * h_eff for lo, _ in bounds]),
            lattice_shape=tuple(ns),
        )

    @staticmethod
    def disk(radius: float, h: float, center=(0.0, 0.0)) -> "GridSet":
        return GridSet._lattice_ball(radius, h, center, d=2, kind="disk")

    @staticmethod
    def ball(radius: float, h: float, center=(0.0, 0.0, 0.0), d: int = 3) -> "GridSet":
        return GridSet._lattice_ball(radius, h, center, d=d, kind="ball")

    @staticmethod
    def _lattice_ball(radius, h, center, d, kind):
        center = np.asarray(center, dtype=float)
        n_side = max(1, int(np.ceil(2 * radius / h)))
        lo = center - 0.5 * n_side * h
        axes = [lo[i] + (np.arange(n_side) + 0.5) * h for i in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        keep = np.sum((pts - center) ** 2, axis=1) <= radius**2
        idx = np.stack(
            [m.ravel() for m in np.meshgrid(*[np.arange(n_side)] * d, indexing="ij")],
            axis=1,
        ).astype(np.int64)[keep]
        return GridSet(
            d=d, points=pts[keep], h=h, cell_dim=d, cell_volume=h**d,
            kind=kind, params=(float(radius), tuple(center)),
            lattice=idx, lattice_axes=tuple(range(d)),
            lattice_origin=lo + 0.5 * h,
            lattice_shape=(n_side,) * d,
        )

    @staticmethod
    def circle(radius: float, n: int, center=(0.0, 0.0)) -> "GridSet":
        """Circle of given radius split into n arc cells (cells are arcs)."""
        center = np.asarray(center, dtype=float)
        theta = (np.arange(n) + 0.5) * (2 * np.pi / n)
        pts = center + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        arc = 2 * np.pi * radius / n
        return GridSet(d=2, points=pts, h=arc, cell_dim=1, cell_volume=arc,
                       kind="circle", params=(float(radius), tuple(center), n))

    @staticmethod
    def sphere(radius: float, n: int, center=(0.0, 0.0, 0.0)) -> "GridSet":
        """Sphere surface in R^3 as n Fibonacci points with equal-area patches."""
        center = np.asarray(center, dtype=float)
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        golden = np.pi * (1 + np.sqrt(5.0))
        theta = golden * i
        pts = center + radius * np.stack(
            [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)],
            axis=1,
        )
        area = 4 * np.pi * radius**2 / n
        return GridSet(d=3, points=pts, h=np.sqrt(area), cell_dim=2,
                       cell_volume=area, kind="sphere",
                       params=(float(radius), tuple(center), n))

    @staticmethod
    def from_points(points, h: float, cell_dim: int, cell_volume: float,
                    d: int | None = None) -> "GridSet":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return GridSet(d=d or points.shape[1], points=points, h=h,
                       cell_dim=cell_dim, cell_volume=cell_volume, kind="points")

    # -- derived grids -----------------------------------------------------

    def refined(self) -> "GridSet":
        """The same set at half the cell edge."""
        if self.kind == "interval":
            a, b = self.params
            return GridSet.interval(a, b, self.h / 2, d=self.d)
        if self.kind == "box":
            return GridSet.box(self.params, self.h / 2)
        if self.kind == "disk":
            r, c = self.params
            return GridSet.disk(r, self.h / 2, c)
        if self.kind == "ball":
            r, c = self.params
            return GridSet.ball(r, self.h / 2, c, d=self.d)
        if self.kind == "circle":
            r, c, n = self.params
            return GridSet.circle(r, 2 * n, c)
        if self.kind == "sphere":
            r, c, n = self.params
            return GridSet.sphere(r, 4 * n, c)
        raise InvalidInput(f"grid of kind {self.kind!r} cannot be refined")

    def subset(self, mask) -> "GridSet":
        """Sub-grid of the active cells selected by a boolean mask."""
        mask = np.asarray(mask)
        if mask.dtype != bool:
            keep = np.zeros(self.n_cells, dtype=bool)
            keep[mask] = True
            mask = keep
        if not mask.any():
            raise InvalidInput("subset would be empty")
        return replace(
            self,
            points=self.points[mask],
            kind="subset",
            params=(self.kind,) + self.params,
            lattice=None if self.lattice is None else self.lattice[mask],
        )

    def with_extra_lattice_cells(self, centers) -> "GridSet":
        """Append isolated cells, snapped to this grid's lattice."""
        if self.lattice is None:
            raise InvalidInput("grid has no lattice to extend")
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        axes = list(self.lattice_axes)
        idx_new = np.round(
            (centers[:, axes] - self.lattice_origin[axes]) / self.h
        ).astype(np.int64)
        pts_new = np.tile(self.lattice_origin, (len(centers), 1))
        pts_new[:, axes] = self.lattice_origin[axes] + idx_new * self.h
        all_idx = np.vstack([self.lattice, idx_new])
        shift = np.minimum(all_idx.min(axis=0), 0)
        all_idx = all_idx - shift
        return replace(
            self,
            points=np.vstack([self.points, pts_new]),
            kind="subset",
            params=(self.kind,) + self.params,
            lattice=all_idx,
            lattice_origin=self._origin_shifted(shift),
            lattice_shape=tuple(all_idx.max(axis=0) + 1),
        )

    def _origin_shifted(self, shift):
        origin = self.lattice_origin.copy()
        axes = list(self.lattice_axes)
        origin[axes] = origin[axes] + shift * self.h
        return origin

    def nodes(self) -> np.ndarray:
        """Candidate point set including cell corners (used by Fekete search)."""
        if self.kind == "interval":
            a, b = self.params
            n = self.n_cells
            xs = a + np.arange(n + 1) * self.h
            pts = np.zeros((n + 1, self.d))
            pts[:, 0] = xs
            return pts
        if self.kind == "circle":
            r, c, n = self.params
            theta = np.arange(n) * (2 * np.pi / n)
            return np.asarray(c) + r * np.stack(
                [np.cos(theta), np.sin(theta)], axis=1)
        if self.kind in ("box", "disk", "ball") and self.lattice is not None:
            # corner lattice of the active cells
            corners = set()
            offs = np.stack(np.meshgrid(*[[0, 1]] * self.lattice.shape[1],
                                        indexing="ij"), axis=-1).reshape(-1, self.lattice.shape[1])
            for off in offs:
                for idx in map(tuple, self.lattice + off):
                    corners.add(idx)
            idx = np.array(sorted(corners), dtype=float)
            axes = list(self.lattice_axes)
            pts = np.tile(self.lattice_origin, (len(idx), 1))
            pts[:, axes] = self.lattice_origin[axes] + (idx - 0.5) * self.h
            if self.kind == "disk" or self.kind == "ball":
                r, c = self.params
                keep = np.sum((pts - np.asarray(c)) ** 2, axis=1) <= r**2 * (1 + 1e-12)
                pts = pts[keep]
            return pts
        return self.points.copy()

    def bounding_box(self):
        lo = self.points.min(axis=0) - 0.5 * self.h
        hi = self.points.max(axis=0) + 0.5 * self.h
        return lo, hi


def same_grid(a: GridSet, b: GridSet) -> bool:
    if a is b:
        return True
    return (
        a.d == b.d
        and a.n_cells == b.n_cells
        and abs(a.h - b.h) <= 1e-12 * a.h
        and np.array_equal(a.points, b.points)
    )
