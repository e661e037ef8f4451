"""Kernels, potentials, energies, relative entropy and the free energy.

Conventions (fixed throughout the package):

    W(x, y) = |x - y|^(alpha - d)          Riesz case, 0 < alpha < d
    W(x, y) = -2 log|x - y|                logarithmic case, d = alpha = 2

    psi_mu(x) = -Integral W(x, y) dmu(y)   (subharmonic sign convention)
    E(mu)     = 1/2 Integral W  dmu dmu
    E_phi     = E + Integral phi dmu
    F_{phi,beta} = E_phi + (1/beta) * KL(mu | mu0)

With this normalization E(arcsine on [-1,1]) = log 2 and the energy of the
uniform measure on the unit circle vanishes.

Pair sums over grid cells use the exact kernel between distinct cell centers
and a cell-average value on the diagonal (the exact mean of W over two
independent uniform points in a single cell), so that discrete energies are
consistent with the continuum as h -> 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import next_fast_len, irfftn, rfftn

from .errors import (CoincidentPoints, GridMismatch, InvalidInput, NonFinite,
                     UnsupportedKernel)
from .geometry import GridSet, same_grid
from .measures import BallUnionMeasure, GridMeasure

__all__ = [
    "KernelConfig", "DiagonalRule", "PotentialField", "kernel_eval",
    "kernel_of_distance", "potential_eval", "energy", "weighted_energy",
    "relative_entropy", "free_energy_functional", "get_operator",
]


@dataclass(frozen=True)
class KernelConfig:
    d: int
    alpha: float
    log_case: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise UnsupportedKernel("dimension must be >= 1")
        if self.log_case:
            if not (self.d == 2 and self.alpha == 2):
                raise UnsupportedKernel("log kernel requires d = alpha = 2")
        else:
            if not (0 < self.alpha < self.d):
                raise UnsupportedKernel(
                    f"alpha={self.alpha} outside (0, {self.d}); "
                    "only d = alpha = 2 admits the log kernel")

    @staticmethod
    def log2d() -> "KernelConfig":
        return KernelConfig(d=2, alpha=2.0, log_case=True)

    @staticmethod
    def coulomb(d: int) -> "KernelConfig":
        if d == 2:
            return KernelConfig.log2d()
        return KernelConfig(d=d, alpha=2.0)

    # alpha <= 2 is where the domination principle (hence envelopes) applies
    @property
    def envelope_ok(self) -> bool:
        return self.alpha <= 2


def kernel_of_distance(cfg: KernelConfig, dist):
    """Vectorized W as a function of |x - y| > 0."""
    dist = np.asarray(dist, dtype=float)
    with np.errstate(divide="ignore"):
        if cfg.log_case:
            return -2.0 * np.log(dist)
        return dist ** (cfg.alpha - cfg.d)


def kernel_eval(cfg: KernelConfig, x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (cfg.d,) or y.shape != (cfg.d,):
        raise InvalidInput(f"points must have dimension {cfg.d}")
    r = float(np.linalg.norm(x - y))
    if r == 0.0:
        raise CoincidentPoints("kernel is singular on the diagonal")
    return float(kernel_of_distance(cfg, r))


# ---------------------------------------------------------------------------
# Diagonal rule: mean of W over two independent uniform points in one cell
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _mean_log_dist_unit_cell(m: int) -> float:
    """E[log|U - V|] for U, V independent uniform in the unit m-cube."""
    if m == 1:
        return -1.5
    # difference density prod(1 - |u_i|) on [-1,1]^m; polar integration with
    # a closed-form radial integral leaves a smooth angular profile
    if m == 2:
        nodes, wts = np.polynomial.legendre.leggauss(200)
        theta = 0.25 * np.pi * (nodes + 1)
        wt = wts * 0.25 * np.pi
        c, s = np.cos(theta), np.sin(theta)
        R = np.minimum(1 / c, 1 / s)

        def ik(k):  # integral of rho^k log(rho) drho from 0 to R
            return R ** (k + 1) * (np.log(R) / (k + 1) - 1 / (k + 1) ** 2)

        def jk(k):  # integral of rho^k drho
            return R ** (k + 1) / (k + 1)

        # integrand 4 (1 - rho c)(1 - rho s) log(rho) rho over the quadrant
        val = 4 * (ik(1) - (c + s) * ik(2) + c * s * ik(3))
        return float(np.dot(wt, val))
    raise UnsupportedKernel(f"log diagonal undefined for cell dimension {m}")


@lru_cache(maxsize=None)
def _mean_pow_dist_unit_cell(m: int, gamma: float) -> float:
    """E[|U - V|^gamma] for U, V independent uniform in the unit m-cube."""
    if gamma <= -m:
        raise UnsupportedKernel(
            f"cell of dimension {m} has infinite self-interaction "
            f"for kernel exponent {gamma}")
    if m == 1:
        return 2.0 / ((gamma + 1) * (gamma + 2))
    if m == 2:
        nodes, wts = np.polynomial.legendre.leggauss(200)
        theta = 0.25 * np.pi * (nodes + 1)
        wt = wts * 0.25 * np.pi
        c, s = np.cos(theta), np.sin(theta)
        R = np.minimum(1 / c, 1 / s)

        def jk(k):
            return R ** (k + 1) / (k + 1)

        val = 4 * (jk(gamma + 1) - (c + s) * jk(gamma + 2) + c * s * jk(gamma + 3))
        return float(np.dot(wt, val))
    if m == 3:
        nodes, wts = np.polynomial.legendre.leggauss(120)
        theta = 0.25 * np.pi * (nodes + 1)        # azimuthal, octant
        wth = wts * 0.25 * np.pi
        phi = 0.25 * np.pi * (nodes + 1)          # polar, octant
        wph = wts * 0.25 * np.pi
        TH, PH = np.meshgrid(theta, phi, indexing="ij")
        WT = np.outer(wth, wph)
        w1 = np.sin(PH) * np.cos(TH)
        w2 = np.sin(PH) * np.sin(TH)
        w3 = np.cos(PH)
        R = np.minimum(np.minimum(1 / np.maximum(w1, 1e-300),
                                  1 / np.maximum(w2, 1e-300)),
                       1 / np.maximum(w3, 1e-300))

        def jk(k):
            return R ** (k + 1) / (k + 1)

        poly = (jk(gamma + 2)
                - (w1 + w2 + w3) * jk(gamma + 3)
                + (w1 * w2 + w1 * w3 + w2 * w3) * jk(gamma + 4)
                - w1 * w2 * w3 * jk(gamma + 5))
        val = 8 * np.sum(WT * np.sin(PH) * poly)
        return float(val)
    raise UnsupportedKernel(f"diagonal rule not implemented for cell dim {m}")


@dataclass(frozen=True)
class DiagonalRule:
    """Self-interaction of one grid cell: exact pair mean of W, or zero."""

    mode: str = "cell_average"   # "cell_average" | "exclude"

    def value(self, cfg: KernelConfig, cell_dim: int, h: float) -> float:
        if self.mode == "exclude":
            return 0.0
        if self.mode != "cell_average":
            raise InvalidInput(f"unknown diagonal mode {self.mode!r}")
        if cfg.log_case:
            return -2.0 * (math.log(h) + _mean_log_dist_unit_cell(cell_dim))
        gamma = cfg.alpha - cfg.d
        return h**gamma * _mean_pow_dist_unit_cell(cell_dim, gamma)


DEFAULT_DIAG = DiagonalRule()


# ---------------------------------------------------------------------------
# Potential fields
# ---------------------------------------------------------------------------

POTENTIAL_FLOOR = -1e12   # reporting clamp for -infinity values


@dataclass
class PotentialField:
    grid: GridSet
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_cells,):
            raise InvalidInput("one value per active cell required")

    @staticmethod
    def from_callable(grid: GridSet, f) -> "PotentialField":
        return PotentialField(grid, np.asarray(f(grid.points), dtype=float))

    @staticmethod
    def constant(grid: GridSet, c: float) -> "PotentialField":
        return PotentialField(grid, np.full(grid.n_cells, float(c)))

    @staticmethod
    def zero(grid: GridSet) -> "PotentialField":
        return PotentialField.constant(grid, 0.0)

    def clamped(self) -> np.ndarray:
        return np.maximum(self.values, POTENTIAL_FLOOR)

    def __add__(self, other):
        if isinstance(other, PotentialField):
            if not same_grid(self.grid, other.grid):
                raise GridMismatch("fields on different grids")
            return PotentialField(self.grid, self.values + other.values)
        return PotentialField(self.grid, self.values + float(other))

    def __sub__(self, other):
        if isinstance(other, PotentialField):
            if not same_grid(self.grid, other.grid):
                raise GridMismatch("fields on different grids")
            return PotentialField(self.grid, self.values - other.values)
        return PotentialField(self.grid, self.values - float(other))


# ---------------------------------------------------------------------------
# Pair-interaction operators over a grid
# ---------------------------------------------------------------------------

class DenseKernelOperator:
    """Explicit (n, n) cell-interaction matrix; n is kept moderate."""

    def __init__(self, cfg: KernelConfig, grid: GridSet, diag: DiagonalRule):
        self.cfg, self.grid, self.diag = cfg, grid, diag
        pts = grid.points
        diffs = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt(np.sum(diffs**2, axis=2))
        np.fill_diagonal(dist, 1.0)
        K = kernel_of_distance(cfg, dist)
        np.fill_diagonal(K, diag.value(cfg, grid.cell_dim, grid.h))
        self.matrix = K

    def matvec(self, w: np.ndarray) -> np.ndarray:
        return self.matrix @ w

    def quad_form(self, w: np.ndarray, v: np.ndarray | None = None) -> float:
        v = w if v is None else v
        return float(w @ (self.matrix @ v))


class LatticeFFTOperator:
    """Cell interactions on a regular lattice applied by FFT convolution."""

    def __init__(self, cfg: KernelConfig, grid: GridSet, diag: DiagonalRule):
        if grid.lattice is None:
            raise InvalidInput("grid carries no lattice")
        self.cfg, self.grid, self.diag = cfg, grid, diag
        shape = grid.lattice_shape
        k = len(shape)
        pad = tuple(next_fast_len(2 * s - 1) for s in shape)
        grids = np.meshgrid(
            *[np.minimum(np.arange(p), p - np.arange(p)) for p in pad],
            indexing="ij",
        )
        dist = grid.h * np.sqrt(sum(g.astype(float) ** 2 for g in grids))
        table = np.empty(pad)
        nz = dist > 0
        table[nz] = kernel_of_distance(cfg, dist[nz])
        table[~nz] = diag.value(cfg, grid.cell_dim, grid.h)
        self.pad = pad
        self.table_hat = rfftn(table)
        self.idx = tuple(grid.lattice[:, j] for j in range(k))
        self.shape = shape

    def matvec(self, w: np.ndarray) -> np.ndarray:
        arr = np.zeros(self.pad)
        arr[self.idx] = w
        conv = irfftn(rfftn(arr) * self.table_hat, s=self.pad)
        return conv[self.idx]

    def quad_form(self, w: np.ndarray, v: np.ndarray | None = None) -> float:
        mv = self.matvec(w if v is None else v)
        return float(w @ mv)


_DENSE_LIMIT = 4096


def get_operator(cfg: KernelConfig, grid: GridSet,
                 diag: DiagonalRule = DEFAULT_DIAG):
    """Kernel operator for a grid, cached on the grid object."""
    cache = getattr(grid, "_op_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(grid, "_op_cache", cache)
    key = (cfg, diag.mode)
    op = cache.get(key)
    if op is None:
        if grid.lattice is not None and grid.n_cells > _DENSE_LIMIT:
            op = LatticeFFTOperator(cfg, grid, diag)
        elif grid.n_cells <= 4 * _DENSE_LIMIT or grid.lattice is None:
            if grid.n_cells > 20000:
                raise InvalidInput(
                    f"{grid.n_cells} cells without a lattice: too large for "
                    "dense pair sums")
            op = DenseKernelOperator(cfg, grid, diag)
        else:
            op = LatticeFFTOperator(cfg, grid, diag)
        cache[key] = op
    return op


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

def potential_values_on_grid(cfg: KernelConfig, mu: GridMeasure,
                             diag: DiagonalRule = DEFAULT_DIAG) -> np.ndarray:
    """psi_mu at every cell center of mu's own grid (self cell averaged)."""
    op = get_operator(cfg, mu.grid, diag)
    return -op.matvec(mu.weights)


def potential_eval(cfg: KernelConfig, mu, x,
                   diag: DiagonalRule = DEFAULT_DIAG) -> float:
    """psi_mu(x) = -Integral W(x, y) dmu(y) at a single point."""
    x = np.asarray(x, dtype=float)
    if isinstance(mu, BallUnionMeasure):
        val = _ball_union_potential(cfg, mu, x[None, :])[0]
    else:
        dist = np.linalg.norm(mu.grid.points - x[None, :], axis=1)
        k = np.empty_like(dist)
        inside = dist <= 0.5 * mu.grid.h * (1 + 1e-9)
        if inside.any():
            k[inside] = diag.value(cfg, mu.grid.cell_dim, mu.grid.h)
        out = ~inside
        k[out] = kernel_of_distance(cfg, dist[out])
        val = -float(np.dot(mu.weights, k))
    if math.isnan(val) or val == math.inf:
        raise NonFinite("potential evaluation overflowed")
    return val


def potential_field(cfg: KernelConfig, mu, eval_grid: GridSet,
                    diag: DiagonalRule = DEFAULT_DIAG) -> PotentialField:
    """Tabulate psi_mu on an evaluation grid."""
    if isinstance(mu, BallUnionMeasure):
        vals = _ball_union_potential(cfg, mu, eval_grid.points)
        return PotentialField(eval_grid, vals)
    if same_grid(mu.grid, eval_grid):
        return PotentialField(eval_grid, potential_values_on_grid(cfg, mu, diag))
    vals = np.array([potential_eval(cfg, mu, x, diag) for x in eval_grid.points])
    return PotentialField(eval_grid, vals)


def _uniform_segment_mean_log(u_lo, u_hi, rho, eps, log_eps):
    """Mean of log|x - y| over y uniform on a segment of half-length eps.

    u_lo/u_hi are the endpoint offsets along the segment axis, rho the
    transverse distance.  Exact antiderivative; falls back to point/inside
    formulas when eps is below double resolution.
    """
    if u_hi - u_lo <= 0.0:     # segment shorter than one ulp at this center
        s = math.hypot(0.5 * (u_lo + u_hi), rho)
        if s > 0.0:
            return math.log(s)
        return log_eps - 1.0

    def m(u):
        r2 = u * u + rho * rho
        if r2 == 0.0:
            return 0.0
        t = 2.0 * rho * math.atan(u / rho) if rho > 0 else 0.0
        return 0.5 * (u * math.log(r2) - 2.0 * u + t)

    return (m(u_hi) - m(u_lo)) / (u_hi - u_lo)


def _ball_union_potential(cfg: KernelConfig, mu: BallUnionMeasure,
                          xs: np.ndarray) -> np.ndarray:
    """Closed-form potentials of uniform balls (harmonic kernels)."""
    if not (cfg.log_case or (cfg.alpha == 2 and cfg.d >= 3)):
        return _ball_union_potential_quadrature(cfg, mu, xs)
    if mu.d != cfg.d:
        raise InvalidInput("measure dimension does not match kernel")
    out = np.zeros(len(xs))
    radii = mu.radii
    segment = mu.component_dim == 1 and cfg.log_case
    for c, eps, log_eps, w in zip(mu.centers, radii, mu.log_radii, mu.weights):
        if w == 0.0:
            continue
        if segment:
            vals = np.empty(len(xs))
            for i, x in enumerate(xs):
                u0 = x[0] - c[0]
                rho = math.hypot(*(x[1:] - c[1:])) if len(x) > 1 else 0.0
                vals[i] = 2.0 * _uniform_segment_mean_log(
                    u0 - eps, u0 + eps, rho, eps, log_eps)
            out += w * vals
            continue
        s = np.linalg.norm(xs - c[None, :], axis=1)
        inside = s < eps
        vals = np.empty_like(s)
        if cfg.log_case:
            outside = ~inside
            with np.errstate(divide="ignore"):
                vals[outside] = 2.0 * np.log(s[outside])
            if inside.any():
                vals[inside] = 2.0 * (log_eps - 0.5 * (1 - (s[inside] / eps) ** 2))
            # exact coincidence with a zero-radius component: inside value
            vals = np.where(np.isfinite(vals), vals, 2.0 * log_eps - 1.0
                            if np.isfinite(log_eps) else POTENTIAL_FLOOR)
        else:  # alpha = 2, d = 3 (Newtonian); uniform ball
            outside = ~inside
            vals[outside] = -1.0 / s[outside]
            if inside.any():
                vals[inside] = -(3 - (s[inside] / eps) ** 2) / (2 * eps)
        out += w * vals
    return out


def _ball_union_potential_quadrature(cfg, mu, xs, n_r=8, n_a=16):
    out = np.zeros(len(xs))
    if mu.d == 2:
        tr, wr = np.polynomial.legendre.leggauss(n_r)
        ta, wa = np.linspace(0, 2 * np.pi, n_a, endpoint=False), 2 * np.pi / n_a
        for c, eps, w in zip(mu.centers, mu.radii, mu.weights):
            rho = 0.5 * eps * (tr + 1)
            wgt = wr * 0.5 * eps * rho          # polar Jacobian
            wgt = wgt / wgt.sum()
            pts = c[None, None, :] + rho[:, None, None] * np.stack(
                [np.cos(ta), np.sin(ta)], axis=-1)[None, :, :]
            for i, x in enumerate(xs):
                d = np.linalg.norm(pts - x[None, None, :], axis=-1)
                out[i] += -w * float(
                    np.sum(wgt[:, None] * kernel_of_distance(cfg, d)) / n_a)
        return out
    raise UnsupportedKernel("ball-union quadrature implemented for d = 2 only")


# ---------------------------------------------------------------------------
# Energies, entropy, free energy
# ---------------------------------------------------------------------------

def energy(cfg: KernelConfig, mu, diag: DiagonalRule = DEFAULT_DIAG) -> float:
    """E(mu) = 1/2 double sum of cell interactions (diag handled by rule)."""
    if isinstance(mu, BallUnionMeasure):
        return _ball_union_energy(cfg, mu)
    op = get_operator(cfg, mu.grid, diag)
    return 0.5 * op.quad_form(mu.weights)


def _ball_union_self_interaction(cfg: KernelConfig, log_eps: float,
                                 component_dim: int,
                                 profile: str = "uniform") -> float:
    """Mean of W over two independent points of one ball.

    profile "uniform" pairs two uniform points (the measure itself);
    profile "equilibrium" pairs two points of the ball's own equilibrium
    measure (arcsine on segments, boundary circle/sphere otherwise), the
    right model when the ball enters as a SET.
    """
    if cfg.log_case:
        if component_dim == 1:      # segment of half-length eps
            if profile == "equilibrium":
                return -2.0 * (log_eps - math.log(2.0))     # cap = eps/2
            return -2.0 * (log_eps + math.log(2.0) - 1.5)
        if profile == "equilibrium":
            return -2.0 * log_eps                           # cap = eps
        return -2.0 * (log_eps - 0.25)
    if cfg.alpha == 2 and cfg.d == 3 and component_dim == 3:
        if profile == "equilibrium":
            return math.exp(-log_eps)                        # sphere: 2E = 1/eps
        return 1.2 * math.exp(-log_eps)                      # ball: 2E = 6/(5 eps)
    raise UnsupportedKernel("ball self-energy known for log case and d=3 Coulomb")


def _nested_pair_interaction(cfg: KernelConfig, mu: BallUnionMeasure,
                             i_big: int, j_small: int, s: float,
                             profile: str) -> float:
    """Mean W between a ball and a much smaller one at distance s inside it.

    The small component is treated as a point (relative error O(eps_small /
    eps_big), astronomically small across construction levels).
    """
    log_eps = float(mu.log_radii[i_big])
    eps = math.exp(log_eps)
    m = mu.component_dim
    if cfg.log_case:
        if m == 1:
            if profile == "equilibrium":
                return -2.0 * (log_eps - math.log(2.0))      # constant inside
            u = s
            return -2.0 * _uniform_segment_mean_log(u - eps, u + eps, 0.0,
                                                    eps, log_eps)
        if profile == "equilibrium":
            return -2.0 * log_eps
        return -2.0 * (log_eps - 0.5 * (1 - (s / eps) ** 2))
    if profile == "equilibrium":
        return math.exp(-log_eps)
    return (3 - (s / eps) ** 2) / (2 * eps)


def ball_union_interaction_matrix(cfg: KernelConfig, mu: BallUnionMeasure,
                                  profile: str = "uniform") -> np.ndarray:
    """Pairwise mean interactions of per-ball profiles, diagonal included.

    Separated components interact through the exact kernel at center
    distance (harmonic mean-value property); nested components (concentric
    lattice levels of the pathological constructions) through the inside
    value of the larger profile's potential.
    """
    if not (cfg.log_case or (cfg.alpha == 2 and cfg.d == 3)):
        raise UnsupportedKernel("analytic ball formulas need a harmonic kernel")
    c = mu.centers
    M = len(c)
    dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=2)
    radii = mu.radii
    with np.errstate(divide="ignore"):
        A = kernel_of_distance(cfg, np.where(dist > 0, dist, 1.0))
    sep = dist >= (radii[:, None] + radii[None, :])
    np.fill_diagonal(sep, True)
    if not sep.all():
        for i, j in zip(*np.nonzero(~sep)):
            if i >= j:
                continue
            big, small = (i, j) if radii[i] >= radii[j] else (j, i)
            val = _nested_pair_interaction(cfg, mu, big, small,
                                           float(dist[i, j]), profile)
            A[i, j] = A[j, i] = val
    diag_vals = np.array([
        _ball_union_self_interaction(cfg, le, mu.component_dim, profile)
        for le in mu.log_radii])
    A[np.arange(M), np.arange(M)] = diag_vals
    return A


def _ball_union_energy(cfg: KernelConfig, mu: BallUnionMeasure) -> float:
    K = ball_union_interaction_matrix(cfg, mu, profile="uniform")
    w = mu.weights
    return 0.5 * float(w @ K @ w)


def weighted_energy(cfg: KernelConfig, mu, phi,
                    diag: DiagonalRule = DEFAULT_DIAG) -> float:
    """E_phi(mu) = E(mu) + Integral phi dmu; +inf if phi = +inf on an atom."""
    e = energy(cfg, mu, diag)
    if isinstance(mu, BallUnionMeasure):
        vals = np.asarray(phi(mu.centers), dtype=float) if callable(phi) \
            else np.asarray(phi, dtype=float)
        w = mu.weights
    else:
        vals = phi.values if isinstance(phi, PotentialField) else \
            np.asarray(phi, dtype=float)
        w = mu.weights
    charged = w > 0
    if np.any(np.isposinf(vals[charged])):
        return math.inf
    return e + float(np.dot(w[charged], vals[charged]))


def relative_entropy(mu: GridMeasure, mu0: GridMeasure) -> float:
    """KL divergence of mu from mu0 on a common grid; +inf off abs. continuity."""
    if not same_grid(mu.grid, mu0.grid):
        raise GridMismatch("measures live on different grids")
    w, w0 = mu.weights, mu0.weights
    pos = w > 0
    if np.any(w0[pos] == 0):
        return math.inf
    return float(np.sum(w[pos] * (np.log(w[pos]) - np.log(w0[pos]))))


def free_energy_functional(cfg: KernelConfig, mu: GridMeasure,
                           mu0: GridMeasure, phi, beta: float,
                           diag: DiagonalRule = DEFAULT_DIAG) -> float:
    """F_{phi,beta}(mu) = E_phi(mu) + beta^-1 KL(mu | mu0); beta = inf drops KL."""
    if not (beta > 0):
        raise InvalidInput("beta must be positive (or math.inf)")
    e = weighted_energy(cfg, mu, phi, diag)
    if math.isinf(beta):
        return e
    d = relative_entropy(mu, mu0)
    if math.isinf(d) or math.isinf(e):
        return math.inf
    return e + d / beta
