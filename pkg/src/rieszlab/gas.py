"""Finite-N particle gas: Hamiltonian, Gibbs sampler, Fekete points, TI.

The N-particle Hamiltonian uses the mean-field scaling

    H(x_1..x_N) = 1/(N-1) * 1/2 * sum_{i != j} W(x_i, x_j) + sum_i phi(x_i),

with the divergent self-pairs excluded.  The Gibbs measure at inverse
temperature beta_N is e^{-beta_N H} mu0^{tensor N} / Z.  Sampling is
single-particle Metropolis with a proposal mixture (80% local step on the
support of mu0, 20% independent mu0 draw); partition functions come from
thermodynamic integration of -<H> starting at beta = 0 where Z = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import KernelConfig, kernel_of_distance
from .errors import (CoincidentParticles, InvalidInput, ZeroAcceptance)
from .geometry import GridSet
from .measures import BallUnionMeasure, GridMeasure

__all__ = [
    "GasConfig", "PairInteraction", "ParticleConfig", "GibbsResult",
    "hamiltonian", "sample_gibbs", "empirical_expectation", "fekete_points",
    "free_energy_ti", "TIResult",
]


@dataclass(frozen=True)
class GasConfig:
    N: int
    beta_N: float
    sweeps: int = 2000
    burn_in: int | None = None      # default: 20% of sweeps
    chains: int = 2
    proposal_scale: float = 0.1
    seed: int = 0
    local_fraction: float = 0.8

    def __post_init__(self):
        if self.N < 2:
            raise InvalidInput("N must be >= 2")
        if self.chains < 1:
            raise InvalidInput("chains must be >= 1")
        if self.proposal_scale <= 0:
            raise InvalidInput("proposal_scale must be positive")
        if not (self.beta_N > 0):
            raise InvalidInput("beta_N must be positive")

    @property
    def burn(self) -> int:
        return self.burn_in if self.burn_in is not None else self.sweeps // 5


@dataclass(frozen=True)
class PairInteraction:
    """Symmetric pair potential: Riesz kernel, separable V(x)+V(y), or custom."""

    kind: str                       # "riesz" | "separable_v" | "custom"
    cfg: KernelConfig | None = None
    v: object = None                # callable (n, d) -> (n,) for separable_v
    table: object = None            # callable (x, ys) -> (n,) for custom

    @staticmethod
    def riesz(cfg: KernelConfig) -> "PairInteraction":
        return PairInteraction("riesz", cfg=cfg)

    @staticmethod
    def separable(v) -> "PairInteraction":
        return PairInteraction("separable_v", v=v)

    @staticmethod
    def custom(table) -> "PairInteraction":
        return PairInteraction("custom", table=table)

    @property
    def singular(self) -> bool:
        return self.kind == "riesz"

    def row(self, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """W(x, y_j) for one point against a batch."""
        if self.kind == "riesz":
            d = np.linalg.norm(ys - x[None, :], axis=1)
            if np.any(d == 0.0):
                raise CoincidentParticles("coincident particles under a "
                                          "singular kernel")
            return kernel_of_distance(self.cfg, d)
        if self.kind == "separable_v":
            vx = float(np.asarray(self.v(x[None, :]))[0])
            vy = np.asarray(self.v(ys), dtype=float)
            return vx + vy
        return np.asarray(self.table(x, ys), dtype=float)


@dataclass
class ParticleConfig:
    positions: np.ndarray           # (N, d)
    hamiltonian: float

    def audit(self, W: PairInteraction, phi=None, tol: float = 1e-10) -> bool:
        return abs(self.hamiltonian - hamiltonian(W, self.positions, phi)) <= \
            tol * max(1.0, abs(self.hamiltonian))


def _phi_values(phi, pts: np.ndarray) -> np.ndarray:
    if phi is None:
        return np.zeros(len(pts))
    return np.asarray(phi(pts), dtype=float)


def hamiltonian(W: PairInteraction, positions: np.ndarray, phi=None) -> float:
    """Mean-field-scaled pair energy plus the external field term."""
    x = np.atleast_2d(np.asarray(positions, dtype=float))
    N = len(x)
    if N < 2:
        raise InvalidInput("need at least two particles")
    pair = 0.0
    for i in range(N):
        pair += float(np.sum(W.row(x[i], x[i + 1:])))
    return pair / (N - 1) + float(np.sum(_phi_values(phi, x)))


# ---------------------------------------------------------------------------
# Support geometry: sampling, local steps and densities on supp(mu0)
# ---------------------------------------------------------------------------

class _SupportGeometry:
    def __init__(self, mu0):
        self.mu0 = mu0
        if isinstance(mu0, GridMeasure):
            self.kind = "grid"
            grid = mu0.grid
            self.grid = grid
            self.p = mu0.weights / mu0.total_mass
            if grid.lattice is not None:
                self.lookup = {tuple(ix): i for i, ix in enumerate(grid.lattice)}
            elif grid.kind == "circle":
                self.lookup = None
            else:
                raise InvalidInput("sampling needs a lattice or circle grid")
        elif isinstance(mu0, BallUnionMeasure):
            self.kind = "balls"
            self.p = mu0.weights / mu0.total_mass
        else:
            raise InvalidInput("mu0 must be a GridMeasure or BallUnionMeasure")

    # cell/component membership -------------------------------------------

    def locate(self, x: np.ndarray) -> int:
        """Index of the cell/component containing x, or -1."""
        if self.kind == "balls":
            mu = self.mu0
            d2 = np.sum((mu.centers - x[None, :]) ** 2, axis=1)
            j = int(np.argmin(d2))
            r = math.exp(mu.log_radii[j])
            return j if d2[j] <= r * r else -1
        grid = self.grid
        if grid.kind == "circle":
            rad, center, n = grid.params
            v = x - np.asarray(center)
            if abs(np.linalg.norm(v) - rad) > 1e-9 * max(rad, 1.0):
                return -1
            theta = math.atan2(v[1], v[0]) % (2 * math.pi)
            return int(theta / (2 * math.pi / n)) % n
        axes = list(grid.lattice_axes)
        rel = (x[axes] - grid.lattice_origin[axes]) / grid.h
        idx = tuple(int(round(r)) for r in rel)
        off_axes = [a for a in range(grid.d) if a not in axes]
        if off_axes and np.any(np.abs(x[off_axes] - grid.lattice_origin[off_axes]) > 1e-12):
            return -1
        return self.lookup.get(idx, -1)

    def log_density(self, cell: int) -> float:
        if cell < 0:
            return -math.inf
        if self.kind == "balls":
            mu = self.mu0
            # density = w / vol(ball); volumes compared in log space
            return math.log(self.p[cell]) - mu.component_dim * mu.log_radii[cell]
        return math.log(self.p[cell]) if self.p[cell] > 0 else -math.inf

    # draws ------------------------------------------------------------------

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "balls":
            return self.mu0.sample(rng, size)
        grid = self.grid
        cells = rng.choice(grid.n_cells, size=size, p=self.p)
        pts = grid.points[cells].copy()
        if grid.kind == "circle":
            rad, center, n = grid.params
            dtheta = (rng.random(size) - 0.5) * (2 * math.pi / n)
            c = np.asarray(center)
            v = pts - c
            cos, sin = np.cos(dtheta), np.sin(dtheta)
            pts = c + np.stack([v[:, 0] * cos - v[:, 1] * sin,
                                v[:, 0] * sin + v[:, 1] * cos], axis=1)
            return pts
        axes = list(grid.lattice_axes)
        jitter = (rng.random((size, len(axes))) - 0.5) * grid.h
        pts[:, axes] += jitter
        return pts

    def local_step(self, rng: np.random.Generator, x: np.ndarray,
                   scale: float) -> np.ndarray:
        if self.kind == "balls":
            return x + scale * rng.standard_normal(len(x))
        grid = self.grid
        if grid.kind == "circle":
            rad, center, n = grid.params
            c = np.asarray(center)
            v = x - c
            dtheta = scale / rad * rng.standard_normal()
            cos, sin = math.cos(dtheta), math.sin(dtheta)
            return c + np.array([v[0] * cos - v[1] * sin,
                                 v[0] * sin + v[1] * cos])
        axes = list(grid.lattice_axes)
        y = x.copy()
        y[axes] = y[axes] + scale * rng.standard_normal(len(axes))
        return y


# ---------------------------------------------------------------------------
# Metropolis sampler
# ---------------------------------------------------------------------------

@dataclass
class GibbsResult:
    samples: np.ndarray            # (chains, kept, N, d)
    acceptance_rate: float
    mean_h: np.ndarray             # per chain
    se_h: np.ndarray               # per chain
    mean_h_combined: float
    se_h_combined: float
    move_log: list | None = None


def _batch_se(values: np.ndarray, n_batches: int = 20) -> float:
    m = len(values)
    if m < 2 * n_batches:
        return float(np.std(values, ddof=1) / math.sqrt(max(m, 2)))
    k = m // n_batches
    means = values[: k * n_batches].reshape(n_batches, k).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


def sample_gibbs(W: PairInteraction, mu0, phi, gas: GasConfig,
                 record_moves: bool = False) -> GibbsResult:
    """Metropolis chains for the Gibbs measure e^{-beta_N H} mu0^N / Z.

    Proposals move one particle: with probability local_fraction a local step
    on supp(mu0) (accepted with the mu0-density-corrected ratio, which is
    exp(-beta dH) alone whenever mu0 is uniform on its support), otherwise an
    independent mu0 draw (ratio exp(-beta dH) exactly).
    """
    geom = _SupportGeometry(mu0)
    N, beta = gas.N, gas.beta_N
    kept = gas.sweeps - gas.burn
    if kept <= 0:
        raise InvalidInput("sweeps must exceed burn_in")
    d = mu0.grid.d if isinstance(mu0, GridMeasure) else mu0.d

    all_samples = np.empty((gas.chains, kept, N, d))
    mean_h = np.empty(gas.chains)
    se_h = np.empty(gas.chains)
    acc_total = 0
    prop_total = 0
    move_log = [] if record_moves else None

    for chain in range(gas.chains):
        rng = np.random.Generator(np.random.PCG64(gas.seed + chain))
        x = geom.draw(rng, N)
        if W.singular:
            while _has_coincidence(x):
                x = geom.draw(rng, N)
        cells = np.array([geom.locate(p) for p in x])
        h_val = hamiltonian(W, x, phi)
        h_trace = np.empty(kept)
        acc = 0
        for sweep in range(gas.sweeps):
            for _ in range(N):
                i = int(rng.integers(N))
                use_local = rng.random() < gas.local_fraction
                if use_local:
                    y = geom.local_step(rng, x[i], gas.proposal_scale)
                else:
                    y = geom.draw(rng, 1)[0]
                cell_y = geom.locate(y)
                prop_total += 1
                if cell_y < 0:
                    if record_moves:
                        move_log.append((x.copy(), None, False))
                    continue
                others = np.delete(np.arange(N), i)
                ys = x[others]
                if W.singular and np.any(np.all(ys == y[None, :], axis=1)):
                    continue    # coincident proposal: zero-measure, rejected
                dh = (float(np.sum(W.row(y, ys))) -
                      float(np.sum(W.row(x[i], ys)))) / (N - 1)
                dh += float(_phi_values(phi, y[None, :])[0] -
                            _phi_values(phi, x[i][None, :])[0])
                log_ratio = -beta * dh
                if use_local:
                    log_ratio += geom.log_density(cell_y) - geom.log_density(cells[i])
                accept = log_ratio >= 0 or rng.random() < math.exp(max(log_ratio, -745.0))
                if record_moves:
                    move_log.append((x.copy(), (i, y.copy()), accept))
                if accept:
                    x[i] = y
                    cells[i] = cell_y
                    h_val += dh
                    acc += 1
            if sweep >= gas.burn:
                all_samples[chain, sweep - gas.burn] = x
                h_trace[sweep - gas.burn] = h_val
        acc_total += acc
        # audit the incremental Hamiltonian against a fresh evaluation
        h_exact = hamiltonian(W, x, phi)
        if abs(h_val - h_exact) > 1e-8 * max(1.0, abs(h_exact)):
            raise InvalidInput("incremental Hamiltonian drifted; audit failed")
        mean_h[chain] = h_trace.mean()
        se_h[chain] = _batch_se(h_trace)

    rate = acc_total / max(prop_total, 1)
    if rate < 1e-4:
        raise ZeroAcceptance(f"acceptance rate {rate:.2e} after burn-in")
    comb = float(mean_h.mean())
    se_comb = float(np.sqrt(np.sum(se_h**2)) / gas.chains)
    return GibbsResult(all_samples, rate, mean_h, se_h, comb, se_comb,
                       move_log)


def _has_coincidence(x: np.ndarray) -> bool:
    N = len(x)
    for i in range(N):
        if np.any(np.all(x[i + 1:] == x[i][None, :], axis=1)):
            return True
    return False


def empirical_expectation(samples: np.ndarray, grid: GridSet) -> GridMeasure:
    """Histogram of all recorded particle positions, normalized to mass 1."""
    pts = samples.reshape(-1, samples.shape[-1])
    if len(pts) == 0:
        raise InvalidInput("no samples")
    counts = np.zeros(grid.n_cells)
    if grid.kind == "circle":
        rad, center, n = grid.params
        v = pts - np.asarray(center)
        theta = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2 * np.pi)
        idx = (theta / (2 * np.pi / n)).astype(int) % n
        np.add.at(counts, idx, 1.0)
    elif grid.lattice is not None:
        axes = list(grid.lattice_axes)
        rel = np.round((pts[:, axes] - grid.lattice_origin[axes]) / grid.h).astype(int)
        lookup = {tuple(ix): i for i, ix in enumerate(grid.lattice)}
        for row in rel:
            j = lookup.get(tuple(row))
            if j is not None:
                counts[j] += 1.0
    else:
        # nearest active cell
        for p in pts:
            counts[int(np.argmin(np.sum((grid.points - p) ** 2, axis=1)))] += 1.0
    total = counts.sum()
    if total == 0:
        raise InvalidInput("no sample fell on the grid")
    return GridMeasure(grid, counts / total, 1.0)


# ---------------------------------------------------------------------------
# Fekete configurations (T = 0 ground states)
# ---------------------------------------------------------------------------

def fekete_points(W: PairInteraction, S: GridSet, phi, N: int,
                  restarts: int = 4, seed: int = 0,
                  max_sweeps: int = 200):
    """Cyclic single-particle exact search over grid nodes; best of restarts.

    Returns (ParticleConfig, F_N) with F_N = H/N, the zero-temperature
    N-particle free energy of the best configuration found.
    """
    if N < 2:
        raise InvalidInput("N must be >= 2")
    nodes = S.nodes()
    M = len(nodes)
    if M < N:
        raise InvalidInput("fewer candidate nodes than particles")
    phi_nodes = _phi_values(phi, nodes)
    best_conf, best_h = None, math.inf
    for r in range(max(restarts, 1)):
        rng = np.random.Generator(np.random.PCG64(seed + r))
        sel = rng.choice(M, size=N, replace=False)
        x_idx = list(sel)
        improved = True
        sweeps = 0
        while improved and sweeps < max_sweeps:
            improved = False
            sweeps += 1
            for i in range(N):
                others = [x_idx[j] for j in range(N) if j != i]
                pos_others = nodes[others]
                # total cost of placing particle i at every node
                cost = np.zeros(M)
                for p in pos_others:
                    if W.kind == "riesz":
                        dvec = np.linalg.norm(nodes - p[None, :], axis=1)
                        with np.errstate(divide="ignore"):
                            vals = kernel_of_distance(W.cfg, dvec)
                        vals[dvec == 0.0] = math.inf
                    else:
                        vals = W.row(p, nodes)
                    cost += vals
                cost = cost / (N - 1) + phi_nodes
                cost[others] = math.inf if W.singular else cost[others]
                j = int(np.argmin(cost))
                if j != x_idx[i]:
                    old_cost = cost[x_idx[i]]
                    if cost[j] < old_cost - 1e-15 * max(1.0, abs(old_cost)):
                        x_idx[i] = j
                        improved = True
        positions = nodes[x_idx]
        h_val = hamiltonian(W, positions, phi)
        if h_val < best_h:
            best_h = h_val
            best_conf = positions.copy()
    conf = ParticleConfig(best_conf, best_h)
    return conf, best_h / N


# ---------------------------------------------------------------------------
# Thermodynamic integration
# ---------------------------------------------------------------------------

@dataclass
class TIResult:
    betas: np.ndarray
    mean_h: np.ndarray
    se_h: np.ndarray
    log_z: np.ndarray
    log_z_se: np.ndarray
    free_energy: np.ndarray        # F_N = -log Z / (beta N); <H>/N at beta=0


def free_energy_ti(W: PairInteraction, mu0, phi, gas: GasConfig,
                   beta_grid) -> TIResult:
    """log Z(beta) by trapezoidal integration of -<H> along beta from 0."""
    betas = np.asarray(list(beta_grid), dtype=float)
    if betas[0] != 0.0:
        raise InvalidInput("beta grid must start at 0 (where Z = 1)")
    if np.any(np.diff(betas) <= 0):
        raise InvalidInput("beta grid must increase")
    means = np.empty(len(betas))
    ses = np.empty(len(betas))
    for k, b in enumerate(betas):
        g = replace(gas, beta_N=b if b > 0 else 1e-300, seed=gas.seed + 1000 * k)
        res = sample_gibbs(W, mu0, phi, g)
        means[k] = res.mean_h_combined
        ses[k] = res.se_h_combined
    log_z = np.zeros(len(betas))
    var = np.zeros(len(betas))
    for k in range(1, len(betas)):
        db = betas[k] - betas[k - 1]
        log_z[k] = log_z[k - 1] - 0.5 * db * (means[k] + means[k - 1])
        var[k] = var[k - 1] + (0.5 * db) ** 2 * (ses[k] ** 2 + ses[k - 1] ** 2)
    fe = np.empty(len(betas))
    fe[0] = means[0] / gas.N
    with np.errstate(divide="ignore", invalid="ignore"):
        fe[1:] = -log_z[1:] / (betas[1:] * gas.N)
    return TIResult(betas, means, ses, log_z, np.sqrt(var), fe)
