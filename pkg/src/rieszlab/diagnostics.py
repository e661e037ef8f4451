"""Capacities, carrier criteria and the pathological reference measures.

The capacity of a compact set is 1 / inf E over probability measures on it
(weighted version: E_phi).  Ullman's criterion compares the capacity of a
mu0-carrier with the capacity of the full support: equality characterizes
determining measures.  The two constructions at the end produce measures
that are absolutely continuous with full support yet carried by unions of
balls of tiny capacity: one keeps the Bernstein-Markov mass criterion (so
the gas has a zeroth-order phase transition), the other destroys even the
Bernstein-Markov inequality.

Component radii are handled in log space throughout: the constructions
demand radii like exp(-260000), far below the smallest positive double.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DEFAULT_DIAG, DiagonalRule, KernelConfig, potential_field
from .envelope import (SolverOptions, _as_phi_values, ball_union_equilibrium,
                       envelope_measure, envelope_set, equilibrium_measure)
from .errors import InvalidInput
from .geometry import GridSet
from .measures import BallUnionMeasure, GridMeasure

__all__ = [
    "CapacityReport", "UllmanReport", "DeterminingReport", "MassCheckReport",
    "capacity", "ullman_test", "determining_test", "bm_mass_check",
    "construct_bm_not_determining", "construct_non_bm", "ConstructionReport",
    "NonBMReport",
]


@dataclass
class CapacityReport:
    description: str
    value: float                  # 1 / inf E_phi (0 for sub-resolution sets)
    inf_energy: float
    residual: float


def capacity(cfg: KernelConfig, K, phi=None,
             opts: SolverOptions = SolverOptions(),
             richardson: bool = True,
             diag: DiagonalRule = DEFAULT_DIAG) -> CapacityReport:
    """Weighted capacity 1 / inf E_phi of a gridded set or ball union.

    For grid sets the minimal energy carries an O(h) boundary bias; when the
    grid can be refined, one Richardson step (2 E_{h/2} - E_h) removes the
    leading term.  In the log case the set-function axioms (monotonicity,
    sub-additivity) presume diameter <= 1.
    """
    if isinstance(K, BallUnionMeasure):
        m, g, e_val, residual = ball_union_equilibrium(cfg, K, phi, opts)
        val = 1.0 / e_val if e_val > 0 else (0.0 if e_val == math.inf else math.inf)
        return CapacityReport(f"ball union ({K.n_components} components)",
                              val, e_val, residual)
    sol = equilibrium_measure(cfg, K, phi, opts, diag)
    e_val = sol.energy_value
    residual = sol.residual
    desc = f"{K.kind} grid h={K.h:g}"
    if richardson:
        try:
            K2 = K.refined()
        except InvalidInput:
            K2 = None
        if K2 is not None:
            phi2 = phi if (phi is None or callable(phi)) else None
            if phi2 is None and phi is not None:
                raise InvalidInput("richardson refinement needs a callable weight")
            sol2 = equilibrium_measure(cfg, K2, phi2, opts, diag)
            e_val = 2.0 * sol2.energy_value - sol.energy_value
            residual = max(residual, sol2.residual)
            desc += " (richardson)"
    val = 1.0 / e_val if e_val > 0 else (0.0 if e_val == math.inf else math.inf)
    return CapacityReport(desc, val, e_val, residual)


@dataclass
class UllmanReport:
    carrier_capacity: float
    set_capacity: float
    relative_gap: float
    determining: bool              # equality within the stated tolerance


def ullman_test(cfg: KernelConfig, mu0, phi=None,
                carrier_threshold: float = 1e-8,
                K: GridSet | None = None,
                rel_tol: float = 0.02,
                opts: SolverOptions = SolverOptions(),
                diag: DiagonalRule = DEFAULT_DIAG) -> UllmanReport:
    """Compare the capacity of the mu0-carrier with the capacity of K.

    Determining measures have equal carrier and support capacities (within
    rel_tol); a carrier capacity bounded away from the set capacity certifies
    a non-determining mu0.
    """
    if K is None:
        if isinstance(mu0, BallUnionMeasure):
            raise InvalidInput("support grid K required for ball unions")
        K = mu0.grid
    cap_K = capacity(cfg, K, phi, opts, diag=diag)
    if isinstance(mu0, BallUnionMeasure):
        cap_C = capacity(cfg, mu0, phi, opts, diag=diag)
    else:
        mask = mu0.weights > carrier_threshold * (mu0.total_mass / mu0.grid.n_cells)
        if not mask.any():
            raise InvalidInput("carrier threshold removed all mass")
        if mask.all():
            cap_C = cap_K
        else:
            cap_C = capacity(cfg, mu0.grid.subset(mask), phi, opts,
                             richardson=False, diag=diag)
    gap = abs(cap_K.value - cap_C.value) / max(abs(cap_K.value), 1e-300)
    return UllmanReport(cap_C.value, cap_K.value, gap, gap <= rel_tol)


@dataclass
class DeterminingReport:
    ensemble_size: int
    max_gap: float                 # sup_S (psi - phi) after mu0-ess-sup shift
    envelope_gap: float            # sup_S (P_mu0 phi - P_S phi)
    verdict: str                   # "no-violation-found" | "violated"
    seed: int


def determining_test(cfg: KernelConfig, mu0, phi=None, ensemble_size: int = 50,
                     seed: int = 0, S: GridSet | None = None, tol: float = 4e-3,
                     opts: SolverOptions = SolverOptions(),
                     diag: DiagonalRule = DEFAULT_DIAG) -> DeterminingReport:
    """Randomized search for potentials with sup_S psi > ess-sup_mu0 psi.

    Test potentials are equilibrium potentials of random sub-rectangles of S
    mixed with potentials of random measures on S, shifted so their
    mu0-essential sup of (psi - phi) is zero.  Sampling can only falsify:
    absence of violation is reported as such, never as proof.
    """
    if S is None:
        if isinstance(mu0, BallUnionMeasure):
            raise InvalidInput("support grid S required for ball unions")
        S = mu0.grid
    rng = np.random.Generator(np.random.PCG64(seed))
    phi_vec = _as_phi_values(S, phi)
    if isinstance(mu0, BallUnionMeasure):
        ess_pts = mu0.centers[mu0.weights > 0]
        ess_phi = (np.asarray(phi(ess_pts), dtype=float) if callable(phi)
                   else np.zeros(len(ess_pts)))
        ess_idx = None
    else:
        ess_idx = mu0.weights > 0
    lo, hi = S.bounding_box()
    max_gap = -math.inf
    from .core import get_operator, potential_eval
    op = get_operator(cfg, S, diag)
    for draw in range(ensemble_size):
        if rng.random() < 0.5:
            # equilibrium measure of a random sub-rectangle of S
            a = lo + rng.random(S.d) * (hi - lo)
            b = lo + rng.random(S.d) * (hi - lo)
            box_lo, box_hi = np.minimum(a, b), np.maximum(a, b)
            mask = np.all((S.points >= box_lo) & (S.points <= box_hi), axis=1)
            if mask.sum() < 2:
                continue
            sub = S.subset(mask)
            try:
                sol = equilibrium_measure(cfg, sub, None, opts, diag)
            except Exception:
                continue
            w_full = np.zeros(S.n_cells)
            w_full[mask] = sol.measure.weights
        else:
            w_full = rng.random(S.n_cells) ** 4
            w_full /= w_full.sum()
        psi = -op.matvec(w_full)
        nu = GridMeasure(S, w_full, 1.0)
        if ess_idx is not None:
            ess = float(np.max(psi[ess_idx] - phi_vec[ess_idx]))
        else:
            vals = np.array([potential_eval(cfg, nu, c, diag) for c in ess_pts])
            ess = float(np.max(vals - ess_phi))
        gap = float(np.max(psi - phi_vec)) - ess
        max_gap = max(max_gap, gap)
    env_mu = envelope_measure(cfg, mu0, phi, eval_grid=S, opts=opts, diag=diag)
    env_S = envelope_set(cfg, S, phi, opts, diag)
    envelope_gap = float(np.max(env_mu.field.values - env_S.field.values))
    verdict = ("violated" if (max_gap > 5 * tol or envelope_gap > 5 * tol)
               else "no-violation-found")
    return DeterminingReport(ensemble_size, max_gap, envelope_gap, verdict, seed)


@dataclass
class MassCheckReport:
    passed: bool
    worst_ratio: float             # min over the net of mu(B_r) / (C r^a)
    a: float
    constant: float
    n_centers: int
    n_radii: int


def bm_mass_check(mu0, r0: float, a: float, C: float,
                  n_centers: int = 40, n_radii: int = 12,
                  r_min: float | None = None) -> MassCheckReport:
    """Check mu0(B_r(z)) >= C r^a on a deterministic net of centers and radii.

    This is the sufficient mass criterion for the strong Bernstein-Markov
    property on locally regular supports.
    """
    radii = np.geomspace(r_min if r_min is not None else r0 / 30, r0, n_radii)
    if isinstance(mu0, BallUnionMeasure):
        pts = mu0.centers[mu0.weights > 0]
        step = max(1, len(pts) // n_centers)
        centers = pts[::step]
        query = mu0.ball_mass
    else:
        grid = mu0.grid
        live = np.flatnonzero(mu0.weights > 0)
        step = max(1, len(live) // n_centers)
        centers = grid.points[live[::step]]

        def query(z, r):
            mask = np.sum((grid.points - z[None, :]) ** 2, axis=1) <= r * r
            return float(mu0.weights[mask].sum())

    worst = math.inf
    for z in centers:
        for r in radii:
            ratio = query(np.asarray(z, float), float(r)) / (C * r**a)
            worst = min(worst, ratio)
    return MassCheckReport(worst >= 1.0, worst, a, C, len(centers), len(radii))


# ---------------------------------------------------------------------------
# Construction 1: strong Bernstein-Markov but not determining
# ---------------------------------------------------------------------------

@dataclass
class ConstructionReport:
    measure: BallUnionMeasure
    delta: float
    set_capacity: float
    capacity_budget: float         # sum_k M_k C(B_eps_k) < delta, certified
    weight_tail: float             # un-normalized mass dropped by truncation
    table: list                    # rows (k, M_k, log_eps_k, budget_k)


def _lattice_points(lo, hi, k, dim):
    axes = []
    for i in range(dim):
        j_lo = math.ceil(lo[i] * k)
        j_hi = math.floor(hi[i] * k)
        pts = [j / k for j in range(j_lo, j_hi + 1)
               if min(j / k - lo[i], hi[i] - j / k) >= 1.0 / k]
        axes.append(pts)
    mesh = np.meshgrid(*axes, indexing="ij") if all(axes) else None
    if mesh is None:
        return np.zeros((0, dim))
    return np.stack([m.ravel() for m in mesh], axis=1)


def construct_bm_not_determining(K: GridSet, phi=None, delta: float | None = None,
                                 k_max: int = 12,
                                 opts: SolverOptions = SolverOptions()) -> ConstructionReport:
    """Measure with support K, absolutely continuous, strong BM, not determining.

    Scaled lattices Lambda_k = K cap (Z/k)^dim (boundary strip removed) are
    smoothed into balls whose radii make the total carrier capacity less than
    delta < C(K, phi); weights decay like k^-2.  The mass criterion survives
    the smoothing, so the Bernstein-Markov property holds while Ullman's
    criterion fails.
    """
    if K.kind == "interval":
        a, b = K.params
        lo, hi = np.array([a]), np.array([b])
        dim = 1
    elif K.kind == "box":
        lo = np.array([p[0] for p in K.params])
        hi = np.array([p[1] for p in K.params])
        dim = K.d
    else:
        raise InvalidInput("construction needs an interval or box K")

    cfg = KernelConfig.log2d()
    cap_K = capacity(cfg, K, phi, opts).value
    if delta is None:
        delta = 0.5 * cap_K
    if not (0 < delta < cap_K):
        raise InvalidInput(f"delta must lie in (0, C(K, phi) = {cap_K:g})")

    centers, log_radii, weights, table = [], [], [], []
    budget_total = 0.0
    for k in range(1, k_max + 1):
        pts = _lattice_points(lo, hi, k, dim)
        M_k = len(pts)
        if M_k == 0:
            continue
        budget_k = delta * 2.0 ** -(k + 1)
        log_eps = -M_k / budget_k          # M_k * (-1/log eps) = budget_k
        if log_eps > math.log(0.5 / k):    # keep balls disjoint
            log_eps = math.log(0.25 / k)
        lam_k = k**-2.0
        full = np.zeros((M_k, K.d))
        full[:, :dim] = pts
        centers.append(full)
        log_radii.append(np.full(M_k, log_eps))
        weights.append(np.full(M_k, lam_k / M_k))
        budget_total += M_k * (-1.0 / log_eps)
        table.append((k, M_k, log_eps, budget_k))

    centers = np.vstack(centers)
    log_radii = np.concatenate(log_radii)
    weights = np.concatenate(weights)
    tail = sum(k**-2.0 for k in range(k_max + 1, 10 * k_max)) + 1.0 / (10 * k_max)
    weights = weights / weights.sum()
    box = tuple((float(l), float(h)) for l, h in zip(lo, hi))
    if K.d > dim:
        box = box + ((0.0, 0.0),) * (K.d - dim)
    mu = BallUnionMeasure(centers, log_radii, weights, normalized=True,
                          support_box=box, component_dim=dim)
    return ConstructionReport(mu, delta, cap_K, budget_total, tail, table)


# ---------------------------------------------------------------------------
# Construction 2: absolutely continuous but not Bernstein-Markov
# ---------------------------------------------------------------------------

@dataclass
class NonBMReport:
    measure: BallUnionMeasure
    table: list                    # rows (k, log_eps, log_lambda, k C(B_2eps))
    constraint_bound: float        # C([0,1]) / 2 under C(B_rho) = -1/log(rho)


def construct_non_bm(eps_schedule=None, k_max: int = 64) -> NonBMReport:
    """Measure on [0, 1], absolutely continuous, failing Bernstein-Markov.

    Components sit on dyadic-scale lattices with weights lambda_k =
    exp(-eps_k^-2); the radii satisfy k * C(B_{2 eps_k}) < C([0,1]) / 2 so
    the thresholded sets of the necessary BM condition have small capacity.
    Weights are handled in log space (all but the coarsest level underflow).
    """
    cap_01 = 1.0 / math.log(4.0)           # cap([0,1]) = 1/4
    bound = cap_01 / 2.0
    ks = []
    k = 1
    while k <= k_max:
        ks.append(k)
        k *= 2
    centers, log_radii, log_w, table = [], [], [], []
    for k in ks:
        pts = _lattice_points(np.array([0.0]), np.array([1.0]), k, 1)
        M_k = len(pts)
        if M_k == 0:
            continue
        if eps_schedule is not None:
            eps = float(eps_schedule[k])
            log_eps = math.log(eps)
            constraint = k * (-1.0 / (math.log(2.0) + log_eps))
            if not (constraint < bound):
                raise InvalidInput(
                    f"schedule violates k C(B_2eps) < C([0,1])/2 at k={k}")
        else:
            # largest dyadic eps with k * (-1/log(2 eps)) < bound
            m = math.floor(k / (bound * math.log(2.0))) + 2
            log_eps = -m * math.log(2.0)
            constraint = k * (-1.0 / (math.log(2.0) + log_eps))
            assert constraint < bound
        log_lam = -math.exp(-2.0 * log_eps)     # log lambda_k = -eps^-2
        if not np.isfinite(log_lam):
            break                                # deeper levels are pure zeros
        full = np.zeros((M_k, 2))
        full[:, 0] = pts[:, 0]
        centers.append(full)
        log_radii.append(np.full(M_k, log_eps))
        log_w.append(np.full(M_k, log_lam - math.log(M_k)))
        table.append((k, log_eps, log_lam, constraint))
    centers = np.vstack(centers)
    log_radii = np.concatenate(log_radii)
    log_w = np.concatenate(log_w)
    log_w = log_w - max(log_w)
    weights = np.exp(log_w)
    weights /= weights.sum()
    mu = BallUnionMeasure(centers, log_radii, weights, normalized=True,
                          support_box=((0.0, 1.0), (0.0, 0.0)),
                          component_dim=1)
    return NonBMReport(mu, table, bound)
