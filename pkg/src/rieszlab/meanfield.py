"""Mean-field free-energy minimization and temperature/field scans.

The minimizer of F_{phi,beta} = E_phi + beta^-1 KL(.|mu0) over probability
measures absolutely continuous w.r.t. mu0 solves the fixed-point equation

    log mu = log mu0 + beta (psi_mu - phi) - log Z,

iterated here with damping entirely in log space (weights at large beta span
thousands of orders of magnitude).  Large beta targets are annealed
geometrically from beta = 1 with warm starts.  The zero-temperature anchor of
every scan is computed by the envelope module, never by iterating at
beta = infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (DEFAULT_DIAG, DiagonalRule, KernelConfig, PotentialField,
                   get_operator)
from .envelope import (SolverOptions, _as_phi_values, ball_union_interaction_matrix,
                       equilibrium_measure)
from .errors import EmptyCarrier, InvalidInput, SolverDiverged
from .geometry import GridSet
from .measures import BallUnionMeasure, GridMeasure

__all__ = [
    "MeanFieldOptions", "MeanFieldSolution", "FreeEnergyCurve",
    "solve_meanfield", "free_energy_scan", "zero_temperature_gap",
    "phase_scan", "counterexample_weighted",
]


@dataclass(frozen=True)
class MeanFieldOptions:
    residual_tol: float = 1e-8
    accept_tol: float = 1e-6       # final stage must converge below this
    stage_tol: float = 1e-4        # intermediate anneal stages (warm starts)
    max_sweeps: int = 10000
    eta0: float = 0.5
    anneal_start: float = 1.0
    anneal_factor: float = 2.0


@dataclass
class MeanFieldSolution:
    measure: object                # GridMeasure or reweighted BallUnionMeasure
    psi: PotentialField | np.ndarray
    beta: float
    free_energy: float
    fixed_point_residual: float
    anneal_path: list
    log_weights: np.ndarray = None


class _MFProblem:
    """Common discrete form: minimize 1/2 w.Aw + phi.w + beta^-1 KL(w|w0)."""

    def __init__(self, matvec, log_w0, phi_vec, dense=None):
        self.matvec = matvec
        self.log_w0 = log_w0
        self.phi_vec = phi_vec
        self.n = len(log_w0)
        self.dense = dense          # full matrix when small enough for Newton

    def free_energy(self, log_w, beta):
        w = np.exp(log_w)
        aw = self.matvec(w)
        e = 0.5 * float(w @ aw) + float(w @ self.phi_vec)
        kl = float(np.dot(w, log_w - self.log_w0))
        return e + kl / beta

    def sweep_target(self, log_w, beta):
        w = np.exp(log_w)
        psi = -self.matvec(w)
        t = self.log_w0 + beta * (psi - self.phi_vec)
        return t - logsumexp(t), psi

    def residual(self, log_w, beta):
        target, psi = self.sweep_target(log_w, beta)
        return float(np.max(np.abs(log_w - target))), target, psi


def _newton_polish(problem: _MFProblem, beta: float, log_w,
                   stop_tol: float, max_newton: int = 40):
    """Damped Newton on the stationarity system; needs the dense matrix.

    Solves (A diag(w) + I/beta) dl - dc 1 = -r, w.dl = 0 for the log-weight
    correction; quadratic convergence takes over where the damped fixed
    point stalls.
    """
    A = problem.dense
    n = problem.n
    residual, target, psi = problem.residual(log_w, beta)
    for _ in range(max_newton):
        if residual <= stop_tol:
            break
        w = np.exp(log_w)
        r = (A @ w + problem.phi_vec
             + (log_w - problem.log_w0) / beta)
        J = np.empty((n + 1, n + 1))
        J[:n, :n] = A * w[None, :]
        J[np.arange(n), np.arange(n)] += 1.0 / beta
        J[:n, n] = -1.0
        J[n, :n] = w
        J[n, n] = 0.0
        rhs = np.empty(n + 1)
        rhs[:n] = -r + (r @ w)          # center r; c absorbs the mean
        rhs[n] = 1.0 - w.sum()
        try:
            sol = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            break
        dl = sol[:n]
        step = 1.0
        improved = False
        for _ in range(30):
            cand = log_w + step * dl
            cand = cand - logsumexp(cand)
            res_new, t_new, psi_new = problem.residual(cand, beta)
            if res_new < residual:
                log_w, residual, target, psi = cand, res_new, t_new, psi_new
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return log_w, psi, residual


def _solve_stage(problem: _MFProblem, beta: float, log_w, opts: MeanFieldOptions,
                 stop_tol: float):
    eta = opts.eta0
    target, psi = problem.sweep_target(log_w, beta)
    residual = float(np.max(np.abs(log_w - target)))
    sweeps = 0
    stall = 0
    while residual > stop_tol and sweeps < opts.max_sweeps:
        log_w_new = (1 - eta) * log_w + eta * target
        log_w_new = log_w_new - logsumexp(log_w_new)
        target_new, psi_new = problem.sweep_target(log_w_new, beta)
        residual_new = float(np.max(np.abs(log_w_new - target_new)))
        if residual_new > residual:
            if eta > 1e-3:
                eta *= 0.5
        else:
            eta = min(eta * 1.05, 0.95)
            stall = stall + 1 if residual_new > 0.97 * residual else 0
        log_w, target, psi, residual = log_w_new, target_new, psi_new, residual_new
        sweeps += 1
        if problem.dense is not None and (stall >= 25 or sweeps >= 400):
            log_w, psi, residual = _newton_polish(problem, beta, log_w, stop_tol)
            if residual <= stop_tol:
                break
            stall = 0
    if residual > stop_tol and problem.dense is not None:
        log_w, psi, residual = _newton_polish(problem, beta, log_w, stop_tol)
    return log_w, psi, residual, sweeps


def _grid_problem(cfg, mu0: GridMeasure, phi, diag):
    mask = mu0.weights > 0
    if not mask.any():
        raise EmptyCarrier("mu0 has no mass")
    op = get_operator(cfg, mu0.grid, diag)
    phi_vec = _as_phi_values(mu0.grid, phi)
    n_full = mu0.grid.n_cells

    if mask.all():
        matvec = op.matvec
    else:
        def matvec(v_sub):
            full = np.zeros(n_full)
            full[mask] = v_sub
            return op.matvec(full)[mask]

    dense = None
    full_matrix = getattr(op, "matrix", None)
    if full_matrix is not None and int(mask.sum()) <= 3000:
        dense = full_matrix if mask.all() else full_matrix[np.ix_(mask, mask)]
    log_w0 = np.log(mu0.weights[mask] / mu0.total_mass)
    return _MFProblem(matvec, log_w0, phi_vec[mask], dense=dense), mask


def _ball_problem(cfg, mu0: BallUnionMeasure, phi):
    live = mu0.weights > 0
    if not live.any():
        raise EmptyCarrier("mu0 has no massive components")
    sub_centers = mu0.centers[live]
    sub = BallUnionMeasure(sub_centers, mu0.log_radii[live],
                           mu0.weights[live] / mu0.weights[live].sum(),
                           normalized=True, support_box=mu0.support_box,
                           component_dim=mu0.component_dim)
    A = ball_union_interaction_matrix(cfg, sub, profile="uniform")
    phi_vec = (np.asarray(phi(sub_centers), dtype=float) if callable(phi)
               else np.zeros(sub.n_components) if phi is None
               else np.asarray(phi, dtype=float)[live])
    log_w0 = np.log(sub.weights)
    return _MFProblem(lambda v: A @ v, log_w0, phi_vec, dense=A), sub, live


def solve_meanfield(cfg: KernelConfig, mu0, phi, beta: float,
                    opts: MeanFieldOptions = MeanFieldOptions(),
                    diag: DiagonalRule = DEFAULT_DIAG,
                    warm=None) -> MeanFieldSolution:
    """Minimize F_{phi,beta} over measures absolutely continuous w.r.t. mu0."""
    if not (0 < beta < math.inf):
        raise InvalidInput("beta must be finite and positive")
    is_ball = isinstance(mu0, BallUnionMeasure)
    if is_ball:
        problem, sub, live = _ball_problem(cfg, mu0, phi)
    else:
        problem, mask = _grid_problem(cfg, mu0, phi, diag)

    # anneal schedule: geometric from anneal_start, warm-started
    if warm is not None and warm[0] <= beta:
        stages = []
        b = warm[0]
        log_w = warm[1].copy()
        while b < beta:
            b = min(b * opts.anneal_factor, beta)
            stages.append(b)
    else:
        log_w = problem.log_w0.copy()
        if beta <= opts.anneal_start:
            stages = [beta]
        else:
            stages = [opts.anneal_start]
            while stages[-1] < beta:
                stages.append(min(stages[-1] * opts.anneal_factor, beta))

    path = []
    residual = 0.0
    psi = None
    prev_beta = None
    for b in stages:
        final = b == stages[-1] and b == beta
        stop = opts.residual_tol if final else max(opts.stage_tol, opts.residual_tol)
        log_w, psi, residual, sweeps = _solve_stage(problem, b, log_w, opts, stop)
        path.append(b)
        accept = opts.accept_tol if final else opts.stage_tol * 10
        if residual > accept:
            raise SolverDiverged(
                f"mean-field stage beta={b:g} residual {residual:.3e}",
                residual=residual, beta_reached=prev_beta)
        prev_beta = b
    if not stages:   # warm start already at target beta
        log_w, psi, residual, _ = _solve_stage(problem, beta, log_w, opts,
                                               opts.residual_tol)
        path.append(beta)
        if residual > opts.accept_tol:
            raise SolverDiverged(
                f"mean-field residual {residual:.3e} at beta={beta:g}",
                residual=residual, beta_reached=beta)

    f_val = problem.free_energy(log_w, beta)
    w = np.exp(log_w)
    w = w / w.sum()
    if is_ball:
        measure = BallUnionMeasure(sub.centers, sub.log_radii, w,
                                   normalized=True, support_box=sub.support_box)
        psi_out = psi
    else:
        w_full = np.zeros(mu0.grid.n_cells)
        w_full[mask] = w
        measure = GridMeasure(mu0.grid, w_full, 1.0)
        op = get_operator(cfg, mu0.grid, diag)
        psi_out = PotentialField(mu0.grid, -op.matvec(w_full))
    return MeanFieldSolution(measure, psi_out, beta, f_val, residual, path,
                             log_weights=log_w)


# ---------------------------------------------------------------------------
# Temperature scans
# ---------------------------------------------------------------------------

@dataclass
class FreeEnergyCurve:
    entries: list                  # (T, f, converged), sorted by T ascending
    gap_at_zero: float
    zero_anchor: float             # inf E_phi over P(S0)

    @property
    def temperatures(self):
        return [t for t, _, _ in self.entries]

    @property
    def values(self):
        return [f for _, f, _ in self.entries]


def _zero_anchor(cfg, mu0, phi, S0, solver_opts, diag):
    if S0 is None:
        if isinstance(mu0, BallUnionMeasure):
            raise InvalidInput("S0 grid required for ball-union reference measures")
        S0 = mu0.grid
    sol = equilibrium_measure(cfg, S0, phi, solver_opts, diag)
    return sol.energy_value


def free_energy_scan(cfg: KernelConfig, mu0, phi, T_grid,
                     S0: GridSet | None = None,
                     opts: MeanFieldOptions = MeanFieldOptions(),
                     solver_opts: SolverOptions = SolverOptions(),
                     diag: DiagonalRule = DEFAULT_DIAG) -> FreeEnergyCurve:
    """f(T) = inf F_{phi, 1/T} on a positive descending T grid, plus T = 0."""
    T_grid = list(T_grid)
    if any(t <= 0 for t in T_grid):
        raise InvalidInput("T grid must be positive; T = 0 is added internally")
    if any(b > a for a, b in zip(T_grid, T_grid[1:])):
        raise InvalidInput("T grid must be sorted descending")
    anchor = _zero_anchor(cfg, mu0, phi, S0, solver_opts, diag)
    entries = [(0.0, anchor, True)]
    warm = None
    f_min_T = math.nan
    for T in T_grid:
        beta = 1.0 / T
        try:
            sol = solve_meanfield(cfg, mu0, phi, beta, opts, diag, warm=warm)
            entries.append((T, sol.free_energy, True))
            warm = (beta, sol.log_weights)
            f_min_T = sol.free_energy
        except SolverDiverged as err:
            entries.append((T, math.nan, False))
    entries.sort(key=lambda e: e[0])
    gap = f_min_T - anchor
    return FreeEnergyCurve(entries, gap, anchor)


def zero_temperature_gap(cfg: KernelConfig, mu0, phi, beta_max: float,
                         S0: GridSet | None = None,
                         opts: MeanFieldOptions = MeanFieldOptions(),
                         solver_opts: SolverOptions = SolverOptions(),
                         diag: DiagonalRule = DEFAULT_DIAG) -> float:
    """lim sup_beta inf F - inf E_phi, Richardson-extrapolated in 1/beta.

    The extrapolation uses the top three anneal stages; the result is >= 0 up
    to solver tolerance whenever the limit exists.
    """
    anchor = _zero_anchor(cfg, mu0, phi, S0, solver_opts, diag)
    betas = [beta_max / 4, beta_max / 2, beta_max]
    fs = []
    warm = None
    for b in betas:
        sol = solve_meanfield(cfg, mu0, phi, b, opts, diag, warm=warm)
        warm = (b, sol.log_weights)
        fs.append(sol.free_energy)
    x = np.array([1.0 / b for b in betas])
    coeffs = np.polyfit(x, np.array(fs), 2)
    f_inf = float(np.polyval(coeffs, 0.0))
    return f_inf - anchor


# ---------------------------------------------------------------------------
# Field scans (phase transitions in h)
# ---------------------------------------------------------------------------

@dataclass
class PhaseScanRow:
    h: float
    f: float
    dfdh: float


def phase_scan(cfg: KernelConfig, mu0, phi0, phi, h_grid, T: float,
               S0: GridSet | None = None,
               opts: MeanFieldOptions = MeanFieldOptions(),
               solver_opts: SolverOptions = SolverOptions(),
               diag: DiagonalRule = DEFAULT_DIAG) -> list:
    """f(T, h) and df/dh = <phi, mu_h> along phi_h = phi0 + h phi.

    At T = 0 each column is a weighted equilibrium problem (envelope route);
    at T > 0 a mean-field solve.  df/dh is the exact differential of f in h
    represented by the minimizer, cross-checkable against finite differences.
    """
    if T < 0:
        raise InvalidInput("temperature must be nonnegative")
    rows = []
    if isinstance(mu0, BallUnionMeasure):
        phi0_f = phi0 if callable(phi0) or phi0 is None else None
        if phi0_f is None and phi0 is not None:
            raise InvalidInput("ball-union scans need callable weights")
    for h in h_grid:
        if T == 0:
            grid = S0 if S0 is not None else mu0.grid
            phi0_vec = _as_phi_values(grid, phi0)
            phi_vec = _as_phi_values(grid, phi)
            sol = equilibrium_measure(cfg, grid, phi0_vec + h * phi_vec,
                                      solver_opts, diag)
            f_val = sol.energy_value
            dfdh = float(np.dot(phi_vec, sol.measure.weights))
        else:
            def phi_h(pts, _h=h):
                p0 = (np.asarray(phi0(pts), float) if callable(phi0)
                      else np.zeros(len(pts)))
                p1 = np.asarray(phi(pts), float) if callable(phi) else 0.0
                return p0 + _h * p1
            sol = solve_meanfield(cfg, mu0, phi_h, 1.0 / T, opts, diag)
            f_val = sol.free_energy
            if isinstance(sol.measure, BallUnionMeasure):
                dfdh = float(np.dot(np.asarray(phi(sol.measure.centers), float),
                                    sol.measure.weights))
            else:
                phi_vec = _as_phi_values(sol.measure.grid, phi)
                dfdh = float(np.dot(phi_vec, sol.measure.weights))
        rows.append(PhaseScanRow(float(h), f_val, dfdh))
    return rows


# ---------------------------------------------------------------------------
# Weighted counterexample (singular weight on a null circle)
# ---------------------------------------------------------------------------

@dataclass
class WeightedCounterexampleReport:
    t: float
    constrained_value: float       # inf E_phi over measures << mu0 (t-free)
    witness_value: float           # E_phi(uniform on the unit circle)
    gap: float
    circle_hit_cells: int          # grid cells lying exactly on the circle


def counterexample_weighted(cfg: KernelConfig, mu0: GridMeasure, phi0, t: float,
                            circle_cells: int = 1024,
                            solver_opts: SolverOptions = SolverOptions(),
                            opts: MeanFieldOptions = MeanFieldOptions(),
                            diag: DiagonalRule = DEFAULT_DIAG) -> WeightedCounterexampleReport:
    """Weight phi = phi0 - t * indicator(unit circle) over a domain K.

    The indicator lives on a Lebesgue-null set: the mu0-constrained infimum
    cannot see t, while the unconstrained infimum over P(K) drops at least
    linearly in t (witnessed by the uniform measure on the circle).
    """
    if t < 0:
        raise InvalidInput("t must be nonnegative")
    grid = mu0.grid
    phi0_vec = _as_phi_values(grid, phi0)
    radii = np.linalg.norm(grid.points, axis=1)
    on_circle = radii == 1.0
    chi = np.where(on_circle, 1.0, 0.0)
    beta = 1.0 / 0.05
    sol = solve_meanfield(cfg, mu0, phi0_vec - t * chi, beta, opts, diag)
    # report the energy part (the KL term vanishes in the beta limit)
    from .core import weighted_energy
    constrained = weighted_energy(cfg, sol.measure,
                                  PotentialField(grid, phi0_vec - t * chi), diag)

    circ = GridSet.circle(1.0, circle_cells)
    nu = GridMeasure.uniform(circ)
    from .core import energy as _energy
    e0 = _energy(cfg, nu, diag)
    phi0_on_circle = _as_phi_values(circ, phi0) if callable(phi0) else \
        np.full(circ.n_cells, 0.0 if phi0 is None else float(np.mean(phi0_vec)))
    witness = e0 + float(np.dot(phi0_on_circle, nu.weights)) - t
    return WeightedCounterexampleReport(
        t=t, constrained_value=constrained, witness_value=witness,
        gap=constrained - witness, circle_hit_cells=int(on_circle.sum()))
