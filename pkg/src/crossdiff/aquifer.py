"""Sharp-interface seawater intrusion with penalized confinement.

State is the pair of interface depths (h, h1) inside a reservoir of depth h2
(all measured from the top; the physical hierarchy is 0 <= h1 <= h <= h2).
With the thickness variables u1 = h - h1 (freshwater) and u2 = h2 - h
(saltwater), the interface dynamics is the two-species coupled system with
isotropic tensors built from the density contrast alpha,

    flux(u1) = delta grad u1 + (1-alpha) U0(u1) grad(u1 + u2)
    flux(u2) = delta grad u2 + U0(u2) (grad u2 + (1-alpha) grad u1)

where U0(x) = max(0, x) clips the mobile thicknesses.  The truncation level
of the generic formalism is h2, and its admissibility condition reduces to
1 - 4 delta / h2 < alpha <= 1.

The penalized scheme keeps the water table above the top (h1 >= 0, i.e.
s = u1 + u2 <= h2) by adding the drain flux eps^-1 U0(s - u1) grad U0(s - h2)
to the total-thickness equation; the recovered drain flux vanishes wherever
h1 > 0 in the limit eps -> 0.  Pumping is a signed extraction density applied
to the saltwater balance (a positive rate deepens the interface locally, the
dome of the pumping benchmark).

Boundary handling: 'dirichlet' pins interface depths through boundary
traces, 'closed' makes the box impermeable (the relaxation benchmark needs a
closed box to conserve freshwater mass).  The confined-reservoir variant
replaces the water-table equation by an elliptic solve for the hydraulic
head and always takes Dirichlet data for the head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sparse

from . import fv
from .conditions import check_aquifer_admissibility
from .fv import SolverFailure, SystemBuilder, face_table
from .model import (CrossTensor, Field, Grid, InvalidParameterError, ModelSpec)
from .solver import SimulationResult, StepperConfig

__all__ = [
    "AquiferSpec", "ConfinementReport", "EllipticSolveError", "SweepReport",
    "map_heads", "map_species", "to_cross_spec", "step_aquifer",
    "run_penalized", "run_confined_aquifer", "keulegan_scenario",
    "epsilon_sweep", "interface_slope", "interior_local_maxima",
]

HIERARCHY_TOL = 1e-9


class EllipticSolveError(SolverFailure):
    """Failure of the hydraulic-head elliptic solve (confined variant)."""


def _u0(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# spec
# ---------------------------------------------------------------------------

@dataclass
class AquiferSpec:
    """Data of one intrusion scenario.

    ``h2`` is the reservoir depth (scalar or per-cell; per-cell values enter
    the hierarchy, the variable mapping and the penalty threshold, while the
    interface dynamics stays the thickness-variable system above).
    ``pumping`` is a signed extraction density (rate per area; scalar, array
    or callable of (t, points)).  ``boundary`` selects 'dirichlet' traces or
    a 'closed' impermeable box; the head trace ``dirichlet_phi`` only serves
    the confined variant.
    """

    h2: float | np.ndarray
    delta: float
    alpha: float
    epsilon: float
    initial_h: Callable | np.ndarray | float
    initial_h1: Callable | np.ndarray | float
    domain: tuple[float, ...]
    pumping: Callable | np.ndarray | float | None = None
    dirichlet_h: Callable | float | None = None
    dirichlet_h1: Callable | float | None = None
    dirichlet_phi: Callable | float = 0.0
    boundary: str = "dirichlet"

    def __post_init__(self):
        if self.boundary not in ("dirichlet", "closed"):
            raise InvalidParameterError(f"unknown boundary mode {self.boundary!r}")
        if not self.delta > 0.0 or not self.epsilon > 0.0:
            raise InvalidParameterError("delta and epsilon must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidParameterError(f"density contrast must lie in (0, 1], got {self.alpha}")
        if self.boundary == "dirichlet" and (self.dirichlet_h is None or self.dirichlet_h1 is None):
            raise InvalidParameterError("dirichlet boundaries need traces for h and h1")

    def h2_max(self) -> float:
        return float(np.max(self.h2))

    def h2_cells(self, grid: Grid) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.h2, dtype=float), (grid.n_cells,)).copy()

    def _eval(self, data, points: np.ndarray, t: float | None = None) -> np.ndarray:
        if callable(data):
            out = data(points) if t is None else data(t, points)
            return np.broadcast_to(np.asarray(out, dtype=float), (points.shape[0],)).copy()
        return np.broadcast_to(np.asarray(data, dtype=float), (points.shape[0],)).copy()

    def initial_values(self, grid: Grid) -> tuple[np.ndarray, np.ndarray]:
        pts = grid.cell_centers()
        return self._eval(self.initial_h, pts), self._eval(self.initial_h1, pts)

    def trace_values(self, t: float, points: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        if self.boundary == "closed":
            return None
        return self._eval(self.dirichlet_h, points, t), self._eval(self.dirichlet_h1, points, t)

    def pumping_values(self, t: float, points: np.ndarray) -> np.ndarray:
        if self.pumping is None:
            return np.zeros(points.shape[0])
        return self._eval(self.pumping, points, t)

    def validate(self, grid: Grid) -> None:
        """Hierarchy of the data, admissibility window, trace compatibility."""
        admissibility = check_aquifer_admissibility(float(np.min(self.h2)), self.delta, self.alpha)
        if not admissibility.passed:
            raise InvalidParameterError(
                f"admissibility fails: lhs={admissibility.lhs}, rhs={admissibility.rhs}")
        h0, h10 = self.initial_values(grid)
        h2c = self.h2_cells(grid)
        if np.any(h10 < -HIERARCHY_TOL) or np.any(h0 - h10 < -HIERARCHY_TOL) \
                or np.any(h2c - h0 < -HIERARCHY_TOL):
            raise InvalidParameterError("initial data violate 0 <= h1 <= h <= h2")
        if self.boundary == "dirichlet":
            ft = face_table(grid)
            tr = self.trace_values(0.0, ft.bnd_points)
            h_d, h1_d = tr
            h2_b = h2c[ft.bnd_cell]
            if np.any(h1_d < -HIERARCHY_TOL) or np.any(h_d - h1_d < -HIERARCHY_TOL) \
                    or np.any(h2_b - h_d < -HIERARCHY_TOL):
                raise InvalidParameterError("boundary traces violate 0 <= h1 <= h <= h2")
            if callable(self.initial_h):
                h0_tr = self._eval(self.initial_h, ft.bnd_points)
                h10_tr = self._eval(self.initial_h1, ft.bnd_points)
            else:
                h0_tr, h10_tr = h0[ft.bnd_cell], h10[ft.bnd_cell]
            if np.max(np.abs(h0_tr - h_d)) > 1e-8 or np.max(np.abs(h10_tr - h1_d)) > 1e-8:
                raise InvalidParameterError("initial data incompatible with boundary traces")


# ---------------------------------------------------------------------------
# variable maps
# ---------------------------------------------------------------------------

def map_heads(h, h1, h2):
    """(h, h1) -> thickness variables (u1, u2) = (h - h1, h2 - h)."""
    h = np.asarray(h, dtype=float)
    return h - np.asarray(h1, dtype=float), np.asarray(h2, dtype=float) - h


def map_species(u1, u2, h2):
    """(u1, u2) -> interface depths (h, h1) = (h2 - u2, h2 - u2 - u1)."""
    h = np.asarray(h2, dtype=float) - np.asarray(u2, dtype=float)
    return h, h - np.asarray(u1, dtype=float)


def to_cross_spec(aspec: AquiferSpec, grid: Grid) -> ModelSpec:
    """Equivalent generic two-species spec (Dirichlet scenarios, ell = h2)."""
    if aspec.boundary != "dirichlet":
        raise InvalidParameterError("the generic formalism carries Dirichlet data only")
    if np.ndim(aspec.h2) != 0:
        raise InvalidParameterError("the generic mapping needs a constant reservoir depth")
    one_a = 1.0 - aspec.alpha
    ndim = len(aspec.domain)
    k = [[CrossTensor.isotropic(one_a, ndim), CrossTensor.isotropic(one_a, ndim)],
         [CrossTensor.isotropic(one_a, ndim), CrossTensor.isotropic(1.0, ndim)]]
    h2 = float(aspec.h2)

    def initial_u(which):
        if callable(aspec.initial_h) or callable(aspec.initial_h1):
            def f(points):
                h0 = aspec._eval(aspec.initial_h, points)
                h10 = aspec._eval(aspec.initial_h1, points)
                u1, u2 = map_heads(h0, h10, h2)
                return u1 if which == 0 else u2
            return f
        h0, h10 = aspec.initial_values(grid)
        u1, u2 = map_heads(h0, h10, h2)
        return u1 if which == 0 else u2

    def dirichlet_u(which):
        def g(t, points):
            h_d = aspec._eval(aspec.dirichlet_h, points, t)
            h1_d = aspec._eval(aspec.dirichlet_h1, points, t)
            u1, u2 = map_heads(h_d, h1_d, h2)
            return u1 if which == 0 else u2
        return g

    def salt_sink(t, points, u):
        return -aspec.pumping_values(t, points)

    return ModelSpec(m=2, delta=(aspec.delta, aspec.delta), K=k, ell=h2,
                     domain=aspec.domain,
                     initial=[initial_u(0), initial_u(1)],
                     dirichlet=[dirichlet_u(0), dirichlet_u(1)],
                     sources=[None, salt_sink])


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _u_traces(aspec: AquiferSpec, grid: Grid, t: float):
    ft = face_table(grid)
    tr = aspec.trace_values(t, ft.bnd_points)
    if tr is None:
        return None, None
    h_d, h1_d = tr
    h2_b = aspec.h2_cells(grid)[ft.bnd_cell]
    u1_d, u2_d = map_heads(h_d, h1_d, h2_b)
    return u1_d, u2_d


def _assemble_uu(aspec: AquiferSpec, grid: Grid, u_prev: np.ndarray, u_lag: np.ndarray,
                 t_prev: float, t_new: float, cfg: StepperConfig):
    """Thickness-variable system (u1, u2) with clipped, upwinded coefficients."""
    builder = SystemBuilder(grid, 2)
    ft = builder.ft
    vol = grid.cell_volume
    dt = cfg.dt
    alpha = aspec.alpha
    one_a = 1.0 - alpha
    points = grid.cell_centers()

    tr1, tr2 = _u_traces(aspec, grid, t_new)
    traces = [tr1, tr2]
    w = [_u0(u_lag[0]), _u0(u_lag[1])]
    w_tr = [None if tr1 is None else _u0(tr1), None if tr2 is None else _u0(tr2)]
    pump = aspec.pumping_values(t_prev, points)
    weight = fv.upwind_face_value if cfg.cross_weighting == "upwind" else fv.centered_face_value

    coeffs = [[one_a, one_a], [one_a, 1.0]]
    flux_pairs: list[list[tuple]] = [[], []]
    flux_sources = (np.zeros(grid.n_cells), -pump)

    for i in range(2):
        builder.add_mass(i, 1.0 / dt)
        builder.add_rhs(i, vol * (u_prev[i] / dt + flux_sources[i]))
        g_delta = {d: np.full(len(ft.int_left[d]), aspec.delta) for d in range(grid.ndim)}
        g_delta_b = np.full(ft.n_boundary, aspec.delta)
        builder.add_tpfa(i, i, g_delta, g_delta_b, traces[i])
        flux_pairs[i].append((i, g_delta_b))
        for j in range(2):
            c = coeffs[i][j]
            g_int = {}
            for d in range(grid.ndim):
                grad_j = fv.interior_gradient(ft, u_lag[j], d)
                w_face = weight(w[i][ft.int_left[d]], w[i][ft.int_right[d]], grad_j)
                g_int[d] = c * w_face
            g_bnd = None
            if traces[j] is not None:
                grad_b = fv.boundary_gradient(ft, u_lag[j], traces[j])
                w_face_b = weight(w[i][ft.bnd_cell], w_tr[i], grad_b)
                g_bnd = c * w_face_b
            builder.add_tpfa(i, j, g_int, g_bnd, traces[j])
            if g_bnd is not None:
                flux_pairs[i].append((j, g_bnd))

    a = builder.matrix()
    b = builder.rhs

    def flux_eval(u_new: np.ndarray) -> np.ndarray:
        out = np.zeros(2)
        for i in range(2):
            out[i] = sum(fv.boundary_flux_integral(ft, g, u_new[j], traces[j])
                         for j, g in flux_pairs[i])
        return out

    return a, b, flux_eval


@lru_cache(maxsize=None)
def _transform_ops(n: int) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    eye = sparse.identity(n, format="csr")
    q = sparse.bmat([[eye, None], [eye, eye]], format="csr")
    p = sparse.bmat([[eye, None], [-eye, eye]], format="csr")
    return q, p


def _penalty_entries(aspec: AquiferSpec, grid: Grid, u1_lag: np.ndarray,
                     s_lag: np.ndarray, t_new: float):
    """Active-set linearized drain term on the total-thickness row.

    Coefficient eps^-1 U0(s - u1) is lagged and face-upwinded by the face
    gradient of the excess U0(s - h2); the excess itself is linearized as
    active * (s - h2) at the lagged active set.
    """
    ft = face_table(grid)
    n = grid.n_cells
    h2c = aspec.h2_cells(grid)
    w = _u0(s_lag - u1_lag)
    excess = _u0(s_lag - h2c)
    active = (s_lag > h2c).astype(float)
    inv_eps = 1.0 / aspec.epsilon

    rows, cols, vals = [], [], []
    b_pen = np.zeros(2 * n)
    s_block = n

    for d in range(grid.ndim):
        L, R = ft.int_left[d], ft.int_right[d]
        h = grid.spacing[d]
        area = ft.face_area(d)
        driver = (excess[R] - excess[L]) / h
        w_face = fv.upwind_face_value(w[L], w[R], driver)
        kappa = inv_eps * w_face * area / h
        aL, aR = active[L], active[R]
        rows += [s_block + L, s_block + L, s_block + R, s_block + R]
        cols += [s_block + L, s_block + R, s_block + R, s_block + L]
        vals += [kappa * aL, -kappa * aR, kappa * aR, -kappa * aL]
        np.add.at(b_pen, s_block + L, -kappa * (aR * h2c[R] - aL * h2c[L]))
        np.add.at(b_pen, s_block + R, kappa * (aR * h2c[R] - aL * h2c[L]))

    tr = _u_traces(aspec, grid, t_new)
    if tr[0] is not None:
        s_d = tr[0] + tr[1]
        cells = ft.bnd_cell
        h2_b = h2c[cells]
        half = np.array([grid.spacing[a] / 2.0 for a in ft.bnd_axis])
        area = np.array([ft.face_area(a) for a in ft.bnd_axis])
        excess_d = _u0(s_d - h2_b)
        driver_b = (excess_d - excess[cells]) / half
        w_face = fv.upwind_face_value(w[cells], _u0(s_d - tr[0]), driver_b)
        kappa = inv_eps * w_face * area / half
        rows += [s_block + cells]
        cols += [s_block + cells]
        vals += [kappa * active[cells]]
        np.add.at(b_pen, s_block + cells, kappa * (excess_d + active[cells] * h2_b))

    a_pen = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n, 2 * n)).tocsr()
    return a_pen, b_pen


def penalty_face_flux(aspec: AquiferSpec, grid: Grid, h: np.ndarray,
                      h1: np.ndarray) -> dict[int, np.ndarray]:
    """Drain flux eps^-1 U0(s - u1) grad U0(s - h2) per interior face."""
    ft = face_table(grid)
    h2c = aspec.h2_cells(grid)
    u1, u2 = map_heads(h, h1, h2c)
    s = u1 + u2
    w = _u0(u2)
    excess = _u0(s - h2c)
    out = {}
    for d in range(grid.ndim):
        L, R = ft.int_left[d], ft.int_right[d]
        grad = (excess[R] - excess[L]) / grid.spacing[d]
        w_face = fv.upwind_face_value(w[L], w[R], grad)
        out[d] = w_face * grad / aspec.epsilon
    return out


def _cell_flux_magnitude(grid: Grid, face_flux: dict[int, np.ndarray]) -> np.ndarray:
    ft = face_table(grid)
    mag2 = np.zeros(grid.n_cells)
    for d, f in face_flux.items():
        acc = np.zeros(grid.n_cells)
        cnt = np.zeros(grid.n_cells)
        np.add.at(acc, ft.int_left[d], np.abs(f))
        np.add.at(acc, ft.int_right[d], np.abs(f))
        np.add.at(cnt, ft.int_left[d], 1.0)
        np.add.at(cnt, ft.int_right[d], 1.0)
        cnt[cnt == 0.0] = 1.0
        mag2 += (acc / cnt) ** 2
    return np.sqrt(mag2)


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

def _effective_lin_tol(aspec: AquiferSpec, cfg: StepperConfig, penalized: bool) -> float:
    if penalized and aspec.epsilon < 1e-3:
        return max(cfg.lin_tol * aspec.epsilon, 1e-14)
    return cfg.lin_tol


def _advance_aquifer(aspec: AquiferSpec, grid: Grid, u_prev: np.ndarray, t_prev: float,
                     cfg: StepperConfig, penalized: bool):
    """One backward-Euler step in (u1, u2); the penalized path solves (u1, s)."""
    n = grid.n_cells
    t_new = t_prev + cfg.dt
    lin_tol = _effective_lin_tol(aspec, cfg, penalized)
    q_op, p_op = _transform_ops(n) if penalized else (None, None)

    u_lag = u_prev
    stats = {"picard_sweeps": 0, "picard_converged": True, "lin_residual": 0.0, "b_norm": 0.0}
    u_new = u_prev
    flux = np.zeros(2)
    for sweep in range(max(1, cfg.picard_max)):
        a_uu, b_uu, flux_eval = _assemble_uu(aspec, grid, u_prev, u_lag, t_prev, t_new, cfg)
        if penalized:
            a = (q_op @ a_uu @ p_op).tocsr()
            b = q_op @ b_uu
            a_pen, b_pen = _penalty_entries(aspec, grid, u_lag[0], u_lag[0] + u_lag[1], t_new)
            a = (a + a_pen).tocsr()
            b = b + b_pen
        else:
            a, b = a_uu, b_uu
        x0 = (np.concatenate([u_lag[0], u_lag[0] + u_lag[1]]) if penalized
              else u_lag.ravel().copy())
        x = fv.solve_sparse(a, b, lin_tol, cfg.lin_max, time=t_new, x0=x0)
        bnorm = float(np.linalg.norm(b))
        stats["lin_residual"] = float(np.linalg.norm(b - a @ x)) / max(bnorm, 1e-300)
        stats["b_norm"] = bnorm
        if penalized:
            u1 = x[:n]
            s = x[n:]
            u_new = np.stack([u1, s - u1])
        else:
            u_new = x.reshape(2, n)
        stats["picard_sweeps"] = sweep + 1
        change = float(np.max(np.abs(u_new - u_lag)))
        scale = max(float(np.max(np.abs(u_new))), 1e-300)
        flux = flux_eval(u_new)
        u_lag = u_new
        if change / scale < cfg.picard_tol:
            break
    else:
        stats["picard_converged"] = False
    return u_new, flux, stats


def step_aquifer(state: Field, aspec: AquiferSpec, grid: Grid, cfg: StepperConfig,
                 penalized: bool = False) -> Field:
    """Advance the (h, h1) state by one step (validates the spec first)."""
    aspec.validate(grid)
    h2c = aspec.h2_cells(grid)
    u1, u2 = map_heads(state.values[0], state.values[1], h2c)
    u_new, _, _ = _advance_aquifer(aspec, grid, np.stack([u1, u2]), state.time, cfg, penalized)
    h, h1 = map_species(u_new[0], u_new[1], h2c)
    return Field(np.stack([h, h1]), state.time + cfg.dt)


@dataclass
class ConfinementReport:
    """Constraint violation, drain-orthogonality residual and the drain flux.

    ``violation[k]`` is the integral of (s - h2)^+ at snapshot k, ``residual``
    the integral of |h1| |Q| (the orthogonality h1 Q = 0 of the confined
    limit), and ``q_field`` the reconstructed per-face drain flux at the
    final snapshot.
    """

    times: np.ndarray
    violation: np.ndarray
    residual: np.ndarray
    q_field: dict[int, np.ndarray]

    @property
    def final_violation(self) -> float:
        return float(self.violation[-1])

    @property
    def final_residual(self) -> float:
        return float(self.residual[-1])


def _run_u_system(aspec: AquiferSpec, grid: Grid, cfg: StepperConfig,
                  penalized: bool) -> SimulationResult:
    aspec.validate(grid)
    h2c = aspec.h2_cells(grid)
    h0, h10 = aspec.initial_values(grid)
    u1, u2 = map_heads(h0, h10, h2c)
    u = np.stack([u1, u2])
    vol = grid.cell_volume
    points = grid.cell_centers()
    n_steps = int(round(cfg.t_end / cfg.dt)) if cfg.t_end > 0 else 0

    times = np.arange(n_steps + 1) * cfg.dt
    minmax = np.zeros((2, n_steps + 1, 3))
    mass = np.zeros((2, n_steps + 1))
    src = np.zeros((2, n_steps))
    bflux = np.zeros((2, n_steps))
    stats: list[dict] = []

    def heads(u_now: np.ndarray) -> np.ndarray:
        h, h1 = map_species(u_now[0], u_now[1], h2c)
        return np.stack([h, h1])

    def record(k: int, hh: np.ndarray) -> None:
        minmax[:, k, 0] = times[k]
        minmax[:, k, 1] = hh.min(axis=1)
        minmax[:, k, 2] = hh.max(axis=1)
        mass[:, k] = hh.sum(axis=1) * vol

    snapshots = [Field(heads(u), 0.0)]
    record(0, snapshots[0].values)
    for k in range(n_steps):
        pump = aspec.pumping_values(times[k], points)
        try:
            u, flux_k, st = _advance_aquifer(aspec, grid, u, times[k], cfg, penalized)
        except SolverFailure as exc:
            exc.time = times[k + 1]
            exc.partial = SimulationResult(
                snapshots, times[:k + 1], minmax[:, :k + 1], mass[:, :k + 1],
                src[:, :k], bflux[:, :k], stats, cfg.dt)
            raise
        src[:, k] = [0.0, float(np.sum(-pump) * vol)]
        bflux[:, k] = flux_k
        stats.append(st)
        hh = heads(u)
        record(k + 1, hh)
        if (k + 1) % max(1, cfg.snapshot_every) == 0 or k + 1 == n_steps:
            if not snapshots or snapshots[-1].time < times[k + 1]:
                snapshots.append(Field(hh, float(times[k + 1])))

    result = SimulationResult(snapshots, times, minmax, mass, src, bflux, stats, cfg.dt)
    result.validate()
    return result


def confinement_report(aspec: AquiferSpec, grid: Grid,
                       result: SimulationResult) -> ConfinementReport:
    h2c = aspec.h2_cells(grid)
    vol = grid.cell_volume
    times = np.array([f.time for f in result.snapshots])
    violation = np.zeros(len(times))
    residual = np.zeros(len(times))
    q_field: dict[int, np.ndarray] = {}
    for k, snap in enumerate(result.snapshots):
        h, h1 = snap.values[0], snap.values[1]
        s = (h - h1) + (h2c - h)
        violation[k] = float(np.sum(_u0(s - h2c)) * vol)
        q_field = penalty_face_flux(aspec, grid, h, h1)
        q_mag = _cell_flux_magnitude(grid, q_field)
        residual[k] = float(np.sum(np.abs(h1) * q_mag) * vol)
    return ConfinementReport(times, violation, residual, q_field)


def run_penalized(aspec: AquiferSpec, grid: Grid,
                  cfg: StepperConfig) -> tuple[SimulationResult, ConfinementReport]:
    """Penalized time loop over (h, h1) plus the confinement accounting."""
    result = _run_u_system(aspec, grid, cfg, penalized=True)
    return result, confinement_report(aspec, grid, result)


def run_unpenalized(aspec: AquiferSpec, grid: Grid, cfg: StepperConfig) -> SimulationResult:
    """Plain (no drain term) interface evolution over (h, h1)."""
    return _run_u_system(aspec, grid, cfg, penalized=False)


# ---------------------------------------------------------------------------
# confined-reservoir variant
# ---------------------------------------------------------------------------

def _assemble_confined(aspec: AquiferSpec, grid: Grid, w_prev: np.ndarray,
                       w_lag: np.ndarray, phi_lag: np.ndarray,
                       t_prev: float, t_new: float, cfg: StepperConfig):
    """Block system for (w, phi): parabolic salt thickness, elliptic head."""
    builder = SystemBuilder(grid, 2)
    ft = builder.ft
    vol = grid.cell_volume
    alpha, one_a = aspec.alpha, 1.0 - aspec.alpha
    h2c = aspec.h2_cells(grid)
    points = grid.cell_centers()
    pump = aspec.pumping_values(t_prev, points)

    tr = aspec.trace_values(t_new, ft.bnd_points)
    if tr is None:
        w_trace = None
    else:
        w_trace = h2c[ft.bnd_cell] - tr[0]
    phi_trace = aspec._eval(aspec.dirichlet_phi, ft.bnd_points, t_new)
    w = _u0(w_lag)
    w_tr = None if w_trace is None else _u0(w_trace)

    # salt-thickness row: flux = delta grad w + alpha w grad w - (1-alpha) w grad phi
    builder.add_mass(0, 1.0 / cfg.dt)
    builder.add_rhs(0, vol * w_prev / cfg.dt)
    builder.add_tpfa(0, 0, {d: np.full(len(ft.int_left[d]), aspec.delta)
                            for d in range(grid.ndim)},
                     np.full(ft.n_boundary, aspec.delta), w_trace)
    for d in range(grid.ndim):
        L, R = ft.int_left[d], ft.int_right[d]
        grad_w = fv.interior_gradient(ft, w_lag, d)
        grad_phi = fv.interior_gradient(ft, phi_lag, d)
        w_face_w = fv.upwind_face_value(w[L], w[R], grad_w)
        w_face_phi = fv.upwind_face_value(w[L], w[R], -grad_phi)
        builder.add_tpfa(0, 0, {d: alpha * w_face_w}, None, None)
        builder.add_tpfa(0, 1, {d: -one_a * w_face_phi}, None, None)
        # head row couplings
        builder.add_tpfa(1, 0, {d: alpha * w_face_w}, None, None)
        h2_face = 0.5 * (h2c[L] + h2c[R])
        builder.add_tpfa(1, 1, {d: one_a * h2_face}, None, None)
    if w_trace is not None:
        grad_w_b = fv.boundary_gradient(ft, w_lag, w_trace)
        grad_phi_b = fv.boundary_gradient(ft, phi_lag, phi_trace)
        w_face_wb = fv.upwind_face_value(w[ft.bnd_cell], w_tr, grad_w_b)
        w_face_pb = fv.upwind_face_value(w[ft.bnd_cell], w_tr, -grad_phi_b)
        builder.add_tpfa(0, 0, {}, alpha * w_face_wb, w_trace)
        builder.add_tpfa(0, 1, {}, -one_a * w_face_pb, phi_trace)
        builder.add_tpfa(1, 0, {}, alpha * w_face_wb, w_trace)
    h2_b = h2c[ft.bnd_cell]
    builder.add_tpfa(1, 1, {}, one_a * h2_b, phi_trace)
    builder.add_rhs(1, -vol * pump)
    return builder.matrix(), builder.rhs


def _initial_head(aspec: AquiferSpec, grid: Grid, w0: np.ndarray, cfg: StepperConfig) -> np.ndarray:
    """Elliptic solve for the head consistent with the initial interface."""
    builder = SystemBuilder(grid, 1)
    ft = builder.ft
    one_a = 1.0 - aspec.alpha
    alpha = aspec.alpha
    h2c = aspec.h2_cells(grid)
    phi_trace = aspec._eval(aspec.dirichlet_phi, ft.bnd_points, 0.0)
    w = _u0(w0)
    for d in range(grid.ndim):
        L, R = ft.int_left[d], ft.int_right[d]
        h2_face = 0.5 * (h2c[L] + h2c[R])
        builder.add_tpfa(0, 0, {d: one_a * h2_face}, None, None)
        grad_w = fv.interior_gradient(ft, w0, d)
        w_face = fv.upwind_face_value(w[L], w[R], grad_w)
        builder.add_explicit_flux(0, {d: alpha * w_face * grad_w}, None)
    builder.add_tpfa(0, 0, {}, one_a * h2c[ft.bnd_cell], phi_trace)
    tr = aspec.trace_values(0.0, ft.bnd_points)
    if tr is not None:
        w_trace = h2c[ft.bnd_cell] - tr[0]
        grad_w_b = fv.boundary_gradient(ft, w0, w_trace)
        w_face_b = fv.upwind_face_value(w[ft.bnd_cell], _u0(w_trace), grad_w_b)
        builder.add_explicit_flux(0, {}, alpha * w_face_b * grad_w_b)
    pump = aspec.pumping_values(0.0, grid.cell_centers())
    builder.add_rhs(0, -grid.cell_volume * pump)
    try:
        return fv.solve_sparse(builder.matrix(), builder.rhs, cfg.lin_tol, cfg.lin_max)
    except SolverFailure as exc:
        raise EllipticSolveError(str(exc), residual=exc.residual, time=0.0) from exc


def run_confined_aquifer(aspec: AquiferSpec, grid: Grid, cfg: StepperConfig) -> SimulationResult:
    """Confined variant: parabolic interface depth coupled to an elliptic head.

    Snapshots hold (h, phi).  The fully saturated reservoir fixes the water
    table at the top (h1 = 0); pumping acts as a sink of the total-flow
    balance.  The head always takes Dirichlet data from ``dirichlet_phi``.
    """
    aspec.validate(grid)
    h2c = aspec.h2_cells(grid)
    h0, _ = aspec.initial_values(grid)
    w = h2c - h0
    n = grid.n_cells
    vol = grid.cell_volume
    phi = _initial_head(aspec, grid, w, cfg)
    n_steps = int(round(cfg.t_end / cfg.dt)) if cfg.t_end > 0 else 0

    times = np.arange(n_steps + 1) * cfg.dt
    minmax = np.zeros((2, n_steps + 1, 3))
    mass = np.zeros((2, n_steps + 1))
    stats: list[dict] = []

    def pack(w_now, phi_now):
        return np.stack([h2c - w_now, phi_now])

    def record(k, vals):
        minmax[:, k, 0] = times[k]
        minmax[:, k, 1] = vals.min(axis=1)
        minmax[:, k, 2] = vals.max(axis=1)
        mass[:, k] = vals.sum(axis=1) * vol

    snapshots = [Field(pack(w, phi), 0.0)]
    record(0, snapshots[0].values)
    for k in range(n_steps):
        w_lag, phi_lag = w, phi
        st = {"picard_sweeps": 0, "picard_converged": True, "lin_residual": 0.0, "b_norm": 0.0}
        for sweep in range(max(1, cfg.picard_max)):
            a, b = _assemble_confined(aspec, grid, w, w_lag, phi_lag, times[k], times[k + 1], cfg)
            try:
                x = fv.solve_sparse(a, b, cfg.lin_tol, cfg.lin_max, time=times[k + 1],
                                    x0=np.concatenate([w_lag, phi_lag]))
            except SolverFailure as exc:
                exc.time = times[k + 1]
                raise
            bnorm = float(np.linalg.norm(b))
            st["lin_residual"] = float(np.linalg.norm(b - a @ x)) / max(bnorm, 1e-300)
            st["b_norm"] = bnorm
            st["picard_sweeps"] = sweep + 1
            w_new, phi_new = x[:n], x[n:]
            change = max(float(np.max(np.abs(w_new - w_lag))),
                         float(np.max(np.abs(phi_new - phi_lag))))
            scale = max(float(np.max(np.abs(w_new))), float(np.max(np.abs(phi_new))), 1e-300)
            w_lag, phi_lag = w_new, phi_new
            if change / scale < cfg.picard_tol:
                break
        else:
            st["picard_converged"] = False
        stats.append(st)
        w, phi = w_lag, phi_lag
        vals = pack(w, phi)
        record(k + 1, vals)
        if (k + 1) % max(1, cfg.snapshot_every) == 0 or k + 1 == n_steps:
            if not snapshots or snapshots[-1].time < times[k + 1]:
                snapshots.append(Field(vals, float(times[k + 1])))

    result = SimulationResult(snapshots, times, minmax, mass,
                              np.zeros((2, n_steps)), np.zeros((2, n_steps)), stats, cfg.dt)
    result.validate()
    return result


# ---------------------------------------------------------------------------
# scenarios and sweeps
# ---------------------------------------------------------------------------

def keulegan_scenario(grid: Grid, pump_rate: float = 0.0, tilt: float = 0.5, *,
                      h2: float = 1.0, delta: float = 0.3, alpha: float = 0.025,
                      epsilon: float = 1e-2, h_mid: float = 0.5,
                      h1_level: float = 0.1,
                      well_position: Sequence[float] | None = None) -> AquiferSpec:
    """Inclined-interface relaxation box, optionally with a pumping well.

    The salt interface starts linearly inclined along the first axis around
    ``h_mid`` with the given slope, the water table flat at ``h1_level``, in
    a closed box (the interface relaxes toward horizontal under the density
    contrast; pinned traces would hold it inclined and leak mass).  The well
    sits at ``well_position`` (box center by default) in a single cell with
    total extraction rate ``pump_rate``; geometry and rates are artifact
    defaults, not published benchmark values.  Tilts breaking the hierarchy
    0 <= h1 <= h <= h2 are rejected.
    """
    length = grid.extents[0]
    h_min = h_mid - abs(tilt) * length / 2.0
    h_max = h_mid + abs(tilt) * length / 2.0
    if h_min < h1_level - 1e-12 or h_max > h2 + 1e-12 or h1_level < 0.0:
        raise InvalidParameterError(
            f"tilt {tilt} breaks the hierarchy: h range [{h_min}, {h_max}], "
            f"h1 = {h1_level}, h2 = {h2}")

    def initial_h(points: np.ndarray) -> np.ndarray:
        return h_mid + tilt * (points[:, 0] - length / 2.0)

    pumping = None
    if pump_rate != 0.0:
        center = (np.asarray(well_position, dtype=float) if well_position is not None
                  else np.array([e / 2.0 for e in grid.extents]))
        pts = grid.cell_centers()
        well_cell = int(np.argmin(np.linalg.norm(pts - center[None, :], axis=1)))
        density = np.zeros(grid.n_cells)
        density[well_cell] = pump_rate / grid.cell_volume
        pumping = density

    return AquiferSpec(h2=h2, delta=delta, alpha=alpha, epsilon=epsilon,
                       initial_h=initial_h, initial_h1=float(h1_level),
                       domain=grid.extents, pumping=pumping, boundary="closed")


def interface_slope(values: np.ndarray, grid: Grid) -> float:
    """Largest face-difference slope |u_R - u_L| / h over interior faces."""
    ft = face_table(grid)
    worst = 0.0
    for d in range(grid.ndim):
        g = np.abs(fv.interior_gradient(ft, values, d))
        if g.size:
            worst = max(worst, float(g.max()))
    return worst


def interior_local_maxima(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Flat indices of strict interior local maxima (all-neighbor dominance)."""
    arr = values.reshape(grid.dims)
    interior = [slice(1, -1)] * grid.ndim
    mask = np.zeros_like(arr, dtype=bool)
    core = np.ones(arr[tuple(interior)].shape, dtype=bool)
    for axis in range(grid.ndim):
        lo = [slice(1, -1)] * grid.ndim
        hi = [slice(1, -1)] * grid.ndim
        lo[axis] = slice(None, -2)
        hi[axis] = slice(2, None)
        core &= arr[tuple(interior)] > arr[tuple(lo)]
        core &= arr[tuple(interior)] > arr[tuple(hi)]
    mask[tuple(interior)] = core
    return np.flatnonzero(mask.ravel())


@dataclass
class SweepReport:
    """Penalization sweep: per-epsilon confinement outcome and the decay fit."""

    entries: list[dict] = field(default_factory=list)
    fit_exponent: float = math.nan

    def violations(self) -> np.ndarray:
        return np.array([e["violation"] for e in self.entries if e["error"] is None])


def epsilon_sweep(aspec: AquiferSpec, grid: Grid, cfg: StepperConfig,
                  eps_list: Sequence[float]) -> SweepReport:
    """Run the penalized scheme along a decreasing epsilon list.

    Retains partial results when an epsilon fails; the decay exponent is the
    least-squares slope of log(final violation) against log(epsilon) over the
    successful, constraint-active entries.
    """
    eps = [float(e) for e in eps_list]
    if any(e <= 0.0 for e in eps):
        raise InvalidParameterError("epsilon list must be positive")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise InvalidParameterError("epsilon list must be strictly decreasing")
    report = SweepReport()
    first_error: SolverFailure | None = None
    for e in eps:
        spec_e = replace(aspec, epsilon=e)
        entry = {"epsilon": e, "violation": math.nan, "residual": math.nan, "error": None}
        try:
            _, conf = run_penalized(spec_e, grid, cfg)
            entry["violation"] = conf.final_violation
            entry["residual"] = conf.final_residual
        except SolverFailure as exc:
            entry["error"] = str(exc)
            if first_error is None:
                first_error = exc
        report.entries.append(entry)
    good = [(e["epsilon"], e["violation"]) for e in report.entries
            if e["error"] is None and e["violation"] > 0.0]
    if len(good) >= 2:
        x = np.log([g[0] for g in good])
        y = np.log([g[1] for g in good])
        report.fit_exponent = float(np.polyfit(x, y, 1)[0])
    if first_error is not None and all(e["error"] is not None for e in report.entries):
        raise first_error
    return report
