"""Numerical witnesses of the analytic devices on stored trajectories.

Operates read-only on :class:`~crossdiff.solver.SimulationResult`: space-time
level-set measures and the geometric level iteration they feed, pointwise
bound checks, discrete space-time gradient norms, and a twin-run probe that
evaluates the energy terms behind the local uniqueness argument.

Time integrals use snapshot-slab quadrature: snapshot s carries the weight
t_{s+1} - t_s (piecewise constant in time, left endpoint), so the final
snapshot has zero weight and the total weight is exactly the simulated span.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import fv, solver
from .conditions import DeGiorgiBudget
from .model import Field, Grid, InvalidParameterError, ModelSpec, clamp
from .solver import SimulationResult, StepperConfig

__all__ = [
    "LevelSetProfile", "DeGiorgiTrace", "BoundCheckReport", "UniquenessProbeReport",
    "level_set_measure", "level_set_profile", "degiorgi_trace", "bound_check",
    "discrete_grad_norm", "empirical_interpolation_constant",
    "uniqueness_probe", "disc_cells", "disc_perturbation",
]


# ---------------------------------------------------------------------------
# level-set measures
# ---------------------------------------------------------------------------

def level_set_measure(result: SimulationResult, grid: Grid, species: int, k: float) -> float:
    """Space-time measure of { u_species > k } over the stored snapshots.

    Strict inequality; snapshot-slab quadrature in time, cell volumes in
    space.  Accumulates slab * vol * count snapshot by snapshot so the value
    matches a plain double loop over (snapshot, cell) bit for bit.
    """
    if not result.snapshots:
        raise InvalidParameterError("result holds no snapshots")
    vol = grid.cell_volume
    total = 0.0
    snaps = result.snapshots
    for s in range(len(snaps) - 1):
        slab = snaps[s + 1].time - snaps[s].time
        count = int(np.count_nonzero(snaps[s].values[species] > k))
        total += slab * vol * count
    return total


@dataclass
class LevelSetProfile:
    """Measures mu_i(k) on an increasing list of levels, one row per species."""

    levels: np.ndarray
    measures: np.ndarray  # (m, n_levels)

    def to_csv(self) -> str:
        lines = ["level," + ",".join(f"mu_{i + 1}" for i in range(self.measures.shape[0]))]
        for j, k in enumerate(self.levels):
            lines.append(",".join([repr(float(k))] + [repr(float(v)) for v in self.measures[:, j]]))
        return "\n".join(lines) + "\n"


def level_set_profile(result: SimulationResult, grid: Grid, levels) -> LevelSetProfile:
    levels = np.asarray(levels, dtype=float)
    if np.any(np.diff(levels) <= 0.0):
        raise InvalidParameterError("levels must be strictly increasing")
    m = result.snapshots[0].m
    meas = np.array([[level_set_measure(result, grid, i, float(k)) for k in levels]
                     for i in range(m)])
    return LevelSetProfile(levels, meas)


# ---------------------------------------------------------------------------
# level iteration trace
# ---------------------------------------------------------------------------

@dataclass
class DeGiorgiTrace:
    """Geometric level sequence, measured decay and the recursion bound.

    ``k_n = m_factor * ell0 * (1 + m_prime - 2^-n)``, ``v_n`` the measured
    level-set measures, and ``recursion_rhs[n]`` the one-step bound
    ``(2^(n+1) C_i beta v_n^((s-2)/(2s)) / (m_factor ell0))^r`` that must
    dominate ``v_{n+1}`` for the iteration to contract.
    """

    k_n: np.ndarray
    v_n: np.ndarray
    recursion_rhs: np.ndarray  # length len(k_n) - 1
    holds: np.ndarray          # bool, same length as recursion_rhs
    n0: int

    def to_csv(self) -> str:
        lines = ["n,k_n,v_n,rhs_n,holds"]
        for n in range(len(self.k_n)):
            rhs = repr(float(self.recursion_rhs[n])) if n < len(self.recursion_rhs) else ""
            hold = str(bool(self.holds[n])) if n < len(self.holds) else ""
            lines.append(f"{n},{float(self.k_n[n])!r},{float(self.v_n[n])!r},{rhs},{hold}")
        return "\n".join(lines) + "\n"


def degiorgi_trace(result: SimulationResult, grid: Grid, species: int,
                   ell0: float, m_factor: float, m_prime: float,
                   budget: DeGiorgiBudget, n_max: int = 20) -> DeGiorgiTrace:
    """Measure the level iteration on a stored run and test the recursion."""
    if not budget.feasible:
        raise InvalidParameterError("level iteration budget is infeasible (zeta <= 0)")
    if not (ell0 > 0.0 and m_factor > 1.0 and m_prime > 0.0):
        raise InvalidParameterError("need ell0 > 0, m_factor > 1, m_prime > 0")
    n = np.arange(n_max + 1)
    k_n = m_factor * ell0 * (1.0 + m_prime - 2.0 ** (-n.astype(float)))
    n0 = next(i for i in range(n_max + 1) if k_n[i] >= m_factor * ell0)
    v_n = np.array([level_set_measure(result, grid, species, float(k)) for k in k_n])
    s = budget.s
    r = budget.r
    cb = budget.c_i * budget.sobolev_beta
    rhs = (2.0 ** (n[:-1] + 1.0) * cb * v_n[:-1] ** ((s - 2.0) / (2.0 * s))
           / (m_factor * ell0)) ** r
    holds = v_n[1:] <= rhs
    return DeGiorgiTrace(k_n, v_n, rhs, holds, n0)


# ---------------------------------------------------------------------------
# bound checks
# ---------------------------------------------------------------------------

@dataclass
class SpeciesBound:
    species: int
    lo_margin: float     # min u - lo over the whole per-step series
    hi_margin: float     # hi - max u
    min_value: float
    min_time: float
    min_cell: int
    max_value: float
    max_time: float
    max_cell: int


@dataclass
class BoundCheckReport:
    lo: float
    hi: float
    species: list[SpeciesBound]

    @property
    def worst_lo_margin(self) -> float:
        return min(s.lo_margin for s in self.species)

    @property
    def worst_hi_margin(self) -> float:
        return min(s.hi_margin for s in self.species)


def bound_check(result: SimulationResult, lo: float = 0.0,
                hi: float = math.inf) -> BoundCheckReport:
    """Worst violations of lo <= u_i <= hi with times and cell locations.

    Margins come from the per-step extrema series (full temporal
    resolution); locations from the snapshot achieving the sharpest value.
    """
    out = []
    for i in range(result.m):
        series = result.minmax[i]
        kmin = int(np.argmin(series[:, 1]))
        kmax = int(np.argmax(series[:, 2]))
        min_val, min_t = float(series[kmin, 1]), float(series[kmin, 0])
        max_val, max_t = float(series[kmax, 2]), float(series[kmax, 0])
        snap_min = min(result.snapshots, key=lambda f: f.values[i].min())
        snap_max = max(result.snapshots, key=lambda f: f.values[i].max())
        out.append(SpeciesBound(
            species=i,
            lo_margin=min_val - lo,
            hi_margin=(hi - max_val) if math.isfinite(hi) else math.inf,
            min_value=min_val, min_time=min_t,
            min_cell=int(np.argmin(snap_min.values[i])),
            max_value=max_val, max_time=max_t,
            max_cell=int(np.argmax(snap_max.values[i]))))
    return BoundCheckReport(lo, hi, out)


# ---------------------------------------------------------------------------
# discrete gradient norms
# ---------------------------------------------------------------------------

def _cell_grad_mag(grid: Grid, u: np.ndarray) -> np.ndarray:
    ft = fv.face_table(grid)
    comps = [fv.cell_gradient(ft, u, d, None) for d in range(grid.ndim)]
    return np.sqrt(sum(c ** 2 for c in comps))


def discrete_grad_norm(result: SimulationResult, grid: Grid, s: float) -> np.ndarray:
    """Per-species ( sum_t slab sum_c vol |grad u|^s )^(1/s).

    Cell gradients average the face differences available per axis (interior
    faces only; boundary traces are not stored with the run).
    """
    if s < 1.0:
        raise InvalidParameterError(f"exponent must be >= 1, got {s}")
    vol = grid.cell_volume
    total = np.zeros(result.m)
    snaps = result.snapshots
    for idx in range(len(snaps) - 1):
        slab = snaps[idx + 1].time - snaps[idx].time
        for i in range(result.m):
            mag = _cell_grad_mag(grid, snaps[idx].values[i])
            total[i] += slab * vol * float(np.sum(mag ** s))
    return total ** (1.0 / s)


def empirical_interpolation_constant(result: SimulationResult, grid: Grid,
                                     species: int, r: float, q: float) -> float:
    """Measured ratio ||u||_{L^r L^q} / (||u||_{L^inf L^2} + ||grad u||_{L^2}).

    Stands in for the interpolation constant when no analytic value is
    supplied; measured on the run itself with snapshot-slab quadrature.
    """
    vol = grid.cell_volume
    snaps = result.snapshots
    num = 0.0
    sup_l2 = 0.0
    grad_sq = 0.0
    for idx, snap in enumerate(snaps):
        u = snap.values[species]
        sup_l2 = max(sup_l2, math.sqrt(float(np.sum(u ** 2)) * vol))
        if idx < len(snaps) - 1:
            slab = snaps[idx + 1].time - snap.time
            lq = (float(np.sum(np.abs(u) ** q)) * vol) ** (1.0 / q)
            num += slab * lq ** r
            mag = _cell_grad_mag(grid, u)
            grad_sq += slab * vol * float(np.sum(mag ** 2))
    den = sup_l2 + math.sqrt(grad_sq)
    if den == 0.0:
        return 0.0
    return num ** (1.0 / r) / den


# ---------------------------------------------------------------------------
# twin-run uniqueness probe
# ---------------------------------------------------------------------------

def disc_cells(grid: Grid, center, radius: float) -> np.ndarray:
    """Flat indices of cells whose centers lie within ``radius`` of ``center``."""
    pts = grid.cell_centers()
    c = np.asarray(center, dtype=float)
    return np.flatnonzero(np.linalg.norm(pts - c[None, :], axis=1) <= radius)


def _set_boundary_cells(grid: Grid, cells: np.ndarray) -> np.ndarray:
    """Cells of the set with a neighbor outside it or on the domain boundary."""
    inside = np.zeros(grid.n_cells, dtype=bool)
    inside[cells] = True
    mask = inside.reshape(grid.dims)
    boundary = np.zeros_like(mask)
    for axis in range(grid.ndim):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[axis], hi[axis] = slice(None, -1), slice(1, None)
        # neighbor outside the set
        edge = mask[tuple(lo)] & ~mask[tuple(hi)]
        boundary[tuple(lo)] |= edge
        edge = mask[tuple(hi)] & ~mask[tuple(lo)]
        boundary[tuple(hi)] |= edge
        # domain boundary counts as outside
        first = [slice(None)] * grid.ndim
        last = [slice(None)] * grid.ndim
        first[axis], last[axis] = 0, -1
        boundary[tuple(first)] |= mask[tuple(first)]
        boundary[tuple(last)] |= mask[tuple(last)]
    return np.flatnonzero(boundary.ravel())


def disc_perturbation(grid: Grid, m: int, center, radius: float,
                      amplitude: float) -> tuple[Field, np.ndarray]:
    """Smooth bump supported strictly inside the disc cell set.

    Returns the perturbation field (same bump on every species) and the flat
    indices of the disc cells; the set's boundary cells are zeroed so the
    support stays inside the discrete ball.
    """
    cells = disc_cells(grid, center, radius)
    pts = grid.cell_centers()
    r = np.linalg.norm(pts - np.asarray(center, dtype=float)[None, :], axis=1)
    bump = np.zeros(grid.n_cells)
    bump[cells] = amplitude * np.cos(np.pi * r[cells] / (2.0 * radius)) ** 2
    bump[_set_boundary_cells(grid, cells)] = 0.0
    values = np.tile(bump, (m, 1))
    return Field(values, 0.0), cells


@dataclass
class UniquenessProbeReport:
    """Twin-run separation energies and the stability prefactors.

    Energies use snapshot-slab quadrature; the truncated-coefficient weight
    is symmetrized over the two runs so that swapping them changes nothing
    but the sign of v.  ``margins`` are the computable prefactors of the
    summed energy inequality at the grid-searched epsilons (the
    radius-dependent terms carry unquantified constants and are omitted).
    """

    times: np.ndarray
    v_norms: np.ndarray       # (m, n_snapshots)
    grad_energies: np.ndarray  # (m,)
    cross_energies: np.ndarray  # (m,)
    epsilons: np.ndarray       # (eps_1, eps_2, eps_3, eps_4)
    margins: np.ndarray        # (m_grad_1, m_grad_2, m_cross_1, m_cross_2)
    amplification: float

    def to_csv(self) -> str:
        m = self.v_norms.shape[0]
        lines = ["t," + ",".join(f"v_norm_{i + 1}" for i in range(m))]
        for j, t in enumerate(self.times):
            lines.append(",".join([repr(float(t))] + [repr(float(self.v_norms[i, j]))
                                                      for i in range(m)]))
        lines.append("")
        lines.append("quantity,value")
        for i in range(m):
            lines.append(f"grad_energy_{i + 1},{float(self.grad_energies[i])!r}")
            lines.append(f"cross_energy_{i + 1},{float(self.cross_energies[i])!r}")
        for idx, e in enumerate(self.epsilons):
            lines.append(f"epsilon_{idx + 1},{float(e)!r}")
        for idx, mg in enumerate(self.margins):
            lines.append(f"margin_{idx + 1},{float(mg)!r}")
        lines.append(f"amplification,{float(self.amplification)!r}")
        return "\n".join(lines) + "\n"


_EPS_GRID = (1e-3, 1e-2, 0.1, 0.25, 0.5, 0.75, 1.0)


def _search_epsilons(spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Maximize the minimum prefactor over a coarse grid of epsilon scales."""
    from .model import ellipticity_bounds
    d1, d2 = spec.delta
    k12p = ellipticity_bounds(spec.K[0][1])[1]
    k21p = ellipticity_bounds(spec.K[1][0])[1]
    k11m = ellipticity_bounds(spec.K[0][0])[0]
    k22m = ellipticity_bounds(spec.K[1][1])[0]
    ell = spec.ell
    best = None
    for a, b, c, d in itertools.product(_EPS_GRID, repeat=4):
        e1, e2, e3, e4 = a * d1, b * d2, c * k11m, d * k22m
        margins = np.array([
            d1 - 2.0 * e1 - ell * k21p ** 2 / (4.0 * e4),
            d2 - 2.0 * e2 - ell * k12p ** 2 / (4.0 * e3),
            k11m - e3,
            k22m - e4,
        ])
        key = margins.min()
        if best is None or key > best[0]:
            best = (key, np.array([e1, e2, e3, e4]), margins)
    return best[1], best[2]


def uniqueness_probe(spec: ModelSpec, grid: Grid, cfg: StepperConfig,
                     perturbation: Field, rho_cells: np.ndarray) -> UniquenessProbeReport:
    """Run twins from u0 and u0 + perturbation and report separation energies.

    The perturbation must vanish outside ``rho_cells`` and on that set's
    boundary cells (discrete analog of matching data on the ball boundary).
    Both runs share Dirichlet data, so the difference v has zero trace.
    Spec validation is the caller's concern: the perturbed twin necessarily
    carries per-cell initial data, which the strict boundary compatibility
    check cannot certify for smooth fields.
    """
    if spec.m != 2:
        raise InvalidParameterError("probe is formulated for two species")
    pv = perturbation.values
    if pv.shape != (spec.m, grid.n_cells):
        raise InvalidParameterError("perturbation shape must be (m, n_cells)")
    outside = np.ones(grid.n_cells, dtype=bool)
    outside[rho_cells] = False
    if np.any(pv[:, outside] != 0.0):
        raise InvalidParameterError("perturbation must vanish outside the cell set")
    ring = _set_boundary_cells(grid, rho_cells)
    if np.any(pv[:, ring] != 0.0):
        raise InvalidParameterError("perturbation must vanish on the set's boundary cells")

    points = grid.cell_centers()
    base_u0 = np.stack([spec.initial_values(i, points) for i in range(spec.m)])
    spec_b = ModelSpec(m=spec.m, delta=spec.delta, K=spec.K, ell=spec.ell,
                       domain=spec.domain,
                       initial=[base_u0[i] + pv[i] for i in range(spec.m)],
                       dirichlet=spec.dirichlet, sources=spec.sources)
    res_a = solver.run(spec, grid, cfg, validate=False)
    res_b = solver.run(spec_b, grid, cfg, validate=False)

    vol = grid.cell_volume
    snaps_a, snaps_b = res_a.snapshots, res_b.snapshots
    times = np.array([f.time for f in snaps_a])
    n_snap = len(snaps_a)
    v_norms = np.zeros((spec.m, n_snap))
    grad_e = np.zeros(spec.m)
    cross_e = np.zeros(spec.m)
    ft = fv.face_table(grid)
    zero_trace = np.zeros(ft.n_boundary)
    for idx in range(n_snap):
        ua, ub = snaps_a[idx].values, snaps_b[idx].values
        v = ub - ua
        v_norms[:, idx] = np.sqrt(np.sum(v ** 2, axis=1) * vol)
        if idx < n_snap - 1:
            slab = snaps_a[idx + 1].time - snaps_a[idx].time
            for i in range(spec.m):
                comps = [fv.cell_gradient(ft, v[i], d, zero_trace) for d in range(grid.ndim)]
                mag2 = sum(c ** 2 for c in comps)
                w = 0.5 * (clamp(ua[i], spec.ell) + clamp(ub[i], spec.ell))
                grad_e[i] += slab * vol * float(np.sum(mag2))
                cross_e[i] += slab * vol * float(np.sum(w * mag2))

    totals = np.sqrt(np.sum(v_norms ** 2, axis=0))
    amplification = 0.0 if totals[0] == 0.0 else float(totals.max() / totals[0])
    epsilons, margins = _search_epsilons(spec)
    return UniquenessProbeReport(times, v_norms, grad_e, cross_e,
                                 epsilons, margins, amplification)
