import math

import numpy as np
import pytest

from crossdiff.fv import SolverFailure
from crossdiff.model import CrossTensor, Field, Grid, InvalidParameterError, ModelSpec
from crossdiff.solver import (StepperConfig, _assemble_step, advance_step,
                              convergence_study, manufactured_forcing,
                              mass_balance_residual, run)

from conftest import coupled_spec_2d, product_sine

ISO = CrossTensor.isotropic


def heat_spec_1d(nx=64, initial=None, dirichlet=0.0):
    return ModelSpec(m=1, delta=[1.0], K=[[ISO(1.0, 1)]], ell=0.0, domain=(1.0,),
                     initial=[initial or (lambda p: np.sin(np.pi * p[:, 0]))],
                     dirichlet=[dirichlet])


# ---------------------------------------------------------------------------
# steady states and decoupling
# ---------------------------------------------------------------------------

def test_constant_state_preserved(grid_12):
    spec = coupled_spec_2d()
    spec.initial = (0.4, 0.4)
    spec.dirichlet = (0.4, 0.4)
    cfg = StepperConfig(dt=1e-2, t_end=5e-2, lin_tol=1e-12)
    result = run(spec, grid_12, cfg)
    assert np.max(np.abs(result.snapshots[-1].values - 0.4)) < 1e-10


def test_zero_level_matches_independent_heat_steps():
    # ell = 0 annihilates the coupling: the block step must agree entrywise
    # with per-species backward-Euler heat steps assembled from scratch
    grid = Grid((8, 8), (1.0, 1.0))
    iso = ISO
    spec = ModelSpec(m=2, delta=[1.0, 0.5], K=[[iso(3.0, 2), iso(2.0, 2)],
                                               [iso(2.0, 2), iso(3.0, 2)]],
                     ell=0.0, domain=(1.0, 1.0),
                     initial=[product_sine(1.0), product_sine(0.6)],
                     dirichlet=[0.0, 0.0])
    dt, steps = 1e-3, 4
    cfg = StepperConfig(dt=dt, t_end=steps * dt, lin_tol=1e-14, snapshot_every=1)
    result = run(spec, grid, cfg)

    # independent dense assembly: ghost Dirichlet two-point fluxes
    n = grid.n_cells
    h = grid.spacing[0]
    vol = grid.cell_volume
    idx = grid.flat_index()

    def dense_heat_matrix(delta):
        a = np.zeros((n, n))
        for i in range(8):
            for j in range(8):
                c = idx[i, j]
                a[c, c] += vol / dt
                for (ni, nj) in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    t = delta * h / h  # face area h, distance h
                    if 0 <= ni < 8 and 0 <= nj < 8:
                        d = idx[ni, nj]
                        a[c, c] += t
                        a[c, d] -= t
                    else:
                        a[c, c] += delta * h / (h / 2.0)
        return a

    pts = grid.cell_centers()
    for sp in range(2):
        u = spec.initial_values(sp, pts)
        a = dense_heat_matrix(spec.delta[sp])
        for _ in range(steps):
            u = np.linalg.solve(a, vol * u / dt)
        assert np.max(np.abs(result.snapshots[-1].values[sp] - u)) < 1e-12


def test_truncated_matches_raw_when_interior(grid_12):
    spec = coupled_spec_2d(ell=10.0)
    cfg = StepperConfig(dt=1e-3, t_end=2e-2, lin_tol=1e-11, snapshot_every=5)
    res_t = run(spec, grid_12, cfg)
    assert res_t.minmax[:, :, 2].max() < spec.ell
    cfg_raw = StepperConfig(dt=1e-3, t_end=2e-2, lin_tol=1e-11, snapshot_every=5,
                            coefficient_mode="raw")
    res_r = run(spec, grid_12, cfg_raw)
    diff = max(np.max(np.abs(a.values - b.values))
               for a, b in zip(res_t.snapshots, res_r.snapshots))
    assert diff <= 10 * cfg.lin_tol


# ---------------------------------------------------------------------------
# oracle and convergence
# ---------------------------------------------------------------------------

def test_heat_oracle_error_bound():
    grid = Grid((64,), (1.0,))
    cfg = StepperConfig(dt=1e-4, t_end=0.01, lin_tol=1e-12, snapshot_every=100)
    result = run(heat_spec_1d(), grid, cfg)
    x = grid.cell_centers()[:, 0]
    exact = math.exp(-math.pi ** 2 * 0.01) * np.sin(np.pi * x)
    err = np.max(np.abs(result.snapshots[-1].values[0] - exact))
    h = grid.spacing[0]
    assert err <= 5.0 * (h ** 2 + cfg.dt)


def heat_exact(t, pts):
    return (np.exp(-np.pi ** 2 * t) * np.sin(np.pi * pts[:, 0]))[None, :]


def test_heat_limit_convergence_orders():
    grids = [Grid((n,), (1.0,)) for n in (8, 16, 32, 64)]
    dts = [2e-3 / 4 ** k for k in range(4)]
    rows = convergence_study(lambda g: heat_spec_1d(), heat_exact, grids, dts,
                             t_end=0.01, manufacture=False, lin_tol=1e-12)
    for row in rows[1:]:
        assert row["order_inf"] >= 1.8
        assert row["order_l2"] >= 1.8


def test_heat_temporal_order():
    grids = [Grid((256,), (1.0,))] * 3
    dts = [1e-3, 5e-4, 2.5e-4]
    rows = convergence_study(lambda g: heat_spec_1d(), heat_exact, grids, dts,
                             t_end=0.01, manufacture=False, lin_tol=1e-12)
    for row in rows[1:]:
        assert row["order_inf"] >= 0.9


def _mms_factory(grid):
    return ModelSpec(m=2, delta=[1.0, 0.8],
                     K=[[ISO(1.0, 2), ISO(0.5, 2)], [ISO(0.5, 2), ISO(1.0, 2)]],
                     ell=10.0, domain=(1.0, 1.0), initial=[1.0, 1.2],
                     dirichlet=[1.0, 1.2])


def _mms_exact(t, pts):
    s = np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])
    return np.stack([1.0 + 0.7 * t * s, 1.2 - 0.5 * t * s])


def test_manufactured_coupled_spatial_orders():
    grids = [Grid((n, n), (1.0, 1.0)) for n in (8, 16, 32)]
    dts = [5e-3 / 4 ** k for k in range(3)]
    rows = convergence_study(_mms_factory, _mms_exact, grids, dts, t_end=0.02,
                             cross_weighting="centered")
    for row in rows[1:]:
        assert 1.8 <= row["order_inf"] <= 2.2
        assert 1.8 <= row["order_l2"] <= 2.2


def test_manufactured_coupled_temporal_orders():
    grids = [Grid((32, 32), (1.0, 1.0))] * 3
    dts = [4e-3, 2e-3, 1e-3]
    rows = convergence_study(_mms_factory, _mms_exact, grids, dts, t_end=0.02,
                             cross_weighting="centered")
    for row in rows[1:]:
        assert 0.9 <= row["order_inf"] <= 1.1


def test_manufactured_full_tensor_orders():
    # off-diagonal tensor entries exercise the explicit tangential fluxes
    full = CrossTensor(((0.6, 0.2), (0.2, 0.6)))

    def factory(_grid):
        return ModelSpec(m=2, delta=[1.0, 0.8],
                         K=[[ISO(1.0, 2), full], [full, ISO(1.0, 2)]],
                         ell=10.0, domain=(1.0, 1.0), initial=[1.0, 1.2],
                         dirichlet=[1.0, 1.2])

    grids = [Grid((n, n), (1.0, 1.0)) for n in (8, 16)]
    dts = [5e-3, 5e-3 / 4.0]
    rows = convergence_study(factory, _mms_exact, grids, dts, t_end=0.02,
                             cross_weighting="centered")
    assert 1.8 <= rows[1]["order_inf"] <= 2.2


def test_degenerate_refinement_guard():
    grids = [Grid((16,), (1.0,))] * 2
    dts = [1e-3, 1e-3]
    rows = convergence_study(lambda g: heat_spec_1d(), heat_exact, grids, dts,
                             t_end=5e-3, manufacture=False)
    assert rows[1]["order_inf"] == 0.0 and rows[1]["order_l2"] == 0.0


def test_manufactured_forcing_matches_analytic_heat():
    # for the pure heat exact solution the forcing must vanish
    spec = heat_spec_1d()
    q = manufactured_forcing(heat_exact, spec, 0)
    pts = np.linspace(0.05, 0.95, 7)[:, None]
    vals = q(0.37, pts)
    assert np.max(np.abs(vals)) < 1e-7


# ---------------------------------------------------------------------------
# positivity and block structure
# ---------------------------------------------------------------------------

def test_positivity_small_run(grid_12):
    spec = coupled_spec_2d(ell=1.0)
    cfg = StepperConfig(dt=1e-3, t_end=0.03)
    result = run(spec, grid_12, cfg)
    assert result.minmax[:, :, 1].min() >= -1e-10


def test_species_diffusion_blocks_spd(grid_12):
    spec = coupled_spec_2d(ell=1.0, k_offdiag=0.5)
    pts = grid_12.cell_centers()
    u = np.stack([spec.initial_values(i, pts) for i in range(2)])
    cfg = StepperConfig(dt=1e-3, t_end=1e-3)
    a, _, _ = _assemble_step(spec, grid_12, u, u, 0.0, 1e-3, cfg)
    n = grid_12.n_cells
    vol = grid_12.cell_volume
    rng = np.random.default_rng(11)
    for sp in range(2):
        block = a[sp * n:(sp + 1) * n, sp * n:(sp + 1) * n].toarray()
        diffusion = block - np.eye(n) * vol / cfg.dt
        assert np.max(np.abs(diffusion - diffusion.T)) < 1e-12
        for _ in range(25):
            x = rng.normal(size=n)
            assert x @ diffusion @ x > 0.0


# ---------------------------------------------------------------------------
# mass balance
# ---------------------------------------------------------------------------

def test_mass_balance_constant_state(grid_12):
    spec = coupled_spec_2d()
    spec.initial = (0.4, 0.4)
    spec.dirichlet = (0.4, 0.4)
    cfg = StepperConfig(dt=1e-2, t_end=5e-2, lin_tol=1e-12)
    result = run(spec, grid_12, cfg)
    mb = mass_balance_residual(result, spec, grid_12)
    assert mb.ok


def test_mass_balance_any_converged_run(grid_12):
    spec = coupled_spec_2d(ell=1.0)
    cfg = StepperConfig(dt=1e-3, t_end=0.02, lin_tol=1e-11)
    result = run(spec, grid_12, cfg)
    mb = mass_balance_residual(result, spec, grid_12)
    assert mb.ok
    assert mb.max_residual < 1e-8


def test_point_source_budget():
    # interior unit-rate source: mass grows by dt per step minus the outflow,
    # with the boundary flux recomputed independently from the snapshots
    grid = Grid((16,), (1.0,))
    spec = heat_spec_1d()
    pts = grid.cell_centers()
    cell = int(np.argmin(np.abs(pts[:, 0] - 0.5)))
    density = np.zeros(grid.n_cells)
    density[cell] = 1.0 / grid.cell_volume
    spec.sources = (lambda t, p, u: density,)
    spec.initial = (lambda p: np.sin(np.pi * p[:, 0]),)
    cfg = StepperConfig(dt=1e-3, t_end=1e-2, lin_tol=1e-12, snapshot_every=1)
    result = run(spec, grid, cfg)
    mb = mass_balance_residual(result, spec, grid)
    assert mb.ok
    assert np.allclose(result.source_integral[0], 1.0, atol=1e-12)

    h = grid.spacing[0]
    for k in range(result.n_steps):
        u_new = result.snapshots[k + 1].values[0]
        flux = (0.0 - u_new[0]) / (h / 2.0) + (0.0 - u_new[-1]) / (h / 2.0)
        assert flux == pytest.approx(result.boundary_flux[0, k], abs=1e-9)
        dm = result.mass[0, k + 1] - result.mass[0, k]
        assert dm == pytest.approx(cfg.dt * (1.0 + flux), abs=1e-10)


# ---------------------------------------------------------------------------
# stepping mechanics and failure modes
# ---------------------------------------------------------------------------

def test_zero_horizon_returns_initial_only(grid_12):
    spec = coupled_spec_2d()
    result = run(spec, grid_12, StepperConfig(dt=1e-3, t_end=0.0))
    assert len(result.snapshots) == 1
    assert result.snapshots[0].time == 0.0


def test_advance_step_validates(grid_12):
    spec = coupled_spec_2d()
    spec.delta = (0.0, 1.0)
    state = Field(np.zeros((2, grid_12.n_cells)), 0.0)
    with pytest.raises(InvalidParameterError):
        advance_step(state, spec, grid_12, StepperConfig(dt=1e-3, t_end=1e-3))


def test_advance_step_moves_time(grid_12):
    spec = coupled_spec_2d()
    pts = grid_12.cell_centers()
    state = Field(np.stack([spec.initial_values(i, pts) for i in range(2)]), 0.0)
    new = advance_step(state, spec, grid_12, StepperConfig(dt=1e-3, t_end=1e-3))
    assert new.time == pytest.approx(1e-3)
    assert new.values.shape == state.values.shape


def test_solver_failure_carries_partialresult():
    grid = Grid((32, 32), (1.0, 1.0))
    spec = coupled_spec_2d()
    spec.initial = (product_sine(1.0), product_sine(0.8))
    cfg = StepperConfig(dt=1e6, t_end=2e6, lin_tol=1e-14, lin_max=1)
    with pytest.raises(SolverFailure) as exc_info:
        run(spec, grid, cfg)
    exc = exc_info.value
    assert exc.time == pytest.approx(1e6)
    assert math.isfinite(exc.residual)
    assert exc.partial is not None
    assert len(exc.partial.times) >= 1


def test_picard_nonconvergence_recorded(grid_12):
    spec = coupled_spec_2d(ell=1.0)
    cfg = StepperConfig(dt=5e-2, t_end=5e-2, picard_tol=1e-14, picard_max=2)
    result = run(spec, grid_12, cfg)
    assert result.solver_stats[0]["picard_converged"] is False
    assert result.solver_stats[0]["picard_sweeps"] == 2


def test_snapshot_times_strictly_increasing(grid_12):
    spec = coupled_spec_2d()
    result = run(spec, grid_12, StepperConfig(dt=1e-3, t_end=1e-2, snapshot_every=3))
    times = [s.time for s in result.snapshots]
    assert times == sorted(set(times))
    assert times[-1] == pytest.approx(1e-2)
