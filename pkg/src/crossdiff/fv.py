"""Structured finite-volume machinery shared by the generic and aquifer solvers.

Cell-centered two-point flux approximation on uniform 1D/2D grids.  For a
face between cells L and R along axis d the discrete flux (oriented so that
a positive value feeds cell L)

    F = g * (u_R - u_L) / h_d

carries a per-face scalar coefficient ``g`` that already bundles diffusivity,
truncated coupling coefficient and tensor entry.  Dirichlet boundaries are
eliminated through ghost values at half-cell distance; ``closed`` boundaries
simply carry no flux.  Off-diagonal tensor entries contribute tangential
face gradients that are treated explicitly by the callers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .model import Grid


class SolverFailure(RuntimeError):
    """Linear solver did not reach its tolerance.

    ``time`` is the failing step's target time; run loops attach the
    trajectory completed so far as ``partial``.
    """

    def __init__(self, message: str, residual: float = float("nan"), time: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.time = time
        self.partial = None


@dataclass(frozen=True)
class FaceTable:
    """Interior and boundary face connectivity of a grid.

    Interior faces are stored per axis as flat cell indices (left, right);
    boundary faces as (cell, axis, side, face-center coordinates) where
    side 0 is the low end of the axis.
    """

    grid: Grid
    int_left: tuple[np.ndarray, ...]
    int_right: tuple[np.ndarray, ...]
    bnd_cell: np.ndarray
    bnd_axis: np.ndarray
    bnd_side: np.ndarray
    bnd_points: np.ndarray

    def face_area(self, axis: int) -> float:
        return self.grid.cell_volume / self.grid.spacing[axis]

    @property
    def n_interior(self) -> int:
        return sum(len(a) for a in self.int_left)

    @property
    def n_boundary(self) -> int:
        return len(self.bnd_cell)


@lru_cache(maxsize=None)
def face_table(grid: Grid) -> FaceTable:
    idx = grid.flat_index()
    int_left, int_right = [], []
    for axis in range(grid.ndim):
        sl_l = [slice(None)] * grid.ndim
        sl_r = [slice(None)] * grid.ndim
        sl_l[axis] = slice(None, -1)
        sl_r[axis] = slice(1, None)
        int_left.append(idx[tuple(sl_l)].ravel())
        int_right.append(idx[tuple(sl_r)].ravel())

    cells, axes, sides, pts = [], [], [], []
    centers = [grid.axis_centers(d) for d in range(grid.ndim)]
    for axis in range(grid.ndim):
        for side in (0, 1):
            sl = [slice(None)] * grid.ndim
            sl[axis] = 0 if side == 0 else -1
            sel = np.atleast_1d(idx[tuple(sl)]).ravel()
            coord = 0.0 if side == 0 else grid.extents[axis]
            p = np.empty((len(sel), grid.ndim))
            p[:, axis] = coord
            if grid.ndim == 2:
                p[:, 1 - axis] = centers[1 - axis]
            cells.append(sel)
            axes.append(np.full(len(sel), axis, dtype=int))
            sides.append(np.full(len(sel), side, dtype=int))
            pts.append(p)
    return FaceTable(grid,
                     tuple(int_left), tuple(int_right),
                     np.concatenate(cells), np.concatenate(axes),
                     np.concatenate(sides), np.concatenate(pts, axis=0))


# ---------------------------------------------------------------------------
# face values and gradients
# ---------------------------------------------------------------------------

def interior_gradient(ft: FaceTable, u: np.ndarray, axis: int) -> np.ndarray:
    """(u_R - u_L) / h on the interior faces of one axis."""
    h = ft.grid.spacing[axis]
    return (u[ft.int_right[axis]] - u[ft.int_left[axis]]) / h


def boundary_gradient(ft: FaceTable, u: np.ndarray, traces: np.ndarray | None) -> np.ndarray:
    """Outward-oriented gradient (trace - u_cell) / (h/2) on boundary faces.

    Positive values mean the trace exceeds the adjacent cell value; closed
    boundaries (traces None) have zero gradient.
    """
    if traces is None:
        return np.zeros(ft.n_boundary)
    half = np.array([ft.grid.spacing[a] / 2.0 for a in ft.bnd_axis])
    return (traces - u[ft.bnd_cell]) / half


def upwind_face_value(w_left, w_right, driver) -> np.ndarray:
    """Donor value selected by the sign of the driving face gradient.

    ``driver > 0`` feeds the left cell from the right one, so the donor is
    the right side; ties average.
    """
    w_left = np.asarray(w_left, dtype=float)
    w_right = np.asarray(w_right, dtype=float)
    driver = np.asarray(driver, dtype=float)
    return np.where(driver > 0.0, w_right,
                    np.where(driver < 0.0, w_left, 0.5 * (w_left + w_right)))


def centered_face_value(w_left, w_right, driver=None) -> np.ndarray:
    return 0.5 * (np.asarray(w_left, dtype=float) + np.asarray(w_right, dtype=float))


def cell_gradient(ft: FaceTable, u: np.ndarray, axis: int,
                  traces: np.ndarray | None) -> np.ndarray:
    """Cell-centered gradient along one axis, averaged from face differences.

    Boundary faces use the Dirichlet trace at half-cell distance when
    available and are skipped for closed boundaries (one-sided average).
    """
    grid = ft.grid
    n = grid.n_cells
    acc = np.zeros(n)
    cnt = np.zeros(n)
    g_int = interior_gradient(ft, u, axis)
    np.add.at(acc, ft.int_left[axis], g_int)
    np.add.at(acc, ft.int_right[axis], g_int)
    np.add.at(cnt, ft.int_left[axis], 1.0)
    np.add.at(cnt, ft.int_right[axis], 1.0)
    if traces is not None:
        sel = ft.bnd_axis == axis
        cells = ft.bnd_cell[sel]
        sides = ft.bnd_side[sel]
        half = grid.spacing[axis] / 2.0
        # oriented along +axis: low side has the ghost on the left
        g_b = np.where(sides == 0,
                       (u[cells] - traces[sel]) / half,
                       (traces[sel] - u[cells]) / half)
        np.add.at(acc, cells, g_b)
        np.add.at(cnt, cells, 1.0)
    cnt[cnt == 0.0] = 1.0
    return acc / cnt


# ---------------------------------------------------------------------------
# sparse system assembly
# ---------------------------------------------------------------------------

class SystemBuilder:
    """COO accumulator for the block system over m species on one grid."""

    def __init__(self, grid: Grid, m: int):
        self.grid = grid
        self.ft = face_table(grid)
        self.m = m
        self.n = grid.n_cells
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.rhs = np.zeros(m * self.n)

    def _block(self, species: int, idx: np.ndarray) -> np.ndarray:
        return species * self.n + idx

    def _push(self, r: np.ndarray, c: np.ndarray, v: np.ndarray) -> None:
        self.rows.append(np.asarray(r))
        self.cols.append(np.asarray(c))
        self.vals.append(np.asarray(v, dtype=float))

    def add_mass(self, species: int, coeff: float) -> None:
        """coeff * u on the diagonal of one species block (volume-scaled)."""
        idx = np.arange(self.n)
        self._push(self._block(species, idx), self._block(species, idx),
                   np.full(self.n, coeff * self.grid.cell_volume))

    def add_rhs(self, species: int, values: np.ndarray) -> None:
        self.rhs[species * self.n:(species + 1) * self.n] += values

    def add_tpfa(self, row_sp: int, col_sp: int,
                 g_int: dict[int, np.ndarray],
                 g_bnd: np.ndarray | None,
                 traces: np.ndarray | None) -> None:
        """Two-point term -div(g grad u_colsp) added to the row-species residual.

        ``g_int[axis]`` holds per-interior-face coefficients; ``g_bnd`` the
        per-boundary-face ones (ignored for closed boundaries, traces None).
        """
        ft = self.ft
        for axis, g in g_int.items():
            t = g * ft.face_area(axis) / self.grid.spacing[axis]
            L, R = ft.int_left[axis], ft.int_right[axis]
            rL, rR = self._block(row_sp, L), self._block(row_sp, R)
            cL, cR = self._block(col_sp, L), self._block(col_sp, R)
            self._push(rL, cL, t)
            self._push(rL, cR, -t)
            self._push(rR, cR, t)
            self._push(rR, cL, -t)
        if traces is not None and g_bnd is not None:
            half = np.array([self.grid.spacing[a] / 2.0 for a in ft.bnd_axis])
            area = np.array([ft.face_area(a) for a in ft.bnd_axis])
            t = g_bnd * area / half
            rC = self._block(row_sp, ft.bnd_cell)
            cC = self._block(col_sp, ft.bnd_cell)
            self._push(rC, cC, t)
            np.add.at(self.rhs, rC, t * traces)

    def add_explicit_flux(self, row_sp: int,
                          f_int: dict[int, np.ndarray],
                          f_bnd: np.ndarray | None) -> None:
        """Add a fully evaluated face flux (per unit area) to the RHS."""
        ft = self.ft
        for axis, f in f_int.items():
            fa = f * ft.face_area(axis)
            np.add.at(self.rhs, self._block(row_sp, ft.int_left[axis]), fa)
            np.add.at(self.rhs, self._block(row_sp, ft.int_right[axis]), -fa)
        if f_bnd is not None:
            area = np.array([ft.face_area(a) for a in ft.bnd_axis])
            np.add.at(self.rhs, self._block(row_sp, ft.bnd_cell), f_bnd * area)

    def matrix(self) -> sparse.csr_matrix:
        n = self.m * self.n
        a = sparse.coo_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(n, n))
        return a.tocsr()


def boundary_flux_integral(ft: FaceTable, g_bnd: np.ndarray,
                           u: np.ndarray, traces: np.ndarray | None) -> float:
    """Total boundary inflow sum_f g * (trace - u_cell)/(h/2) * area (closed: 0)."""
    if traces is None:
        return 0.0
    half = np.array([ft.grid.spacing[a] / 2.0 for a in ft.bnd_axis])
    area = np.array([ft.face_area(a) for a in ft.bnd_axis])
    return float(np.sum(g_bnd * (traces - u[ft.bnd_cell]) / half * area))


# ---------------------------------------------------------------------------
# linear solve
# ---------------------------------------------------------------------------

def solve_sparse(a: sparse.csr_matrix, b: np.ndarray, tol: float, maxiter: int,
                 restart: int = 60, time: float | None = None,
                 x0: np.ndarray | None = None) -> np.ndarray:
    """Restarted GMRES with diagonal preconditioning and a true-residual check.

    The preconditioned stopping test can be optimistic, so the true residual
    is verified and the iteration continued once at a tighter tolerance;
    :class:`SolverFailure` carries the final relative residual.
    """
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    diag = a.diagonal()
    diag = np.where(np.abs(diag) > 1e-300, diag, 1.0)
    precond = sparse.diags(1.0 / diag).tocsr()
    outer = max(1, int(np.ceil(maxiter / restart)))
    x = x0
    rtol = tol
    residual = np.inf
    for _ in range(2):
        x, _info = spla.gmres(a, b, x0=x, rtol=0.5 * rtol, atol=0.0,
                              restart=restart, maxiter=outer, M=precond)
        residual = float(np.linalg.norm(b - a @ x)) / bnorm
        if residual <= tol:
            return x
        rtol = tol * 2e-2
    raise SolverFailure(
        f"linear solver stalled at relative residual {residual:.3e} (tol {tol:.3e})",
        residual=residual, time=time)
