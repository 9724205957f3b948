"""Problem data for truncated cross-diffusion systems on structured grids.

Defines the coupled two-species (or m-species) parabolic system in flux form,

    d/dt u_i - div( delta_i grad u_i + clamp(u_i) * sum_j K_ij grad u_j ) = Q_i,

where clamp is the pointwise truncation of the coupling coefficient to
[0, ell].  The module owns the immutable problem-data containers (tensors,
grid, fields, full spec), the truncation operator, ellipticity bounds of the
coupling tensors and pointwise flux evaluation.  Everything here is pure and
side-effect free; discretization lives in :mod:`crossdiff.solver`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class InvalidParameterError(ValueError):
    """Raised when an operation receives out-of-contract parameters."""


class EllipticityError(ValueError):
    """Raised when a coupling tensor is not uniformly elliptic."""


# ---------------------------------------------------------------------------
# truncation
# ---------------------------------------------------------------------------

def truncate(v: float, ell: float) -> float:
    """Clamp ``v`` to the interval [0, ell].

    Requires ``ell > 0``; the solver-internal :func:`clamp` additionally
    accepts ``ell == 0`` (fully decoupled system) and ``ell == inf``.
    """
    if not ell > 0.0:
        raise InvalidParameterError(f"truncation level must be positive, got {ell}")
    return clamp(v, ell)


def clamp(v, ell):
    """Truncation of the coupling coefficient, vectorized, ell >= 0 allowed."""
    if ell < 0.0:
        raise InvalidParameterError(f"truncation level must be nonnegative, got {ell}")
    if math.isinf(ell):
        return np.maximum(v, 0.0)
    return np.minimum(np.maximum(v, 0.0), ell)


# ---------------------------------------------------------------------------
# coupling tensors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossTensor:
    """Constant N x N coupling tensor (N = 1 or 2).

    Construction only checks the shape; ellipticity is established by
    :func:`ellipticity_bounds` so that malformed tensors can be *reported*
    by :func:`validate_spec` instead of aborting.
    """

    entries: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] not in (1, 2):
            raise InvalidParameterError(f"tensor must be 1x1 or 2x2, got shape {a.shape}")
        object.__setattr__(self, "entries", tuple(tuple(float(x) for x in row) for row in a))

    @property
    def ndim(self) -> int:
        return len(self.entries)

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=float)

    @staticmethod
    def isotropic(value: float, ndim: int) -> "CrossTensor":
        return CrossTensor(tuple(tuple(float(value) if i == j else 0.0 for j in range(ndim))
                                 for i in range(ndim)))

    def is_symmetric(self, tol: float = 0.0) -> bool:
        a = self.matrix
        return bool(np.all(np.abs(a - a.T) <= tol))


def ellipticity_bounds(tensor: CrossTensor | np.ndarray) -> tuple[float, float]:
    """Extreme values (kmin, kmax) of the quadratic form xi . (K xi) on |xi| = 1.

    Equal to the extreme eigenvalues of the symmetric part (K + K^T)/2.
    Raises :class:`EllipticityError` when kmin <= 0.
    """
    a = tensor.matrix if isinstance(tensor, CrossTensor) else np.asarray(tensor, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] not in (1, 2):
        raise InvalidParameterError(f"tensor must be 1x1 or 2x2, got shape {a.shape}")
    sym = 0.5 * (a + a.T)
    eig = np.linalg.eigvalsh(sym)
    kmin, kmax = float(eig[0]), float(eig[-1])
    if kmin <= 0.0:
        raise EllipticityError(f"tensor is not uniformly elliptic (kmin = {kmin})")
    return kmin, kmax


# ---------------------------------------------------------------------------
# grid and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid over the box [0, extents[0]] x ... (1D or 2D)."""

    dims: tuple[int, ...]
    extents: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        extents = tuple(float(e) for e in self.extents)
        if len(dims) not in (1, 2) or len(dims) != len(extents):
            raise InvalidParameterError(f"grid must be 1D or 2D, got dims={dims}, extents={extents}")
        if any(n < 1 for n in dims) or any(e <= 0.0 for e in extents):
            raise InvalidParameterError("grid dims must be >= 1 and extents positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "extents", extents)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / n for e, n in zip(self.extents, self.dims))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    @property
    def measure(self) -> float:
        return float(np.prod(self.extents))

    def axis_centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return (np.arange(self.dims[axis]) + 0.5) * h

    def cell_centers(self) -> np.ndarray:
        """Cell-center coordinates, shape (n_cells, ndim), C-order over dims."""
        axes = [self.axis_centers(d) for d in range(self.ndim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def flat_index(self) -> np.ndarray:
        return np.arange(self.n_cells).reshape(self.dims)


@dataclass
class Field:
    """Per-species cell-averaged values at one time (values shape (m, n_cells))."""

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "Field":
        return Field(self.values.copy(), self.time)

    def species_min(self) -> np.ndarray:
        return self.values.min(axis=1)

    def species_max(self) -> np.ndarray:
        return self.values.max(axis=1)


# ---------------------------------------------------------------------------
# full problem specification
# ---------------------------------------------------------------------------

InitialData = Callable[[np.ndarray], np.ndarray] | np.ndarray | float
BoundaryData = Callable[[float, np.ndarray], np.ndarray] | float
SourceData = Callable[[float, np.ndarray, np.ndarray], np.ndarray] | float | None


@dataclass
class ModelSpec:
    """Complete problem data for the truncated cross-diffusion system.

    ``K[i][j]`` is the tensor multiplying grad u_j in the species-i flux.
    ``ell`` is the truncation level of the coupling coefficient; ``ell = 0``
    decouples the system and ``ell = inf`` clips at zero only.  Sources are
    callables ``Q_i(t, points, u)`` evaluated cell-wise at the previous time
    level, Dirichlet traces are ``g_i(t, points)`` and initial data either
    callables ``f_i(points)``, plain per-cell arrays or scalars.
    """

    m: int
    delta: Sequence[float]
    K: Sequence[Sequence[CrossTensor]]
    ell: float
    domain: tuple[float, ...]
    initial: Sequence[InitialData]
    dirichlet: Sequence[BoundaryData]
    sources: Sequence[SourceData] = field(default_factory=list)

    def __post_init__(self):
        self.m = int(self.m)
        if self.m < 1:
            raise InvalidParameterError("species count must be >= 1")
        self.delta = tuple(float(d) for d in self.delta)
        self.domain = tuple(float(e) for e in self.domain)
        if len(self.delta) != self.m:
            raise InvalidParameterError("delta must have one entry per species")
        if len(self.K) != self.m or any(len(row) != self.m for row in self.K):
            raise InvalidParameterError("K must be an m x m array of tensors")
        ndim = len(self.domain)
        for row in self.K:
            for t in row:
                if t.ndim != ndim:
                    raise InvalidParameterError("tensor dimension must match the domain dimension")
        if float(self.ell) < 0.0:
            raise InvalidParameterError("truncation level must be nonnegative")
        self.ell = float(self.ell)
        if not self.sources:
            self.sources = tuple(None for _ in range(self.m))
        if len(self.initial) != self.m or len(self.dirichlet) != self.m or len(self.sources) != self.m:
            raise InvalidParameterError("initial, dirichlet and sources must have one entry per species")

    @property
    def ndim(self) -> int:
        return len(self.domain)

    def initial_values(self, i: int, points: np.ndarray) -> np.ndarray:
        f = self.initial[i]
        if callable(f):
            return np.broadcast_to(np.asarray(f(points), dtype=float), (points.shape[0],)).copy()
        a = np.asarray(f, dtype=float)
        if a.ndim == 0:
            return np.full(points.shape[0], float(a))
        if a.shape != (points.shape[0],):
            raise InvalidParameterError(
                f"initial array for species {i} has length {a.shape}, expected {points.shape[0]}")
        return a.copy()

    def dirichlet_values(self, i: int, t: float, points: np.ndarray) -> np.ndarray:
        g = self.dirichlet[i]
        if callable(g):
            return np.broadcast_to(np.asarray(g(t, points), dtype=float), (points.shape[0],)).copy()
        return np.full(points.shape[0], float(g))

    def source_values(self, i: int, t: float, points: np.ndarray, u: np.ndarray) -> np.ndarray:
        q = self.sources[i]
        if q is None:
            return np.zeros(points.shape[0])
        if callable(q):
            return np.broadcast_to(np.asarray(q(t, points, u), dtype=float), (points.shape[0],)).copy()
        return np.full(points.shape[0], float(q))


def species_flux(i: int, grads: np.ndarray, u_i: float, spec: ModelSpec) -> np.ndarray:
    """Pointwise flux of species i: delta_i grad u_i + clamp(u_i) sum_j K_ij grad u_j."""
    g = np.atleast_2d(np.asarray(grads, dtype=float))
    if g.shape[0] != spec.m:
        raise InvalidParameterError(f"grads must have {spec.m} rows, got {g.shape[0]}")
    out = spec.delta[i] * g[i].astype(float)
    coeff = float(clamp(u_i, spec.ell))
    for j in range(spec.m):
        out = out + coeff * (spec.K[i][j].matrix @ g[j])
    return out


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

COMPATIBILITY_TOL = 1e-10


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str) -> None:
        self.violations.append(Violation(code, message))

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def _boundary_face_points(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Boundary face centers and the flat index of the adjacent cell."""
    idx = grid.flat_index()
    pts, cells = [], []
    centers = [grid.axis_centers(d) for d in range(grid.ndim)]
    for axis in range(grid.ndim):
        for side in (0, 1):
            coord = 0.0 if side == 0 else grid.extents[axis]
            if grid.ndim == 1:
                cell_sel = idx[0 if side == 0 else -1]
                pts.append(np.array([[coord]]))
                cells.append(np.array([cell_sel]))
            else:
                other = 1 - axis
                sel = (idx[0, :] if side == 0 else idx[-1, :]) if axis == 0 else \
                      (idx[:, 0] if side == 0 else idx[:, -1])
                p = np.empty((grid.dims[other], 2))
                p[:, axis] = coord
                p[:, other] = centers[other]
                pts.append(p)
                cells.append(np.asarray(sel))
    return np.concatenate(pts, axis=0), np.concatenate(cells)


def validate_spec(spec: ModelSpec, grid: Grid, tol: float = COMPATIBILITY_TOL) -> ValidationReport:
    """Collect every spec violation; never raises.

    Checks positive diffusivities, ellipticity of all coupling tensors,
    nonnegative boundary and initial data, domain/grid agreement, and the
    initial/boundary compatibility at t = 0 on boundary faces (for callable
    initial data the trace is evaluated at the face center, for array data
    the adjacent boundary-cell value stands in).
    """
    report = ValidationReport()
    for i, d in enumerate(spec.delta):
        if not d > 0.0:
            report.add("degenerate-diffusivity", f"delta_{i + 1} = {d} is not positive")
    for i in range(spec.m):
        for j in range(spec.m):
            try:
                ellipticity_bounds(spec.K[i][j])
            except EllipticityError as exc:
                report.add("non-elliptic-tensor", f"K[{i + 1}][{j + 1}]: {exc}")
    if len(spec.domain) != grid.ndim or any(
            abs(a - b) > 1e-12 * max(1.0, abs(b)) for a, b in zip(spec.domain, grid.extents)):
        report.add("domain-mismatch",
                   f"spec domain {spec.domain} does not match grid extents {grid.extents}")
        return report

    points = grid.cell_centers()
    face_pts, face_cells = _boundary_face_points(grid)
    for i in range(spec.m):
        u0 = spec.initial_values(i, points)
        if np.any(u0 < -tol):
            report.add("negative-initial",
                       f"initial data of species {i + 1} dips to {float(u0.min())}")
        gb = spec.dirichlet_values(i, 0.0, face_pts)
        if np.any(gb < -tol):
            report.add("negative-dirichlet",
                       f"boundary data of species {i + 1} dips to {float(gb.min())}")
        if callable(spec.initial[i]):
            u0_trace = spec.initial_values(i, face_pts)
        else:
            u0_trace = u0[face_cells]
        gap = np.abs(u0_trace - gb)
        if np.any(gap > tol):
            k = int(np.argmax(gap))
            report.add("compatibility",
                       f"species {i + 1}: initial/boundary mismatch {float(gap[k])} at {face_pts[k]}")
    return report
