"""Equi-spaced time grids and orthonormal spline bases evaluated on them.

The basis matrix has orthonormal columns by construction (thin QR of the
raw B-spline design matrix), which is what makes the solver's inner
least-squares step exact.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from ._util import fmt_float

__all__ = ["TimeGrid", "Basis", "make_grid", "make_spline_basis", "write_basis_csv"]


@dataclass(frozen=True)
class TimeGrid:
    """T equi-spaced time points covering [t_min, t_max]."""

    t_min: float
    t_max: float
    points: np.ndarray

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def spacing(self) -> float:
        return (self.t_max - self.t_min) / (self.n_points - 1)


@dataclass(frozen=True)
class Basis:
    """Spline basis evaluated on a grid; `values` is T x K with orthonormal columns."""

    grid: TimeGrid
    values: np.ndarray

    @property
    def n_funcs(self) -> int:
        return self.values.shape[1]


def make_grid(t_min: float, t_max: float, n_points: int) -> TimeGrid:
    """Build a grid of `n_points` equi-spaced times from t_min to t_max inclusive.

    Raises
    ------
    ValueError
        If t_min >= t_max or n_points < 2.
    """
    if not t_min < t_max:
        raise ValueError(f"invalid range: t_min={t_min} must be < t_max={t_max}")
    if n_points < 2:
        raise ValueError(f"invalid size: need at least 2 grid points, got {n_points}")
    points = np.linspace(float(t_min), float(t_max), int(n_points))
    return TimeGrid(t_min=float(t_min), t_max=float(t_max), points=points)


def _raw_spline_design(grid: TimeGrid, k: int) -> np.ndarray:
    """Evaluate k clamped B-spline functions with uniform interior knots on the grid.

    Cubic (degree 3) whenever k allows it; for k < 4 the degree drops to
    k - 1 so that exactly k basis functions exist.
    """
    degree = min(3, k - 1)
    n_interior = k - degree - 1
    interior = np.linspace(grid.t_min, grid.t_max, n_interior + 2)[1:-1]
    knots = np.concatenate(
        [np.full(degree + 1, grid.t_min), interior, np.full(degree + 1, grid.t_max)]
    )
    design = BSpline.design_matrix(grid.points, knots, degree, extrapolate=False)
    return design.toarray()


def _fix_column_signs(q: np.ndarray) -> np.ndarray:
    """Flip column signs so each column's first non-negligible entry is positive."""
    q = q.copy()
    for j in range(q.shape[1]):
        col = q[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-10 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            q[:, j] = -col
    return q


def make_spline_basis(grid: TimeGrid, k: int) -> Basis:
    """Build a k-column orthonormal spline basis on the grid.

    Clamped B-splines with uniformly spaced interior knots are evaluated on
    the grid points, then the columns are orthonormalized by thin QR.  The
    column span is preserved; signs are fixed so the result is deterministic.

    Raises
    ------
    ValueError
        If k is outside [2, T], or the evaluated spline columns are rank
        deficient on this grid.
    """
    if k < 2 or k > grid.n_points:
        raise ValueError(f"need 2 <= k <= T={grid.n_points}, got k={k}")
    raw = _raw_spline_design(grid, k)
    q, r = np.linalg.qr(raw)
    diag = np.abs(np.diag(r))
    if np.any(diag < 1e-12 * diag.max()):
        raise ValueError(
            f"rank deficiency: spline design on {grid.n_points} points "
            f"does not have full column rank {k}"
        )
    return Basis(grid=grid, values=_fix_column_signs(q))


def write_basis_csv(basis: Basis, path) -> None:
    """Write the T x K basis matrix as plain CSV (one grid point per row)."""
    with open(path, "w") as fh:
        for row in basis.values:
            fh.write(",".join(fmt_float(v) for v in row) + "\n")
