"""Shared 3-d thin-plate-spline warp over a fixed control grid.

The target control points sit on a regular lattice spanning the volume; the
optimization variable is the (n, 3) displacement table delta. Solving

    M a_axis = (delta_axis | 0, 0, 0, 0)

for each axis gives coefficients relative to the identity, so the full
coefficient table is  coef = identity + M^-1 rhs.  At delta = 0 the radial
part is exactly zero and the polynomial part exactly the identity, which
makes the zero-displacement warp bit-exact by construction.

M is the standard interpolation system

    M = [[K, P], [P^T, 0]],   K[i, j] = u(|p_i - p_j|),   P[i] = (1, h_i, w_i, d_i)

with radial kernel u(r) = r^2 * log(r^2) (u(0) = 0). The four appended rows
force the radial coefficients to sum to zero and to have zero cross product
with each coordinate, so the radial part decays and the affine behavior is
carried by the polynomial part alone. M is factorized once per grid (LU,
partial pivoting) and reused across solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import GridError, NumericError
from .volume import Coord, Volume, sample_channel

# constraint rows must hold to this tolerance after every solve
CONSTRAINT_TOL = 1e-8
# relative pivot floor below which the system counts as singular
PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class ControlGrid:
    """A regular (nh, nw, nd) lattice of control points spanning given dims.

    Points sit at the voxel centers linspace(0, dim - 1, n) per axis; the
    flattened order is lexicographic with d fastest, matching array order.
    """

    shape: tuple[int, int, int]
    dims: tuple[int, int, int]

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        dims = tuple(int(n) for n in self.dims)
        if len(shape) != 3 or min(shape) < 2:
            raise GridError(f"grid shape must be 3 entries all >= 2, got {shape}")
        if len(dims) != 3 or min(dims) < 2:
            raise GridError(f"grid dims must be 3 entries all >= 2, got {dims}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "dims", dims)

    @property
    def n(self) -> int:
        nh, nw, nd = self.shape
        return nh * nw * nd

    @property
    def points(self) -> np.ndarray:
        """(n, 3) control-point coordinates in voxel units."""
        axes = [
            np.linspace(0.0, dim - 1.0, num)
            for dim, num in zip(self.dims, self.shape)
        ]
        hh, ww, dd = np.meshgrid(*axes, indexing="ij")
        return np.stack([hh.ravel(), ww.ravel(), dd.ravel()], axis=1)


def kernel_u(r: float) -> float:
    """Radial kernel u(r) = r^2 * log(r^2), with u(0) = 0 exactly."""
    r = float(r)
    if not np.isfinite(r):
        raise ValueError("kernel radius must be finite")
    if r < 0.0:
        raise ValueError(f"kernel radius must be >= 0, got {r}")
    if r == 0.0:
        return 0.0
    r2 = r * r
    return r2 * np.log(r2)


def _u_of_r2(r2: np.ndarray) -> np.ndarray:
    """Vectorized kernel on squared radii; exact zero at r2 == 0."""
    out = np.zeros_like(r2)
    pos = r2 > 0.0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


def _phi_rows(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Basis rows [u(|q - p_i|)..., 1, qh, qw, qd] for query points (m, 3)."""
    diff = query[:, None, :] - points[None, :, :]
    r2 = np.einsum("mnk,mnk->mn", diff, diff)
    phi = np.empty((query.shape[0], points.shape[0] + 4), dtype=np.float64)
    phi[:, : points.shape[0]] = _u_of_r2(r2)
    phi[:, points.shape[0]] = 1.0
    phi[:, points.shape[0] + 1 :] = query
    return phi


@dataclass(frozen=True)
class TpsSystem:
    """Factorized interpolation system for one control grid."""

    grid: ControlGrid
    matrix: np.ndarray
    lu: np.ndarray
    piv: np.ndarray
    cond: float

    @property
    def n(self) -> int:
        return self.grid.n


@dataclass(frozen=True)
class Displacements:
    """(n, 3) voxel-unit displacements of the control points."""

    delta: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.delta, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"delta must have shape (n, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("delta contains non-finite values")
        object.__setattr__(self, "delta", arr)

    @property
    def n(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class TpsCoefficients:
    """Per-axis coefficients: (n, 3) radial plus (4, 3) polynomial.

    Polynomial rows are ordered (constant, h, w, d); column k drives output
    axis k. The radial block satisfies sum-to-zero and zero cross-product
    constraints against the control points (checked by solve_coefficients).
    """

    radial: np.ndarray
    poly: np.ndarray

    def __post_init__(self):
        rad = np.asarray(self.radial, dtype=np.float64)
        pol = np.asarray(self.poly, dtype=np.float64)
        if rad.ndim != 2 or rad.shape[1] != 3:
            raise ValueError(f"radial must have shape (n, 3), got {rad.shape}")
        if pol.shape != (4, 3):
            raise ValueError(f"poly must have shape (4, 3), got {pol.shape}")
        if not (np.isfinite(rad).all() and np.isfinite(pol).all()):
            raise ValueError("coefficients contain non-finite values")
        object.__setattr__(self, "radial", rad)
        object.__setattr__(self, "poly", pol)


def identity_coefficients(n: int) -> TpsCoefficients:
    """The exact do-nothing coefficient table for an n-point grid."""
    poly = np.zeros((4, 3))
    poly[1:, :] = np.eye(3)
    return TpsCoefficients(np.zeros((n, 3)), poly)


def build_system(grid: ControlGrid) -> TpsSystem:
    """Assemble and factorize M for a control grid.

    Raises NumericError when a pivot falls below PIVOT_RTOL * max|M|
    (degenerate point sets); the message carries the condition estimate.
    """
    pts = grid.points
    n = grid.n
    diff = pts[:, None, :] - pts[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    k = _u_of_r2(r2)
    m = np.zeros((n + 4, n + 4), dtype=np.float64)
    m[:n, :n] = k
    m[:n, n] = 1.0
    m[:n, n + 1 :] = pts
    m[n, :n] = 1.0
    m[n + 1 :, :n] = pts.T

    lu, piv = scipy.linalg.lu_factor(m, check_finite=False)
    pivots = np.abs(np.diag(lu))
    floor = PIVOT_RTOL * np.abs(m).max()
    cond = float(np.linalg.cond(m))
    if pivots.min() < floor:
        raise NumericError(
            f"interpolation system is singular: pivot {pivots.min():.3e} below "
            f"{floor:.3e} (cond estimate {cond:.3e})"
        )
    return TpsSystem(grid=grid, matrix=m, lu=lu, piv=piv, cond=cond)


def solve_coefficients(sys: TpsSystem, disp: Displacements) -> TpsCoefficients:
    """Solve for coefficients mapping each control point to p_i + delta_i."""
    if disp.n != sys.n:
        raise ValueError(f"displacements cover {disp.n} points, grid has {sys.n}")
    n = sys.n
    rhs = np.zeros((n + 4, 3), dtype=np.float64)
    rhs[:n] = disp.delta
    x = scipy.linalg.lu_solve((sys.lu, sys.piv), rhs, check_finite=False)
    if not np.isfinite(x).all():
        raise NumericError("coefficient solve produced non-finite values")
    ident = identity_coefficients(n)
    coef = TpsCoefficients(ident.radial + x[:n], ident.poly + x[n:])
    _check_constraints(sys, coef)
    return coef


def _check_constraints(sys: TpsSystem, coef: TpsCoefficients) -> None:
    pts = sys.grid.points
    col_sum = coef.radial.sum(axis=0)
    cross = pts.T @ coef.radial
    worst = max(np.abs(col_sum).max(), np.abs(cross).max())
    if worst > CONSTRAINT_TOL:
        raise NumericError(
            f"radial constraint residual {worst:.3e} exceeds {CONSTRAINT_TOL:.1e} "
            f"(cond estimate {sys.cond:.3e})"
        )


def map_point(sys: TpsSystem, coef: TpsCoefficients, p: Coord) -> np.ndarray:
    """Map one (h, w, d) point through the spline."""
    q = np.asarray(p, dtype=np.float64).reshape(1, 3)
    if not np.isfinite(q).all():
        raise ValueError("point must be finite")
    phi = _phi_rows(sys.grid.points, q)
    full = np.vstack([coef.radial, coef.poly])
    return (phi @ full)[0]


def warp_field(sys: TpsSystem, coef: TpsCoefficients, dims: tuple[int, int, int]) -> np.ndarray:
    """Evaluate the mapped coordinates of every voxel center, as (3, h, w, d).

    Identity coefficients reproduce the lattice bit-exactly: each basis row
    then multiplies a coefficient table whose only nonzero entry per axis is
    the matching unit polynomial term.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be 3 positive ints, got {dims}")
    lattice = _lattice_points(dims)
    full = np.vstack([coef.radial, coef.poly])
    out = np.empty((lattice.shape[0], 3), dtype=np.float64)
    step = 1 << 15
    pts = sys.grid.points
    for lo in range(0, lattice.shape[0], step):
        hi = min(lo + step, lattice.shape[0])
        out[lo:hi] = _phi_rows(pts, lattice[lo:hi]) @ full
    return out.T.reshape((3,) + dims)


def field_basis(sys: TpsSystem, dims: tuple[int, int, int]) -> np.ndarray:
    """Linear map B with warp field = lattice + B @ delta, shape (hwd, n).

    Folding the factorized solve into the basis evaluation once per
    (grid, dims) pair lets fits treat the field as an explicit linear
    function of the displacement table.
    """
    dims = tuple(int(d) for d in dims)
    lattice = _lattice_points(dims)
    pts = sys.grid.points
    n = sys.n
    out = np.empty((lattice.shape[0], n), dtype=np.float64)
    step = 1 << 15
    for lo in range(0, lattice.shape[0], step):
        hi = min(lo + step, lattice.shape[0])
        phi = _phi_rows(pts, lattice[lo:hi])
        # rows of phi @ M^-1, via the symmetric factorization
        out[lo:hi] = scipy.linalg.lu_solve(
            (sys.lu, sys.piv), phi.T, check_finite=False
        )[:n].T
    return out


def _lattice_points(dims: tuple[int, int, int]) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def warp_volume(vol: Volume, field: np.ndarray) -> Volume:
    """Backward-warp every channel through a precomputed coordinate field."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"field must have shape (3, h, w, d), got {field.shape}")
    if not np.isfinite(field).all():
        raise NumericError("warp field contains non-finite values")
    coords = field.reshape(3, -1)
    out = np.empty((vol.c,) + field.shape[1:], dtype=np.float64)
    for c in range(vol.c):
        out[c] = sample_channel(vol.data[c], coords).reshape(field.shape[1:])
    return Volume(out, vol.spacing)
