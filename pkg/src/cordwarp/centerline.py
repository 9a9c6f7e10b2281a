"""Cord centerline modeling and tangent-alignment statistics.

The centerline is represented by three natural cubic smoothing splines
x(t), y(t), z(t) over the axial slice index t, fitted to per-slice mask
barycenters. Frenet frames attached to the curve give a local (tangent,
normal, binormal) basis in which per-voxel principal diffusion directions
are summarized as a direction covariance matrix; its principal eigenvector
angle to the tangent axis and its largest eigenvalue quantify how well the
fitted directions follow the cord.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solveh_banded

from .errors import (
    DuplicateParameter,
    EmptyMask,
    EmptyRegion,
    OutOfDomain,
    TooFewSlices,
)
from .tensor import EigenField
from .volume import LevelLabels, Mask, voxel_to_world

__all__ = [
    "Centerline",
    "FrenetFrame",
    "DirectionCovariance",
    "AlignmentRow",
    "AlignmentReport",
    "slice_barycenters",
    "fit_centerline",
    "frenet",
    "nearest_parameter",
    "direction_covariance",
    "mad_acd",
    "level_report",
]


def _smooth_spline_values(t: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Fitted knot values of the natural cubic smoothing spline minimizing
    sum (y_i - f(t_i))^2 + lam * integral f''^2.

    Solved through the classic banded system in the interior second
    derivatives: (R + lam * Q Q^T) gamma = Q y, fitted values y - lam*Q^T gamma.
    lam = 0 interpolates; lam -> inf tends to the least-squares line.
    """
    n = t.size
    h = np.diff(t)
    # Q: (n-2) x n second-divided-difference operator
    q = np.zeros((n - 2, n))
    rows = np.arange(n - 2)
    q[rows, rows] = 1.0 / h[:-1]
    q[rows, rows + 1] = -1.0 / h[:-1] - 1.0 / h[1:]
    q[rows, rows + 2] = 1.0 / h[1:]
    # R: symmetric tridiagonal Gram matrix of the natural-spline basis
    r_diag = (h[:-1] + h[1:]) / 3.0
    r_off = h[1:-1] / 6.0

    a = lam * (q @ q.T)
    a[rows, rows] += r_diag
    if n > 3:
        a[rows[:-1], rows[:-1] + 1] += r_off
        a[rows[:-1] + 1, rows[:-1]] += r_off
    # bandwidth 2 (Q Q^T is pentadiagonal); pack upper diagonals for solveh_banded
    ab = np.zeros((3, n - 2))
    ab[2] = np.diag(a)
    if n > 3:
        ab[1, 1:] = np.diag(a, 1)
    if n > 4:
        ab[0, 2:] = np.diag(a, 2)
    gamma = solveh_banded(ab, q @ y, lower=False)
    return y - lam * (q.T @ gamma)


@dataclass(frozen=True)
class Centerline:
    """Smooth space curve t -> (x, y, z) mm over the slice-index parameter."""

    splines: tuple[CubicSpline, CubicSpline, CubicSpline]
    t_min: float
    t_max: float
    lam: float

    def point(self, t) -> np.ndarray:
        """Curve position(s), shape (..., 3)."""
        t = np.asarray(t, dtype=np.float64)
        return np.stack([s(t) for s in self.splines], axis=-1)

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return np.stack([s(t, 1) for s in self.splines], axis=-1)

    def acceleration(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return np.stack([s(t, 2) for s in self.splines], axis=-1)


@dataclass(frozen=True)
class FrenetFrame:
    """Orthonormal right-handed (tangent, normal, binormal) triad."""

    tangent: np.ndarray
    normal: np.ndarray
    binormal: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class DirectionCovariance:
    """Mean outer product of unit directions expressed in curve frames."""

    m: np.ndarray  # symmetric 3x3, trace 1
    count: int
    label: int = 0


@dataclass(frozen=True)
class AlignmentRow:
    label: int
    name: str
    mad_deg: float | None
    acd: float | None
    voxels: int
    volume_mm3: float


@dataclass(frozen=True)
class AlignmentReport:
    rows: tuple[AlignmentRow, ...]

    def row(self, label: int) -> AlignmentRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def slice_barycenters(mask: Mask) -> list[tuple[float, np.ndarray]]:
    """World-mm barycenter of the mask in each nonempty axial (z) slice."""
    if not mask.data.any():
        raise EmptyMask("mask has no voxels")
    out = []
    for k in range(mask.dims[2]):
        ii, jj = np.nonzero(mask.data[:, :, k])
        if ii.size == 0:
            continue
        ijk = np.array([ii.mean(), jj.mean(), float(k)])
        out.append((float(k), voxel_to_world(mask.affine, ijk)[0]))
    return out


def fit_centerline(points, lam: float = 1.0) -> Centerline:
    """Fit per-axis natural cubic smoothing splines to (t, point) samples."""
    ts = np.array([p[0] for p in points], dtype=np.float64)
    xyz = np.array([np.asarray(p[1], dtype=np.float64) for p in points])
    if ts.size < 4:
        raise TooFewSlices(f"need >= 4 points, got {ts.size}")
    if np.any(np.diff(ts) <= 0):
        raise DuplicateParameter("parameters must be strictly increasing")
    if lam < 0:
        raise DuplicateParameter("smoothing must be >= 0")
    splines = []
    for axis in range(3):
        values = xyz[:, axis]
        if lam > 0:
            values = _smooth_spline_values(ts, values, lam)
        splines.append(CubicSpline(ts, values, bc_type="natural"))
    return Centerline(splines=tuple(splines), t_min=float(ts[0]),
                      t_max=float(ts[-1]), lam=float(lam))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def frenet(c: Centerline, t: float) -> FrenetFrame:
    """Frenet frame at parameter t.

    On locally straight segments the normal is undefined; the fallback
    projects the world x axis (or y axis if x is parallel to the tangent)
    onto the tangent's orthogonal complement.
    """
    if not (c.t_min - 1e-9 <= t <= c.t_max + 1e-9):
        raise OutOfDomain(f"t={t} outside [{c.t_min}, {c.t_max}]")
    v = c.velocity(t)
    a = c.acceleration(t)
    tangent = _unit(v)
    # derivative of the unit tangent: component of a orthogonal to t, / |v|
    dt_dt = (a - (a @ tangent) * tangent) / np.linalg.norm(v)
    degenerate = np.linalg.norm(dt_dt) < 1e-8
    if degenerate:
        for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0])):
            proj = axis - (axis @ tangent) * tangent
            if np.linalg.norm(proj) > 1e-8:
                normal = _unit(proj)
                break
    else:
        normal = _unit(dt_dt)
    binormal = _unit(np.cross(tangent, normal))
    return FrenetFrame(tangent=tangent, normal=normal, binormal=binormal,
                       degenerate=bool(degenerate))


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def nearest_parameter(c: Centerline, p: np.ndarray, grid_step: float | None = None) -> float:
    """Parameter of the curve point closest to p (world mm).

    Exhaustive uniform grid search (ties broken toward the smallest t)
    refined by golden-section search within the winning grid cell.
    """
    p = np.asarray(p, dtype=np.float64)
    span = c.t_max - c.t_min
    if grid_step is None:
        grid_step = span / 1000.0 if span > 0 else 1.0
    if grid_step <= 0:
        raise OutOfDomain("grid_step must be > 0")
    n = max(int(np.ceil(span / grid_step)), 1)
    grid = np.linspace(c.t_min, c.t_max, n + 1)
    d2 = ((c.point(grid) - p) ** 2).sum(axis=1)
    i = int(np.argmin(d2))  # argmin keeps the first (smallest-t) minimum
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, n)]

    def dist2(t):
        return float(((c.point(t) - p) ** 2).sum())

    a, b = lo, hi
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = dist2(x1), dist2(x2)
    for _ in range(40):
        if b - a < 1e-9 * max(span, 1.0):
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = dist2(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = dist2(x2)
    return float(0.5 * (a + b))


def _frame_coordinates(e: EigenField, voxels: tuple[np.ndarray, ...],
                       c: Centerline) -> np.ndarray:
    """Each voxel's e1 expressed in the Frenet frame at its nearest curve
    parameter, shape (n, 3)."""
    centers = np.column_stack([v.astype(np.float64) for v in voxels])
    world = voxel_to_world(e.affine, centers)
    coords = np.empty((world.shape[0], 3))
    for row, p in enumerate(world):
        frame = frenet(c, np.clip(nearest_parameter(c, p), c.t_min, c.t_max))
        e1 = e.e1[voxels[0][row], voxels[1][row], voxels[2][row]]
        coords[row] = (e1 @ frame.tangent, e1 @ frame.normal, e1 @ frame.binormal)
    return coords


def direction_covariance(e: EigenField, voxels: tuple[np.ndarray, ...],
                         c: Centerline, label: int = 0) -> DirectionCovariance:
    """Covariance M of principal directions over a region, in curve frames.

    Voxels with invalid or near-isotropic tensors are excluded; the region
    must be nonempty after exclusion.
    """
    keep = e.valid[voxels] & ~e.degenerate[voxels]
    voxels = tuple(v[keep] for v in voxels)
    if voxels[0].size == 0:
        raise EmptyRegion("no usable voxels in region")
    coords = _frame_coordinates(e, voxels, c)
    m = (coords[:, :, None] * coords[:, None, :]).mean(axis=0)
    return DirectionCovariance(m=m, count=int(voxels[0].size), label=label)


def mad_acd(m: DirectionCovariance) -> tuple[float, float]:
    """Angle (degrees) of M's principal eigenvector to the tangent axis,
    and M's largest eigenvalue."""
    w, v = np.linalg.eigh(m.m)
    u1 = v[:, -1]
    mad = math.degrees(math.acos(min(abs(u1[0]), 1.0)))
    return mad, float(w[-1])


def level_report(e: EigenField, mask: Mask, labels: LevelLabels,
                 c: Centerline) -> AlignmentReport:
    """Per-level alignment statistics and volumes over mask-and-label voxels."""
    voxvol = float(np.prod(labels.spacing))
    rows = []
    for label in range(1, labels.num_levels + 1):
        region = (labels.data == label) & mask.data
        count = int(region.sum())
        volume = count * voxvol
        try:
            cov = direction_covariance(e, np.nonzero(region), c, label=label)
            mad, acd = mad_acd(cov)
        except EmptyRegion:
            mad, acd = None, None
        rows.append(AlignmentRow(label=label, name=labels.level_name(label),
                                 mad_deg=mad, acd=acd, voxels=count,
                                 volume_mm3=volume))
    return AlignmentReport(rows=tuple(rows))
