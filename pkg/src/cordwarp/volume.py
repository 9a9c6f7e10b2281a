"""Core image containers, trilinear sampling and Gaussian smoothing.

Volumes are plain numpy grids plus geometry: voxel spacing in mm, a 4x4
voxel-to-world affine and the phase-encode axis along which susceptibility
distortion acts. All operations here are pure functions; volume data is
marked read-only after construction so instances can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import GridMismatch, InvalidSpec

__all__ = [
    "Volume",
    "Mask",
    "LevelLabels",
    "AcquisitionScheme",
    "check_same_grid",
    "sample_linear",
    "sample_linear_many",
    "gaussian_smooth",
    "voxel_to_world",
    "world_to_voxel",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Volume:
    """A 3D or 4D scalar image on a regular grid.

    4D data is stored with shape (nx, ny, nz, nvol); each trailing-axis
    slab is one diffusion volume.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray
    ped_axis: int = 1
    ped_sign: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (3, 4):
            raise InvalidSpec(f"volume must be 3D or 4D, got {data.ndim}D")
        if any(n < 1 for n in data.shape):
            raise InvalidSpec("all dimensions must be >= 1")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise InvalidSpec(f"spacing must be 3 positive floats, got {spacing}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise InvalidSpec("affine must be 4x4")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise InvalidSpec("affine upper-left 3x3 is singular")
        if self.ped_axis not in (0, 1, 2):
            raise InvalidSpec("ped_axis must be 0, 1 or 2")
        if self.ped_sign not in (-1, 1):
            raise InvalidSpec("ped_sign must be +1 or -1")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _freeze(affine))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_4d(self) -> bool:
        return self.data.ndim == 4

    @property
    def nvol(self) -> int:
        return self.data.shape[3] if self.is_4d else 1

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data: np.ndarray, ped_sign: int | None = None) -> "Volume":
        """Same grid, new samples."""
        return replace(self, data=np.array(data, dtype=np.float64),
                       ped_sign=self.ped_sign if ped_sign is None else ped_sign)

    def with_data_sign(self, ped_sign: int) -> "Volume":
        """Retag the acquisition polarity without touching the samples."""
        return replace(self, ped_sign=ped_sign)

    def volume_at(self, i: int) -> "Volume":
        """Extract one 3D volume from a 4D series."""
        if not self.is_4d:
            raise InvalidSpec("volume_at requires a 4D volume")
        return replace(self, data=np.array(self.data[..., i]))


@dataclass(frozen=True)
class Mask:
    """Binary region on the same grid as the volumes it is applied to."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data).astype(bool)
        if data.ndim != 3:
            raise InvalidSpec("mask must be 3D")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", _freeze(np.asarray(self.affine, dtype=np.float64)))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class LevelLabels:
    """Small-integer label map: 0 = background, 1..K = vertebral levels."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvalidSpec("label map must be 3D")
        data = np.rint(data).astype(np.int32)
        if data.min() < 0:
            raise InvalidSpec("labels must be non-negative")
        nonzero = np.unique(data[data > 0])
        if nonzero.size and not np.array_equal(nonzero, np.arange(1, nonzero.max() + 1)):
            raise InvalidSpec("nonzero labels must form a contiguous set 1..K")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", _freeze(np.asarray(self.affine, dtype=np.float64)))

    @property
    def num_levels(self) -> int:
        return int(self.data.max())

    def level_name(self, label: int) -> str:
        if 1 <= label <= len(self.names):
            return self.names[label - 1]
        return f"L{label}"


@dataclass(frozen=True)
class AcquisitionScheme:
    """Per-volume b-values (s/mm^2) and unit gradient directions."""

    bvalues: np.ndarray
    directions: np.ndarray
    b0_threshold: float = field(default=50.0, compare=False)

    def __post_init__(self):
        bvals = np.asarray(self.bvalues, dtype=np.float64).ravel()
        dirs = np.asarray(self.directions, dtype=np.float64)
        if dirs.shape != (bvals.size, 3):
            raise InvalidSpec("directions must be (nvol, 3)")
        nonzero = bvals > self.b0_threshold
        norms = np.linalg.norm(dirs[nonzero], axis=1)
        if nonzero.any() and np.any(np.abs(norms - 1.0) > 1e-3):
            raise InvalidSpec("nonzero directions must have unit norm within 1e-3")
        if not (~nonzero).any():
            raise InvalidSpec("scheme needs at least one b=0 entry")
        # >= 6 non-collinear directions: the quadratic-form design must have rank 6
        g = dirs[nonzero]
        design = np.column_stack([
            g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2,
            g[:, 0] * g[:, 1], g[:, 0] * g[:, 2], g[:, 1] * g[:, 2],
        ]) if g.size else np.zeros((0, 6))
        if np.linalg.matrix_rank(design) < 6:
            raise InvalidSpec("scheme needs >= 6 non-collinear nonzero directions")
        object.__setattr__(self, "bvalues", _freeze(bvals))
        object.__setattr__(self, "directions", _freeze(dirs))

    @property
    def nvol(self) -> int:
        return self.bvalues.size

    @property
    def is_b0(self) -> np.ndarray:
        return self.bvalues <= self.b0_threshold


def check_same_grid(a, b, atol: float = 1e-5) -> None:
    """Raise GridMismatch unless a and b share dims, spacing and affine."""
    if tuple(a.dims[:3]) != tuple(b.dims[:3]):
        raise GridMismatch(f"dims differ: {a.dims[:3]} vs {b.dims[:3]}")
    if not np.allclose(a.spacing, b.spacing, atol=atol):
        raise GridMismatch(f"spacing differs: {a.spacing} vs {b.spacing}")
    if not np.allclose(a.affine, b.affine, atol=atol):
        raise GridMismatch("affines differ")


def voxel_to_world(affine: np.ndarray, ijk: np.ndarray) -> np.ndarray:
    """Map (n, 3) voxel indices to world mm."""
    ijk = np.atleast_2d(np.asarray(ijk, dtype=np.float64))
    return ijk @ affine[:3, :3].T + affine[:3, 3]


def world_to_voxel(affine: np.ndarray, xyz: np.ndarray) -> np.ndarray:
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    inv = np.linalg.inv(affine)
    return xyz @ inv[:3, :3].T + inv[:3, 3]


def sample_linear_many(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a 3D array at (n, 3) continuous voxel
    coordinates. Out-of-range coordinates clamp to the boundary."""
    nx, ny, nz = data.shape
    x = np.clip(pts[:, 0], 0.0, nx - 1.0)
    y = np.clip(pts[:, 1], 0.0, ny - 1.0)
    z = np.clip(pts[:, 2], 0.0, nz - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), nx - 2) if nx > 1 else np.zeros(x.shape, np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), ny - 2) if ny > 1 else np.zeros(y.shape, np.intp)
    z0 = np.minimum(np.floor(z).astype(np.intp), nz - 2) if nz > 1 else np.zeros(z.shape, np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = x - x0
    fy = y - y0
    fz = z - z0
    c000 = data[x0, y0, z0]
    c100 = data[x1, y0, z0]
    c010 = data[x0, y1, z0]
    c110 = data[x1, y1, z0]
    c001 = data[x0, y0, z1]
    c101 = data[x1, y0, z1]
    c011 = data[x0, y1, z1]
    c111 = data[x1, y1, z1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sample_linear(v: Volume, p) -> float:
    """Trilinear sample of a 3D volume at one continuous voxel coordinate."""
    if v.is_4d:
        raise InvalidSpec("sample_linear requires a 3D volume")
    return float(sample_linear_many(v.data, np.asarray(p, dtype=np.float64)[None, :])[0])


def _gauss_kernel(sigma_vox: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma_vox))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (i / sigma_vox) ** 2)
    return k / k.sum()


def gaussian_smooth(v: Volume, sigma) -> Volume:
    """Separable Gaussian smoothing; sigma in mm per axis, reflect boundary.

    Kernel radius is ceil(3*sigma/spacing) per axis; sigma 0 on an axis
    skips that axis entirely.
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sigma < 0):
        raise InvalidSpec("sigma must be >= 0")
    out = np.array(v.data, dtype=np.float64)
    for axis in range(3):
        sig_vox = sigma[axis] / v.spacing[axis]
        if sig_vox == 0:
            continue
        kernel = _gauss_kernel(sig_vox)
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="reflect")
    return v.with_data(out)


def smooth_array(data: np.ndarray, sigma_vox) -> np.ndarray:
    """Gaussian smoothing of a raw array with per-axis sigmas in voxels."""
    sigma_vox = np.broadcast_to(np.asarray(sigma_vox, dtype=np.float64), (data.ndim,))
    out = np.array(data, dtype=np.float64)
    for axis in range(data.ndim):
        if sigma_vox[axis] == 0:
            continue
        out = ndimage.correlate1d(out, _gauss_kernel(sigma_vox[axis]), axis=axis, mode="reflect")
    return out
