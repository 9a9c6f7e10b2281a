"""Forward distortion model and synthetic spinal-cord phantom.

The displacement field b(x) is a scalar per-voxel offset, in voxel units,
along the phase-encode axis. Warping is pull-based with trilinear sampling
and optional Jacobian intensity modulation (1 + sign * db/dy).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InvalidSpec, NonDiffeomorphicField
from .tensor import TensorField, tensor_components_from_axis
from .volume import (
    LevelLabels,
    Mask,
    Volume,
    _freeze,
    check_same_grid,
    sample_linear_many,
    smooth_array,
)

__all__ = [
    "DisplacementField",
    "PhantomSpec",
    "PhantomTruth",
    "warp_ped",
    "simulate_rgp_pair",
    "make_phantom",
    "displacement_magnitude",
]

GYROMAGNETIC_MHZ_PER_T = 42.577

# phantom tissue model
S0_CORD = 400.0
S0_CSF = 150.0
S0_BACKGROUND = 20.0
CORD_LAMBDA_PAR = 1.7e-3
CORD_LAMBDA_PERP = 0.3e-3
CSF_DIFFUSIVITY = 3.0e-3
BACKGROUND_DIFFUSIVITY = 0.8e-3
PHANTOM_BVALUE = 900.0
N_B0 = 7
N_DIRECTIONS = 30


@dataclass(frozen=True)
class DisplacementField:
    """Scalar per-voxel displacement along the phase-encode axis, voxel units."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray
    ped_axis: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise InvalidSpec("displacement field must be 3D")
        if not np.all(np.isfinite(data)):
            raise InvalidSpec("displacement field must be finite")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", _freeze(np.asarray(self.affine, np.float64)))

    @property
    def dims(self):
        return self.data.shape

    def ped_derivative(self) -> np.ndarray:
        """db/dy in voxel units: central differences, one-sided at edges."""
        return np.gradient(self.data, axis=self.ped_axis)

    def check_diffeomorphic(self) -> None:
        """Interior central differences must stay strictly below 1 in magnitude."""
        b = self.data
        axis = self.ped_axis
        if b.shape[axis] < 3:
            return
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior = 0.5 * (b[tuple(hi)] - b[tuple(lo)])
        worst = np.max(np.abs(interior)) if interior.size else 0.0
        if worst >= 1.0:
            raise NonDiffeomorphicField(f"max |db/dy| = {worst:.3f} >= 1")


def warp_ped(v: Volume, f: DisplacementField, sign: int, modulate: bool = True) -> Volume:
    """Pull-back warp out(x) = v(x + sign*b(x)*e_ped), optionally Jacobian-modulated.

    The modulation factor (1 + sign*db/dy) is clamped to [0.01, 100].
    """
    if sign not in (-1, 1):
        raise InvalidSpec("sign must be +1 or -1")
    check_same_grid(v, f)
    f.check_diffeomorphic()
    dims = v.dims[:3]
    coords = np.indices(dims, dtype=np.float64)
    coords[f.ped_axis] += sign * f.data
    pts = coords.reshape(3, -1).T

    if v.is_4d:
        out = np.empty(v.dims)
        for i in range(v.nvol):
            out[..., i] = sample_linear_many(v.data[..., i], pts).reshape(dims)
    else:
        out = sample_linear_many(v.data, pts).reshape(dims)
    if modulate:
        m = np.clip(1.0 + sign * f.ped_derivative(), 0.01, 100.0)
        out = out * (m[..., None] if v.is_4d else m)
    return v.with_data(out, ped_sign=sign)


def simulate_rgp_pair(truth: Volume, f: DisplacementField) -> tuple[Volume, Volume]:
    """Forward/backward distorted pair from an undistorted image.

    Features of the truth image appear displaced by +b in the forward image
    and by -b in the backward one (pull-back sampling with the opposite
    sign), so that correcting the pair by resampling the forward image at
    x + b(x) recovers the truth. Both outputs are Jacobian-modulated.
    """
    i_f = warp_ped(truth, f, sign=-1, modulate=True).with_data_sign(+1)
    i_b = warp_ped(truth, f, sign=+1, modulate=True).with_data_sign(-1)
    return i_f, i_b


def displacement_magnitude(off_res_ppm: float, field_T: float, fov_ped_mm: float,
                           echo_spacing_ms: float, matrix_ped: int) -> float:
    """Worst-case displacement in mm for a given off-resonance and EPI readout.

    shift = df[Hz] * echo_spacing[s] * matrix * (fov/matrix); the matrix
    size cancels but is kept for interface symmetry with the protocol.
    """
    for name, value in [("off_res_ppm", off_res_ppm), ("field_T", field_T),
                        ("fov_ped_mm", fov_ped_mm), ("echo_spacing_ms", echo_spacing_ms),
                        ("matrix_ped", matrix_ped)]:
        if value < 0 or (name != "off_res_ppm" and value == 0):
            raise InvalidSpec(f"{name} must be positive")
    df_hz = off_res_ppm * 1e-6 * GYROMAGNETIC_MHZ_PER_T * 1e6 * field_T
    return df_hz * echo_spacing_ms * 1e-3 * fov_ped_mm


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of the curved-tube spinal-cord phantom."""

    dims: tuple[int, int, int] = (80, 80, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.5)
    tube_radius_mm: float = 4.0
    csf_radius_mm: float = 6.5
    bow_amplitude_mm: float = 4.0
    bow_wavelength_mm: float = 120.0
    num_levels: int = 5
    field_peak_voxels: float = 6.0
    noise_sigma: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        nx, ny, nz = self.dims
        if nx < 8 or ny < 8 or nz < 4:
            raise InvalidSpec("phantom grid too small")
        fov_half = 0.5 * min(nx * self.spacing[0], ny * self.spacing[1])
        if not 0 < self.tube_radius_mm < fov_half:
            raise InvalidSpec("tube radius must be positive and inside the FOV")
        if self.csf_radius_mm <= self.tube_radius_mm:
            raise InvalidSpec("CSF sheath radius must exceed the tube radius")
        if self.csf_radius_mm >= fov_half:
            raise InvalidSpec("CSF sheath must fit inside the FOV")
        if self.bow_amplitude_mm < 0 or self.bow_wavelength_mm <= 0:
            raise InvalidSpec("bow amplitude must be >= 0 and wavelength > 0")
        if not 1 <= self.num_levels <= nz:
            raise InvalidSpec("num_levels must be in [1, nz]")
        if self.field_peak_voxels < 0:
            raise InvalidSpec("field peak must be >= 0")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise sigma must be >= 0")


@dataclass(frozen=True)
class PhantomTruth:
    """Ground truth bundle produced by make_phantom."""

    clean: Volume            # noiseless undistorted b=0 pattern
    clean_dwi: Volume        # undistorted 4D series (noise per spec)
    field: DisplacementField
    tensors: TensorField
    mask: Mask
    levels: LevelLabels
    true_centerline: np.ndarray  # (nz, 4): z_index, x_mm, y_mm, z_mm
    bvalues: np.ndarray = dc_field(repr=False, default=None)
    directions: np.ndarray = dc_field(repr=False, default=None)


def phantom_directions(n: int = N_DIRECTIONS) -> np.ndarray:
    """Deterministic, well-spread unit vectors on the upper hemisphere."""
    i = np.arange(n)
    z = (i + 0.5) / n
    theta = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(1.0 - z ** 2)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _centerline_mm(spec: PhantomSpec, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic curve position and (unnormalized) tangent at slice parameter t."""
    sx, sy, sz = spec.spacing
    nx, ny, nz = spec.dims
    cx = 0.5 * (nx - 1) * sx
    cy = 0.5 * (ny - 1) * sy
    z_mm = t * sz
    z_mid = 0.5 * (nz - 1) * sz
    k = 2.0 * np.pi / spec.bow_wavelength_mm
    x_mm = cx + spec.bow_amplitude_mm * np.sin(k * (z_mm - z_mid))
    pos = np.column_stack([x_mm, np.full_like(x_mm, cy), z_mm])
    tan = np.column_stack([
        spec.bow_amplitude_mm * k * np.cos(k * (z_mm - z_mid)) * sz,
        np.zeros_like(x_mm),
        np.full_like(x_mm, sz),
    ])
    return pos, tan


def _field_data(spec: PhantomSpec) -> np.ndarray:
    """Two Gaussians near the z extremes, tapered to zero at the y borders."""
    nx, ny, nz = spec.dims
    z = np.arange(nz, dtype=np.float64)
    # keep the Gaussians tight against the z extremes so only the end
    # level bands see appreciable field
    z0, z1 = 0.06 * (nz - 1), 0.94 * (nz - 1)
    w = max(0.07 * (nz - 1), 1.0)
    profile = np.exp(-((z - z0) / w) ** 2) + np.exp(-((z - z1) / w) ** 2)
    y = np.arange(ny, dtype=np.float64)
    margin = max(int(round(0.375 * ny)), 4)
    ramp_up = np.clip((y - 2.0) / margin, 0.0, 1.0)
    ramp_down = np.clip((ny - 3.0 - y) / margin, 0.0, 1.0)
    taper = np.sin(0.5 * np.pi * ramp_up) ** 2 * np.sin(0.5 * np.pi * ramp_down) ** 2
    b = spec.field_peak_voxels * taper[None, :, None] * profile[None, None, :]
    return np.broadcast_to(b, spec.dims).copy()


def make_phantom(spec: PhantomSpec) -> PhantomTruth:
    """Build the curved-tube phantom with tensors aligned to the centerline.

    Deterministic for a given seed; the synthetic series has N_B0 b=0
    volumes followed by N_DIRECTIONS diffusion-weighted volumes.
    """
    spec.validate()
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    affine = np.diag([sx, sy, sz, 1.0])
    rng = np.random.default_rng(spec.seed)

    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    x_mm = ii * sx
    y_mm = jj * sy

    t_slices = np.arange(nz, dtype=np.float64)
    pos_slices, _ = _centerline_mm(spec, t_slices)
    # tube distance measured in the axial plane against the same-z curve point
    dist = np.hypot(x_mm - pos_slices[kk, 0], y_mm - pos_slices[kk, 1])
    cord = dist <= spec.tube_radius_mm
    csf = (dist > spec.tube_radius_mm) & (dist <= spec.csf_radius_mm)

    s0 = np.full(spec.dims, S0_BACKGROUND)
    s0[csf] = S0_CSF
    s0[cord] = S0_CORD
    s0 = smooth_array(s0, (0.7, 0.7, 0.3))

    # tensors: cord voxels follow the tangent at the nearest analytic curve point
    t_dense = np.linspace(0.0, nz - 1.0, 2001)
    pos_dense, tan_dense = _centerline_mm(spec, t_dense)
    tan_dense = tan_dense / np.linalg.norm(tan_dense, axis=1, keepdims=True)
    components = np.empty(spec.dims + (6,))
    iso_bg = tensor_components_from_axis(np.array([1.0, 0.0, 0.0]),
                                         BACKGROUND_DIFFUSIVITY, BACKGROUND_DIFFUSIVITY)
    iso_csf = tensor_components_from_axis(np.array([1.0, 0.0, 0.0]),
                                          CSF_DIFFUSIVITY, CSF_DIFFUSIVITY)
    components[...] = iso_bg
    components[csf] = iso_csf
    cord_idx = np.nonzero(cord)
    if cord_idx[0].size:
        cord_mm = np.column_stack([x_mm[cord_idx], y_mm[cord_idx], cord_idx[2] * sz])
        d2 = ((cord_mm[:, None, :] - pos_dense[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)
        components[cord_idx] = tensor_components_from_axis(
            tan_dense[nearest], CORD_LAMBDA_PAR, CORD_LAMBDA_PERP)
    tensors = TensorField(components=components, ln_s0=np.log(np.maximum(s0, 1e-12)),
                          valid=np.ones(spec.dims, dtype=bool), spacing=spec.spacing,
                          affine=affine)

    bvalues = np.concatenate([np.zeros(N_B0), np.full(N_DIRECTIONS, PHANTOM_BVALUE)])
    directions = np.vstack([np.zeros((N_B0, 3)), phantom_directions()])
    quad = np.column_stack([
        directions[:, 0] ** 2, 2 * directions[:, 0] * directions[:, 1],
        2 * directions[:, 0] * directions[:, 2], directions[:, 1] ** 2,
        2 * directions[:, 1] * directions[:, 2], directions[:, 2] ** 2])
    attenuation = np.exp(-np.einsum("xyzc,vc->xyzv", components, bvalues[:, None] * quad))
    series = s0[..., None] * attenuation
    if spec.noise_sigma > 0:
        series = series + rng.normal(0.0, spec.noise_sigma, series.shape)

    field = DisplacementField(data=_field_data(spec), spacing=spec.spacing,
                              affine=affine, ped_axis=1)
    try:
        field.check_diffeomorphic()
    except NonDiffeomorphicField as exc:
        raise InvalidSpec(f"field peak too large for this grid: {exc}") from exc

    centerline = np.column_stack([t_slices, pos_slices])
    return PhantomTruth(
        clean=Volume(data=s0, spacing=spec.spacing, affine=affine),
        clean_dwi=Volume(data=series, spacing=spec.spacing, affine=affine),
        field=field,
        tensors=tensors,
        mask=Mask(data=cord, spacing=spec.spacing, affine=affine),
        levels=LevelLabels(data=_level_bands(spec), spacing=spec.spacing, affine=affine),
        true_centerline=centerline,
        bvalues=bvalues,
        directions=directions,
    )


def _level_bands(spec: PhantomSpec) -> np.ndarray:
    nz = spec.dims[2]
    bands = np.array_split(np.arange(nz), spec.num_levels)
    labels = np.zeros(spec.dims, dtype=np.int32)
    for level, zs in enumerate(bands, start=1):
        labels[:, :, zs] = level
    return labels
