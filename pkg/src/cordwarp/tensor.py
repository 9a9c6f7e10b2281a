"""Log-linear diffusion tensor fitting and eigen-decomposition.

Tensors are stored as the 6 unique components (Dxx, Dxy, Dxz, Dyy, Dyz,
Dzz) in mm^2/s. Gradient directions are interpreted in world coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDirections, SingularDesign
from .volume import AcquisitionScheme, Mask, Volume, _freeze, check_same_grid

__all__ = ["TensorField", "EigenField", "fit_dti", "eigen_decompose",
           "tensor_components_from_axis"]

TENSOR_ORDER = ("Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz")


@dataclass(frozen=True)
class TensorField:
    """Per-voxel symmetric diffusion tensor plus fitted ln S0."""

    components: np.ndarray  # (nx, ny, nz, 6)
    ln_s0: np.ndarray       # (nx, ny, nz)
    valid: np.ndarray       # (nx, ny, nz) bool
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "components", _freeze(np.asarray(self.components, np.float64)))
        object.__setattr__(self, "ln_s0", _freeze(np.asarray(self.ln_s0, np.float64)))
        object.__setattr__(self, "valid", _freeze(np.asarray(self.valid, bool)))
        object.__setattr__(self, "affine", _freeze(np.asarray(self.affine, np.float64)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.components.shape[:3]

    def as_matrices(self) -> np.ndarray:
        """Full symmetric 3x3 matrices, shape (nx, ny, nz, 3, 3)."""
        c = self.components
        m = np.empty(c.shape[:3] + (3, 3))
        m[..., 0, 0] = c[..., 0]
        m[..., 0, 1] = m[..., 1, 0] = c[..., 1]
        m[..., 0, 2] = m[..., 2, 0] = c[..., 2]
        m[..., 1, 1] = c[..., 3]
        m[..., 1, 2] = m[..., 2, 1] = c[..., 4]
        m[..., 2, 2] = c[..., 5]
        return m


@dataclass(frozen=True)
class EigenField:
    """Principal direction, sorted eigenvalues and mean diffusivity."""

    e1: np.ndarray        # (nx, ny, nz, 3), unit at valid voxels
    eigenvalues: np.ndarray  # (nx, ny, nz, 3), descending
    md: np.ndarray        # (nx, ny, nz)
    valid: np.ndarray     # bool
    degenerate: np.ndarray  # bool, near-isotropic voxels
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        for name in ("e1", "eigenvalues", "md"):
            object.__setattr__(self, name, _freeze(np.asarray(getattr(self, name), np.float64)))
        object.__setattr__(self, "valid", _freeze(np.asarray(self.valid, bool)))
        object.__setattr__(self, "degenerate", _freeze(np.asarray(self.degenerate, bool)))
        object.__setattr__(self, "affine", _freeze(np.asarray(self.affine, np.float64)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.md.shape


def _design_matrix(scheme: AcquisitionScheme) -> np.ndarray:
    b = scheme.bvalues
    g = scheme.directions
    return np.column_stack([
        -b * g[:, 0] ** 2,
        -2 * b * g[:, 0] * g[:, 1],
        -2 * b * g[:, 0] * g[:, 2],
        -b * g[:, 1] ** 2,
        -2 * b * g[:, 1] * g[:, 2],
        -b * g[:, 2] ** 2,
        np.ones(scheme.nvol),
    ])


def fit_dti(dwi: Volume, scheme: AcquisitionScheme, mask: Mask) -> TensorField:
    """Unweighted log-linear least-squares tensor fit inside the mask.

    Non-positive signals are clamped to 1e-6 times the voxel's mean b=0
    signal before the log; voxels whose mean b=0 signal is not positive
    are marked invalid.
    """
    if not dwi.is_4d:
        raise SingularDesign("fit_dti requires a 4D series")
    check_same_grid(dwi, mask)
    if scheme.nvol != dwi.nvol:
        raise SingularDesign(f"scheme has {scheme.nvol} entries, series has {dwi.nvol}")
    nz_dirs = scheme.directions[~scheme.is_b0]
    quad = np.column_stack([
        nz_dirs[:, 0] ** 2, nz_dirs[:, 1] ** 2, nz_dirs[:, 2] ** 2,
        nz_dirs[:, 0] * nz_dirs[:, 1], nz_dirs[:, 0] * nz_dirs[:, 2],
        nz_dirs[:, 1] * nz_dirs[:, 2]])
    if np.linalg.matrix_rank(quad) < 6:
        raise InsufficientDirections("need >= 6 non-collinear directions")
    design = _design_matrix(scheme)
    if np.linalg.matrix_rank(design) < 7:
        raise SingularDesign("rank-deficient design matrix")
    pinv = np.linalg.pinv(design)

    dims = dwi.dims[:3]
    idx = np.nonzero(mask.data)
    signals = dwi.data[idx]  # (nmask, nvol)
    b0_mean = signals[:, scheme.is_b0].mean(axis=1)
    voxel_valid = b0_mean > 0

    components = np.zeros(dims + (6,))
    ln_s0 = np.zeros(dims)
    valid = np.zeros(dims, dtype=bool)
    if voxel_valid.any():
        s = signals[voxel_valid]
        floor = (1e-6 * b0_mean[voxel_valid])[:, None]
        s = np.where(s > 0, s, floor)
        coeffs = np.log(s) @ pinv.T  # (nvalid, 7)
        sel = tuple(ax[voxel_valid] for ax in idx)
        components[sel] = coeffs[:, :6]
        ln_s0[sel] = coeffs[:, 6]
        valid[sel] = np.all(np.isfinite(coeffs), axis=1)
    return TensorField(components=components, ln_s0=ln_s0, valid=valid,
                       spacing=dwi.spacing, affine=dwi.affine)


def eigen_decompose(t: TensorField, degenerate_tol: float = 1e-3) -> EigenField:
    """Symmetric eigendecomposition of every valid tensor.

    Eigenvalues are sorted descending; e1's sign is fixed so its largest-
    magnitude component is positive. Voxels with (l1 - l2)/l1 below
    degenerate_tol are flagged near-isotropic.
    """
    dims = t.dims
    e1 = np.zeros(dims + (3,))
    eigenvalues = np.zeros(dims + (3,))
    md = np.zeros(dims)
    degenerate = np.zeros(dims, dtype=bool)
    idx = np.nonzero(t.valid)
    if idx[0].size:
        mats = t.as_matrices()[idx]
        w, v = np.linalg.eigh(mats)  # ascending
        w = w[:, ::-1]
        principal = v[:, :, ::-1][:, :, 0]
        # deterministic sign: largest-magnitude component made positive
        lead = np.take_along_axis(
            principal, np.argmax(np.abs(principal), axis=1)[:, None], axis=1)[:, 0]
        principal = principal * np.where(lead < 0, -1.0, 1.0)[:, None]
        e1[idx] = principal
        eigenvalues[idx] = w
        md[idx] = w.mean(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            spread = np.where(w[:, 0] != 0, (w[:, 0] - w[:, 1]) / w[:, 0], 0.0)
        degenerate[idx] = np.abs(spread) < degenerate_tol
    return EigenField(e1=e1, eigenvalues=eigenvalues, md=md, valid=np.array(t.valid),
                      degenerate=degenerate, spacing=t.spacing, affine=t.affine)


def tensor_components_from_axis(axis: np.ndarray, lam_par: float, lam_perp: float) -> np.ndarray:
    """6-component prolate tensor(s) with principal axis `axis` (..., 3)."""
    u = np.asarray(axis, np.float64)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    d = (lam_par - lam_perp) * u[..., :, None] * u[..., None, :]
    d[..., 0, 0] += lam_perp
    d[..., 1, 1] += lam_perp
    d[..., 2, 2] += lam_perp
    return np.stack([d[..., 0, 0], d[..., 0, 1], d[..., 0, 2],
                     d[..., 1, 1], d[..., 1, 2], d[..., 2, 2]], axis=-1)
