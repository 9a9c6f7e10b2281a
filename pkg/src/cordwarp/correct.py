"""Displacement-field estimation from a reversed-polarity image pair.

Two estimators are provided: a variational solver that minimizes the
symmetric intensity-matching functional with a quadratic smoothness
penalty (Gauss-Newton, Armijo line search, coarse-to-fine pyramid), and a
per-line cumulative-profile matcher followed by 3D Gaussian smoothing of
the field.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg

from .errors import GridMismatch, InvalidSpec
from .simulate import DisplacementField, warp_ped
from .volume import Volume, check_same_grid, smooth_array

__all__ = [
    "VariationalOptions",
    "CorrectionResult",
    "objective",
    "estimate_field_variational",
    "estimate_field_line_align",
    "reconstruct_midway",
    "apply_to_series",
]


@dataclass(frozen=True)
class VariationalOptions:
    alpha: float = 50.0          # smoothness weight
    levels: int = 3              # pyramid depth
    max_iters: int = 50          # Gauss-Newton iterations per level
    step_tol: float = 1e-3       # voxel RMS update below which a level stops
    beta: float = 0.1            # Jacobian floor: 1 +- db/dy >= beta

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidSpec("alpha must be >= 0")
        if self.levels < 1:
            raise InvalidSpec("levels must be >= 1")
        if not 0 < self.beta < 1:
            raise InvalidSpec("beta must be in (0, 1)")


@dataclass
class CorrectionResult:
    field: DisplacementField
    corrected: Volume
    trace: list = dc_field(default_factory=list)  # (iter, level, value, step)
    converged: bool = True
    metadata: dict = dc_field(default_factory=dict)


# --- discrete operators along the phase-encode axis ---

def _grad_ped(b: np.ndarray, axis: int) -> np.ndarray:
    """Central differences, one-sided at the edges (matches np.gradient)."""
    return np.gradient(b, axis=axis)


def _grad_ped_adjoint(u: np.ndarray, axis: int) -> np.ndarray:
    """Exact adjoint of _grad_ped."""
    u = np.moveaxis(u, axis, 0)
    out = np.zeros_like(u)
    n = u.shape[0]
    if n == 1:
        return np.moveaxis(out, 0, axis)
    # edge rows: one-sided differences
    out[0] -= u[0]
    out[1] += u[0]
    out[-1] += u[-1]
    out[-2] -= u[-1]
    # interior rows: (b[i+1] - b[i-1]) / 2
    if n > 2:
        out[2:] += 0.5 * u[1:-1]
        out[:-2] -= 0.5 * u[1:-1]
    return np.moveaxis(out, 0, axis)


def _smoothness(b: np.ndarray) -> tuple[float, np.ndarray]:
    """0.5 * sum of squared forward differences over all axes, with gradient.

    Neumann boundary: the difference past the last sample is zero.
    """
    value = 0.0
    grad = np.zeros_like(b)
    for axis in range(b.ndim):
        d = np.diff(b, axis=axis)
        value += 0.5 * float((d ** 2).sum())
        pad_lo = [slice(None)] * b.ndim
        pad_hi = [slice(None)] * b.ndim
        pad_lo[axis] = slice(0, -1)
        pad_hi[axis] = slice(1, None)
        grad[tuple(pad_lo)] -= d
        grad[tuple(pad_hi)] += d
    return value, grad


def _laplacian(x: np.ndarray) -> np.ndarray:
    """Gradient of _smoothness as a linear operator (for Gauss-Newton)."""
    out = np.zeros_like(x)
    for axis in range(x.ndim):
        d = np.diff(x, axis=axis)
        pad_lo = [slice(None)] * x.ndim
        pad_hi = [slice(None)] * x.ndim
        pad_lo[axis] = slice(0, -1)
        pad_hi[axis] = slice(1, None)
        out[tuple(pad_lo)] -= d
        out[tuple(pad_hi)] += d
    return out


def _sample_and_dy(data: np.ndarray, b: np.ndarray, sign: int, axis: int):
    """Sample data at x + sign*b*e_axis; return values and the derivative of
    the sampled value with respect to b (zero where the coordinate clamps)."""
    dims = data.shape
    coords = np.indices(dims, dtype=np.float64)
    shifted = coords[axis] + sign * b
    inside = (shifted >= 0.0) & (shifted <= dims[axis] - 1.0)
    coords[axis] = np.clip(shifted, 0.0, dims[axis] - 1.0)

    idx0 = []
    frac = []
    for ax in range(3):
        c = coords[ax]
        n = dims[ax]
        i0 = np.minimum(np.floor(c).astype(np.intp), max(n - 2, 0))
        i0 = np.maximum(i0, 0)
        idx0.append(i0)
        frac.append(c - i0)
    x0, y0, z0 = idx0
    fx, fy, fz = frac
    ones = [np.minimum(i + 1, dims[ax] - 1) for ax, i in enumerate(idx0)]
    x1, y1, z1 = ones

    def gather(ix, iy, iz):
        return data[ix, iy, iz]

    axes = [(x0, x1, fx), (y0, y1, fy), (z0, z1, fz)]
    # interpolate the two non-ped axes first, keeping the ped axis split
    other = [a for a in range(3) if a != axis]

    def bilerp(ped_lo: bool):
        sel = [None, None, None]
        sel[axis] = axes[axis][0] if ped_lo else axes[axis][1]
        a0, a1 = other
        i0a, i1a, fa = axes[a0]
        i0b, i1b, fb = axes[a1]

        def pick(ia, ib):
            sel[a0] = ia
            sel[a1] = ib
            return gather(sel[0], sel[1], sel[2])

        v00 = pick(i0a, i0b)
        v10 = pick(i1a, i0b)
        v01 = pick(i0a, i1b)
        v11 = pick(i1a, i1b)
        return (v00 * (1 - fa) + v10 * fa) * (1 - fb) + (v01 * (1 - fa) + v11 * fa) * fb

    lo = bilerp(True)
    hi = bilerp(False)
    fped = axes[axis][2]
    value = lo * (1 - fped) + hi * fped
    dvalue = (hi - lo) * np.where(inside, 1.0, 0.0) * sign
    return value, dvalue


def objective(f: DisplacementField, i_f: Volume, i_b: Volume, alpha: float):
    """Value and exact gradient of the symmetric matching functional.

    value = 0.5*sum(residual^2)*voxvol + alpha*0.5*sum(|grad b|^2)*voxvol
    with residual = I_F(x+b v)(1 + db/dy) - I_B(x-b v)(1 - db/dy).
    """
    check_same_grid(i_f, f)
    check_same_grid(i_b, f)
    f.check_diffeomorphic()
    axis = f.ped_axis
    b = f.data
    voxvol = float(np.prod(f.spacing))

    fv, fdy = _sample_and_dy(i_f.data, b, +1, axis)
    bv, bdy = _sample_and_dy(i_b.data, b, -1, axis)
    d = _grad_ped(b, axis)
    r = fv * (1.0 + d) - bv * (1.0 - d)

    value = 0.5 * voxvol * float((r ** 2).sum())
    # fdy/bdy are derivatives of the sampled values with respect to b
    a = fdy * (1.0 + d) - bdy * (1.0 - d)
    grad = voxvol * (r * a + _grad_ped_adjoint(r * (fv + bv), axis))

    s_val, s_grad = _smoothness(b)
    value += alpha * voxvol * s_val
    grad += alpha * voxvol * s_grad
    return value, grad


def _project_slope(b: np.ndarray, axis: int, beta: float) -> np.ndarray:
    """Clamp successive differences along the ped axis into +-(1-beta),
    preserving each line's mean."""
    bm = np.moveaxis(b, axis, -1)
    d = np.clip(np.diff(bm, axis=-1), -(1.0 - beta), 1.0 - beta)
    rebuilt = np.concatenate([bm[..., :1],
                              bm[..., :1] + np.cumsum(d, axis=-1)], axis=-1)
    rebuilt += (bm.mean(axis=-1) - rebuilt.mean(axis=-1))[..., None]
    return np.moveaxis(rebuilt, -1, axis)


def _downsample(data: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    factors = [t / s for t, s in zip(shape, data.shape)]
    return ndimage.zoom(smooth_array(data, 0.7), factors, order=1,
                        mode="nearest", grid_mode=True)


def _gauss_newton_level(i_f_data, i_b_data, b0, axis, voxvol, opts, level, trace):
    b = b0.copy()
    converged = False
    for it in range(opts.max_iters):
        fv, fdy = _sample_and_dy(i_f_data, b, +1, axis)
        bv, bdy = _sample_and_dy(i_b_data, b, -1, axis)
        d = _grad_ped(b, axis)
        r = fv * (1.0 + d) - bv * (1.0 - d)
        s_val, s_grad = _smoothness(b)
        value = voxvol * (0.5 * float((r ** 2).sum()) + opts.alpha * s_val)
        a = fdy * (1.0 + d) - bdy * (1.0 - d)
        grad = voxvol * (r * a + _grad_ped_adjoint(r * (fv + bv), axis)
                         + opts.alpha * s_grad)

        shape = b.shape
        fb = fv + bv

        def matvec(x_flat):
            x = x_flat.reshape(shape)
            jx = a * x + fb * _grad_ped(x, axis)
            jtjx = a * jx + _grad_ped_adjoint(fb * jx, axis)
            return (voxvol * (jtjx + opts.alpha * _laplacian(x))).ravel()

        n = b.size
        op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
        delta_flat, _ = cg(op, -grad.ravel(), rtol=1e-4, maxiter=100)
        delta = delta_flat.reshape(shape)
        descent = float((grad * delta).sum())
        if descent >= 0:  # CG failure; fall back to steepest descent
            delta = -grad
            descent = float((grad * delta).sum())

        step = 1.0
        accepted = False
        for _ in range(25):
            cand = _project_slope(b + step * delta, axis, opts.beta)
            fv2, _ = _sample_and_dy(i_f_data, cand, +1, axis)
            bv2, _ = _sample_and_dy(i_b_data, cand, -1, axis)
            d2 = _grad_ped(cand, axis)
            r2 = fv2 * (1.0 + d2) - bv2 * (1.0 - d2)
            s2, _ = _smoothness(cand)
            value2 = voxvol * (0.5 * float((r2 ** 2).sum()) + opts.alpha * s2)
            if value2 <= value + 1e-4 * step * descent:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no further progress possible
            trace.append((it, level, value, 0.0))
            break
        update_rms = float(np.sqrt(np.mean((cand - b) ** 2)))
        b = cand
        trace.append((it, level, value2, step))
        if update_rms < opts.step_tol:
            converged = True
            break
    return b, converged


def estimate_field_variational(i_f: Volume, i_b: Volume,
                               opts: VariationalOptions | None = None) -> CorrectionResult:
    """Coarse-to-fine Gauss-Newton minimization of the matching functional."""
    opts = opts or VariationalOptions()
    check_same_grid(i_f, i_b)
    if i_f.ped_sign != 1 or i_b.ped_sign != -1:
        raise InvalidSpec("expected i_f.ped_sign=+1 and i_b.ped_sign=-1")
    axis = i_f.ped_axis
    dims = i_f.dims[:3]
    voxvol = float(np.prod(i_f.spacing))

    shapes = [dims]
    for _ in range(opts.levels - 1):
        prev = shapes[-1]
        nxt = tuple(max(int(np.ceil(n / 2)), 2) for n in prev)
        if nxt == prev:
            break
        shapes.append(nxt)
    shapes = shapes[::-1]  # coarse to fine

    pyr_f = [i_f.data if s == dims else _downsample(i_f.data, s) for s in shapes]
    pyr_b = [i_b.data if s == dims else _downsample(i_b.data, s) for s in shapes]

    trace: list = []
    b = np.zeros(shapes[0])
    converged = True
    for level, shape in enumerate(shapes):
        if b.shape != shape:
            scale = shape[axis] / b.shape[axis]
            b = ndimage.zoom(b, [t / s for t, s in zip(shape, b.shape)],
                             order=1, mode="nearest", grid_mode=True) * scale
            b = _project_slope(b, axis, opts.beta)
        b, level_conv = _gauss_newton_level(pyr_f[level], pyr_b[level], b, axis,
                                            voxvol, opts, level, trace)
        converged = level_conv
    field = DisplacementField(data=b, spacing=i_f.spacing, affine=i_f.affine,
                              ped_axis=axis)
    corrected = reconstruct_midway(i_f, i_b, field)
    return CorrectionResult(field=field, corrected=corrected, trace=trace,
                            converged=converged)


def estimate_field_line_align(i_f: Volume, i_b: Volume,
                              sigma_smooth_mm: float = 2.0,
                              n_quantiles: int = 256) -> CorrectionResult:
    """Match per-line cumulative intensity profiles, then smooth the field.

    Each (x, z) line is realigned independently through quantile matching
    of the normalized cumulative profiles; lines with no intensity get zero
    displacement and are flagged in the result metadata.
    """
    check_same_grid(i_f, i_b)
    if i_f.ped_sign != 1 or i_b.ped_sign != -1:
        raise InvalidSpec("expected i_f.ped_sign=+1 and i_b.ped_sign=-1")
    axis = i_f.ped_axis
    fdat = np.moveaxis(i_f.data, axis, -1)
    bdat = np.moveaxis(i_b.data, axis, -1)
    line_shape = fdat.shape[:-1]
    n = fdat.shape[-1]
    ys = np.arange(n, dtype=np.float64)
    quantiles = (np.arange(n_quantiles) + 0.5) / n_quantiles

    out = np.zeros_like(fdat)
    zero_lines = []
    for idx in np.ndindex(line_shape):
        fline = fdat[idx]
        bline = bdat[idx]
        fmax, bmax = fline.max(), bline.max()
        if fmax <= 0.0 or bmax <= 0.0:
            zero_lines.append(idx)
            continue
        fcum = np.cumsum(np.clip(fline, 0.0, None) + 1e-6 * fmax)
        bcum = np.cumsum(np.clip(bline, 0.0, None) + 1e-6 * bmax)
        fcum /= fcum[-1]
        bcum /= bcum[-1]
        y_f = np.interp(quantiles, fcum, ys)
        y_b = np.interp(quantiles, bcum, ys)
        midway = (y_f + y_b) / 2.0
        disp = (y_f - y_b) / 2.0
        out[idx] = np.interp(ys, midway, disp)
    raw = np.moveaxis(out, -1, axis)
    sigma_vox = [sigma_smooth_mm / s for s in i_f.spacing]
    smoothed = smooth_array(raw, sigma_vox) if sigma_smooth_mm > 0 else raw
    field = DisplacementField(data=smoothed, spacing=i_f.spacing,
                              affine=i_f.affine, ped_axis=axis)
    corrected = reconstruct_midway(i_f, i_b, field)
    return CorrectionResult(field=field, corrected=corrected, converged=True,
                            metadata={"zero_lines": zero_lines})


def reconstruct_midway(i_f: Volume, i_b: Volume, f: DisplacementField) -> Volume:
    """Jacobian-modulated average of the two unwarped acquisitions."""
    check_same_grid(i_f, i_b)
    fwd = warp_ped(i_f, f, sign=+1, modulate=True)
    bwd = warp_ped(i_b, f, sign=-1, modulate=True)
    return i_f.with_data(0.5 * (fwd.data + bwd.data), ped_sign=1)


def apply_to_series(dwi: Volume, f: DisplacementField) -> Volume:
    """Unwarp every volume of a series with the sign it was acquired with."""
    return warp_ped(dwi, f, sign=dwi.ped_sign, modulate=True)
