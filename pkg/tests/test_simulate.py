import numpy as np
import pytest

from cordwarp.errors import GridMismatch, InvalidSpec, NonDiffeomorphicField
from cordwarp.simulate import (
    DisplacementField,
    PhantomSpec,
    displacement_magnitude,
    make_phantom,
    simulate_rgp_pair,
    warp_ped,
)
from cordwarp.tensor import eigen_decompose
from cordwarp.volume import Volume, smooth_array


def make_volume(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(data=np.asarray(data, dtype=np.float64), spacing=spacing,
                  affine=np.diag([*spacing, 1.0]))


def make_field(data, spacing=(1.0, 1.0, 1.0)):
    return DisplacementField(data=np.asarray(data, dtype=np.float64),
                             spacing=spacing, affine=np.diag([*spacing, 1.0]))


def smooth_random_field(shape, rng, amplitude=2.0, sigma=4.0, ramp=10.0):
    """Random smooth field vanishing near the y boundaries."""
    b = smooth_array(rng.normal(size=shape), sigma)
    y = np.arange(shape[1], dtype=float)
    taper = (np.sin(0.5 * np.pi * np.clip(y / ramp, 0, 1)) ** 2
             * np.sin(0.5 * np.pi * np.clip((shape[1] - 1 - y) / ramp, 0, 1)) ** 2)
    b *= taper[None, :, None]
    b = smooth_array(b, (0.0, 2.0, 0.0))
    b *= taper[None, :, None]
    b *= amplitude / max(np.abs(b).max(), 1e-12)
    return b


class TestWarpPed:
    def test_zero_field_identity(self):
        rng = np.random.default_rng(0)
        v = make_volume(rng.normal(size=(8, 10, 6)))
        f = make_field(np.zeros((8, 10, 6)))
        out = warp_ped(v, f, sign=+1, modulate=True)
        assert np.array_equal(out.data, v.data)

    def test_constant_shift(self):
        data = np.zeros((4, 12, 4))
        data[:, 7, :] = 1.0
        v = make_volume(data)
        f = make_field(np.full((4, 12, 4), 2.0))
        out = warp_ped(v, f, sign=+1, modulate=True)
        # out(y) = v(y + 2): the impulse moves from y=7 to y=5; Jacobian 1
        assert np.allclose(out.data[:, 5, :], 1.0)
        assert np.allclose(out.data.sum(), data.sum())

    def test_linear_ramp_jacobian(self):
        # b(y) = 0.1 y over constant input 1: output = 1 * (1 + 0.1) inside
        ny = 20
        b = np.broadcast_to(0.1 * np.arange(ny)[None, :, None], (4, ny, 4)).copy()
        v = make_volume(np.ones((4, ny, 4)))
        out = warp_ped(v, make_field(b), sign=+1, modulate=True)
        assert np.allclose(out.data[:, 1:-1, :], 1.1)

    def test_modulate_off(self):
        ny = 20
        b = np.broadcast_to(0.1 * np.arange(ny)[None, :, None], (4, ny, 4)).copy()
        v = make_volume(np.ones((4, ny, 4)))
        out = warp_ped(v, make_field(b), sign=+1, modulate=False)
        assert np.allclose(out.data, 1.0)

    def test_grid_mismatch(self):
        v = make_volume(np.zeros((4, 4, 4)))
        f = make_field(np.zeros((4, 5, 4)))
        with pytest.raises(GridMismatch):
            warp_ped(v, f, sign=+1)

    def test_non_diffeomorphic_rejected(self):
        b = np.zeros((4, 10, 4))
        b[:, 4, :] = 2.5
        b[:, 5, :] = -2.5  # central difference at y=4 is -2.5 -> violation
        v = make_volume(np.zeros((4, 10, 4)))
        with pytest.raises(NonDiffeomorphicField):
            warp_ped(v, make_field(b), sign=+1)

    def test_mass_conservation_smooth(self):
        rng = np.random.default_rng(42)
        img = smooth_array(rng.uniform(size=(8, 40, 8)), 2.0)
        v = make_volume(img)
        b = smooth_random_field((8, 40, 8), rng)
        out = warp_ped(v, make_field(b), sign=+1, modulate=True)
        sums_in = v.data.sum(axis=1)
        sums_out = out.data.sum(axis=1)
        assert np.allclose(sums_out, sums_in, rtol=1e-3)

    def test_antisymmetric_impulse_displacement(self):
        data = np.zeros((3, 21, 3))
        data[1, 10, 1] = 1.0
        v = make_volume(data)
        f = make_field(np.full((3, 21, 3), 3.0))
        fwd = warp_ped(v, f, sign=+1, modulate=False)
        bwd = warp_ped(v, f, sign=-1, modulate=False)
        assert fwd.data[1, 7, 1] == 1.0   # pull from y+3
        assert bwd.data[1, 13, 1] == 1.0  # pull from y-3
        assert np.array_equal(fwd.data[1, :, 1], bwd.data[1, ::-1, 1])


class TestRgpPair:
    def test_zero_field(self):
        rng = np.random.default_rng(1)
        v = make_volume(rng.normal(size=(6, 8, 4)))
        i_f, i_b = simulate_rgp_pair(v, make_field(np.zeros((6, 8, 4))))
        assert np.array_equal(i_f.data, v.data)
        assert np.array_equal(i_b.data, v.data)
        assert i_f.ped_sign == 1 and i_b.ped_sign == -1

    def test_mean_preserved_both_ways(self):
        rng = np.random.default_rng(2)
        img = smooth_array(rng.uniform(size=(8, 40, 8)), 2.0)
        v = make_volume(img)
        b = smooth_random_field((8, 40, 8), rng)
        i_f, i_b = simulate_rgp_pair(v, make_field(b))
        assert i_f.data.mean() == pytest.approx(v.data.mean(), rel=1e-3)
        assert i_b.data.mean() == pytest.approx(v.data.mean(), rel=1e-3)

    def test_impulse_moves_opposite(self):
        data = np.zeros((3, 21, 3))
        data[1, 10, 1] = 1.0
        v = make_volume(data)
        b = np.zeros((3, 21, 3))
        # smooth bump peaking at +3 around the impulse line
        y = np.arange(21)
        b[:] = 3.0 * np.exp(-((y - 10) / 6.0) ** 2)[None, :, None]
        i_f, i_b = simulate_rgp_pair(v, make_field(b))
        # truth feature at y=10 appears near y=13 forward, y=7 backward
        assert abs(np.argmax(i_f.data[1, :, 1]) - 13) <= 1
        assert abs(np.argmax(i_b.data[1, :, 1]) - 7) <= 1


class TestDisplacementMagnitude:
    def test_clinical_ballpark_at_3t(self):
        # 6 ppm at 3 T, 180 mm FOV, 0.5 ms echo spacing
        shift = displacement_magnitude(6.0, 3.0, 180.0, 0.5, 128)
        assert shift == pytest.approx(69.0, abs=1.0)
        assert 55.0 <= shift <= 75.0

    def test_zero_offset(self):
        assert displacement_magnitude(0.0, 3.0, 180.0, 0.5, 128) == 0.0

    def test_linearity_in_echo_spacing(self):
        a = displacement_magnitude(3.0, 3.0, 180.0, 0.5, 128)
        b = displacement_magnitude(3.0, 3.0, 180.0, 1.0, 128)
        assert b == pytest.approx(2 * a)

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidSpec):
            displacement_magnitude(6.0, 0.0, 180.0, 0.5, 128)


class TestPhantom:
    def test_straight_tube_at_zero_amplitude(self):
        spec = PhantomSpec(dims=(24, 24, 8), bow_amplitude_mm=0.0,
                           noise_sigma=0.0, num_levels=2, field_peak_voxels=2.0)
        truth = make_phantom(spec)
        # every true tangent is (0, 0, 1)
        e = eigen_decompose(truth.tensors)
        cord = truth.mask.data
        tangents = e.e1[cord]
        assert np.allclose(np.abs(tangents[:, 2]), 1.0, atol=1e-9)
        # centerline x/y constant
        assert np.allclose(truth.true_centerline[:, 1], truth.true_centerline[0, 1])

    def test_determinism(self):
        a = make_phantom(PhantomSpec(dims=(24, 24, 8), seed=7, num_levels=2, field_peak_voxels=2.0))
        b = make_phantom(PhantomSpec(dims=(24, 24, 8), seed=7, num_levels=2, field_peak_voxels=2.0))
        assert np.array_equal(a.clean_dwi.data, b.clean_dwi.data)
        assert np.array_equal(a.field.data, b.field.data)

    def test_b0_equals_s0_when_noiseless(self):
        truth = make_phantom(PhantomSpec(dims=(24, 24, 8), noise_sigma=0.0,
                                         num_levels=2, field_peak_voxels=2.0))
        n_b0 = int((truth.bvalues == 0).sum())
        for i in range(n_b0):
            assert np.array_equal(truth.clean_dwi.data[..., i], truth.clean.data)

    def test_tensor_alignment_invariant(self):
        truth = make_phantom(PhantomSpec(dims=(32, 32, 10), num_levels=2,
                                         field_peak_voxels=2.0))
        e = eigen_decompose(truth.tensors)
        cord_idx = np.nonzero(truth.mask.data)
        e1 = e.e1[cord_idx]
        # recompute the analytic tangent at the nearest dense curve sample
        from cordwarp.simulate import _centerline_mm
        spec = PhantomSpec(dims=(32, 32, 10), num_levels=2, field_peak_voxels=2.0)
        t_dense = np.linspace(0, 9, 2001)
        pos, tan = _centerline_mm(spec, t_dense)
        tan /= np.linalg.norm(tan, axis=1, keepdims=True)
        vox_mm = np.column_stack([cord_idx[0] * spec.spacing[0],
                                  cord_idx[1] * spec.spacing[1],
                                  cord_idx[2] * spec.spacing[2]])
        d2 = ((vox_mm[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
        expected = tan[np.argmin(d2, axis=1)]
        cosang = np.abs(np.sum(e1 * expected, axis=1))
        assert np.all(np.arccos(np.clip(cosang, -1, 1)) < 1e-6)

    def test_field_diffeomorphic_and_end_weighted(self):
        truth = make_phantom(PhantomSpec())
        truth.field.check_diffeomorphic()
        b = truth.field.data
        nz = b.shape[2]
        per_slice = np.abs(b).max(axis=(0, 1))
        assert per_slice[[1, nz - 2]].min() > 3 * per_slice[nz // 2]

    def test_invalid_spec_rejected(self):
        with pytest.raises(InvalidSpec):
            make_phantom(PhantomSpec(tube_radius_mm=100.0))
        with pytest.raises(InvalidSpec):
            make_phantom(PhantomSpec(csf_radius_mm=3.0))
        with pytest.raises(InvalidSpec):
            make_phantom(PhantomSpec(num_levels=0))
