"""Volume containers, trilinear sampling, warping and Jacobian statistics."""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tomoreg import (DisplacementField, GridSpec, Image3D, Landmarks, Mask3D,
                     gen_smooth_dvf, image_gradient, jacobian_stats,
                     trilinear_sample, warp_image, zero_displacement)

from conftest import SPEC32


def rand_image(seed, dims=(5, 6, 4), spacing=(1.5, 1.2, 2.0),
               origin=(-3.0, 2.0, 0.5)):
    rng = np.random.default_rng(seed)
    return Image3D(dims, spacing, origin, rng.random(dims))


# ---------------------------------------------------------------------------
# grid and container validation
# ---------------------------------------------------------------------------

def test_gridspec_rejects_bad_axes():
    with pytest.raises(ValueError):
        GridSpec((0, 4, 4), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (1.0, 1.0, 1.0), (np.inf, 0.0, 0.0))


def test_image_rejects_nonfinite_and_shape_mismatch():
    data = np.ones((3, 3, 3))
    data[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        Image3D((3, 3, 3), (1, 1, 1), (0, 0, 0), data)
    with pytest.raises(ValueError):
        Image3D((3, 3, 4), (1, 1, 1), (0, 0, 0), np.ones((3, 3, 3)))


def test_mask_values_must_be_binary():
    with pytest.raises(ValueError):
        Mask3D((3, 3, 3), (1, 1, 1), (0, 0, 0), 0.5 * np.ones((3, 3, 3)))
    Mask3D((3, 3, 3), (1, 1, 1), (0, 0, 0), np.ones((3, 3, 3)))


def test_displacement_field_requires_three_finite_components():
    with pytest.raises(ValueError):
        DisplacementField((3, 3, 3), (1, 1, 1), (0, 0, 0),
                          np.zeros((3, 3, 3, 2)))
    bad = np.zeros((3, 3, 3, 3))
    bad[0, 0, 0, 1] = np.inf
    with pytest.raises(ValueError):
        DisplacementField((3, 3, 3), (1, 1, 1), (0, 0, 0), bad)


def test_landmark_ids_must_be_unique():
    with pytest.raises(ValueError):
        Landmarks([1, 1], [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


# ---------------------------------------------------------------------------
# trilinear sampling
# ---------------------------------------------------------------------------

def test_sample_constant_volume_interior():
    vol = Image3D((4, 4, 4), (2.0, 2.0, 2.0), (1.0, 1.0, 1.0),
                  np.full((4, 4, 4), 5.0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = 1.0 + rng.random(3) * 6.0  # inside the voxel-center extent
        assert trilinear_sample(vol, p) == pytest.approx(5.0, abs=1e-12)


def test_sample_reproduces_grid_aligned_values():
    vol = rand_image(1)
    grid = vol.grid
    for i in range(vol.dims[0]):
        for j in range(vol.dims[1]):
            for k in range(vol.dims[2]):
                p = grid.voxel_to_world((i, j, k))
                assert trilinear_sample(vol, p) == vol.data[i, j, k]


def test_sample_cell_center_is_corner_mean():
    vol = Image3D((2, 2, 2), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
                  np.arange(8, dtype=np.float64).reshape(2, 2, 2))
    assert trilinear_sample(vol, (0.5, 0.5, 0.5)) == pytest.approx(3.5)


def test_sample_is_linear_in_the_volume():
    v1, v2 = rand_image(2), rand_image(3)
    comb = Image3D(v1.dims, v1.spacing, v1.origin,
                   2.0 * v1.data - 0.5 * v2.data)
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = np.asarray(v1.origin) + rng.random(3) * 3.0
        want = 2.0 * trilinear_sample(v1, p) - 0.5 * trilinear_sample(v2, p)
        assert trilinear_sample(comb, p) == pytest.approx(want, abs=1e-12)


def test_sample_outside_grid_is_zero():
    vol = rand_image(5)
    assert trilinear_sample(vol, (1e4, 0.0, 0.0)) == 0.0
    assert trilinear_sample(vol, (-3.0 - 1.5 * 10, 2.0, 0.5)) == 0.0


def test_sample_rejects_nonfinite_points():
    vol = rand_image(6)
    with pytest.raises(ValueError):
        trilinear_sample(vol, (np.nan, 0.0, 0.0))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def test_zero_warp_is_bit_identical():
    src = rand_image(7)
    u = zero_displacement(src.grid)
    out = warp_image(src, u)
    assert_array_equal(out.data, src.data)


def test_constant_one_voxel_shift_indexes_neighbors():
    src = rand_image(8, dims=(6, 5, 4))
    shift = np.zeros(src.dims + (3,))
    shift[..., 0] = src.spacing[0]
    u = DisplacementField(src.dims, src.spacing, src.origin, shift)
    out = warp_image(src, u)
    assert_allclose(out.data[:-1, :, :], src.data[1:, :, :], atol=1e-12)
    # the last x-slab samples one voxel past the grid: zero padded
    assert_array_equal(out.data[-1, :, :], np.zeros(src.dims[1:]))


def test_impulse_survives_identity_warp():
    data = np.zeros((5, 5, 5))
    data[2, 3, 1] = 1.0
    src = Image3D((5, 5, 5), (1, 1, 1), (0, 0, 0), data)
    out = warp_image(src, zero_displacement(src.grid))
    assert_array_equal(out.data, data)


def test_nearest_mask_warp_stays_binary():
    rng = np.random.default_rng(9)
    mask = Mask3D((6, 6, 6), (1.5, 1.5, 1.5), (0, 0, 0),
                  (rng.random((6, 6, 6)) > 0.5).astype(np.float64))
    u = DisplacementField((6, 6, 6), (1.5, 1.5, 1.5), (0, 0, 0),
                          0.8 * rng.standard_normal((6, 6, 6, 3)))
    out = warp_image(mask, u, interp="nearest")
    assert isinstance(out, Mask3D)
    assert set(np.unique(out.data)) <= {0.0, 1.0}


def test_mask_warp_requires_nearest_mode():
    mask = Mask3D((4, 4, 4), (1, 1, 1), (0, 0, 0), np.ones((4, 4, 4)))
    with pytest.raises(ValueError):
        warp_image(mask, zero_displacement(mask.grid), interp="trilinear")


def test_warp_rejects_nonfinite_displacement():
    # a displacement field with non-finite entries cannot even be built
    bad = np.zeros((4, 4, 4, 3))
    bad[2, 2, 2, 0] = np.nan
    with pytest.raises(ValueError):
        DisplacementField((4, 4, 4), (1, 1, 1), (0, 0, 0), bad)


# ---------------------------------------------------------------------------
# image gradient
# ---------------------------------------------------------------------------

def test_gradient_of_constant_is_zero():
    vol = Image3D((5, 5, 5), (1.1, 0.9, 1.3), (0, 0, 0),
                  np.full((5, 5, 5), 3.0))
    g = image_gradient(vol)
    assert_array_equal(g, np.zeros((5, 5, 5, 3)))


def test_gradient_of_coordinate_fields_is_exact():
    grid = GridSpec((6, 5, 4), (1.5, 1.2, 2.0), (-3.0, 2.0, 0.5))
    xyz = grid.voxel_centers()
    vol_x = Image3D(grid.dims, grid.spacing, grid.origin, xyz[..., 0])
    g = image_gradient(vol_x)
    core = g[1:-1, 1:-1, 1:-1]
    assert_allclose(core[..., 0], 1.0, atol=1e-12)
    assert_allclose(core[..., 1], 0.0, atol=1e-12)
    assert_allclose(core[..., 2], 0.0, atol=1e-12)

    affine = xyz[..., 0] + 2.0 * xyz[..., 1] + 3.0 * xyz[..., 2]
    g = image_gradient(Image3D(grid.dims, grid.spacing, grid.origin, affine))
    core = g[1:-1, 1:-1, 1:-1]
    for axis, want in enumerate((1.0, 2.0, 3.0)):
        assert_allclose(core[..., axis], want, atol=1e-12)


# ---------------------------------------------------------------------------
# Jacobian statistics
# ---------------------------------------------------------------------------

def test_jacobian_of_identity_transform():
    u = zero_displacement(GridSpec((5, 5, 5), (1.3, 1.0, 0.8)))
    stats = jacobian_stats(u)
    assert stats.pct_negative == 0.0
    assert stats.min_det == pytest.approx(1.0, abs=1e-12)


def test_jacobian_of_point_reflection_is_minus_one():
    grid = GridSpec((5, 5, 5), (1.5, 1.5, 1.5), (-3.0, -3.0, -3.0))
    xyz = grid.voxel_centers()
    u = DisplacementField(grid.dims, grid.spacing, grid.origin, -2.0 * xyz)
    stats = jacobian_stats(u)
    assert stats.pct_negative == 100.0
    assert stats.min_det == pytest.approx(-1.0, abs=1e-12)


def test_jacobian_of_constant_displacement_is_one():
    grid = GridSpec((4, 5, 6), (1.0, 2.0, 1.5))
    u = DisplacementField(grid.dims, grid.spacing, grid.origin,
                          np.broadcast_to(np.array([3.0, -1.0, 2.5]),
                                          grid.dims + (3,)).copy())
    stats = jacobian_stats(u)
    assert stats.pct_negative == 0.0
    assert stats.min_det == pytest.approx(1.0, abs=1e-12)


def test_generated_smooth_field_has_no_folding():
    u = gen_smooth_dvf(SPEC32, seed=42)
    assert jacobian_stats(u).pct_negative < 0.5
