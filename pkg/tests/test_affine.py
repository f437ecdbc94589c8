"""Per-class translation warps and their adjoint/derivative paths."""

import numpy as np
import pytest

from priorwarp.affine import (
    ClassShifts,
    affine_map,
    apply_class_shifts,
    shift_sample,
    shift_sample_dt,
    shift_sample_with_dt,
    shift_scatter,
    shifted_copy,
)
from priorwarp.losses import soft_centroids
from priorwarp.volume import Volume, sample_channel


def interior_blob(rng, dims=(9, 9, 9)):
    """Positive support well away from every border."""
    data = np.zeros(dims)
    data[3:6, 3:6, 3:6] = rng.uniform(0.5, 1.0, (3, 3, 3))
    return data


def test_affine_map_identity():
    p = np.asarray([1.5, -2.0, 3.0])
    assert np.array_equal(affine_map(tuple(p), np.zeros(3)), p)


def test_affine_map_example():
    got = affine_map((1.0, 2.0, 3.0), np.asarray([1.0, 0.0, -2.0]))
    assert np.array_equal(got, [2.0, 2.0, 1.0])


def test_affine_map_matches_matrix_form():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.normal(size=3)
        t = rng.normal(size=3)
        mat = np.eye(4)
        mat[:3, 3] = t
        want = (mat @ np.append(p, 1.0))[:3]
        assert np.abs(affine_map(tuple(p), t) - want).max() < 1e-12


def test_shifted_copy_moves_and_zero_fills():
    arr = np.arange(27, dtype=np.float64).reshape(3, 3, 3)
    out = shifted_copy(arr, (0, 0, 1))
    assert np.array_equal(out[:, :, :2], arr[:, :, 1:])
    assert not out[:, :, 2].any()
    # shifting past the extent clears everything
    assert not shifted_copy(arr, (5, 0, 0)).any()


def test_zero_shift_is_bit_exact():
    rng = np.random.default_rng(1)
    vol = Volume(rng.normal(size=(3, 4, 4, 4)))
    out = apply_class_shifts(vol, ClassShifts(np.zeros((3, 3))))
    assert np.array_equal(out.data, vol.data)


def test_integer_shift_displaces_by_minus_theta():
    rng = np.random.default_rng(2)
    vol = Volume(rng.normal(size=(1, 3, 3, 3)))
    out = apply_class_shifts(vol, ClassShifts(np.asarray([[0.0, 0.0, 1.0]])))
    # output voxel d reads source d+1: content appears displaced by -1
    assert np.array_equal(out.data[0, :, :, :2], vol.data[0, :, :, 1:])
    assert not out.data[0, :, :, 2].any()


def test_integer_shifts_compose_exactly():
    rng = np.random.default_rng(3)
    arr = np.zeros((8, 8, 8))
    arr[3:5, 3:5, 3:5] = rng.uniform(1, 2, (2, 2, 2))
    a = np.asarray([1.0, 0.0, -1.0])
    b = np.asarray([0.0, 1.0, 1.0])
    two_step = shift_sample(shift_sample(arr, a), b)
    assert np.array_equal(two_step, shift_sample(arr, a + b))


def test_shift_matches_general_sampler():
    rng = np.random.default_rng(4)
    arr = rng.normal(size=(5, 6, 4))
    t = np.asarray([0.7, -1.2, 2.4])
    lattice = np.stack(
        np.meshgrid(*(np.arange(n, dtype=np.float64) for n in arr.shape), indexing="ij")
    ).reshape(3, -1)
    want = sample_channel(arr, lattice + t[:, None]).reshape(arr.shape)
    got = shift_sample(arr, t)
    assert np.abs(got - want).max() < 1e-12


def test_centroid_equivariance():
    rng = np.random.default_rng(5)
    for seed in range(5):
        data = interior_blob(np.random.default_rng(seed))
        theta = rng.uniform(-1.5, 1.5, 3)
        vol = Volume(data[None])
        out = apply_class_shifts(vol, ClassShifts(theta[None]))
        before = soft_centroids(vol)[0]
        after = soft_centroids(out)[0]
        assert np.abs(after - (before - theta)).max() < 1e-9


def test_mass_never_increases():
    rng = np.random.default_rng(6)
    for seed in range(10):
        arr = np.abs(np.random.default_rng(seed).normal(size=(5, 5, 5)))
        t = rng.uniform(-3, 3, 3)
        assert shift_sample(arr, t).sum() <= arr.sum() + 1e-12


def test_scatter_is_the_adjoint():
    rng = np.random.default_rng(7)
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.normal(size=(4, 5, 3))
        g = r.normal(size=(4, 5, 3))
        t = r.uniform(-2, 2, 3)
        lhs = float(np.sum(g * shift_sample(x, t)))
        rhs = float(np.sum(shift_scatter(g, t) * x))
        assert abs(lhs - rhs) < 1e-12


def test_fused_sample_matches_plain_sample():
    rng = np.random.default_rng(8)
    arr = rng.normal(size=(6, 5, 4))
    for t in (np.asarray([0.3, 1.7, -0.4]), np.asarray([1.0, 0.0, -2.0])):
        out, dt = shift_sample_with_dt(arr, t)
        assert np.array_equal(out, shift_sample(arr, t))
        assert dt.shape == (3,) + arr.shape
        assert np.array_equal(shift_sample_dt(arr, t), dt)


def test_fused_derivative_matches_finite_differences():
    rng = np.random.default_rng(9)
    arr = rng.normal(size=(6, 6, 6))
    t = np.asarray([0.37, -1.42, 0.55])  # fractional: no cell-boundary kinks
    _, dt = shift_sample_with_dt(arr, t)
    h = 1e-6
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (shift_sample(arr, t + e) - shift_sample(arr, t - e)) / (2 * h)
        # the warp is linear within a cell so central differences are exact
        assert np.abs(dt[axis] - fd).max() < 1e-8


def test_channel_count_mismatch_errors():
    vol = Volume(np.zeros((2, 3, 3, 3)))
    with pytest.raises(ValueError, match="channel"):
        apply_class_shifts(vol, ClassShifts(np.zeros((3, 3))))


def test_class_shifts_validation():
    with pytest.raises(ValueError, match="shape"):
        ClassShifts(np.zeros((3,)))
    with pytest.raises(ValueError, match="non-finite"):
        ClassShifts(np.full((1, 3), np.nan))
