import numpy as np
import pytest

from hmtrack.errors import DataError, EmptyOverlapError, MissingSliceError, ShapeMismatchError
from hmtrack.geometry import Calibration, RigidParams
from hmtrack.imaging import (
    Outside, Slice, SliceGeometry, Volume, acquisition_order, epi_geometries, extract_section,
    make_stack, mean_volume, sample_points, stack_slices_to_volume, time_index, trilinear_sample,
)


def affine_volume(a=3.0, b=(0.5, -1.25, 2.0)):
    v = Volume(np.zeros((9, 8, 7)), (1.5, 2.0, 3.0), (-4.0, 1.0, -10.0))
    field = a + v.voxel_centers() @ np.asarray(b)
    return v.with_data(field), a, np.asarray(b)


def test_trilinear_reproduces_affine_fields():
    v, a, b = affine_volume()
    rng = np.random.default_rng(0)
    lo = np.asarray(v.origin)
    hi = lo + (np.asarray(v.dims) - 1) * v.voxel_size
    pts = rng.uniform(lo, hi, (2000, 3))
    vals, ok = sample_points(v, pts)
    assert ok.all()
    assert np.abs(vals - (a + pts @ b)).max() < 1e-10


def test_outside_points_are_masked():
    v, _, _ = affine_volume()
    assert trilinear_sample(v, [1e3, 0, 0]) is Outside
    corner = np.asarray(v.origin)
    assert trilinear_sample(v, corner) == pytest.approx(float(v.data[0, 0, 0]))


def test_volume_validation():
    with pytest.raises(ShapeMismatchError):
        Volume(np.zeros((3, 3)))
    with pytest.raises(DataError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(DataError):
        Volume(np.full((2, 2, 2), np.nan))


def test_extract_section_identity_is_idempotent():
    rng = np.random.default_rng(1)
    v = Volume(rng.normal(size=(16, 12, 6)), (2.0, 2.0, 3.0), (-15.0, -11.0, -7.5))
    for g in epi_geometries(v.dims, v.voxel_size, v.origin):
        s, ok = extract_section(v, g, RigidParams(), Calibration())
        assert ok.all()
        assert np.array_equal(s.data, v.data[:, :, g.slice_index])


def test_extract_section_empty_overlap():
    v = Volume(np.ones((8, 8, 4)))
    g = epi_geometries(v.dims, v.voxel_size, v.origin)[0]
    with pytest.raises(EmptyOverlapError):
        extract_section(v, g, RigidParams(dx=500.0), Calibration())


def test_valid_fraction_monotone_in_translation():
    v = Volume(np.ones((20, 20, 10)), (1, 1, 1), (-9.5, -9.5, -4.5))
    g = SliceGeometry(0, [-9.5, -9.5, 0.0], grid=(20, 20))
    fractions = []
    for d in np.linspace(0, 25, 26):
        pts = g.pixel_centers.reshape(-1, 3)
        from hmtrack.imaging import section_samples
        _, ok = section_samples(v, pts, RigidParams(dx=d, dy=0.3 * d).to_array()[None], Calibration())
        fractions.append(ok.mean())
    assert all(b <= a for a, b in zip(fractions, fractions[1:]))
    assert fractions[0] == 1.0 and fractions[-1] == 0.0


def test_acquisition_orders():
    assert acquisition_order(5, "sequential") == [0, 1, 2, 3, 4]
    assert acquisition_order(5) == [0, 2, 4, 1, 3]
    assert time_index(1, 1, 5) == 5 + 3
    with pytest.raises(DataError):
        acquisition_order(4, "spiral")


def test_stack_round_trip_is_order_independent():
    rng = np.random.default_rng(2)
    v = Volume(rng.normal(size=(6, 5, 4)), (2.0, 2.0, 6.0), (0.0, 0.0, 0.0))
    geoms = epi_geometries(v.dims, v.voxel_size, v.origin)
    slices = [Slice(g, v.data[:, :, g.slice_index]) for g in geoms]
    forward = stack_slices_to_volume(slices)
    backward = stack_slices_to_volume([slices[i] for i in acquisition_order(4)])
    assert np.array_equal(forward.data, v.data) and np.array_equal(backward.data, v.data)
    assert forward.same_grid(v)
    with pytest.raises(MissingSliceError):
        stack_slices_to_volume(slices[:2] + slices[3:])


def test_make_stack_truncates_at_ends():
    items = list(range(5))
    assert make_stack(items, 0, 1).slices == (0, 1) and make_stack(items, 0, 1).center == 0
    assert make_stack(items, 2, 1).slices == (1, 2, 3) and make_stack(items, 2, 1).center == 1
    assert make_stack(items, 4, 2).slices == (2, 3, 4) and make_stack(items, 4, 2).center == 2
    assert make_stack(items, 3, 0).slices == (3,)


def test_mean_volume_checks_grid():
    a = Volume(np.ones((2, 2, 2)))
    b = Volume(np.full((2, 2, 2), 3.0))
    assert np.all(mean_volume([a, b]).data == 2.0)
    with pytest.raises(ShapeMismatchError):
        mean_volume([a, Volume(np.ones((2, 2, 3)))])


def test_slice_shape_checked():
    g = SliceGeometry(0, [0, 0, 0], grid=(3, 4))
    with pytest.raises(ShapeMismatchError):
        Slice(g, np.zeros((4, 3)))
    with pytest.raises(DataError):
        SliceGeometry(0, [0, 0, 0], u_axis=[1, 1, 0])
