import numpy as np
import pytest

from hmtrack.errors import DataError, EmptyOverlapError
from hmtrack.geometry import Calibration, RigidParams
from hmtrack.imaging import Slice, SliceStack, extract_section
from hmtrack.phantom import PhantomConfig, epi_geometries, epi_grid, generate
from hmtrack.similarity import (
    JointHistogram, batch_mutual_information, bin_index, joint_histogram, mutual_information,
    stack_objective, stack_similarity,
)


def test_two_level_diagonal():
    a = np.repeat([0.0, 1.0], 50)
    h = joint_histogram(a, a, bins=2)
    assert np.allclose(h.probabilities(), [[0.5, 0], [0, 0.5]])
    assert mutual_information(h) == pytest.approx(np.log(2), abs=1e-12)
    pa, pb = h.marginals()
    assert np.allclose(pa, h.probabilities().sum(axis=1)) and h.total == 100


def test_constant_image_is_degenerate():
    h = joint_histogram(np.ones(100), np.arange(100.0))
    assert h.degenerate and mutual_information(h) == 0.0


def test_independent_uniform_cells():
    rng = np.random.default_rng(0)
    n, bins = 10_000, 16
    h = joint_histogram(rng.uniform(size=n), rng.uniform(size=n), bins=bins)
    p = 1 / bins**2
    se = np.sqrt(p * (1 - p) / n)
    assert np.abs(h.probabilities() - p).max() < 4 * se * 1.6  # max over 256 cells


def test_product_histogram_has_zero_mi():
    px = np.array([0.1, 0.2, 0.3, 0.4])
    py = np.array([0.5, 0.25, 0.25, 0.0])
    h = JointHistogram(np.outer(px, py) * 1000, np.arange(5.0), np.arange(5.0))
    assert abs(mutual_information(h)) < 1e-12


def test_self_information_of_eight_levels():
    x = np.repeat(np.arange(8.0), 40)
    assert mutual_information(joint_histogram(x, x, bins=8)) == pytest.approx(np.log(8), abs=1e-12)


def test_mi_invariant_under_bin_permutation():
    rng = np.random.default_rng(1)
    counts = rng.integers(0, 20, (8, 8)).astype(float)
    base = mutual_information(JointHistogram(counts, np.arange(9.0), np.arange(9.0)))
    perm_a, perm_b = rng.permutation(8), rng.permutation(8)
    shuffled = counts[perm_a][:, perm_b]
    assert mutual_information(JointHistogram(shuffled, np.arange(9.0), np.arange(9.0))) == pytest.approx(base, abs=1e-12)
    assert base >= 0


def test_too_few_pairs():
    with pytest.raises(EmptyOverlapError):
        joint_histogram(np.arange(40.0), np.arange(40.0), mask=np.arange(40) < 31)


def test_batch_matches_scalar_histogram():
    rng = np.random.default_rng(2)
    obs = rng.normal(size=500)
    refs = rng.normal(size=(3, 500)) + obs
    valid = rng.uniform(size=(3, 500)) > 0.2
    oi = bin_index(obs, obs.min(), obs.max(), 32)
    got = batch_mutual_information(oi, refs, valid)
    for k in range(3):
        h = joint_histogram(obs, refs[k], valid[k], range_a=(obs.min(), obs.max()))
        assert got[k] == pytest.approx(mutual_information(h), abs=1e-12)
    few = np.zeros((1, 500), dtype=bool)
    few[0, :10] = True
    assert batch_mutual_information(oi, refs[:1], few)[0] == -np.inf


@pytest.fixture(scope="module")
def still_phantom():
    cfg = PhantomConfig.desk(max_angle_deg=0.0, max_trans_mm=0.0, noise_fraction=0.0, blur_sigma=0.0)
    return generate(cfg), cfg


def test_h0_stack_equals_single_slice_mi(still_phantom):
    ds, _ = still_phantom
    s = ds.ordered_slices()[5]
    p = RigidParams.from_degrees(1.0, -0.5, 0.3, 0.7, -1.0, 0.2)
    section, ok = extract_section(ds.v_anat, s.geometry, p, ds.calibration)
    anat = (ds.v_anat.data.min(), ds.v_anat.data.max())
    h = joint_histogram(s.data, section.data, ok, range_b=anat)
    got = stack_similarity(SliceStack((s,), 0), p, ds.v_anat, ds.calibration)
    assert got == pytest.approx(mutual_information(h), abs=1e-12)


def test_truth_beats_random_probes(still_phantom):
    ds, cfg = still_phantom
    traj = ds.true_traj
    rng = np.random.default_rng(3)
    ordered = ds.ordered_slices()
    for t in (20, 100, 150):
        f = stack_objective(ordered[t - 1:t + 2], ds.v_anat, ds.calibration)
        probes = traj[t] + np.concatenate([rng.normal(0, np.deg2rad(1.0), (100, 3)),
                                           rng.normal(0, 1.0, (100, 3))], axis=1)
        assert f(traj[t]) >= f.batch(probes).max()


def test_fully_outside_is_empty_overlap(still_phantom):
    ds, _ = still_phantom
    s = ds.slices[0]
    with pytest.raises(EmptyOverlapError):
        stack_similarity(SliceStack((s,), 0), RigidParams(dz=1e4), ds.v_anat, ds.calibration)


def test_psf_matching_needs_one_grid():
    g = epi_geometries((8, 8, 2), (1, 1, 1), (0, 0, 0))
    from hmtrack.imaging import SliceGeometry, Volume
    other = SliceGeometry(1, [0, 0, 1], grid=(4, 4))
    slices = [Slice(g[0], np.zeros((8, 8))), Slice(other, np.zeros((4, 4)))]
    with pytest.raises(DataError):
        stack_objective(slices, Volume(np.ones((8, 8, 2))), Calibration(), psf_sigma=1.0)
