import json
import struct

import numpy as np
import pytest

from hmtrack import io as hio
from hmtrack.errors import (
    BadMagicError, ConfigError, DataError, MalformedHeaderError, SizeMismatchError, UnsupportedFeatureError,
)
from hmtrack.geometry import Calibration, RigidParams
from hmtrack.imaging import Volume
from hmtrack.phantom import PhantomConfig, generate


def test_volume_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(16, 16, 16)).astype(np.float32), (1.5, 2.0, 3.0), (-1.0, 2.0, 4.5))
    p = hio.write_volume(tmp_path / "v.f32", v, units="a.u.")
    w = hio.read_volume(p)
    assert np.array_equal(w.data, v.data) and w.voxel_size == v.voxel_size and w.origin == v.origin
    assert (tmp_path / "v.f32").read_bytes() == np.asarray(v.data, "<f4").ravel(order="F").tobytes()
    hdr = json.loads((tmp_path / "v.json").read_text())
    assert hdr == {"dims": [16, 16, 16], "voxel_size_mm": [1.5, 2.0, 3.0], "origin_mm": [-1.0, 2.0, 4.5],
                   "intensity_units": "a.u."}


def test_volume_x_fastest_order(tmp_path):
    data = np.arange(24, dtype=float).reshape((2, 3, 4), order="F")
    hio.write_volume(tmp_path / "o.f32", Volume(data))
    raw = np.frombuffer((tmp_path / "o.f32").read_bytes(), "<f4")
    assert np.array_equal(raw, np.arange(24))


def test_truncated_and_mismatched_volumes(tmp_path):
    p = hio.write_volume(tmp_path / "v.f32", Volume(np.ones((4, 4, 4))))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(SizeMismatchError, match="63.*64|64.*63"):
        hio.read_volume(p)
    p = hio.write_volume(tmp_path / "w.f32", Volume(np.ones((4, 4, 4))))
    hdr = json.loads(p.with_suffix(".json").read_text())
    hdr["dims"] = [4, 4, 5]
    p.with_suffix(".json").write_text(json.dumps(hdr))
    with pytest.raises(SizeMismatchError, match="80"):
        hio.read_volume(p)


def test_malformed_headers(tmp_path):
    p = hio.write_volume(tmp_path / "v.f32", Volume(np.ones((2, 2, 2))))
    p.with_suffix(".json").write_text("{not json")
    with pytest.raises(MalformedHeaderError):
        hio.read_volume(p)
    p.with_suffix(".json").write_text(json.dumps({"dims": [2, 2, 2]}))
    with pytest.raises(MalformedHeaderError):
        hio.read_volume(p)


def handmade_nifti(data, spacing, datatype=16, magic=b"n+1\x00"):
    """NIfTI-1 header assembled field by field from the published layout."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)                                   # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)           # dim
    struct.pack_into("<h", hdr, 70, datatype)                              # datatype
    struct.pack_into("<h", hdr, 72, 32)                                    # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)             # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                                # vox_offset
    hdr[344:348] = magic
    return bytes(hdr) + bytes(4) + np.asarray(data, "<f4").tobytes(order="F")


def test_minimal_nifti_float32(tmp_path):
    p = tmp_path / "ones.nii"
    p.write_bytes(handmade_nifti(np.ones((4, 4, 4)), (0.78, 0.78, 1.5)))
    v = hio.read_nifti_subset(p)
    assert v.dims == (4, 4, 4) and np.all(v.data == 1.0)
    assert np.allclose(v.voxel_size, (0.78, 0.78, 1.5), atol=1e-6)


def test_nifti_int16_scaling_and_order(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape((2, 3, 4))
    p = tmp_path / "i.nii"
    p.write_bytes(hio.nifti_bytes(data, (1, 2, 3), datatype=4, slope=2.0, inter=1.0))
    v = hio.read_nifti_subset(p)
    assert np.array_equal(v.data, data * 2.0 + 1.0)


def test_nifti_rejections(tmp_path):
    p = tmp_path / "x.nii"
    p.write_bytes(handmade_nifti(np.ones((2, 2, 2)), (1, 1, 1), magic=b"ni1\x00"))
    with pytest.raises(UnsupportedFeatureError, match="magic"):
        hio.read_nifti_subset(p)
    p.write_bytes(handmade_nifti(np.ones((2, 2, 2)), (1, 1, 1), datatype=32))
    with pytest.raises(UnsupportedFeatureError, match="datatype"):
        hio.read_nifti_subset(p)
    p.write_bytes(handmade_nifti(np.ones((2, 2, 2)), (1, 1, 1), magic=b"abcd"))
    with pytest.raises(BadMagicError):
        hio.read_nifti_subset(p)
    p.write_bytes(handmade_nifti(np.ones((2, 2, 2)), (1, 1, 1))[:-8])
    with pytest.raises(SizeMismatchError):
        hio.read_nifti_subset(p)


def test_calibration_round_trip(tmp_path):
    cal = Calibration.from_static(RigidParams.from_degrees(1, -2, 3, 4, 5, 6), c=[1, 2, 3],
                                  sigma_d=np.diag([1e-4] * 3 + [0.5] * 3))
    hio.write_calibration(tmp_path / "c.json", cal)
    back = hio.read_calibration(tmp_path / "c.json")
    for a in ("r_s", "q_s", "c", "sigma_d"):
        assert np.allclose(getattr(back, a), getattr(cal, a), rtol=1e-14, atol=1e-18)
    d = json.loads((tmp_path / "c.json").read_text())
    d["schema_version"] = 2
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(ConfigError):
        hio.read_calibration(tmp_path / "c.json")


def test_csv_is_lf_utf8(tmp_path):
    p = hio.write_csv(tmp_path / "a.csv", ("x", "y"), [[1, 0.1], [2, float("nan")]])
    assert p.read_bytes() == b"x,y\n1,0.1\n2,nan\n"
    assert hio.read_csv(p) == [{"x": "1", "y": "0.1"}, {"x": "2", "y": "nan"}]


@pytest.fixture(scope="module")
def small_dataset():
    return generate(PhantomConfig.desk(n_volumes=2, volumes_per_cycle=2))


def test_dataset_round_trip(tmp_path, small_dataset):
    ds = small_dataset
    hio.write_dataset(tmp_path / "d", ds.v_anat, ds.slices, ds.epi_grid, truth=ds)
    back = hio.load_dataset(tmp_path / "d")
    assert len(back.slices) == len(ds.slices)
    for a, b in zip(ds.ordered_slices(), back.ordered_slices()):
        assert (a.time_index, a.volume_index, a.slice_index) == (b.time_index, b.volume_index, b.slice_index)
        assert np.array_equal(np.float32(a.data), b.data)
        assert np.allclose(a.geometry.pixel_centers, b.geometry.pixel_centers, atol=0)
    assert back.design == ds.design
    assert np.allclose(back.true_traj, ds.true_traj, rtol=1e-15, atol=1e-18)
    assert back.grid.same_grid(ds.epi_grid)


def test_dataset_manifest_checked(tmp_path, small_dataset):
    ds = small_dataset
    lay = hio.write_dataset(tmp_path / "d", ds.v_anat, ds.slices, ds.epi_grid)
    victim = sorted((tmp_path / "d" / "slices").glob("*.f32"))[3]
    victim.unlink()
    with pytest.raises(DataError):
        hio.load_dataset(lay.root)


def test_trajectory_round_trip(tmp_path, small_dataset):
    ds = small_dataset
    hio.write_trajectory(tmp_path / "t.csv", ds.slices, ds.true_traj)
    theta, status, obj = hio.read_trajectory(tmp_path / "t.csv")
    assert np.allclose(theta, ds.true_traj, rtol=1e-14, atol=1e-17)
    assert status == ["truth"] * len(ds.slices) and np.all(np.isnan(obj))
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "t,m,n,alpha_deg,beta_deg,gamma_deg,dx_mm,dy_mm,dz_mm,status,objective"


def test_config_validation(tmp_path):
    cfg = hio.PipelineConfig.from_dict({"schema_version": 1, "track": {"n_particles": 500, "h": 1},
                                        "analysis": {"n_permutations": 100}})
    assert cfg.track_config(seed=3).n_particles == 500 and cfg.track_config(seed=3).seed == 3
    assert hio.PipelineConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"schema_version": 1, "bogus": 1}, {"schema_version": 1, "track": {"particles": 1}},
                {"schema_version": 0}, {"schema_version": 1, "track": {"n_particles": 10}}):
        with pytest.raises((ConfigError, DataError)):
            hio.PipelineConfig.from_dict(bad)
    assert hio.load_config(None) == hio.PipelineConfig()
