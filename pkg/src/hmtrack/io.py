"""File formats: native volumes, a NIfTI-1 subset, dataset layout, calibration
files, pipeline configuration and CSV tables."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError, ConfigError, DataError, MalformedHeaderError, SizeMismatchError,
    UnsupportedFeatureError,
)
from .geometry import Calibration
from .imaging import Slice, SliceGeometry, Volume
from .simplex import SimplexOptions

SCHEMA_VERSION = 1
VOLUME_SUFFIX = ".f32"
_DEG_MM = np.array([np.pi / 180.0] * 3 + [1.0] * 3)


# ---------------------------------------------------------------- atomic writes

def atomic_write_bytes(path, data: bytes) -> Path:
    """Write ``data`` to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------------------- native volumes

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def volume_header(v: Volume, units: str = "arbitrary", **extra) -> dict:
    hdr = {
        "dims": [int(n) for n in v.dims],
        "voxel_size_mm": [float(s) for s in v.voxel_size],
        "origin_mm": [float(o) for o in v.origin],
        "intensity_units": units,
    }
    hdr.update(extra)
    return hdr


def write_volume(path, v: Volume, units: str = "arbitrary", **extra) -> Path:
    """Write ``<path>`` (float32 LE, x fastest) and its ``.json`` header."""
    path = Path(path)
    raw = np.asarray(v.data, dtype="<f4").ravel(order="F").tobytes()
    atomic_write_bytes(path, raw)
    write_json(_sidecar(path), volume_header(v, units, **extra))
    return path


def _check_header(hdr, path) -> None:
    try:
        dims = hdr["dims"]
        ok = (len(dims) == 3 and all(isinstance(n, int) and n > 0 for n in dims)
              and len(hdr["voxel_size_mm"]) == 3 and all(float(s) > 0 for s in hdr["voxel_size_mm"])
              and len(hdr["origin_mm"]) == 3 and isinstance(hdr["intensity_units"], str))
        [float(o) for o in hdr["origin_mm"]]
    except (KeyError, TypeError, ValueError):
        ok = False
    if not ok:
        raise MalformedHeaderError(f"{path}: header needs dims, voxel_size_mm, origin_mm, intensity_units")


def read_volume_header(path) -> dict:
    path = Path(path)
    hdr = read_json(_sidecar(path))
    if not isinstance(hdr, dict):
        raise MalformedHeaderError(f"{_sidecar(path)}: header must be a JSON object")
    _check_header(hdr, _sidecar(path))
    return hdr


def read_volume(path) -> Volume:
    path = Path(path)
    hdr = read_volume_header(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    expected = int(np.prod(hdr["dims"]))
    if len(raw) % 4 or len(raw) // 4 != expected:
        raise SizeMismatchError(
            f"{path}: data holds {len(raw)} bytes ({len(raw) / 4:g} values), header dims "
            f"{hdr['dims']} need {expected} values")
    data = np.frombuffer(raw, dtype="<f4").reshape(hdr["dims"], order="F")
    return Volume(data.astype(np.float64), tuple(hdr["voxel_size_mm"]), tuple(hdr["origin_mm"]))


# ---------------------------------------------------------------- NIfTI-1 subset

_NIFTI_TYPES = {4: "<i2", 16: "<f4"}


def read_nifti_subset(path) -> Volume:
    """Read a single-file little-endian NIfTI-1 volume (int16 or float32)."""
    raw = Path(path).read_bytes()
    if len(raw) < 352:
        raise MalformedHeaderError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", raw, 0)[0] == 348:
            raise UnsupportedFeatureError(f"{path}: byte order: big-endian files are not supported")
        raise MalformedHeaderError(f"{path}: sizeof_hdr={sizeof_hdr}, expected 348")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFeatureError(f"{path}: magic: two-file (.hdr/.img) form is not supported")
    if magic != b"n+1\x00":
        raise BadMagicError(f"{path}: magic {magic!r} is not 'n+1\\0'")
    dim = struct.unpack_from("<8h", raw, 40)
    if not 1 <= dim[0] <= 7:
        raise MalformedHeaderError(f"{path}: dim[0]={dim[0]} out of range")
    extra = [d for d in dim[4:dim[0] + 1] if d > 1]
    if dim[0] > 3 and extra:
        raise UnsupportedFeatureError(f"{path}: dim: {dim[0]}-D data with extent {dim[4:dim[0] + 1]}")
    dims = tuple(max(int(d), 1) for d in (dim[1:4] if dim[0] >= 3 else dim[1:dim[0] + 1] + (1,) * (3 - dim[0])))
    datatype, _bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in _NIFTI_TYPES:
        raise UnsupportedFeatureError(f"{path}: datatype: code {datatype} (only int16=4, float32=16)")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = struct.unpack_from("<f", raw, 108)[0]
    slope, inter = struct.unpack_from("<ff", raw, 112)
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    dtype = np.dtype(_NIFTI_TYPES[datatype])
    start = int(vox_offset)
    n = int(np.prod(dims))
    if start < 352 or len(raw) < start + n * dtype.itemsize:
        raise SizeMismatchError(
            f"{path}: need {n * dtype.itemsize} data bytes from offset {start}, file has {len(raw)} bytes")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=start).reshape(dims, order="F").astype(float)
    if datatype == 4 and slope != 0:
        data = data * slope + inter
    return Volume(data, spacing, (0.0, 0.0, 0.0))


def nifti_bytes(data, spacing=(1.0, 1.0, 1.0), datatype: int = 16, magic: bytes = b"n+1\x00",
                slope: float = 0.0, inter: float = 0.0) -> bytes:
    """Minimal NIfTI-1 file contents (header, 4-byte extension flag, data)."""
    data = np.asarray(data)
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    dtype = np.dtype(_NIFTI_TYPES.get(datatype, "<f4"))
    struct.pack_into("<hh", hdr, 70, datatype, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, slope, inter)
    hdr[344:348] = magic
    return bytes(hdr) + b"\x00" * 4 + data.astype(dtype).ravel(order="F").tobytes()


# ---------------------------------------------------------------- calibration

def calibration_to_dict(cal: Calibration) -> dict:
    """Calibration as JSON; ``sigma_d`` is stored in degree/mm units."""
    sd = np.asarray(cal.sigma_d) / np.outer(_DEG_MM, _DEG_MM)
    return {
        "schema_version": SCHEMA_VERSION,
        "r_s": np.asarray(cal.r_s).tolist(),
        "q_s_mm": np.asarray(cal.q_s).tolist(),
        "c_mm": np.asarray(cal.c).tolist(),
        "sigma_d_deg_mm": sd.tolist(),
    }


def calibration_from_dict(d: dict) -> Calibration:
    _check_schema(d, "calibration")
    try:
        sd = np.asarray(d["sigma_d_deg_mm"], dtype=float) * np.outer(_DEG_MM, _DEG_MM)
        return Calibration(np.asarray(d["r_s"], dtype=float), np.asarray(d["q_s_mm"], dtype=float),
                           np.asarray(d["c_mm"], dtype=float), sd)
    except KeyError as exc:
        raise ConfigError(f"calibration: missing key {exc.args[0]}") from None


def write_calibration(path, cal: Calibration) -> Path:
    return write_json(path, calibration_to_dict(cal))


def read_calibration(path) -> Calibration:
    return calibration_from_dict(read_json(path))


def _check_schema(d, what: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{what}: expected a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{what}: schema_version {version!r} unsupported (expected {SCHEMA_VERSION})")


# ---------------------------------------------------------------- trajectories

TRAJECTORY_HEADER = ("t", "m", "n", "alpha_deg", "beta_deg", "gamma_deg", "dx_mm", "dy_mm", "dz_mm",
                     "status", "objective")


def write_trajectory(path, slices: Sequence[Slice], theta, status=None, objective=None) -> Path:
    ordered = sorted(slices, key=lambda s: s.time_index)
    theta = np.asarray(theta, dtype=float)
    status = status or ["truth"] * len(ordered)
    objective = np.full(len(ordered), np.nan) if objective is None else np.asarray(objective)
    rows = []
    for t, s in enumerate(ordered):
        row = theta[t].copy()
        row[:3] = np.rad2deg(row[:3])
        rows.append([s.time_index, s.volume_index, s.slice_index, *row, status[t], objective[t]])
    return write_csv(path, TRAJECTORY_HEADER, rows)


def read_trajectory(path) -> tuple[np.ndarray, list, np.ndarray]:
    """Returns ``(theta (T, 6) radians/mm, status, objective)`` in file order."""
    rows = read_csv(path)
    if not rows or tuple(rows[0].keys()) != TRAJECTORY_HEADER:
        raise DataError(f"{path}: not a trajectory table")
    theta = np.array([[float(r[k]) for k in TRAJECTORY_HEADER[3:9]] for r in rows])
    theta[:, :3] = np.deg2rad(theta[:, :3])
    return theta, [r["status"] for r in rows], np.array([float(r["objective"]) for r in rows])


# ---------------------------------------------------------------- dataset layout

@dataclass(eq=False)
class DatasetLayout:
    """Files of one dataset directory.

    ``anatomy.f32``, ``epi_grid.json``, ``slices/slice_NNNNN.f32`` with a
    ``manifest.csv`` row per slice, optional ``truth/`` sidecars and an
    optional ``calibration.json``.
    """

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    anatomy = property(lambda self: self.root / "anatomy.f32")
    epi_grid = property(lambda self: self.root / "epi_grid.json")
    manifest = property(lambda self: self.root / "manifest.csv")
    slice_dir = property(lambda self: self.root / "slices")
    calibration = property(lambda self: self.root / "calibration.json")
    truth_dir = property(lambda self: self.root / "truth")
    truth_trajectory = property(lambda self: self.root / "truth" / "trajectory.csv")
    truth_mask = property(lambda self: self.root / "truth" / "activation_mask.f32")
    truth_design = property(lambda self: self.root / "truth" / "design.csv")
    truth_calibration = property(lambda self: self.root / "truth" / "calibration.json")
    truth_source = property(lambda self: self.root / "truth" / "functional_source.f32")

    def slice_path(self, t: int) -> Path:
        return self.slice_dir / f"slice_{t:05d}{VOLUME_SUFFIX}"

    @property
    def has_truth(self) -> bool:
        return self.truth_trajectory.exists()


MANIFEST_HEADER = ("t", "m", "n", "file")


def _geometry_dict(g: SliceGeometry) -> dict:
    return {"slice_index": g.slice_index, "plane_origin_mm": g.plane_origin.tolist(),
            "u_axis": g.u_axis.tolist(), "v_axis": g.v_axis.tolist(),
            "pixel_spacing_mm": list(g.pixel_spacing), "grid": list(g.grid)}


def _geometry_from_dict(d: dict) -> SliceGeometry:
    try:
        return SliceGeometry(int(d["slice_index"]), d["plane_origin_mm"], d["u_axis"], d["v_axis"],
                             tuple(d["pixel_spacing_mm"]), tuple(d["grid"]))
    except (KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"slice geometry incomplete: {exc}") from None


def write_slice(path, s: Slice) -> Path:
    g = s.geometry
    v = Volume(s.data[:, :, None], (*g.pixel_spacing, 1.0), tuple(g.plane_origin))
    return write_volume(path, v, geometry=_geometry_dict(g), volume_index=int(s.volume_index),
                        time_index=int(s.time_index))


def read_slice(path) -> Slice:
    hdr = read_volume_header(path)
    if "geometry" not in hdr:
        raise MalformedHeaderError(f"{path}: slice header lacks geometry")
    v = read_volume(path)
    return Slice(_geometry_from_dict(hdr["geometry"]), v.data[:, :, 0], int(hdr.get("volume_index", 0)),
                 int(hdr.get("time_index", 0)))


def write_grid(path, grid: Volume) -> Path:
    return write_json(path, {"schema_version": SCHEMA_VERSION, **volume_header(grid)})


def read_grid(path) -> Volume:
    hdr = read_json(path)
    _check_header(hdr, path)
    return Volume(np.zeros(hdr["dims"]), tuple(hdr["voxel_size_mm"]), tuple(hdr["origin_mm"]))


def write_dataset(root, v_anat: Volume, slices: Sequence[Slice], grid: Volume, truth=None) -> DatasetLayout:
    """Write a dataset directory; ``truth`` is an optional
    ``PhantomDataset`` whose ground truth is stored under ``truth/``."""
    lay = DatasetLayout(root)
    write_volume(lay.anatomy, v_anat)
    write_grid(lay.epi_grid, grid)
    ordered = sorted(slices, key=lambda s: s.time_index)
    rows = []
    for s in ordered:
        p = lay.slice_path(s.time_index)
        write_slice(p, s)
        rows.append([s.time_index, s.volume_index, s.slice_index, p.relative_to(lay.root).as_posix()])
    write_csv(lay.manifest, MANIFEST_HEADER, rows)
    if truth is not None:
        write_trajectory(lay.truth_trajectory, ordered, truth.true_traj)
        write_volume(lay.truth_mask, truth.activation_mask, units="mask")
        write_volume(lay.truth_source, truth.v_func)
        write_csv(lay.truth_design, ("m", "label"), list(enumerate(truth.design)))
        write_calibration(lay.truth_calibration, truth.calibration)
    return lay


@dataclass(eq=False)
class LoadedDataset:
    layout: DatasetLayout
    v_anat: Volume
    slices: list
    grid: Volume
    true_traj: np.ndarray | None = None
    activation_mask: Volume | None = None
    design: list | None = None
    true_calibration: Calibration | None = None
    functional_source: Volume | None = None

    def ordered_slices(self) -> list:
        return sorted(self.slices, key=lambda s: s.time_index)


def load_dataset(root) -> LoadedDataset:
    lay = DatasetLayout(root)
    if not lay.root.is_dir():
        raise DataError(f"dataset directory {lay.root} does not exist")
    rows = read_csv(lay.manifest)
    files = sorted(lay.slice_dir.glob(f"*{VOLUME_SUFFIX}")) if lay.slice_dir.is_dir() else []
    if len(rows) != len(files):
        raise DataError(f"manifest lists {len(rows)} slices but {len(files)} slice files exist")
    slices = []
    for r in rows:
        p = lay.root / r["file"]
        if not p.exists():
            raise DataError(f"manifest references missing file {r['file']}")
        s = read_slice(p)
        if (s.time_index, s.volume_index, s.slice_index) != (int(r["t"]), int(r["m"]), int(r["n"])):
            raise DataError(f"{r['file']}: header indices disagree with manifest")
        slices.append(s)
    ds = LoadedDataset(lay, read_volume(lay.anatomy), slices, read_grid(lay.epi_grid))
    if lay.has_truth:
        ds.true_traj = read_trajectory(lay.truth_trajectory)[0]
        ds.activation_mask = read_volume(lay.truth_mask)
        ds.design = [r["label"] for r in read_csv(lay.truth_design)]
        ds.true_calibration = read_calibration(lay.truth_calibration)
        if lay.truth_source.exists():
            ds.functional_source = read_volume(lay.truth_source)
    return ds


# ---------------------------------------------------------------- pipeline config

@dataclass(frozen=True)
class AnalysisConfig:
    n_permutations: int = 2000
    threshold: float = 0.005
    n_sets: int = 4
    calibration_k: int = 70


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline; serialized as versioned JSON."""

    track: dict = field(default_factory=dict)
    phantom: dict = field(default_factory=dict)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def track_config(self, seed: int | None = None, workers: int | None = None):
        from .tracking.gpf import TrackConfig

        kw = dict(self.track)
        if "simplex" in kw:
            kw["simplex"] = SimplexOptions(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in kw["simplex"].items()})
        if seed is not None:
            kw["seed"] = seed
        if workers is not None:
            kw["workers"] = workers
        return TrackConfig(**kw)

    def phantom_config(self, seed: int | None = None):
        from .phantom import PhantomConfig

        kw = {k: _tuplify(v) for k, v in self.phantom.items()}
        if seed is not None:
            kw["seed"] = seed
        return PhantomConfig(**kw)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "track": dict(self.track),
                "phantom": dict(self.phantom), "analysis": dataclasses.asdict(self.analysis)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        from .phantom import PhantomConfig
        from .tracking.gpf import TrackConfig

        _check_schema(d, "config")
        _reject_unknown(d, {"schema_version", "track", "phantom", "analysis"}, "config")
        track = dict(d.get("track", {}))
        _reject_unknown(track, {f.name for f in dataclasses.fields(TrackConfig)}, "config.track")
        if "simplex" in track:
            _reject_unknown(track["simplex"], {f.name for f in dataclasses.fields(SimplexOptions)},
                            "config.track.simplex")
        phantom = dict(d.get("phantom", {}))
        _reject_unknown(phantom, {f.name for f in dataclasses.fields(PhantomConfig)}, "config.phantom")
        analysis = dict(d.get("analysis", {}))
        _reject_unknown(analysis, {f.name for f in dataclasses.fields(AnalysisConfig)}, "config.analysis")
        cfg = cls(track, phantom, AnalysisConfig(**analysis))
        try:  # validate eagerly so bad values fail before any work starts
            cfg.track_config()
            cfg.phantom_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config: {exc}") from None
        return cfg


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _reject_unknown(d, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_dict(read_json(path))
