"""Volume and slice containers, trilinear sampling and oblique section extraction."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError, EmptyOverlapError, MissingSliceError, ShapeMismatchError
from .geometry import Calibration, RigidParams, rigid_transform

MIN_VALID_PIXELS = 32
_EDGE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar volume on an axis-aligned grid; voxel ``(i, j, k)`` sits at
    ``origin + (i, j, k) * voxel_size`` (mm)."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise ShapeMismatchError(f"volume data must be 3-D, got shape {data.shape}")
        vs = tuple(float(s) for s in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise DataError(f"voxel_size must be three positive numbers, got {vs}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume intensities must be finite")
        data = np.array(data, dtype=float, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.voxel_size, other.voxel_size, rtol=0, atol=1e-12)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
        )

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers, shape ``(nx, ny, nz, 3)``."""
        axes = [o + s * np.arange(n) for o, s, n in zip(self.origin, self.voxel_size, self.dims)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.voxel_size, self.origin)


def sample_points(v: Volume, pts) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation at points ``(..., 3)`` in mm.

    Returns ``(values, valid)``; points outside the voxel-center bounding box
    are invalid and get value 0.
    """
    pts = np.asarray(pts, dtype=float)
    shape = pts.shape[:-1]
    idx = (pts.reshape(-1, 3) - np.asarray(v.origin)) / np.asarray(v.voxel_size)
    upper = np.asarray(v.dims, dtype=float) - 1.0
    valid = np.all((idx >= -_EDGE_TOL) & (idx <= upper + _EDGE_TOL), axis=1)
    vals = np.zeros(idx.shape[0])
    if valid.any():
        inside = np.clip(idx[valid], 0.0, upper)
        vals[valid] = ndimage.map_coordinates(v.data, inside.T, order=1, mode="nearest", prefilter=False)
    return vals.reshape(shape), valid.reshape(shape)


class _Outside:
    def __repr__(self):
        return "Outside"


Outside = _Outside()


def trilinear_sample(v: Volume, x):
    """Interpolated intensity at one point, or :data:`Outside`."""
    val, ok = sample_points(v, np.asarray(x, dtype=float).reshape(1, 3))
    return float(val[0]) if ok[0] else Outside


@dataclass(frozen=True, eq=False)
class SliceGeometry:
    """Scanner-frame placement of a 2-D pixel grid.

    Pixel ``(a, b)`` is centered at ``plane_origin + a*pu*u_axis + b*pv*v_axis``.
    """

    slice_index: int
    plane_origin: np.ndarray
    u_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    v_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    pixel_spacing: tuple = (1.0, 1.0)
    grid: tuple = (1, 1)

    def __post_init__(self):
        u = np.asarray(self.u_axis, dtype=float).reshape(3)
        w = np.asarray(self.v_axis, dtype=float).reshape(3)
        if abs(u @ u - 1) > 1e-10 or abs(w @ w - 1) > 1e-10 or abs(u @ w) > 1e-10:
            raise DataError("in-plane axes must be orthonormal")
        object.__setattr__(self, "u_axis", u)
        object.__setattr__(self, "v_axis", w)
        object.__setattr__(self, "plane_origin", np.asarray(self.plane_origin, dtype=float).reshape(3))
        object.__setattr__(self, "pixel_spacing", tuple(float(s) for s in self.pixel_spacing))
        object.__setattr__(self, "grid", tuple(int(n) for n in self.grid))

    @cached_property
    def pixel_centers(self) -> np.ndarray:
        nu, nv = self.grid
        pu, pv = self.pixel_spacing
        a = np.arange(nu)[:, None, None] * pu * self.u_axis
        b = np.arange(nv)[None, :, None] * pv * self.v_axis
        pts = self.plane_origin + a + b
        pts.setflags(write=False)
        return pts

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u_axis, self.v_axis)


@dataclass(frozen=True, eq=False)
class Slice:
    geometry: SliceGeometry
    data: np.ndarray
    volume_index: int = 0
    time_index: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != self.geometry.grid:
            raise ShapeMismatchError(f"slice data shape {data.shape} != grid {self.geometry.grid}")
        object.__setattr__(self, "data", data)

    @property
    def slice_index(self) -> int:
        return self.geometry.slice_index


@dataclass(frozen=True, eq=False)
class SliceStack:
    """Consecutive slices around a center time; ``center`` indexes the list."""

    slices: tuple
    center: int

    @property
    def half_width(self) -> int:
        return max(self.center, len(self.slices) - 1 - self.center)


def make_stack(ordered: Sequence[Slice], t: int, h: int) -> SliceStack:
    """Stack of slices ``t-h .. t+h`` (0-based positions), truncated at the ends."""
    lo, hi = max(0, t - h), min(len(ordered), t + h + 1)
    return SliceStack(tuple(ordered[lo:hi]), t - lo)


def acquisition_order(n_slices: int, order: str = "interleaved") -> list[int]:
    """Slice indices (0-based) in the order they are acquired.

    ``interleaved`` acquires 1-based odd slices first, then even ones.
    """
    if order == "sequential":
        return list(range(n_slices))
    if order == "interleaved":
        return list(range(0, n_slices, 2)) + list(range(1, n_slices, 2))
    raise DataError(f"unknown acquisition order {order!r}")


def time_index(m: int, n: int, n_slices: int, order: str = "interleaved") -> int:
    return m * n_slices + acquisition_order(n_slices, order).index(n)


def epi_geometries(dims, voxel_size, origin) -> list[SliceGeometry]:
    """Axis-aligned slice geometries for an EPI grid stacked along z."""
    nx, ny, nz = dims
    sx, sy, sz = voxel_size
    o = np.asarray(origin, dtype=float)
    return [
        SliceGeometry(n, o + np.array([0.0, 0.0, n * sz]), pixel_spacing=(sx, sy), grid=(nx, ny))
        for n in range(nz)
    ]


def section_samples(v: Volume, points, params, cal: Calibration):
    """Sample ``v`` at scanner points ``(N, 3)`` under each parameter row.

    ``params`` is ``(P, 6)``; returns values and validity of shape ``(P, N)``.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    a, b = rigid_transform(params, cal)
    pts = np.einsum("pij,nj->pni", a, np.asarray(points, dtype=float)) + b[:, None, :]
    return sample_points(v, pts)


def extract_section(v_anat: Volume, g: SliceGeometry, p: RigidParams, cal: Calibration,
                    min_valid: int = MIN_VALID_PIXELS):
    """Resample ``v_anat`` on the slice grid ``g`` displaced by motion ``p``.

    Returns ``(Slice, valid_mask)``; pixels that map outside the volume are 0
    and masked invalid.
    """
    pts = g.pixel_centers.reshape(-1, 3)
    vals, ok = section_samples(v_anat, pts, p.to_array()[None, :], cal)
    if ok.sum() < min_valid:
        raise EmptyOverlapError(f"only {int(ok.sum())} pixels overlap the volume")
    return Slice(g, vals[0].reshape(g.grid)), ok[0].reshape(g.grid)


def mean_volume(vols: Sequence[Volume]) -> Volume:
    if len(vols) == 0:
        raise ShapeMismatchError("no volumes to average")
    first = vols[0]
    for v in vols[1:]:
        if not first.same_grid(v):
            raise ShapeMismatchError(f"grid mismatch: {first.dims} vs {v.dims}")
    return first.with_data(np.mean(np.stack([v.data for v in vols]), axis=0))


def stack_slices_to_volume(slices: Sequence[Slice]) -> Volume:
    """Naive z-stack of one volume's slices, ordered by slice index.

    Slices must be axis-aligned (u = x, v = y) and evenly spaced along +z.
    """
    by_index = {s.slice_index: s for s in slices}
    n = len(by_index)
    missing = sorted(set(range(n)) - set(by_index))
    if missing or n == 0:
        raise MissingSliceError(f"missing slice indices {missing or [0]}")
    ordered = [by_index[i] for i in range(n)]
    g0 = ordered[0].geometry
    ex, ey = np.eye(3)[0], np.eye(3)[1]
    dz = ordered[1].geometry.plane_origin[2] - g0.plane_origin[2] if n > 1 else 1.0
    for i, s in enumerate(ordered):
        g = s.geometry
        expected = g0.plane_origin + np.array([0.0, 0.0, i * dz])
        if (
            not np.allclose(g.u_axis, ex) or not np.allclose(g.v_axis, ey)
            or g.grid != g0.grid or g.pixel_spacing != g0.pixel_spacing
            or not np.allclose(g.plane_origin, expected, atol=1e-9)
        ):
            raise DataError(f"slice {i} is not part of an axis-aligned evenly spaced stack")
    if dz <= 0:
        raise DataError("slice positions must increase along z")
    data = np.stack([s.data for s in ordered], axis=-1)
    return Volume(data, (g0.pixel_spacing[0], g0.pixel_spacing[1], dz), tuple(g0.plane_origin))
