"""Misregistration distance and motion-corrected reconstruction."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from ..geometry import Calibration, scanner_to_reference
from ..imaging import Slice, SliceGeometry, Volume, sample_points


def average_voxel_distance(theta_est, theta_true, geometry: SliceGeometry, cal: Calibration,
                           cal_true: Calibration | None = None) -> float:
    """Mean distance between every pixel center mapped under the estimated
    and under the true motion. ``cal_true`` (default ``cal``) is the
    calibration the true parameters refer to."""
    pts = geometry.pixel_centers.reshape(-1, 3)
    a = scanner_to_reference(pts, theta_est, cal)
    b = scanner_to_reference(pts, theta_true, cal if cal_true is None else cal_true)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def voxel_distance_series(theta_est, theta_true, slices: Sequence[Slice], cal: Calibration,
                          cal_true: Calibration | None = None) -> np.ndarray:
    """``D_t`` for every slice, rows of ``theta_*`` ordered by time index."""
    ordered = sorted(slices, key=lambda s: s.time_index)
    return np.array([average_voxel_distance(theta_est[t], theta_true[t], s.geometry, cal, cal_true)
                     for t, s in enumerate(ordered)])


class Reconstruction(NamedTuple):
    volumes: list
    weights: list

    def stacked(self) -> np.ndarray:
        """``(M, nx, ny, nz)`` intensities with NaN at missing voxels."""
        out = np.stack([v.data for v in self.volumes]).astype(float)
        out[np.stack([w.data for w in self.weights]) <= 0] = np.nan
        return out


def _splat(acc, wacc, idx, vals):
    """Deposit ``vals`` at fractional indices ``idx`` ``(N, 3)`` with trilinear weights."""
    dims = np.asarray(acc.shape)
    base = np.floor(idx).astype(np.int64)
    frac = idx - base
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        w = np.prod(np.where(off, frac, 1.0 - frac), axis=1)
        pos = base + off
        ok = np.all((pos >= 0) & (pos < dims), axis=1) & (w > 0)
        flat = np.ravel_multi_index(pos[ok].T, acc.shape)
        np.add.at(wacc.reshape(-1), flat, w[ok])
        np.add.at(acc.reshape(-1), flat, w[ok] * vals[ok])


def grid_points_to_index(points, grid: Volume, cal: Calibration) -> np.ndarray:
    """Fractional grid indices of reference-frame points.

    The grid is the EPI grid as it sits in the reference frame under the
    static transform alone, so zero motion reproduces plain stacking.
    """
    y = (np.asarray(points) - cal.q_s) @ cal.r_s
    return (y - np.asarray(grid.origin)) / np.asarray(grid.voxel_size)


def reconstruct_volumes(slices: Sequence[Slice], theta, cal: Calibration, grid: Volume) -> Reconstruction:
    """Motion-corrected volumes by forward-mapping every slice pixel and
    splatting it into ``grid``; voxels with zero accumulated weight are missing
    (weight 0, value 0)."""
    ordered = sorted(slices, key=lambda s: s.time_index)
    theta = np.asarray(theta, dtype=float)
    n_vol = max(s.volume_index for s in ordered) + 1
    acc = np.zeros((n_vol,) + grid.dims)
    wacc = np.zeros((n_vol,) + grid.dims)
    for t, s in enumerate(ordered):
        pts = scanner_to_reference(s.geometry.pixel_centers.reshape(-1, 3), theta[t], cal)
        idx = grid_points_to_index(pts, grid, cal)
        _splat(acc[s.volume_index], wacc[s.volume_index], idx, s.data.ravel())
    vols, weights = [], []
    for m in range(n_vol):
        data = np.divide(acc[m], wacc[m], out=np.zeros(grid.dims), where=wacc[m] > 0)
        vols.append(grid.with_data(data))
        weights.append(grid.with_data(wacc[m]))
    return Reconstruction(vols, weights)


def grid_reference_points(grid: Volume, cal: Calibration) -> np.ndarray:
    """Reference-frame positions of the voxel centers of ``grid``, shape ``(*dims, 3)``."""
    return grid.voxel_centers() @ np.asarray(cal.r_s).T + np.asarray(cal.q_s)


def truth_on_grid(mask: Volume, grid: Volume, cal: Calibration, level: float = 0.5) -> np.ndarray:
    """Boolean activation truth resampled onto the reconstruction grid."""
    vals, valid = sample_points(mask, grid_reference_points(grid, cal).reshape(-1, 3))
    return ((vals > level) & valid).reshape(grid.dims)
