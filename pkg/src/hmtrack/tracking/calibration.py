"""Estimation of the static transform, rotation center and random-walk covariance."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from ..errors import DataError
from ..geometry import (
    ANGLE_SLICE, TRANS_SLICE, Calibration, RigidParams, estimate_rotation_center, euler_matrices,
)
from ..imaging import Slice, Volume

# Initial random-walk covariance for the calibration runs: identity in
# degree/mm units.
INITIAL_SIGMA_D = np.diag([np.deg2rad(1.0) ** 2] * 3 + [1.0] * 3)


def calibrate_motion_covariance(traj) -> np.ndarray:
    """Uncentered covariance of consecutive differences,
    ``sum_t d_t d_t^T / (K - 1)`` with ``d_t = theta_t - theta_{t-1}``."""
    traj = np.asarray([p.to_array() if isinstance(p, RigidParams) else p for p in traj], dtype=float)
    if traj.shape[0] < 2:
        raise DataError("need at least two estimates")
    d = np.diff(traj, axis=0)
    return d.T @ d / (traj.shape[0] - 1)


def calibrate_static(epi_volumes: Sequence[Volume], v_anat: Volume, **kw) -> Calibration:
    """Register the time-averaged EPI volume to the anatomy from zero motion."""
    from ..imaging import mean_volume
    from ..registration import register_volume

    if not epi_volumes:
        raise DataError("need at least one EPI volume")
    res = register_volume(mean_volume(list(epi_volumes)), v_anat, RigidParams(), Calibration(), **kw)
    return Calibration.from_static(res.params)


class CenterCalibration(NamedTuple):
    c: np.ndarray
    degenerate: bool
    trajectory: np.ndarray


def center_from_trajectory(traj) -> tuple[np.ndarray, bool]:
    traj = np.asarray(traj, dtype=float)
    rots = euler_matrices(traj[:, ANGLE_SLICE])
    est = estimate_rotation_center(list(zip(rots, traj[:, TRANS_SLICE])))
    return est.c, est.degenerate


def calibrate_center(slices: Sequence[Slice], v_anat: Volume, cal_partial: Calibration, cfg=None,
                     k: int = 70, sigma_d=None) -> CenterCalibration:
    """Track the first ``k`` slices with ``c = 0`` and solve for the center."""
    from .gpf import TrackConfig, hmt_track

    cfg = cfg or TrackConfig()
    sd = INITIAL_SIGMA_D if sigma_d is None else sigma_d
    cal0 = cal_partial.replace(c=np.zeros(3), sigma_d=sd)
    res = hmt_track(slices, v_anat, cal0, cfg, n_steps=k)
    c, degenerate = center_from_trajectory(res.theta)
    return CenterCalibration(c, degenerate, res.theta)


def calibrate(slices: Sequence[Slice], v_anat: Volume, cfg=None, k: int = 70,
              simplex=None, bins: int | None = None) -> Calibration:
    """Full calibration: static transform, then center, then covariance."""
    from .gpf import TrackConfig, group_by_volume, hmt_track
    from ..imaging import stack_slices_to_volume

    cfg = cfg or TrackConfig()
    vols = [stack_slices_to_volume(g) for g in group_by_volume(slices).values()]
    kw = {"bins": bins or cfg.bins, "psf_sigma": cfg.psf_sigma}
    if simplex is not None:
        kw["opt"] = simplex
    static = calibrate_static(vols, v_anat, **kw)
    center = calibrate_center(slices, v_anat, static, cfg, k)
    cal = static.replace(c=center.c, sigma_d=INITIAL_SIGMA_D)
    res = hmt_track(slices, v_anat, cal, cfg, n_steps=k)
    return cal.replace(sigma_d=calibrate_motion_covariance(res.theta))
