"""End-to-end steps shared by the command line and the acceptance suite."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .analysis.motion import Reconstruction, reconstruct_volumes, truth_on_grid, voxel_distance_series
from .analysis.stats import (
    ActivationMap, MixtureFit, activation_map, atr_fit, roc_auc, split_replications,
)
from .errors import CalibrationMissingError, UsageError
from .geometry import Calibration
from .imaging import Slice, Volume
from .phantom import STIM
from .registration import s2v_estimates, v2v_estimates
from .tracking.gpf import TrackConfig, hmt_track

METHODS = ("none", "v2v", "s2v", "hmt")


class MotionEstimate(NamedTuple):
    theta: np.ndarray
    status: list
    objective: np.ndarray


def estimate_motion(method: str, slices: Sequence[Slice], v_anat: Volume, cal: Calibration | None,
                    cfg: TrackConfig = TrackConfig()) -> MotionEstimate:
    """Per-slice motion by one of ``none``, ``v2v``, ``s2v`` or ``hmt``."""
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    n_t = len(slices)
    if method == "none":
        return MotionEstimate(np.zeros((n_t, 6)), ["none"] * n_t, np.full(n_t, np.nan))
    if cal is None:
        raise CalibrationMissingError(f"method {method} needs a calibration file")
    v2v, per_volume = v2v_estimates(slices, v_anat, cal, cfg.bins, cfg.simplex, cfg.psf_sigma)
    if method == "v2v":
        ordered = sorted(slices, key=lambda s: s.time_index)
        obj = np.array([per_volume[s.volume_index].objective for s in ordered])
        return MotionEstimate(v2v, ["v2v"] * n_t, obj)
    if method == "s2v":
        theta, obj = s2v_estimates(slices, v_anat, cal, v2v, cfg.bins, cfg.simplex, cfg.psf_sigma)
        return MotionEstimate(theta, ["s2v"] * n_t, obj)
    res = hmt_track(slices, v_anat, cal, cfg)
    return MotionEstimate(res.theta, res.status, res.objective)


def stim_labels(design) -> np.ndarray:
    return np.array([d == STIM for d in design])


def detect_activation(recon: Reconstruction, design, n_perm: int = 2000, threshold: float = 0.005,
                      seed: int = 0) -> ActivationMap:
    return activation_map(recon.stacked(), stim_labels(design), n_perm, threshold, seed)


def activation_auc(amap: ActivationMap, mask: Volume, grid: Volume, cal: Calibration):
    """ROC of the activation p-values against the true mask on the reconstruction grid."""
    truth = truth_on_grid(mask, grid, cal)
    p = np.where(amap.missing, np.nan, amap.p)
    return roc_auc(p, truth)


def activation_reliability(recon: Reconstruction, design, n_sets: int = 4, n_perm: int = 2000,
                           threshold: float = 0.005, seed: int = 0) -> tuple[MixtureFit, np.ndarray]:
    """Test-retest reliability from ``n_sets`` disjoint replications.

    Voxels missing in any replication are excluded. Returns the mixture fit
    and the per-voxel detection counts (``-1`` where excluded).
    """
    stacked = recon.stacked()
    labels = stim_labels(design)
    count = np.zeros(stacked.shape[1:], dtype=int)
    missing = np.zeros(stacked.shape[1:], dtype=bool)
    for k, idx in enumerate(split_replications(labels, n_sets, seed)):
        amap = activation_map(stacked[idx], labels[idx], n_perm, threshold, seed + k + 1)
        count += amap.active
        missing |= amap.missing
    fit = atr_fit(count[~missing], n_sets)
    return fit, np.where(missing, -1, count)


def distance_series(theta, slices: Sequence[Slice], cal: Calibration, true_traj, true_cal: Calibration):
    return voxel_distance_series(theta, true_traj, slices, cal, true_cal)


def reconstruct(slices: Sequence[Slice], theta, cal: Calibration, grid: Volume) -> Reconstruction:
    return reconstruct_volumes(slices, theta, cal, grid)
