"""Volume-to-volume and slice-to-volume registration baselines."""
from __future__ import annotations

from collections import defaultdict
from typing import NamedTuple, Sequence

import numpy as np

from .errors import AllInvalidError
from .geometry import Calibration, RigidParams
from .imaging import Slice, Volume, stack_slices_to_volume
from .similarity import DEFAULT_BINS, MIObjective, stack_objective
from .simplex import SimplexOptions, nelder_mead_maximize


class RegistrationResult(NamedTuple):
    params: RigidParams
    objective: float
    evaluations: int
    low_confidence: bool = False


def _run(objective, p0: RigidParams, opt: SimplexOptions, low_confidence=False) -> RegistrationResult:
    res = nelder_mead_maximize(objective, p0.to_array(), opt)
    return RegistrationResult(RigidParams.from_array(res.x), res.fun, res.evaluations, low_confidence)


def volume_objective(v_m: Volume, v_anat: Volume, cal: Calibration, bins: int = DEFAULT_BINS,
                     psf_sigma: float = 0.0) -> MIObjective:
    """MI over every voxel of ``v_m``: the anatomy is resampled onto the EPI grid.

    Voxels are visited plane by plane along the last axis so that
    ``psf_sigma`` blurs each resampled plane in-plane.
    """
    points = np.moveaxis(v_m.voxel_centers(), 2, 0).reshape(-1, 3)
    observed = np.moveaxis(v_m.data, 2, 0).ravel()
    return MIObjective(points, observed, v_anat, cal, bins, psf_sigma=psf_sigma,
                       plane_shape=v_m.data.shape[:2])


def register_volume(v_m: Volume, v_anat: Volume, p0: RigidParams = RigidParams(),
                    cal: Calibration = Calibration(), bins: int = DEFAULT_BINS,
                    opt: SimplexOptions = SimplexOptions(), psf_sigma: float = 0.0) -> RegistrationResult:
    return _run(volume_objective(v_m, v_anat, cal, bins, psf_sigma), p0, opt)


def register_slice(s: Slice, v_anat: Volume, p0: RigidParams = RigidParams(),
                   cal: Calibration = Calibration(), bins: int = DEFAULT_BINS,
                   opt: SimplexOptions = SimplexOptions(), threshold: float | None = None,
                   fraction: float = 0.15, psf_sigma: float = 0.0) -> RegistrationResult:
    """Single-slice MI registration started at ``p0``.

    When a screening ``threshold`` is given and the slice would be rejected,
    the registration still runs but the result is flagged low-confidence.
    """
    low = False
    if threshold is not None:
        from .tracking.gpf import screen_slice
        low = not screen_slice(s, threshold, fraction)
    return _run(stack_objective([s], v_anat, cal, bins, psf_sigma=psf_sigma), p0, opt, low)


def group_by_volume(slices: Sequence[Slice]) -> dict[int, list[Slice]]:
    groups = defaultdict(list)
    for s in slices:
        groups[s.volume_index].append(s)
    return dict(sorted(groups.items()))


def v2v_estimates(slices: Sequence[Slice], v_anat: Volume, cal: Calibration, bins: int = DEFAULT_BINS,
                  opt: SimplexOptions = SimplexOptions(), psf_sigma: float = 0.0) -> tuple[np.ndarray, dict]:
    """Per-slice parameters from volume-to-volume registration.

    Returns ``(theta, per_volume)`` where ``theta[t]`` is the estimate of the
    volume owning the slice with time index ``t`` (rows ordered by time).
    """
    ordered = sorted(slices, key=lambda s: s.time_index)
    per_volume = {}
    prev = RigidParams()
    for m, group in group_by_volume(ordered).items():
        res = register_volume(stack_slices_to_volume(group), v_anat, prev, cal, bins, opt, psf_sigma)
        per_volume[m] = res
        prev = res.params
    theta = np.array([per_volume[s.volume_index].params.to_array() for s in ordered])
    return theta, per_volume


def s2v_estimates(slices: Sequence[Slice], v_anat: Volume, cal: Calibration, init: np.ndarray,
                  bins: int = DEFAULT_BINS, opt: SimplexOptions = SimplexOptions(),
                  psf_sigma: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Register every slice on its own, started from ``init[t]`` (normally V2V).

    Returns ``(theta, objective)`` with rows ordered by time index. Slices
    with no overlap at the start keep their initial value (objective -inf).
    """
    ordered = sorted(slices, key=lambda s: s.time_index)
    theta = np.empty((len(ordered), 6))
    obj = np.empty(len(ordered))
    for t, s in enumerate(ordered):
        try:
            res = register_slice(s, v_anat, RigidParams.from_array(init[t]), cal, bins, opt,
                                  psf_sigma=psf_sigma)
        except AllInvalidError:
            theta[t], obj[t] = init[t], -np.inf
            continue
        theta[t] = res.params.to_array()
        obj[t] = res.objective
    return theta, obj
