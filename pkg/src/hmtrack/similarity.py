"""Joint histograms and mutual information for slice-to-volume matching."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, EmptyOverlapError
from .geometry import Calibration, RigidParams
from .imaging import MIN_VALID_PIXELS, SliceStack, Volume, section_samples

DEFAULT_BINS = 32


@dataclass(frozen=True, eq=False)
class JointHistogram:
    counts: np.ndarray
    edges_a: np.ndarray
    edges_b: np.ndarray
    degenerate: bool = False

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.probabilities()
        return p.sum(axis=1), p.sum(axis=0)


def _range(x, lo=None, hi=None):
    lo = float(x.min()) if lo is None else float(lo)
    hi = float(x.max()) if hi is None else float(hi)
    return lo, hi


def bin_index(x, lo: float, hi: float, bins: int) -> np.ndarray:
    """Equal-width bin index on ``[lo, hi]``; a zero-width range maps to bin 0."""
    x = np.asarray(x, dtype=float)
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.int64)
    idx = np.floor((x - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def joint_histogram(a, b, mask=None, bins: int = DEFAULT_BINS, range_a=None, range_b=None,
                    min_valid: int = MIN_VALID_PIXELS) -> JointHistogram:
    """Hard-count joint histogram of paired intensities.

    Bin ranges default to each image's min/max over the valid pixels. A
    constant image yields a single occupied bin and ``degenerate=True``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        a, b = a[m], b[m]
    if a.size < min_valid:
        raise EmptyOverlapError(f"{a.size} valid pairs, need {min_valid}")
    lo_a, hi_a = _range(a, *(range_a or (None, None)))
    lo_b, hi_b = _range(b, *(range_b or (None, None)))
    ia = bin_index(a, lo_a, hi_a, bins)
    ib = bin_index(b, lo_b, hi_b, bins)
    counts = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins).astype(float)
    return JointHistogram(
        counts,
        np.linspace(lo_a, hi_a, bins + 1),
        np.linspace(lo_b, hi_b, bins + 1),
        degenerate=bool(hi_a <= lo_a or hi_b <= lo_b),
    )


def _mi_from_counts(counts: np.ndarray) -> np.ndarray:
    """MI in nats for ``(..., B, B)`` count arrays."""
    tot = counts.sum(axis=(-2, -1), keepdims=True)
    p = counts / np.where(tot > 0, tot, 1.0)
    px = p.sum(axis=-1, keepdims=True)
    py = p.sum(axis=-2, keepdims=True)
    denom = px * py
    nz = p > 0
    ratio = np.where(nz, p / np.where(nz, denom, 1.0), 1.0)
    mi = np.sum(np.where(nz, p * np.log(ratio), 0.0), axis=(-2, -1))
    return np.maximum(mi, 0.0)


def mutual_information(h: JointHistogram) -> float:
    """``sum p(x,y) log(p(x,y) / (p(x) p(y)))`` with ``0 log 0 = 0``."""
    return float(_mi_from_counts(h.counts))


def batch_mutual_information(obs_idx, ref_vals, valid, bins: int = DEFAULT_BINS,
                             min_valid: int = MIN_VALID_PIXELS, ref_range=None) -> np.ndarray:
    """MI of one fixed observed binning against many candidate resamplings.

    ``obs_idx`` are observed bin indices ``(N,)``; ``ref_vals`` and ``valid``
    are ``(P, N)``. The reference axis is binned on ``ref_range`` when given,
    otherwise per row over its valid pixels. Rows with fewer than
    ``min_valid`` valid pairs give ``-inf``.
    """
    ref_vals = np.atleast_2d(ref_vals)
    valid = np.atleast_2d(valid)
    n_rows = ref_vals.shape[0]
    if ref_range is not None:
        lo = np.full(n_rows, float(ref_range[0]))
        hi = np.full(n_rows, float(ref_range[1]))
    else:
        lo = np.where(valid, ref_vals, np.inf).min(axis=1)
        hi = np.where(valid, ref_vals, -np.inf).max(axis=1)
    width = hi - lo
    scale = np.where(width > 0, bins / np.where(width > 0, width, 1.0), 0.0)
    lo = np.where(np.isfinite(lo), lo, 0.0)
    ref_idx = np.clip(np.floor((ref_vals - lo[:, None]) * scale[:, None]), 0, bins - 1).astype(np.int64)
    flat = np.arange(n_rows)[:, None] * (bins * bins) + obs_idx[None, :] * bins + ref_idx
    counts = np.bincount(flat[valid], minlength=n_rows * bins * bins).reshape(n_rows, bins, bins)
    mi = _mi_from_counts(counts.astype(float))
    mi[valid.sum(axis=1) < min_valid] = -np.inf
    return mi


class MIObjective:
    """Mutual information between fixed observed samples and the anatomy
    resampled at the matching scanner points, as a function of one rigid
    candidate.

    The observed-axis bin range is fixed from the observed samples and the
    reference axis is binned on the anatomy's global intensity range, so the
    bin edges are identical for every candidate. With ``psf_sigma > 0`` the
    points must be whole planes of ``plane_shape`` pixels (C order) and each
    resampled plane is blurred in-plane before binning, so the reference
    matches the resolution of a blurred acquisition. Candidate
    batches are split into chunks that may be evaluated on ``workers``
    threads; results are always placed by candidate index.
    """

    def __init__(self, points, observed, v_anat: Volume, cal: Calibration,
                 bins: int = DEFAULT_BINS, chunk: int = 64, workers: int = 1,
                 psf_sigma: float = 0.0, plane_shape: tuple | None = None):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.observed = np.asarray(observed, dtype=float).ravel()
        self.v_anat = v_anat
        self.cal = cal
        self.bins = bins
        self.chunk = chunk
        self.workers = workers
        self.obs_idx = bin_index(self.observed, float(self.observed.min()), float(self.observed.max()), bins)
        self.ref_range = (float(v_anat.data.min()), float(v_anat.data.max()))
        self.psf_sigma = float(psf_sigma)
        self.plane_shape = None if plane_shape is None else tuple(int(n) for n in plane_shape)
        if self.psf_sigma < 0:
            raise DataError("psf_sigma must be non-negative")
        if self.psf_sigma > 0:
            if self.plane_shape is None or len(self.points) % int(np.prod(self.plane_shape)):
                raise DataError("psf_sigma needs points grouped in whole planes of plane_shape")
        self.evaluations = 0

    def _block(self, block):
        vals, ok = section_samples(self.v_anat, self.points, block, self.cal)
        if self.psf_sigma > 0:
            planes = vals.reshape(vals.shape[0], -1, *self.plane_shape)
            planes = ndimage.gaussian_filter(planes, (0, 0, self.psf_sigma, self.psf_sigma),
                                             mode="nearest", truncate=4.0)
            vals = planes.reshape(vals.shape)
        return batch_mutual_information(self.obs_idx, vals, ok, self.bins, ref_range=self.ref_range)

    def batch(self, params) -> np.ndarray:
        params = np.atleast_2d(np.asarray(params, dtype=float))
        starts = range(0, params.shape[0], self.chunk)
        blocks = [params[lo:lo + self.chunk] for lo in starts]
        if self.workers > 1 and len(blocks) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                parts = list(pool.map(self._block, blocks))
        else:
            parts = [self._block(b) for b in blocks]
        self.evaluations += params.shape[0]
        return np.concatenate(parts)

    def __call__(self, theta) -> float:
        return float(self.batch(np.asarray(theta, dtype=float)[None, :])[0])


def stack_objective(slices, v_anat: Volume, cal: Calibration, bins: int = DEFAULT_BINS,
                    workers: int = 1, psf_sigma: float = 0.0) -> MIObjective:
    """Pool every slice of a stack, each at its own scanner geometry.

    All slices must share one pixel grid when ``psf_sigma > 0``.
    """
    points = np.concatenate([s.geometry.pixel_centers.reshape(-1, 3) for s in slices])
    observed = np.concatenate([s.data.ravel() for s in slices])
    shapes = {tuple(s.geometry.grid) for s in slices}
    if psf_sigma > 0 and len(shapes) != 1:
        raise DataError("psf matching needs slices on one pixel grid")
    return MIObjective(points, observed, v_anat, cal, bins, workers=workers, psf_sigma=psf_sigma,
                       plane_shape=shapes.pop() if len(shapes) == 1 else None)


def stack_similarity(s: SliceStack, p: RigidParams, v_anat: Volume, cal: Calibration,
                     bins: int = DEFAULT_BINS) -> float:
    val = stack_objective(s.slices, v_anat, cal, bins)(p.to_array())
    if not np.isfinite(val):
        raise EmptyOverlapError("stack does not overlap the anatomical volume")
    return val
