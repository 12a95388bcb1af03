"""Gaussian particle filter head-motion tracker."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ..errors import AllInvalidError, CalibrationMissingError, DataError
from ..geometry import Calibration, RigidParams
from ..imaging import Slice, Volume, make_stack, mean_volume, stack_slices_to_volume
from ..registration import group_by_volume, register_slice
from ..similarity import DEFAULT_BINS, stack_objective
from ..simplex import SimplexOptions, nelder_mead_maximize
from .weights import equalize_weights

log = logging.getLogger(__name__)

OPTIMIZED = "optimized"
INTERPOLATED = "interpolated"


@dataclass(frozen=True)
class TrackConfig:
    n_particles: int = 4000
    h: int = 1
    bins: int = DEFAULT_BINS
    simplex: SimplexOptions = field(default_factory=SimplexOptions)
    screen_fraction: float = 0.15
    screen_rel_threshold: float = 0.10
    screen_percentile: float = 98.0
    seed: int = 0
    eps: float = 1e-8
    workers: int = 1
    psf_sigma: float = 0.0

    def __post_init__(self):
        if self.psf_sigma < 0:
            raise DataError("psf_sigma must be non-negative")
        if self.n_particles < 100:
            raise DataError("at least 100 particles are required")
        if self.h < 0:
            raise DataError("stack half-width h must be non-negative")


@dataclass
class ParticleEnsemble:
    params: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(cls, params) -> "ParticleEnsemble":
        params = np.asarray(params, dtype=float)
        return cls(params, np.full(params.shape[0], 1.0 / params.shape[0]))

    @property
    def count(self) -> int:
        return self.params.shape[0]


class MeasurementResult(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray
    theta: np.ndarray
    objective: float
    weights: np.ndarray


@dataclass
class TrackResult:
    """Per-time motion estimates, rows ordered by acquisition time."""

    theta: np.ndarray
    status: list
    objective: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    time_index: np.ndarray

    def params(self, t: int) -> RigidParams:
        return RigidParams.from_array(self.theta[t])

    @property
    def optimized(self) -> np.ndarray:
        return np.array([s == OPTIMIZED for s in self.status])


def step_rng(seed: int, t: int) -> np.random.Generator:
    """Counter-based stream for time step ``t`` (``t = -1`` is initialization)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, t + 1])))


def weighted_moments(params, weights) -> tuple[np.ndarray, np.ndarray]:
    """Weighted mean and covariance, reduced in particle-index order."""
    w = np.asarray(weights, dtype=float)
    x = np.asarray(params, dtype=float)
    mu = w @ x
    dev = x - mu
    sigma = (dev * w[:, None]).T @ dev
    return mu, 0.5 * (sigma + sigma.T)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gaussian_draw(mean, cov, n: int, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal((n, mean.size))
    return mean + z @ _sqrt_psd(np.asarray(cov, dtype=float)).T


def measurement_update(ens: ParticleEnsemble, objective, opt: SimplexOptions = SimplexOptions(),
                       weight_fn: Callable = equalize_weights, optimize: bool = True) -> MeasurementResult:
    """Weight the particles by the objective, fit the Gaussian posterior and
    refine its mean with Nelder-Mead.

    ``objective`` needs ``batch(params) -> values`` and ``__call__``.
    ``weight_fn`` turns objective values into normalized weights.
    """
    values = objective.batch(ens.params)
    w = weight_fn(values)
    mu, sigma = weighted_moments(ens.params, w)
    if optimize:
        res = nelder_mead_maximize(objective, mu, opt)
        theta, fval = res.x, res.fun
    else:
        theta, fval = mu, float("nan")
    return MeasurementResult(mu, sigma, theta, fval, w)


def time_update(theta_hat, sigma_t, sigma_d, n: int, rng: np.random.Generator,
                eps: float = 1e-8) -> ParticleEnsemble:
    """Resample around the current estimate, then diffuse by the random walk."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    d = theta_hat.size
    post = gaussian_draw(theta_hat, np.asarray(sigma_t) + eps * np.eye(d), n, rng)
    step = gaussian_draw(np.zeros(d), sigma_d, n, rng)
    return ParticleEnsemble.uniform(post + step)


def mean_epi_volume(slices: Sequence[Slice]) -> Volume:
    return mean_volume([stack_slices_to_volume(g) for g in group_by_volume(slices).values()])


def screening_threshold(slices: Sequence[Slice], rel: float = 0.10, percentile: float = 98.0) -> float:
    """``rel`` times the given percentile of the mean EPI volume."""
    return rel * float(np.percentile(mean_epi_volume(slices).data, percentile))


def screen_slice(s: Slice, threshold: float, fraction: float = 0.15) -> bool:
    """Accept when at least ``fraction`` of pixels exceed ``threshold`` (inclusive)."""
    n_above = int(np.count_nonzero(s.data > threshold))
    return n_above >= np.ceil(fraction * s.data.size - 1e-9)


def interpolate_params(accepted: Sequence[tuple], t_query: float) -> np.ndarray:
    """Quadratic (Lagrange) interpolation through the three accepted
    estimates nearest in time; linear or constant with fewer."""
    if not accepted:
        raise DataError("interpolation needs at least one accepted estimate")
    ts = np.array([float(t) for t, _ in accepted])
    vals = np.array([np.asarray(v.to_array() if isinstance(v, RigidParams) else v, dtype=float)
                     for _, v in accepted])
    near = np.lexsort((ts, np.abs(ts - t_query)))[:3]
    ts, vals = ts[near], vals[near]
    out = np.zeros(vals.shape[1])
    for i in range(ts.size):
        basis = 1.0
        for j in range(ts.size):
            if j != i:
                basis *= (t_query - ts[j]) / (ts[i] - ts[j])
        out += basis * vals[i]
    return out


def fill_interpolated(theta: np.ndarray, optimized: np.ndarray) -> np.ndarray:
    theta = theta.copy()
    accepted = [(t, theta[t]) for t in np.flatnonzero(optimized)]
    for t in np.flatnonzero(~optimized):
        theta[t] = interpolate_params(accepted, t)
    return theta


def hmt_track(slices: Sequence[Slice], v_anat: Volume, cal: Calibration, cfg: TrackConfig = TrackConfig(),
              initial: RigidParams = RigidParams(), n_steps: int | None = None,
              progress: Callable[[int, int], None] | None = None) -> TrackResult:
    """Track per-slice rigid motion through the whole acquisition.

    The first accepted slice is registered on its own to seed the ensemble.
    Every accepted slice then gets a measurement update (particle weights,
    Gaussian fit, Nelder-Mead refinement of the stack similarity from the
    posterior mean) and a time update. Screened-out slices only diffuse the
    ensemble; their parameters are filled by quadratic interpolation.
    ``n_steps`` limits tracking to the first slices in time order.
    """
    if cal is None:
        raise CalibrationMissingError("hmt_track needs a calibration")
    ordered = sorted(slices, key=lambda s: s.time_index)
    tau = screening_threshold(ordered, cfg.screen_rel_threshold, cfg.screen_percentile)
    if n_steps is not None:
        ordered = ordered[:n_steps]
    n_t = len(ordered)
    accepted = np.array([screen_slice(s, tau, cfg.screen_fraction) for s in ordered])
    if not accepted.any():
        raise DataError("every slice was rejected by screening")

    sigma_d = np.asarray(cal.sigma_d)
    theta = np.zeros((n_t, 6))
    mu = np.full((n_t, 6), np.nan)
    sigma = np.full((n_t, 6, 6), np.nan)
    objective = np.full(n_t, np.nan)
    optimized = np.zeros(n_t, dtype=bool)

    first = int(np.flatnonzero(accepted)[0])
    seed_reg = register_slice(ordered[first], v_anat, initial, cal, cfg.bins, cfg.simplex,
                              psf_sigma=cfg.psf_sigma)
    ens = ParticleEnsemble.uniform(
        gaussian_draw(seed_reg.params.to_array(), sigma_d, cfg.n_particles, step_rng(cfg.seed, -1)))

    for t in range(n_t):
        rng = step_rng(cfg.seed, t)
        if accepted[t]:
            stack = make_stack(ordered, t, cfg.h)
            obj = stack_objective(stack.slices, v_anat, cal, cfg.bins, workers=cfg.workers,
                                  psf_sigma=cfg.psf_sigma)
            try:
                m = measurement_update(ens, obj, cfg.simplex)
            except AllInvalidError:
                log.warning("t=%d: no particle overlaps the anatomy; interpolating", t)
            else:
                theta[t], mu[t], sigma[t], objective[t] = m.theta, m.mu, m.sigma, m.objective
                optimized[t] = True
                ens = time_update(m.theta, m.sigma, sigma_d, cfg.n_particles, rng, cfg.eps)
                if progress:
                    progress(t, n_t)
                continue
        ens = ParticleEnsemble.uniform(
            ens.params + gaussian_draw(np.zeros(6), sigma_d, ens.count, rng))
        if progress:
            progress(t, n_t)

    if not optimized.any():
        raise DataError("no slice could be optimized")
    theta = fill_interpolated(theta, optimized)
    status = [OPTIMIZED if o else INTERPOLATED for o in optimized]
    return TrackResult(theta, status, objective, mu, sigma,
                       np.array([s.time_index for s in ordered]))
