import numpy as np
import pytest
from scipy import integrate, stats

from hmtrack.errors import AllInvalidError, DataError, DomainError
from hmtrack.geometry import Calibration, RigidParams
from hmtrack.imaging import Slice, SliceGeometry
from hmtrack.phantom import PhantomConfig, generate
from hmtrack.simplex import SimplexOptions
from hmtrack.tracking.calibration import calibrate_motion_covariance
from hmtrack.tracking.gpf import (
    ParticleEnsemble, TrackConfig, fill_interpolated, gaussian_draw, hmt_track, interpolate_params,
    measurement_update, screen_slice, step_rng, time_update, weighted_moments,
)
from hmtrack.tracking.weights import (
    equalize_weights, gz_cdf, gz_cdf_inverse, gz_density, raw_rank_weights, z_max,
)

ZMAX = (2 * np.pi) ** -3


# --- equalized weights -------------------------------------------------------

def test_density_closed_form_points():
    assert gz_density(ZMAX) == 0.0
    assert gz_density(ZMAX * np.exp(-0.5)) == pytest.approx(np.pi**3, abs=1e-9)
    z = 0.3 * ZMAX
    assert gz_density(z) == pytest.approx(np.pi**3 * (-2 * np.log((2 * np.pi) ** 3 * z)) ** 2, rel=1e-12)


def test_density_domain():
    for z in (0.0, -1.0, 1.01 * ZMAX):
        with pytest.raises(DomainError):
            gz_density(z)


@pytest.mark.parametrize("d", [2, 3, 6])
def test_density_integrates_to_one(d):
    val, _ = integrate.quad(lambda z: gz_density(z, d), 0, z_max(d), limit=200, epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_cdf_inverse_endpoints_and_median():
    assert gz_cdf_inverse(1.0) == pytest.approx(ZMAX, rel=1e-12)
    assert gz_cdf_inverse(0.0) == 0.0
    z50 = gz_cdf_inverse(0.5)
    mass, _ = integrate.quad(gz_density, 0, z50, limit=200, epsabs=1e-12)
    assert mass == pytest.approx(0.5, abs=1e-6)
    assert gz_cdf(z50) == pytest.approx(0.5, abs=1e-8)


def test_density_value_of_gaussian_samples_follows_law():
    x = np.random.default_rng(0).standard_normal((200_000, 6))
    fz = ZMAX * np.exp(-0.5 * np.sum(x**2, axis=1))
    assert stats.kstest(fz, gz_cdf).statistic < 0.01


def test_equal_values_give_uniform_weights():
    w = equalize_weights(np.full(50, 0.7))
    assert np.all(w == 1 / 50)


def test_weights_monotone_and_normalized():
    rng = np.random.default_rng(1)
    v = rng.normal(size=300)
    w = equalize_weights(v)
    order = np.argsort(v)
    assert np.all(np.diff(w[order]) >= 0)
    assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)


def test_raw_rank_weights_follow_g():
    raw = raw_rank_weights(4000)
    assert stats.kstest(raw, gz_cdf).statistic < 0.05


def test_invalid_entries():
    w = equalize_weights([-np.inf, 1.0, 2.0, np.nan])
    assert w[0] == 0 and w[3] == 0 and w[2] >= w[1] > 0
    with pytest.raises(AllInvalidError):
        equalize_weights([-np.inf, -np.inf])


def test_ties_share_weight():
    w = equalize_weights([1.0, 2.0, 2.0, 3.0])
    assert w[1] == w[2]


# --- measurement and time updates -------------------------------------------

class Quadratic:
    def __init__(self, peak):
        self.peak = np.asarray(peak, dtype=float)

    def __call__(self, x):
        return -float(np.sum((np.asarray(x) - self.peak) ** 2))

    def batch(self, params):
        return -np.sum((np.atleast_2d(params) - self.peak) ** 2, axis=1)


def test_measurement_update_on_synthetic_quadratic():
    rng = np.random.default_rng(2)
    peak = np.array([0.01, -0.02, 0.015, 0.5, -0.3, 0.2])
    n = 4000
    ens = ParticleEnsemble.uniform(peak + rng.standard_normal((n, 6)))
    m = measurement_update(ens, Quadratic(peak), SimplexOptions(ftol=1e-14, xtol=1e-6, max_evals=4000))
    assert np.abs(m.theta - peak).max() < 1e-4
    assert np.abs(m.mu - peak).max() < 2 / np.sqrt(n) * 3
    assert abs(m.weights.sum() - 1) < 1e-12
    assert Quadratic(peak)(m.theta) >= Quadratic(peak)(m.mu)


def test_dominant_particle_moments():
    x = np.random.default_rng(3).normal(size=(100, 6))
    w = np.full(100, 1e-15)
    w[7] = 1 - 99e-15
    mu, sigma = weighted_moments(x, w)
    assert np.allclose(mu, x[7], atol=1e-12) and np.abs(sigma).max() < 1e-12


def test_symmetric_ensemble_mean():
    peak = np.arange(6) * 0.1
    half = np.random.default_rng(4).normal(size=(500, 6))
    ens = ParticleEnsemble.uniform(np.vstack([peak + half, peak - half]))
    m = measurement_update(ens, Quadratic(peak), optimize=False)
    assert np.abs(m.mu - peak).max() < 2 / np.sqrt(1000)


def test_time_update_zero_covariance():
    th = np.array([0.1, 0.2, 0.3, 1, 2, 3])
    ens = time_update(th, np.zeros((6, 6)), np.zeros((6, 6)), 100, step_rng(0, 0), eps=0.0)
    assert np.array_equal(ens.params, np.tile(th, (100, 1)))
    assert np.allclose(ens.weights, 0.01)


def test_time_update_adds_covariances():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 6)) * 0.1
    b = rng.normal(size=(6, 6)) * 0.1
    s_t, s_d = a @ a.T, b @ b.T
    ens = time_update(np.zeros(6), s_t, s_d, 100_000, step_rng(1, 3))
    emp = np.cov(ens.params.T)
    assert np.abs(emp - (s_t + s_d)).max() < 5 * np.sqrt(2 / 100_000) * np.abs(s_t + s_d).max()


def test_time_update_is_reproducible():
    args = (np.ones(6), np.eye(6) * 0.01, np.eye(6) * 0.02, 500)
    a = time_update(*args, step_rng(7, 11))
    b = time_update(*args, step_rng(7, 11))
    assert np.array_equal(a.params, b.params)
    assert not np.array_equal(a.params, time_update(*args, step_rng(7, 12)).params)


def test_gpf_tracks_kalman_filter():
    q, r, n_steps, n_part = 0.1, 0.5, 100, 1000
    rmse_gpf, rmse_kf = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = np.cumsum(rng.normal(0, np.sqrt(q), n_steps))
        y = x + rng.normal(0, np.sqrt(r), n_steps)
        m, p = 0.0, q
        ens = ParticleEnsemble.uniform(gaussian_draw([0.0], [[q]], n_part, step_rng(seed, -1)))
        kf, gpf = [], []
        for t in range(n_steps):
            k = p / (p + r)
            m, p = m + k * (y[t] - m), (1 - k) * p
            kf.append(m)
            p += q

            class Lik:
                def batch(self, params, yt=y[t]):
                    return -0.5 * (params[:, 0] - yt) ** 2 / r

            def softmax(v):
                e = np.exp(v - v.max())
                return e / e.sum()

            mu_t = measurement_update(ens, Lik(), weight_fn=softmax, optimize=False)
            gpf.append(mu_t.mu[0])
            ens = time_update(mu_t.mu, mu_t.sigma, [[q]], n_part, step_rng(seed, t))
        rmse_gpf.append(np.sqrt(np.mean((np.array(gpf) - x) ** 2)))
        rmse_kf.append(np.sqrt(np.mean((np.array(kf) - x) ** 2)))
    assert np.mean(rmse_gpf) <= 1.1 * np.mean(rmse_kf)


# --- screening and interpolation --------------------------------------------

def _slice(values):
    values = np.asarray(values, dtype=float)
    return Slice(SliceGeometry(0, [0, 0, 0], grid=values.shape), values)


def test_screening():
    assert not screen_slice(_slice(np.zeros((10, 10))), 0.0)
    img = np.zeros((10, 10))
    img.flat[:15] = 5.0
    assert screen_slice(_slice(img), 1.0)
    img.flat[14] = 0.0
    assert not screen_slice(_slice(img), 1.0)


def test_quadratic_interpolation():
    assert interpolate_params([(1, np.full(6, 2.0)), (5, np.full(6, 2.0))], 3) == pytest.approx(np.full(6, 2.0))
    got = interpolate_params([(1, [1.0] * 6), (2, [4.0] * 6), (4, [16.0] * 6)], 3)
    assert np.allclose(got, 9.0, atol=1e-12)
    quad = [(t, np.full(6, 0.5 * t * t - t + 2)) for t in (0, 3, 7, 20)]
    assert np.allclose(interpolate_params(quad, 5.5), 0.5 * 5.5**2 - 5.5 + 2, atol=1e-12)
    assert np.allclose(interpolate_params([(0, [0.0] * 6), (2, [2.0] * 6)], 1), 1.0)
    assert np.allclose(interpolate_params([(4, [3.0] * 6)], 9), 3.0)
    with pytest.raises(DataError):
        interpolate_params([], 0)


def test_fill_interpolated_keeps_optimized_rows():
    t = np.arange(8.0)
    theta = np.tile((t**2)[:, None], (1, 6))
    optimized = np.array([1, 1, 0, 1, 0, 0, 1, 1], dtype=bool)
    noisy = np.where(optimized[:, None], theta, -99.0)
    filled = fill_interpolated(noisy, optimized)
    assert np.allclose(filled, theta, atol=1e-9)


# --- motion covariance --------------------------------------------------------

def test_motion_covariance_cases():
    assert np.array_equal(calibrate_motion_covariance(np.ones((5, 6))), np.zeros((6, 6)))
    e1 = np.eye(6)[0]
    traj = np.cumsum([e1 * (1 if k % 2 else -1) for k in range(11)], axis=0)
    assert np.allclose(calibrate_motion_covariance(traj), np.outer(e1, e1), atol=1e-15)
    with pytest.raises(DataError):
        calibrate_motion_covariance(np.zeros((1, 6)))


def test_motion_covariance_against_direct_sum():
    rng = np.random.default_rng(6)
    traj = rng.normal(size=(70, 6))
    direct = np.zeros((6, 6))
    for t in range(1, 70):
        d = traj[t] - traj[t - 1]
        for i in range(6):
            for j in range(6):
                direct[i, j] += d[i] * d[j]
    direct /= 69
    assert np.abs(calibrate_motion_covariance(traj) - direct).max() < 1e-12


def test_motion_covariance_of_random_walk():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(6, 6)) * 0.2
    s = a @ a.T
    traj = np.cumsum(rng.multivariate_normal(np.zeros(6), s, 10_000), axis=0)
    assert np.abs(calibrate_motion_covariance(traj) - s).max() < 0.05 * np.abs(s).max() + 0.005


# --- whole tracker ------------------------------------------------------------

def test_config_validation():
    with pytest.raises(DataError):
        TrackConfig(n_particles=50)
    with pytest.raises(DataError):
        TrackConfig(h=-1)


@pytest.fixture(scope="module")
def static_phantom():
    cfg = PhantomConfig.desk(max_angle_deg=0.0, max_trans_mm=0.0, noise_fraction=0.0, blur_sigma=0.0)
    return generate(cfg), cfg


def test_static_phantom_tracks_zero(static_phantom):
    ds, cfg = static_phantom
    tc = TrackConfig(n_particles=100, seed=3)
    cal = ds.calibration.replace(sigma_d=np.diag([np.deg2rad(0.1) ** 2] * 3 + [0.01] * 3))
    res = hmt_track(ds.slices, ds.v_anat, cal, tc, n_steps=12)
    err = np.abs(res.theta)
    assert np.rad2deg(err[:, :3]).max() < 0.1 and err[:, 3:].max() < 0.1
    assert len(res.status) == 12


def test_tracker_is_deterministic_across_workers(static_phantom):
    ds, cfg = static_phantom
    cal = ds.calibration
    a = hmt_track(ds.slices, ds.v_anat, cal, TrackConfig(n_particles=200, seed=1, workers=1), n_steps=3)
    b = hmt_track(ds.slices, ds.v_anat, cal, TrackConfig(n_particles=200, seed=1, workers=3), n_steps=3)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.mu, b.mu, equal_nan=True)
