"""Synthetic head phantom, smooth ground-truth motion and degraded EPI slices.

The anatomical reference is a procedural head (nested ellipsoidal tissue
shells with a folded grey/white boundary and smooth texture). The functional
source uses the same tissue map with a different intensity per tissue, so
registration is genuinely multi-modal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeMismatchError
from .geometry import Calibration, RigidParams
from .imaging import (
    Slice, SliceGeometry, Volume, acquisition_order, epi_geometries, section_samples,
)
from .tracking.calibration import calibrate_motion_covariance

STIM = "stim"
CONTROL = "control"

BACKGROUND, SCALP, SKULL, CSF, GREY, WHITE = range(6)
# intensity per tissue label (background, scalp, skull, csf, grey, white)
T1_LEVELS = np.array([0.0, 0.55, 0.10, 0.15, 0.45, 0.80]) * 1000.0
T2_LEVELS = np.array([0.0, 0.35, 0.05, 0.80, 1.00, 0.55]) * 1000.0


@dataclass(frozen=True)
class PhantomConfig:
    anat_dims: tuple = (64, 64, 28)
    anat_voxel: tuple = (2.0, 2.0, 3.0)
    epi_dims: tuple = (64, 64, 14)
    epi_voxel: tuple = (2.0, 2.0, 6.0)
    n_volumes: int = 120
    cycles: int = 6
    volumes_per_cycle: int = 20
    block_design: bool = True
    blur_sigma: float = 2.0
    noise_fraction: float = 0.03
    activation_fraction: float = 0.05
    max_angle_deg: float = 3.0
    max_trans_mm: float = 3.0
    period_range: tuple = (60.0, 140.0)
    fast_period_range: tuple = (20.0, 45.0)
    acquisition: str = "interleaved"
    static_deg: tuple = (0.0, 0.0, 0.0)
    static_mm: tuple = (0.0, 0.0, 0.0)
    rotation_center: tuple = (0.0, -20.0, -60.0)
    head_center: tuple = (0.0, 0.0, -10.0)
    head_axes: tuple = (56.0, 62.0, 52.0)
    texture: float = 0.05
    fold_sigma: float = 3.0
    fold_depth: float = 0.12
    sulcus_level: float = 1.0
    activation_centers: tuple = ((-35.0, 20.0, 5.0), (36.0, -30.0, 0.0), (0.0, 42.0, 12.0))
    activation_radii: tuple = (10.0, 10.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        if self.block_design and self.n_volumes != self.cycles * self.volumes_per_cycle:
            raise DataError(
                f"n_volumes={self.n_volumes} must equal cycles*volumes_per_cycle="
                f"{self.cycles * self.volumes_per_cycle} with the block design enabled")
        if self.volumes_per_cycle % 2:
            raise DataError("volumes_per_cycle must be even (half stimulation, half control)")

    @classmethod
    def desk(cls, **kw) -> "PhantomConfig":
        """Small configuration: 20 volumes, one stimulation/control cycle."""
        base = dict(n_volumes=20, cycles=1)
        base.update(kw)
        return cls(**base)

    @property
    def n_slices(self) -> int:
        return int(self.epi_dims[2])

    @property
    def n_times(self) -> int:
        return self.n_volumes * self.n_slices

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class PhantomDataset:
    v_anat: Volume
    v_func: Volume
    slices: list
    true_traj: np.ndarray
    activation_mask: Volume
    design: list
    calibration: Calibration
    epi_grid: Volume
    config: PhantomConfig = field(default_factory=PhantomConfig)

    def ordered_slices(self) -> list:
        return sorted(self.slices, key=lambda s: s.time_index)


def _centered_origin(dims, voxel) -> tuple:
    return tuple(-(n - 1) * s / 2.0 for n, s in zip(dims, voxel))


def anat_grid(cfg: PhantomConfig) -> tuple:
    return tuple(cfg.anat_voxel), _centered_origin(cfg.anat_dims, cfg.anat_voxel)


def epi_grid(cfg: PhantomConfig) -> Volume:
    """Empty volume describing the EPI acquisition grid (scanner frame).

    The grid is centred in-plane and its slice planes are snapped onto
    anatomical planes, so an unmoved slice needs no interpolation along z.
    """
    _, aorigin = anat_grid(cfg)
    ox, oy, oz = _centered_origin(cfg.epi_dims, cfg.epi_voxel)
    vz = cfg.anat_voxel[2]
    oz = aorigin[2] + np.ceil(round((oz - aorigin[2]) / vz, 9)) * vz
    return Volume(np.zeros(cfg.epi_dims), tuple(cfg.epi_voxel), (ox, oy, float(oz)))


def _smooth_field(shape, sigma, rng) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return f / f.std()


def _tissue_labels(cfg: PhantomConfig, factor: int = 2):
    """Tissue labels on a grid ``factor`` times finer than the anatomy."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7001]))
    voxel, origin = anat_grid(cfg)
    fine_voxel = np.asarray(voxel) / factor
    fine_dims = tuple(int(n) * factor for n in cfg.anat_dims)
    fine_origin = np.asarray(origin) - (factor - 1) * fine_voxel / 2.0
    axes = [o + s * np.arange(n) for o, s, n in zip(fine_origin, fine_voxel, fine_dims)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    c = np.asarray(cfg.head_center)
    ax = np.asarray(cfg.head_axes)
    rho = np.sqrt(((x - c[0]) / ax[0]) ** 2 + ((y - c[1]) / ax[1]) ** 2 + ((z - c[2]) / ax[2]) ** 2)
    fold = _smooth_field(fine_dims, cfg.fold_sigma, rng)
    sulci = _smooth_field(fine_dims, cfg.fold_sigma * 0.8, rng)
    tex = _smooth_field(fine_dims, 4.0, rng)

    labels = np.full(fine_dims, BACKGROUND, dtype=np.int8)
    labels[rho <= 1.0] = SCALP
    labels[rho <= 0.94] = SKULL
    labels[rho <= 0.89] = CSF
    labels[rho <= 0.85] = GREY
    labels[rho + cfg.fold_depth * fold <= 0.72] = WHITE
    # CSF-filled sulci cut into the cortical ribbon, plus the midline fissure
    cortex = (labels == GREY) & (rho > 0.6)
    labels[cortex & (sulci > cfg.sulcus_level)] = CSF
    labels[(np.abs(x - c[0]) < 1.5) & (rho <= 0.85) & (z > c[2] - 0.2 * ax[2])] = CSF

    def ellipsoid(center, semi):
        return (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
                + ((z - center[2]) / semi[2]) ** 2) <= 1.0

    hc = c
    labels[ellipsoid(hc + (-18, -4, 0), (6, 8, 7))] = GREY
    labels[ellipsoid(hc + (17, -6, 2), (6, 9, 6))] = GREY
    labels[ellipsoid(hc + (-7, 6, 6), (4, 15, 8))] = CSF
    labels[ellipsoid(hc + (8, 4, 5), (4, 13, 7))] = CSF
    return labels, tex, rho <= 1.0


def _render_modality(labels, tex, inside, levels, amount, factor=2) -> np.ndarray:
    vals = levels[labels] * np.where(inside, 1.0 + amount * tex, 1.0)
    nx, ny, nz = (n // factor for n in vals.shape)
    return vals.reshape(nx, factor, ny, factor, nz, factor).mean(axis=(1, 3, 5))


def make_anatomy(cfg: PhantomConfig = PhantomConfig(), t2_like: bool = False) -> Volume:
    """Procedural head at anatomical resolution (T1-like, or the T2-like
    functional source when ``t2_like``). Deterministic in ``cfg.seed``."""
    labels, tex, inside = _tissue_labels(cfg)
    levels = T2_LEVELS if t2_like else T1_LEVELS
    voxel, origin = anat_grid(cfg)
    return Volume(_render_modality(labels, tex, inside, levels, cfg.texture), voxel, origin)


def activation_mask(cfg: PhantomConfig = PhantomConfig()) -> Volume:
    """Union of ellipsoidal activation blobs on the anatomical grid (0/1)."""
    voxel, origin = anat_grid(cfg)
    grid = Volume(np.zeros(cfg.anat_dims), voxel, origin).voxel_centers()
    mask = np.zeros(cfg.anat_dims, dtype=bool)
    for center, radius in zip(cfg.activation_centers, cfg.activation_radii):
        mask |= np.sum((grid - np.asarray(center)) ** 2, axis=-1) <= radius ** 2
    return Volume(mask.astype(float), voxel, origin)


def block_design(cfg: PhantomConfig) -> list:
    """``stim`` for the first half of every cycle, ``control`` for the rest."""
    half = cfg.volumes_per_cycle // 2
    return [STIM if (m % cfg.volumes_per_cycle) < half else CONTROL for m in range(cfg.n_volumes)]


def _motion_coefficients(cfg: PhantomConfig):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7002]))
    caps = np.array([np.deg2rad(cfg.max_angle_deg)] * 3 + [cfg.max_trans_mm] * 3)
    share = rng.uniform(0.55, 0.8, 6)
    scale = rng.uniform(0.6, 1.0, 6)
    amp = np.stack([caps * scale * share, caps * scale * (1 - share)], axis=1)
    periods = np.stack([rng.uniform(*cfg.period_range, 6), rng.uniform(*cfg.fast_period_range, 6)], axis=1)
    phases = rng.uniform(0, 2 * np.pi, (6, 2))
    return amp, periods, phases


def motion_trajectory(t, cfg: PhantomConfig = PhantomConfig()) -> np.ndarray:
    """Ground-truth parameters at slice time(s) ``t`` (0-based): per
    coordinate a sum of two sinusoids whose amplitudes add up to at most the cap."""
    amp, periods, phases = _motion_coefficients(cfg)
    t = np.asarray(t, dtype=float)
    arg = 2 * np.pi * t[..., None, None] / periods + phases
    return np.sum(amp * np.sin(arg), axis=-1)


def true_calibration(cfg: PhantomConfig, traj: np.ndarray | None = None) -> Calibration:
    static = RigidParams.from_degrees(*cfg.static_deg, *cfg.static_mm)
    sigma = calibrate_motion_covariance(traj) if traj is not None and len(traj) > 1 else np.zeros((6, 6))
    return Calibration.from_static(static, c=np.asarray(cfg.rotation_center), sigma_d=sigma)


def render_slice(v_src: Volume, g: SliceGeometry, theta, cal: Calibration, cfg: PhantomConfig,
                 rng: np.random.Generator | None = None, noise_scale: float | None = None) -> np.ndarray:
    """Section of ``v_src`` under motion ``theta``, blurred in-plane and noised.

    Out-of-volume pixels read as 0. Noise std is ``noise_fraction`` times the
    source maximum unless ``noise_scale`` overrides the reference intensity.
    """
    vals, _ = section_samples(v_src, g.pixel_centers.reshape(-1, 3), np.asarray(theta)[None, :], cal)
    img = vals[0].reshape(g.grid)
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.blur_sigma, mode="nearest", truncate=4.0)
    if cfg.noise_fraction > 0:
        if rng is None:
            raise DataError("noise requires a random generator")
        ref = float(v_src.data.max()) if noise_scale is None else noise_scale
        img = img + rng.normal(0.0, cfg.noise_fraction * ref, img.shape)
    return img


def inject_activation(volume: Volume, mask: Volume, label: str, cfg: PhantomConfig = PhantomConfig()) -> Volume:
    """Scale masked voxels by ``1 + activation_fraction`` for stimulation volumes."""
    if mask.dims != volume.dims:
        raise ShapeMismatchError(f"mask {mask.dims} does not match volume {volume.dims}")
    if label != STIM:
        return volume
    m = mask.data > 0.5
    return volume.with_data(np.where(m, volume.data * (1.0 + cfg.activation_fraction), volume.data))


def generate(cfg: PhantomConfig = PhantomConfig()) -> PhantomDataset:
    v_anat = make_anatomy(cfg)
    v_func = make_anatomy(cfg, t2_like=True)
    mask = activation_mask(cfg)
    design = block_design(cfg) if cfg.block_design else [CONTROL] * cfg.n_volumes
    traj = motion_trajectory(np.arange(cfg.n_times), cfg)
    cal = true_calibration(cfg, traj)
    grid = epi_grid(cfg)
    geoms = epi_geometries(grid.dims, grid.voxel_size, grid.origin)
    order = acquisition_order(cfg.n_slices, cfg.acquisition)
    noise_ref = float(v_func.data.max())
    sources = {label: inject_activation(v_func, mask, label, cfg) for label in set(design)}

    slices = []
    for m in range(cfg.n_volumes):
        src = sources[design[m]]
        for rank, n in enumerate(order):
            t = m * cfg.n_slices + rank
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7003, t]))
            img = render_slice(src, geoms[n], traj[t], cal, cfg, rng, noise_ref)
            slices.append(Slice(geoms[n], img, volume_index=m, time_index=t))
    return PhantomDataset(v_anat, v_func, slices, traj, mask, design, cal, grid, cfg)
