"""Rigid-body parameterization and the scanner/reference coordinate chain.

Angles are intrinsic Z-Y-X Euler angles, ``R = Rz(alpha) @ Ry(beta) @ Rx(gamma)``,
kept in radians internally and converted to degrees only at I/O boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError

ANGLE_SLICE = slice(0, 3)
TRANS_SLICE = slice(3, 6)


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


@dataclass(frozen=True)
class RigidParams:
    """Six-DOF rigid motion: three Euler angles (rad) and a translation (mm)."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0

    def __post_init__(self):
        vals = np.array([self.alpha, self.beta, self.gamma, self.dx, self.dy, self.dz], dtype=float)
        if not np.all(np.isfinite(vals)):
            raise DataError(f"non-finite rigid parameters: {vals.tolist()}")
        wrapped = wrap_angle(vals[:3])
        object.__setattr__(self, "alpha", float(wrapped[0]))
        object.__setattr__(self, "beta", float(wrapped[1]))
        object.__setattr__(self, "gamma", float(wrapped[2]))

    @classmethod
    def from_array(cls, v) -> "RigidParams":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(*(float(x) for x in v))

    @classmethod
    def from_degrees(cls, alpha=0.0, beta=0.0, gamma=0.0, dx=0.0, dy=0.0, dz=0.0) -> "RigidParams":
        a = np.deg2rad([alpha, beta, gamma])
        return cls(a[0], a[1], a[2], dx, dy, dz)

    def to_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.dx, self.dy, self.dz])

    def to_degrees(self) -> np.ndarray:
        """Angles in degrees followed by translations in mm."""
        v = self.to_array()
        v[ANGLE_SLICE] = np.rad2deg(v[ANGLE_SLICE])
        return v

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])


def rotation_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_matrices(angles) -> np.ndarray:
    """Vectorized Z-Y-X rotation matrices for an ``(..., 3)`` array of angles."""
    angles = np.asarray(angles, dtype=float)
    a, b, g = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    r = np.empty(angles.shape[:-1] + (3, 3))
    r[..., 0, 0] = ca * cb
    r[..., 0, 1] = ca * sb * sg - sa * cg
    r[..., 0, 2] = ca * sb * cg + sa * sg
    r[..., 1, 0] = sa * cb
    r[..., 1, 1] = sa * sb * sg + ca * cg
    r[..., 1, 2] = sa * sb * cg - ca * sg
    r[..., 2, 0] = -sb
    r[..., 2, 1] = cb * sg
    r[..., 2, 2] = cb * cg
    return r


def euler_to_matrix(p: RigidParams) -> np.ndarray:
    return euler_matrices(p.to_array()[ANGLE_SLICE])


def matrix_to_euler(r) -> RigidParams:
    """Invert :func:`euler_to_matrix` on its principal branch.

    At gimbal lock (``|beta| = pi/2``) gamma is fixed to 0 and the whole
    in-plane rotation is assigned to alpha. Translations are returned as 0.
    """
    r = np.asarray(r, dtype=float)
    cb = np.hypot(r[0, 0], r[1, 0])
    beta = np.arctan2(-r[2, 0], cb)
    if cb < 1e-10:
        gamma = 0.0
        if r[2, 0] < 0:  # beta = +pi/2
            alpha = np.arctan2(r[1, 2], r[0, 2])
        else:
            alpha = np.arctan2(-r[1, 2], -r[0, 2])
        beta = np.copysign(np.pi / 2, -r[2, 0])
    else:
        alpha = np.arctan2(r[1, 0], r[0, 0])
        gamma = np.arctan2(r[2, 1], r[2, 2])
    return RigidParams(alpha, beta, gamma)


@dataclass(frozen=True)
class Calibration:
    """Static scanner mismatch ``(r_s, q_s)``, rotation center ``c`` and the
    random-walk covariance ``sigma_d`` (internal units: rad, mm)."""

    r_s: np.ndarray = field(default_factory=lambda: np.eye(3))
    q_s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma_d: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        r_s = np.asarray(self.r_s, dtype=float).reshape(3, 3)
        q_s = np.asarray(self.q_s, dtype=float).reshape(3)
        c = np.asarray(self.c, dtype=float).reshape(3)
        sd = np.asarray(self.sigma_d, dtype=float).reshape(6, 6)
        if np.abs(r_s.T @ r_s - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(r_s) - 1) > 1e-8:
            raise DataError("r_s is not a proper rotation")
        if np.abs(sd - sd.T).max() > 1e-12 * max(1.0, np.abs(sd).max()):
            raise DataError("sigma_d is not symmetric")
        if np.linalg.eigvalsh(sd).min() < -1e-10:
            raise DataError("sigma_d is not positive semidefinite")
        for name, val in (("r_s", r_s), ("q_s", q_s), ("c", c), ("sigma_d", sd)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def replace(self, **kw) -> "Calibration":
        d = dict(r_s=self.r_s, q_s=self.q_s, c=self.c, sigma_d=self.sigma_d)
        d.update(kw)
        return Calibration(**d)

    @classmethod
    def from_static(cls, p: RigidParams, **kw) -> "Calibration":
        """Static transform given as rigid parameters (applied with c = 0)."""
        return cls(r_s=euler_to_matrix(p), q_s=p.translation, **kw)


def rigid_transform(params, cal: Calibration):
    """Affine form ``x_r = A @ x_o + b`` of the full chain for each parameter row.

    ``params`` is ``(6,)`` or ``(P, 6)``; returns ``A`` of shape ``(..., 3, 3)``
    and ``b`` of shape ``(..., 3)``.
    """
    params = np.asarray(params, dtype=float)
    r_t = euler_matrices(params[..., ANGLE_SLICE])
    q_t = params[..., TRANS_SLICE]
    a = r_t @ cal.r_s
    b = np.einsum("...ij,j->...i", r_t, cal.q_s - cal.c) + q_t + cal.c
    return a, b


def scanner_to_reference(x_o, p, cal: Calibration) -> np.ndarray:
    """``x_r = R_t((R_s x_o + q_s) - c) + q_t + c`` for points ``(..., 3)``."""
    v = p.to_array() if isinstance(p, RigidParams) else np.asarray(p, dtype=float)
    a, b = rigid_transform(v, cal)
    return np.asarray(x_o, dtype=float) @ a.T + b


class CenterEstimate(NamedTuple):
    c: np.ndarray
    degenerate: bool


def estimate_rotation_center(traj: Sequence[tuple], rcond: float = 1e-8) -> CenterEstimate:
    """Least-squares rotation center from ``(R_t, q_t)`` pairs.

    Minimizes ``sum_t ||q_t - (I - R_t) c||^2`` using the minimum-norm
    solution; singular values below ``rcond * s_max`` are discarded. When every
    rotation is the identity the center is unidentifiable and ``c = 0`` is
    returned with ``degenerate=True``.
    """
    if len(traj) == 0:
        return CenterEstimate(np.zeros(3), True)
    a = np.vstack([np.eye(3) - np.asarray(r, dtype=float) for r, _ in traj])
    q = np.concatenate([np.asarray(qt, dtype=float).reshape(3) for _, qt in traj])
    if np.abs(a).max() < 1e-12:
        return CenterEstimate(np.zeros(3), True)
    c, *_ = np.linalg.lstsq(a, q, rcond=rcond)
    return CenterEstimate(c, False)
