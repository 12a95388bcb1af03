"""Histogram-equalized particle weights.

If ``x`` is a standard ``d``-variate Gaussian and ``f`` its density, the
value ``z = f(x)`` lives on ``(0, (2 pi)^(-d/2)]`` with density

    g(z) = S_{d-1} * (-2 log((2 pi)^(d/2) z))^((d-2)/2)

where ``S_{d-1}`` is the area of the unit ``(d-1)``-sphere. Ranking the
particles by similarity and giving rank ``k`` the ``(k - 0.5)/P`` quantile
of ``g`` makes the weights monotone in similarity while the weighted ensemble
behaves like a Gaussian sample.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from ..errors import AllInvalidError, DomainError

STATE_DIM = 6
_TABLE_NODES = 20001
_R_MAX = 20.0
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_BISECT_ITERS = 48


def z_max(d: int) -> float:
    return (2.0 * np.pi) ** (-d / 2.0)


def sphere_area(d: int) -> float:
    """Surface area of the unit ``(d-1)``-sphere, ``d pi^(d/2) / Gamma(d/2 + 1)``."""
    return float(np.exp(np.log(d) + (d / 2.0) * np.log(np.pi) - gammaln(d / 2.0 + 1.0)))


def _density(z, d: int):
    z = np.asarray(z, dtype=float)
    s = -2.0 * (np.log(z) + (d / 2.0) * np.log(2.0 * np.pi))
    s = np.maximum(s, 0.0)
    return sphere_area(d) * s ** ((d - 2) / 2.0)


def gz_density(z: float, d: int = STATE_DIM) -> float:
    """Density of a standard ``d``-variate Gaussian's own density value."""
    if d < 1 or int(d) != d:
        raise DomainError(f"dimension must be a positive integer, got {d}")
    top = z_max(d)
    if not (0.0 < z <= top * (1 + 1e-15)):
        raise DomainError(f"z={z} outside (0, {top}]")
    return float(_density(min(z, top), d))


def _segment_integral(a, b, d: int):
    """Gauss-Legendre integral of ``g`` over ``[a, b]`` (vectorized)."""
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    half = 0.5 * (b - a)
    nodes = 0.5 * (a + b) + half * _GL_X
    return np.sum(_GL_W * _density(nodes, d) * half, axis=-1)


@lru_cache(maxsize=None)
def _cdf_table(d: int):
    """Monotone table of ``(z_i, G(z_i))`` built by piecewise quadrature.

    Nodes are uniform in the Gaussian radius, so they crowd near the top of
    the support where ``g`` changes fastest in ``z``.
    """
    r = np.linspace(_R_MAX, 0.0, _TABLE_NODES)
    z = z_max(d) * np.exp(-0.5 * r * r)
    pieces = _segment_integral(z[:-1], z[1:], d)
    cdf = np.concatenate([[0.0], np.cumsum(pieces)])
    z.setflags(write=False)
    cdf.setflags(write=False)
    return z, cdf


def gz_cdf(z, d: int = STATE_DIM):
    """``G(z) = P{f(X) <= z}`` from the quadrature table."""
    zs, cdf = _cdf_table(d)
    z = np.clip(np.asarray(z, dtype=float), 0.0, zs[-1])
    i = np.clip(np.searchsorted(zs, z, side="right") - 1, 0, zs.size - 2)
    below = z < zs[0]
    out = cdf[i] + _segment_integral(zs[i], z, d)
    return np.where(below, _segment_integral(0.0, z, d), out)


def gz_cdf_inverse(q, d: int = STATE_DIM):
    """Quantile function of ``g``: table lookup, then bisection inside the
    bracketing table interval until the relative width is below 1e-8."""
    zs, cdf = _cdf_table(d)
    q = np.asarray(q, dtype=float)
    scalar = q.ndim == 0
    q = np.atleast_1d(q)
    if np.any((q < 0) | (q > 1)):
        raise DomainError("quantile must lie in [0, 1]")
    out = np.empty_like(q)
    lo_mask = q <= cdf[0]
    hi_mask = q >= cdf[-1]
    mid = ~(lo_mask | hi_mask)
    out[lo_mask] = 0.0
    out[hi_mask] = zs[-1]
    if mid.any():
        qm = q[mid]
        i = np.clip(np.searchsorted(cdf, qm, side="right") - 1, 0, zs.size - 2)
        base, lo, hi = cdf[i], zs[i].copy(), zs[i + 1].copy()
        a = zs[i]
        for _ in range(_BISECT_ITERS):
            m = 0.5 * (lo + hi)
            below = base + _segment_integral(a, m, d) < qm
            lo = np.where(below, m, lo)
            hi = np.where(below, hi, m)
            if np.all(hi - lo <= 1e-10 * hi):
                break
        out[mid] = 0.5 * (lo + hi)
    return float(out[0]) if scalar else out


@lru_cache(maxsize=64)
def raw_rank_weights(n: int, d: int = STATE_DIM) -> np.ndarray:
    """Raw weight for each ascending rank ``k = 1..n``: the ``(k - 0.5)/n`` quantile."""
    w = gz_cdf_inverse((np.arange(1, n + 1) - 0.5) / n, d)
    w.setflags(write=False)
    return w


def equalize_weights(values, d: int = STATE_DIM, normalize: bool = True) -> np.ndarray:
    """Map similarity values to weights by rank.

    Tied values share the mean raw weight of their ranks; ``-inf`` (or NaN)
    entries get weight 0. Raises :class:`AllInvalidError` if nothing is valid.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n < 2:
        raise DomainError("need at least two particles")
    v = np.where(np.isnan(v), -np.inf, v)
    invalid = np.isneginf(v)
    if invalid.all():
        raise AllInvalidError("every particle has an invalid similarity")
    valid = v[~invalid]
    if normalize and np.all(valid == valid[0]):
        return np.where(invalid, 0.0, 1.0 / valid.size)
    raw = raw_rank_weights(n, d)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    starts = np.flatnonzero(np.concatenate([[True], sv[1:] != sv[:-1]]))
    sizes = np.diff(np.append(starts, n))
    group_mean = np.add.reduceat(raw, starts) / sizes
    w = np.empty(n)
    w[order] = np.repeat(group_mean, sizes)
    w[invalid] = 0.0
    if normalize:
        w = w / w.sum()
    return w
