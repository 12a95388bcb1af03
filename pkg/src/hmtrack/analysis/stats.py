"""Permutation-test activation detection, ROC analysis and test-retest reliability."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from ..errors import DegenerateTruthError, TooFewVolumesError

DEFAULT_PERMUTATIONS = 2000
DEFAULT_THRESHOLD = 0.005


def two_sample_t(stim, control) -> float:
    """Pooled-variance two-sample t statistic.

    With zero pooled variance the statistic is 0 for equal means and
    signed infinity otherwise.
    """
    a = np.asarray(stim, dtype=float)
    b = np.asarray(control, dtype=float)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two values per group")
    diff = a.mean() - b.mean()
    sp2 = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / (a.size + b.size - 2)
    scale = max(np.abs(a).max(), np.abs(b).max())
    if sp2 <= (1e-10 * scale) ** 2:
        return 0.0 if abs(diff) <= 1e-10 * scale else float(np.sign(diff) * np.inf)
    return float(diff / np.sqrt(sp2 * (1.0 / a.size + 1.0 / b.size)))


def _t_columns(xc, valid, lab, scale):
    """Pooled t for every voxel row and label column (1 = stimulation)."""
    w = valid.astype(float)
    ns = w @ lab
    nc = w.sum(axis=1, keepdims=True) - ns
    s1 = xc @ lab
    c1 = xc.sum(axis=1, keepdims=True) - s1
    q1 = (xc * xc) @ lab
    qc = (xc * xc).sum(axis=1, keepdims=True) - q1
    with np.errstate(divide="ignore", invalid="ignore"):
        ms, mc = s1 / ns, c1 / nc
        ss = np.maximum(q1 - s1 * ms, 0.0) + np.maximum(qc - c1 * mc, 0.0)
        sp2 = ss / (ns + nc - 2)
        diff = ms - mc
        t = diff / np.sqrt(sp2 * (1.0 / ns + 1.0 / nc))
        tol = 1e-10 * scale[:, None]
        flat = sp2 <= tol * tol
        t = np.where(flat, np.where(np.abs(diff) <= tol, 0.0, np.sign(diff) * np.inf), t)
    t[(ns < 2) | (nc < 2)] = np.nan
    return t


def label_permutations(labels, n_perm: int, seed: int) -> np.ndarray:
    """``(M, n_perm + 1)`` 0/1 matrix; column 0 is the true labeling."""
    labels = np.asarray(labels, dtype=float)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 9001])))
    perms = rng.permuted(np.tile(labels, (n_perm, 1)), axis=1)
    return np.column_stack([labels, perms.T])


def permutation_test(series, labels, n_perm: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                     chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided permutation p-values of the pooled t statistic.

    ``series`` is ``(V, M)`` with NaN for missing observations (excluded
    pairwise); ``labels`` is a boolean stimulation indicator per volume. The
    same label permutations are applied to every voxel. Returns
    ``(p, t_observed)``; voxels without two valid values per condition get
    NaN for both.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    lab = label_permutations(np.asarray(labels, dtype=bool), n_perm, seed)
    n_vox = x.shape[0]
    p = np.full(n_vox, np.nan)
    t_obs = np.full(n_vox, np.nan)
    for lo in range(0, n_vox, chunk):
        blk = x[lo:lo + chunk]
        valid = ~np.isnan(blk)
        cnt = valid.sum(axis=1)
        mean = np.where(cnt > 0, np.nansum(blk, axis=1) / np.maximum(cnt, 1), 0.0)
        xc = np.where(valid, blk - mean[:, None], 0.0)
        scale = np.where(cnt > 0, np.nanmax(np.abs(np.where(valid, blk, 0.0)), axis=1), 0.0)
        t = _t_columns(xc, valid, lab, scale)
        obs = np.abs(t[:, :1])
        with np.errstate(invalid="ignore"):
            count = np.sum(np.abs(t[:, 1:]) >= obs * (1 - 1e-12), axis=1)
        ok = ~np.isnan(t[:, 0])
        p[lo:lo + chunk] = np.where(ok, (1.0 + count) / (n_perm + 1.0), np.nan)
        t_obs[lo:lo + chunk] = t[:, 0]
    return p, t_obs


@dataclass(eq=False)
class ActivationMap:
    p: np.ndarray
    t_sign: np.ndarray
    active: np.ndarray
    missing: np.ndarray
    threshold: float = DEFAULT_THRESHOLD


def activation_map(volumes, labels, n_perm: int = DEFAULT_PERMUTATIONS, threshold: float = DEFAULT_THRESHOLD,
                   seed: int = 0) -> ActivationMap:
    """Voxelwise activation from an ``(M, ...)`` array of volumes (NaN = missing)."""
    vols = np.asarray(volumes, dtype=float)
    shape = vols.shape[1:]
    p, t = permutation_test(vols.reshape(vols.shape[0], -1).T, labels, n_perm, seed)
    missing = np.isnan(p)
    active = ~missing & (p <= threshold)
    sign = np.where(missing, 0.0, np.sign(np.nan_to_num(t)))
    return ActivationMap(p.reshape(shape), sign.reshape(shape), active.reshape(shape),
                         missing.reshape(shape), threshold)


def roc_auc(p, truth) -> tuple[np.ndarray, np.ndarray, float]:
    """ROC by sweeping the p-value threshold over its distinct values.

    Returns ``(fpr, tpr, auc)`` with the curve starting at (0, 0); NaN
    p-values are excluded.
    """
    p = np.asarray(p, dtype=float).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    keep = ~np.isnan(p)
    p, truth = p[keep], truth[keep]
    n_pos, n_neg = int(truth.sum()), int((~truth).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTruthError(f"truth has {n_pos} active and {n_neg} inactive voxels")
    order = np.argsort(p, kind="stable")
    ps, ts = p[order], truth[order]
    ends = np.flatnonzero(np.append(ps[1:] != ps[:-1], True))
    tp = np.cumsum(ts)[ends]
    fp = np.cumsum(~ts)[ends]
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return fpr, tpr, float(np.trapezoid(tpr, fpr))


def split_replications(labels, n_sets: int = 4, seed: int = 0) -> list:
    """Random disjoint partition of volume indices, stratified by condition."""
    labels = np.asarray(labels, dtype=bool)
    stim, ctrl = np.flatnonzero(labels), np.flatnonzero(~labels)
    if labels.size < 4 * n_sets or stim.size < n_sets or ctrl.size < n_sets:
        raise TooFewVolumesError(
            f"{labels.size} volumes ({stim.size} stim, {ctrl.size} control) cannot fill {n_sets} sets")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 9002])))
    s_parts = np.array_split(rng.permutation(stim), n_sets)
    c_parts = np.array_split(rng.permutation(ctrl), n_sets)[::-1]
    return [np.sort(np.concatenate([a, b])) for a, b in zip(s_parts, c_parts)]


@dataclass(frozen=True)
class MixtureFit:
    lam: float
    p_a: float
    p_i: float
    loglik: float


def _mixture_loglik(counts, lam, pa, pi, n_sets):
    r = np.arange(n_sets + 1)
    mix = lam * stats.binom.pmf(r, n_sets, pa) + (1 - lam) * stats.binom.pmf(r, n_sets, pi)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(counts > 0, counts * np.log(mix), 0.0)))


def atr_fit(r, n_sets: int = 4, step: float = 0.005) -> MixtureFit:
    """Maximum-likelihood binomial mixture for replication counts ``r``.

    Dense grid search (with ``p_a >= p_i``) followed by coordinate ascent.
    When every voxel is always (never) active, the unused component is
    reported at its ideal value: ``(1, 1, 0)`` (``(0, 1, 0)``).
    """
    r = np.asarray(r, dtype=int).ravel()
    counts = np.bincount(r, minlength=n_sets + 1).astype(float)
    if counts[n_sets] == r.size:
        return MixtureFit(1.0, 1.0, 0.0, 0.0)
    if counts[0] == r.size:
        return MixtureFit(0.0, 1.0, 0.0, 0.0)

    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    pmf = stats.binom.pmf(np.arange(n_sets + 1)[None, :], n_sets, grid[:, None])  # (G, L+1)
    ii, ia = np.triu_indices(grid.size)  # pairs with p_i index <= p_a index
    ba, bi = pmf[ia], pmf[ii]
    best = (-np.inf, 0.0, 0.0, 0.0)
    nz = counts > 0
    for lam in grid:
        mix = lam * ba + (1 - lam) * bi
        with np.errstate(divide="ignore"):
            ll = np.where(nz, counts * np.log(mix), 0.0).sum(axis=1)
        k = int(np.argmax(ll))
        if ll[k] > best[0]:
            best = (float(ll[k]), float(lam), float(grid[ia[k]]), float(grid[ii[k]]))

    ll, lam, pa, pi = best
    for _ in range(100):
        start = ll
        for name in ("lam", "pa", "pi"):
            bounds = {"lam": (0.0, 1.0), "pa": (pi, 1.0), "pi": (0.0, pa)}[name]
            if bounds[1] - bounds[0] < 1e-12:
                continue

            def neg(v, name=name):
                args = {"lam": lam, "pa": pa, "pi": pi}
                args[name] = v
                return -_mixture_loglik(counts, args["lam"], args["pa"], args["pi"], n_sets)

            res = optimize.minimize_scalar(neg, bounds=bounds, method="bounded",
                                           options={"xatol": 1e-10})
            if -res.fun > ll:
                ll = -res.fun
                lam, pa, pi = (res.x if name == "lam" else lam, res.x if name == "pa" else pa,
                               res.x if name == "pi" else pi)
        if ll - start < 1e-12:
            break
    return MixtureFit(float(lam), float(pa), float(pi), float(ll))
