"""Nelder-Mead maximization for the 6-D rigid registration objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import AllInvalidError, DataError

DEFAULT_STEP = (np.deg2rad(0.5),) * 3 + (0.5,) * 3


@dataclass(frozen=True)
class SimplexOptions:
    """``xtol`` is measured in units of the initial step of each coordinate.

    After convergence the simplex is rebuilt around the best vertex with the
    initial steps, up to ``restarts`` times, until a restart gains less than
    ``ftol``. Hard-count MI is locally rugged and a collapsed simplex often
    sits well below the nearby peak.
    """

    step: tuple = DEFAULT_STEP
    ftol: float = 1e-6
    xtol: float = 1e-2
    max_evals: int = 600
    restarts: int = 2

    def __post_init__(self):
        if self.ftol <= 0 or self.xtol <= 0:
            raise DataError("simplex tolerances must be positive")
        if self.max_evals < len(self.step) + 1:
            raise DataError(f"max_evals must be at least {len(self.step) + 1}")
        if any(s == 0 for s in self.step):
            raise DataError("initial simplex steps must be nonzero")
        if self.restarts < 0:
            raise DataError("restarts must be non-negative")


class SimplexResult(NamedTuple):
    x: np.ndarray
    fun: float
    evaluations: int
    budget_exhausted: bool


def nelder_mead_maximize(f: Callable[[np.ndarray], float], x0, opt: SimplexOptions = SimplexOptions()
                         ) -> SimplexResult:
    """Maximize ``f`` with the standard simplex moves (reflect 1, expand 2,
    contract 0.5, shrink 0.5).

    ``f`` may return ``-inf`` for infeasible points; those vertices rank
    worst. Stops once both the value spread and the vertex spread fall under
    their tolerances (then restarts, see :class:`SimplexOptions`), or when
    the evaluation budget runs out.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    n = x0.size
    step = np.broadcast_to(np.asarray(opt.step, dtype=float), (n,))
    evals = 0

    def cost(x):
        nonlocal evals
        evals += 1
        v = float(f(x))
        return np.inf if np.isnan(v) else -v

    x, gx, exhausted = _simplex_run(cost, x0, None, step, opt, lambda: evals)
    for _ in range(opt.restarts):
        if exhausted:
            break
        x1, g1, exhausted = _simplex_run(cost, x, gx, step, opt, lambda: evals)
        gained = gx - g1
        if g1 < gx:
            x, gx = x1, g1
        if gained < opt.ftol:
            break
    return SimplexResult(x.copy(), -gx, evals, exhausted)


def _simplex_run(cost, x0, g0, step, opt, count):
    """One simplex descent on ``cost``; returns ``(best x, best cost, exhausted)``."""
    sim = np.vstack([x0, x0 + np.diag(step)])
    g = np.array([g0 if (i == 0 and g0 is not None) else cost(x) for i, x in enumerate(sim)])
    if np.all(np.isinf(g) & (g > 0)):
        raise AllInvalidError("objective is -inf at every initial vertex")

    while True:
        order = np.argsort(g, kind="stable")
        sim, g = sim[order], g[order]
        if np.isfinite(g[-1]):
            fspread = g[-1] - g[0]
            xspread = np.max(np.abs(sim[1:] - sim[0]) / np.abs(step))
            if fspread <= opt.ftol and xspread <= opt.xtol:
                break
        if count() >= opt.max_evals:
            return sim[0], g[0], True

        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        gr = cost(xr)
        if gr < g[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            ge = cost(xe)
            sim[-1], g[-1] = (xe, ge) if ge < gr else (xr, gr)
            continue
        if gr < g[-2]:
            sim[-1], g[-1] = xr, gr
            continue
        if gr < g[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            gc = cost(xc)
            if gc <= gr:
                sim[-1], g[-1] = xc, gc
                continue
        else:
            xc = centroid + 0.5 * (sim[-1] - centroid)
            gc = cost(xc)
            if gc < g[-1]:
                sim[-1], g[-1] = xc, gc
                continue
        sim[1:] = sim[0] + 0.5 * (sim[1:] - sim[0])
        g[1:] = [cost(x) for x in sim[1:]]

    return sim[0], g[0], False
