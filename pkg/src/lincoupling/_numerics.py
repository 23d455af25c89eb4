"""Vectorized numerical kernels shared by the modelling modules.

Everything here works elementwise on numpy arrays so that quantiles, the
hyperbola intersection and arc intersections can be solved for a whole
batch of targets at once.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial.legendre import leggauss


class RootFindingError(RuntimeError):
    """A monotone root could not be bracketed or did not converge."""

    def __init__(self, message: str, targets=None):
        super().__init__(message)
        self.targets = targets


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [0, 1]."""
    if order not in _GL_CACHE:
        xi, wi = leggauss(order)
        _GL_CACHE[order] = (0.5 * (xi + 1.0), 0.5 * wi)
    return _GL_CACHE[order]


def panel_integrals(func, lo, hi, order: int = 20) -> np.ndarray:
    """Fixed-order Gauss-Legendre integral of ``func`` over each [lo_i, hi_i]."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    nodes, weights = gauss_legendre(order)
    width = hi - lo
    pts = lo[..., None] + width[..., None] * nodes
    vals = np.asarray(func(pts.ravel()), dtype=float).reshape(pts.shape)
    return width * (vals @ weights)


def monotone_root(
    fun,
    target,
    x0,
    dfun=None,
    lower: float = 0.0,
    upper: float = np.inf,
    maxiter: int = 200,
):
    """Solve ``fun(x) = target`` for an increasing ``fun`` on (lower, upper).

    Brackets are grown geometrically from ``x0`` (halving towards ``lower``
    and doubling towards ``upper``), then refined by Newton steps that are
    rejected in favour of bisection whenever they leave the bracket. Works
    elementwise on arrays; returns an array of the broadcast shape (or a
    float for scalar input).
    """
    target = np.asarray(target, dtype=float)
    scalar = target.ndim == 0
    target = np.atleast_1d(target)
    x = np.broadcast_to(np.asarray(x0, dtype=float), target.shape).astype(float)
    x = np.clip(x, _nudge_up(lower), _nudge_down(upper))

    lo, hi = _bracket(fun, target, x, lower, upper)
    x = np.where((x > lo) & (x < hi), x, _midpoint(lo, hi))

    active = np.ones(target.shape, dtype=bool)
    for _ in range(maxiter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        fa = np.asarray(fun(xa), dtype=float) - target[idx]
        exact = fa == 0.0
        lo[idx] = np.where(fa < 0.0, xa, lo[idx])
        hi[idx] = np.where(fa > 0.0, xa, hi[idx])

        if dfun is not None:
            da = np.asarray(dfun(xa), dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                xn = xa - fa / da
            ok = np.isfinite(xn) & (xn > lo[idx]) & (xn < hi[idx])
        else:
            xn = xa
            ok = np.zeros(xa.shape, dtype=bool)
        xn = np.where(ok, xn, _midpoint(lo[idx], hi[idx]))

        step = np.abs(xn - xa)
        width = hi[idx] - lo[idx]
        tiny = 4.0 * np.finfo(float).eps * np.maximum(np.abs(xa), np.finfo(float).tiny)
        done = exact | (ok & (step <= tiny)) | (width <= tiny)
        x[idx] = np.where(exact, xa, xn)
        active[idx[done]] = False
    else:
        if active.any():
            raise RootFindingError(
                "monotone root did not converge", targets=target[active]
            )

    return float(x[0]) if scalar else x


def _midpoint(lo, hi):
    # geometric midpoint when both ends are positive and far apart
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    geo = (lo > 0) & (hi > 4.0 * lo)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(geo, np.sqrt(lo * hi), 0.5 * (lo + hi))


def _nudge_up(v: float) -> float:
    return np.nextafter(v, np.inf) if np.isfinite(v) else v


def _nudge_down(v: float) -> float:
    return np.nextafter(v, -np.inf) if np.isfinite(v) else v


def _bracket(fun, target, x, lower, upper, max_expand: int = 2200):
    lo = x.copy()
    hi = x.copy()

    need = np.asarray(fun(lo), dtype=float) > target
    for _ in range(max_expand):
        idx = np.flatnonzero(need)
        if idx.size == 0:
            break
        old = lo[idx]
        new = lower + 0.5 * (old - lower)
        stalled = (new <= lower) | (new >= old)
        hi[idx] = old
        lo[idx] = np.where(stalled, old, new)
        fv = np.asarray(fun(lo[idx]), dtype=float) > target[idx]
        if np.any(stalled & fv):
            raise RootFindingError(
                "cannot bracket root from below", targets=target[idx[stalled & fv]]
            )
        need[idx] = fv
    else:
        raise RootFindingError("bracket expansion from below failed", targets=target[need])

    need = np.asarray(fun(hi), dtype=float) < target
    for _ in range(max_expand):
        idx = np.flatnonzero(need)
        if idx.size == 0:
            break
        old = hi[idx]
        new = 2.0 * np.maximum(old, np.finfo(float).tiny)
        if np.isfinite(upper):
            new = np.minimum(new, upper - 0.5 * (upper - old))
        stalled = ~np.isfinite(new) | (new <= old)
        lo[idx] = old
        hi[idx] = np.where(stalled, old, new)
        fv = np.asarray(fun(hi[idx]), dtype=float) < target[idx]
        if np.any(stalled & fv):
            raise RootFindingError(
                "cannot bracket root from above", targets=target[idx[stalled & fv]]
            )
        need[idx] = fv
    else:
        raise RootFindingError("bracket expansion from above failed", targets=target[need])
    return lo, hi


def ridders_derivative(func, x, h, ntab: int = 10):
    """Ridders' extrapolated central difference, elementwise.

    ``h`` is an initial step over which ``func`` changes appreciably. Returns
    ``(derivative, error_estimate)``.
    """
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape).astype(float)
    con, con2, safe = 1.4, 1.96, 2.0
    tab = np.empty((ntab, ntab) + x.shape)
    hh = h.copy()
    tab[0, 0] = (np.asarray(func(x + hh)) - np.asarray(func(x - hh))) / (2.0 * hh)
    best = tab[0, 0].copy()
    err = np.full(x.shape, np.inf)
    frozen = np.zeros(x.shape, dtype=bool)
    for i in range(1, ntab):
        hh = hh / con
        tab[0, i] = (np.asarray(func(x + hh)) - np.asarray(func(x - hh))) / (2.0 * hh)
        fac = con2
        for j in range(1, i + 1):
            tab[j, i] = (tab[j - 1, i] * fac - tab[j - 1, i - 1]) / (fac - 1.0)
            fac *= con2
            errt = np.maximum(
                np.abs(tab[j, i] - tab[j - 1, i]), np.abs(tab[j, i] - tab[j - 1, i - 1])
            )
            better = (errt <= err) & ~frozen
            err = np.where(better, errt, err)
            best = np.where(better, tab[j, i], best)
        blowup = np.abs(tab[i, i] - tab[i - 1, i - 1]) >= safe * err
        frozen |= blowup
        if frozen.all():
            break
    if x.ndim == 0:
        return float(best), float(err)
    return best, err


def five_point_derivative(func, x, h):
    """Fourth-order central difference with one Richardson step."""
    x = np.asarray(x, dtype=float)

    def d5(step):
        return (
            -np.asarray(func(x + 2 * step))
            + 8 * np.asarray(func(x + step))
            - 8 * np.asarray(func(x - step))
            + np.asarray(func(x - 2 * step))
        ) / (12.0 * step)

    coarse = d5(h)
    fine = d5(0.5 * h)
    return fine + (fine - coarse) / 15.0
