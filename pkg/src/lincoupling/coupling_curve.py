"""Singular couplings concentrated on a monotone curve x2 = phi(x1).

Two constructions of the same curve are provided. The quantile-transport
curve phi = F2^{-1} o F1 is exact and is the default. The ODE curve
integrates phi' = f1(x) / f2(phi(x)) with an adaptive Runge-Kutta scheme
and exists mainly so the two can be compared.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from ._numerics import RootFindingError, monotone_root, ridders_derivative
from .marginal_models import DensityModel, DomainError, _out, _positive

INFINITY = math.inf  # grid endpoint sentinel, never used in arithmetic

ODE_START_LEVEL = 1e-10


class CurveConstructionError(RuntimeError):
    pass


# quantile grids and the approximating sets K_m -------------------------


@dataclass(frozen=True)
class QuantileGrid:
    """Dyadic quantiles u_ij of f1 and v_ij of f2 at one level i."""

    level: int
    u: np.ndarray
    v: np.ndarray

    @property
    def size(self) -> int:
        return 2**self.level


def _dyadic_quantiles(model: DensityModel, level: int, label: str) -> np.ndarray:
    n = 2**level
    out = np.empty(n + 1)
    out[0] = 0.0
    out[n] = INFINITY
    if n > 1:
        j = np.arange(1, n)
        try:
            vals = np.asarray(model.quantile(j / n), dtype=float)
        except (RootFindingError, DomainError) as exc:
            raise CurveConstructionError(f"quantile solve failed for {label} at level {level}: {exc}") from exc
        bad = ~np.isfinite(vals) | ~(vals > 0)
        if bad.any():
            jj = int(j[bad][0])
            raise CurveConstructionError(f"quantile solve failed for {label} at (i, j) = ({level}, {jj})")
        out[1:n] = vals
    return out


def build_quantile_grid(f1: DensityModel, f2: DensityModel, level: int) -> QuantileGrid:
    if level < 0:
        raise ValueError("level must be nonnegative")
    return QuantileGrid(level, _dyadic_quantiles(f1, level, "u"), _dyadic_quantiles(f2, level, "v"))


@dataclass(frozen=True)
class DyadicApproximation:
    """K_m as index ranges over a level-m quantile grid.

    Rectangle j is (u[j], u[j+1]) x (v[j], v[j+1]); f_m = 2^m f1 f2 there.
    """

    grid: QuantileGrid

    @property
    def level(self) -> int:
        return self.grid.level

    def rectangles(self) -> list[tuple[float, float, float, float]]:
        u, v = self.grid.u, self.grid.v
        return [(u[j], u[j + 1], v[j], v[j + 1]) for j in range(self.grid.size)]

    def cell_index(self, x1, x2):
        """Index j of the rectangle containing (x1, x2), or -1."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        u, v = self.grid.u, self.grid.v
        j = np.searchsorted(u, x1, side="right") - 1
        jc = np.clip(j, 0, self.grid.size - 1)
        inside = (x1 > u[jc]) & (x1 < u[jc + 1]) & (x2 > v[jc]) & (x2 < v[jc + 1])
        return np.where(inside, jc, -1)


def build_dyadic_approximation(f1: DensityModel, f2: DensityModel, level: int) -> DyadicApproximation:
    if level < 1:
        raise ValueError("K_m is defined for m >= 1")
    return DyadicApproximation(build_quantile_grid(f1, f2, level))


def eval_approx_density(approx: DyadicApproximation, f1: DensityModel, f2: DensityModel, x1, x2):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    inside = approx.cell_index(x1, x2) >= 0
    safe1 = np.where(inside, x1, 1.0)
    safe2 = np.where(inside, x2, 1.0)
    val = 2.0**approx.level * np.asarray(f1.pdf(safe1)) * np.asarray(f2.pdf(safe2))
    return _out(np.where(inside, val, 0.0))


# curves -----------------------------------------------------------------


class MonotoneCurve:
    """Strictly increasing x2 = phi(x1) with F2(phi(x)) = F1(x)."""

    method: str = ""

    def __init__(self, f1: DensityModel, f2: DensityModel):
        self.f1 = f1
        self.f2 = f2
        self.domain = (0.0, math.inf)

    def phi(self, x):
        raise NotImplementedError

    def phi_inverse(self, y):
        raise NotImplementedError

    def _slope(self, x, y):
        # ratio of densities in log space: both factors underflow in far tails
        return np.exp(self.f1._logpdf(x) - self.f2._logpdf(y))

    def phi_prime(self, x):
        x = self._check(x)
        return _out(self._slope(x, np.asarray(self.phi(x))))

    def phi_second(self, x):
        """phi'' = phi' (score1(x) - phi' score2(phi(x))), from the ODE."""
        x = self._check(x)
        y = np.asarray(self.phi(x))
        slope = self._slope(x, y)
        return _out(slope * (self.f1._score(x) - slope * self.f2._score(y)))

    def _check(self, x):
        x = _positive(x)
        lo, hi = self.domain
        if np.any((x < lo) | (x > hi)):
            raise DomainError(f"curve evaluated outside its domain [{lo}, {hi}]")
        return x

    @property
    def is_identity(self) -> bool:
        return False


def _transport(src: DensityModel, dst: DensityModel, x):
    """dst^{-1}(src(x)) using whichever tail keeps full precision."""
    p = np.asarray(src._cdf(x), dtype=float)
    upper = p > 0.5
    out = np.empty_like(p)
    if np.any(~upper):
        out[~upper] = dst._ppf(p[~upper])
    if np.any(upper):
        out[upper] = dst._isf_log(np.asarray(src._logsf(x[upper]), dtype=float))
    return out


class QuantileTransportCurve(MonotoneCurve):
    method = "quantile"

    def __init__(self, f1: DensityModel, f2: DensityModel):
        super().__init__(f1, f2)
        # equal marginals give the diagonal exactly; skip the round trip through F
        self._identity = f1 == f2

    def phi(self, x):
        x = self._check(x)
        if self._identity:
            return _out(x.astype(float, copy=True))
        return _out(_transport(self.f1, self.f2, np.atleast_1d(x)).reshape(np.shape(x)))

    def phi_inverse(self, y):
        y = _positive(y)
        if self._identity:
            return _out(y.astype(float, copy=True))
        return _out(_transport(self.f2, self.f1, np.atleast_1d(y)).reshape(np.shape(y)))

    @property
    def is_identity(self) -> bool:
        return self._identity


class OdeCurve(MonotoneCurve):
    """phi from integrating x2' = f1(x1)/f2(x2) with DOP853 and dense output.

    The literal start x2(0) = 0 can be a 0/0 point, so integration starts at
    x_eps = F1^{-1}(1e-10) from the matching quantile of f2 and runs to the
    upper quantile at the same level. Outside that range the curve raises.
    """

    method = "ode"

    def __init__(
        self,
        f1: DensityModel,
        f2: DensityModel,
        start_level: float = ODE_START_LEVEL,
        end_level: float = ODE_START_LEVEL,
        rtol: float = 3e-14,
        atol: float = 1e-300,
    ):
        super().__init__(f1, f2)
        x_start = float(f1.quantile(start_level))
        x_end = float(f1.isf(end_level))
        y_start = float(f2.quantile(start_level))

        def rhs(x, y):
            return f1._pdf(np.asarray(x)) / f2._pdf(np.asarray(y))

        sol = solve_ivp(
            rhs,
            (x_start, x_end),
            [y_start],
            method="DOP853",
            rtol=rtol,
            atol=atol,
            dense_output=True,
        )
        if not sol.success:
            raise CurveConstructionError(f"ODE integration failed near x={sol.t[-1]:.6g}: {sol.message}")
        self.solution = sol
        self.domain = (x_start, x_end)
        self.n_steps = len(sol.t) - 1

    def phi(self, x):
        x = self._check(x)
        out = self.solution.sol(np.atleast_1d(x))[0]
        return _out(out.reshape(np.shape(x)))

    def phi_inverse(self, y):
        y = _positive(y)
        lo, hi = self.domain
        guess = np.clip(np.asarray(self.f1.quantile(np.clip(self.f2.cdf(y), 1e-300, 1 - 1e-16))), lo, hi)
        try:
            return monotone_root(self.phi, y, guess, dfun=self.phi_prime, lower=lo, upper=hi)
        except RootFindingError as exc:
            raise DomainError(f"phi inverse outside the integrated range: {exc}") from exc


def build_curve(f1: DensityModel, f2: DensityModel, method: str = "quantile", **kwargs) -> MonotoneCurve:
    if method in ("quantile", "quantile-transport"):
        return QuantileTransportCurve(f1, f2)
    if method == "ode":
        return OdeCurve(f1, f2, **kwargs)
    raise ValueError(f"unknown curve method {method!r}")


# verification and export ------------------------------------------------


@dataclass(frozen=True)
class CurveResidualReport:
    max_slope_residual: float
    max_quantile_residual: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "max_slope_residual": self.max_slope_residual,
            "max_quantile_residual": self.max_quantile_residual,
            "n_points": self.n_points,
        }


def verify_curve(curve: MonotoneCurve, f1: DensityModel, f2: DensityModel, grid) -> CurveResidualReport:
    """Residuals of the ODE slope and of the quantile identity on ``grid``.

    The slope is measured by differentiating ``curve.phi`` numerically, so
    it checks phi itself rather than restating the ODE right-hand side.
    """
    x = _positive(grid)
    phi = np.asarray(curve.phi(x))
    h = 1e-3 * x
    lo, hi = curve.domain
    h = np.minimum(h, 0.5 * np.minimum(x - lo, hi - x)) if lo > 0 else np.minimum(h, 0.5 * x)
    slope, _ = ridders_derivative(curve.phi, x, h)
    target = np.asarray(f1.pdf(x)) / np.asarray(f2.pdf(phi))
    slope_res = np.abs(slope - target)
    # compare on the tail that is resolved in double precision
    p1 = np.asarray(f1.cdf(x))
    cdf_res = np.abs(np.asarray(f2.cdf(phi)) - p1)
    sf_res = np.abs(np.asarray(f2.sf(phi)) - np.asarray(f1.sf(x)))
    quant_res = np.where(p1 <= 0.5, cdf_res, sf_res)
    return CurveResidualReport(
        max_slope_residual=float(np.max(slope_res)),
        max_quantile_residual=float(np.max(quant_res)),
        n_points=int(x.size),
    )


CURVE_COLUMNS = ("x1", "phi", "phi_prime")


def write_curve_csv(path, curve: MonotoneCurve, xs) -> Path:
    path = Path(path)
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    phi = np.atleast_1d(curve.phi(xs))
    dphi = np.atleast_1d(curve.phi_prime(xs))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in zip(xs, phi, dphi):
            w.writerow([repr(float(v)) for v in row])
    return path


GRID_COLUMNS = ("level", "j", "u", "v")


def write_quantile_grid_csv(path, grids: list[QuantileGrid]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_COLUMNS)
        for g in grids:
            for j in range(g.size + 1):
                w.writerow([g.level, j, repr(float(g.u[j])), repr(float(g.v[j]))])
    return path
