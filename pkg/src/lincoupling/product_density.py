"""Law of the product X1 * X2 for a pair coupled along x2 = phi(x1).

The hyperbola x1 x2 = z meets the curve once, at x1 = rho(z), so the
product CDF is F1(rho(z)) and the density is f1(rho(z)) rho'(z). Both the
f1-side and the f2-side forms of the density are available, as is Lin's
function of the product with an analytic derivative.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from ._numerics import RootFindingError, five_point_derivative, gauss_legendre, monotone_root
from .coupling_curve import MonotoneCurve
from .marginal_models import DomainError, _out, _positive


class ProductDensityModel:
    """rho, g, G and L_g for the coupling carried by ``curve``.

    All evaluators are vectorized and side-effect free.
    """

    def __init__(self, curve: MonotoneCurve):
        self.curve = curve
        self.f1 = curve.f1
        self.f2 = curve.f2

    @property
    def analytic(self) -> bool:
        return self.f1.analytic_derivative and self.f2.analytic_derivative

    # rho and its derivatives -------------------------------------------

    def rho(self, z):
        z = _positive(z, "z")
        phi = self.curve.phi
        dphi = self.curve.phi_prime
        lo, hi = self.curve.domain
        guess = np.clip(np.sqrt(z), lo if lo > 0 else 0.0, hi)
        try:
            return monotone_root(
                lambda x: x * np.asarray(phi(x)),
                z,
                guess,
                dfun=lambda x: np.asarray(phi(x)) + x * np.asarray(dphi(x)),
                lower=lo,
                upper=hi,
            )
        except RootFindingError as exc:
            raise DomainError(f"no curve/hyperbola intersection found for z={exc.targets!r}") from exc

    def _geometry(self, z):
        z = _positive(z, "z")
        x = np.asarray(self.rho(z))
        y = np.asarray(self.curve.phi(x))
        dphi = np.asarray(self.curve.phi_prime(x))
        denom = z * dphi + y * y
        return z, x, y, dphi, denom

    def rho_prime(self, z):
        """rho'(z) = phi(rho) / (z phi'(rho) + phi(rho)^2)."""
        _, _, y, _, denom = self._geometry(z)
        return _out(y / denom)

    def _log_rho_prime_slope(self, z, x, y, dphi, denom):
        # d/dz log rho'(z), from the quotient rule on the rho' formula
        d2phi = np.asarray(self.curve.phi_second(x))
        rp = y / denom
        num_slope = dphi * rp / y
        den_slope = (dphi + z * d2phi * rp + 2.0 * y * dphi * rp) / denom
        return num_slope - den_slope

    def rho_second(self, z):
        z, x, y, dphi, denom = self._geometry(z)
        rp = y / denom
        return _out(rp * self._log_rho_prime_slope(z, x, y, dphi, denom))

    # densities ----------------------------------------------------------

    def density(self, z):
        """g(z) = f1(x1) x1 / (z + phi'(x1) x1^2) with x1 = rho(z)."""
        z, x, _, dphi, _ = self._geometry(z)
        return _out(np.asarray(self.f1.pdf(x)) * x / (z + dphi * x * x))

    def density_via_f2(self, z):
        """Same density written through f2 and the inverse curve."""
        z, x, y, dphi, _ = self._geometry(z)
        f2y = np.asarray(self.f2.pdf(y))
        inv_slope = 1.0 / dphi
        return _out(f2y * y / (z + inv_slope * y * y))

    def density_prime(self, z):
        z = _positive(z, "z")
        if not self.analytic:
            return _out(self._fd_derivative(self.density, z))
        z, x, y, dphi, denom = self._geometry(z)
        rp = y / denom
        g = np.asarray(self.f1.pdf(x)) * rp
        slope = np.asarray(self.f1.score(x)) * rp + self._log_rho_prime_slope(z, x, y, dphi, denom)
        return _out(g * slope)

    def lin(self, z):
        """L_g(z) = -z g'(z) / g(z)."""
        z = _positive(z, "z")
        if not self.analytic:
            return _out(-z * self._fd_derivative(self.density, z) / np.asarray(self.density(z)))
        z, x, y, dphi, denom = self._geometry(z)
        rp = y / denom
        slope = np.asarray(self.f1.score(x)) * rp + self._log_rho_prime_slope(z, x, y, dphi, denom)
        return _out(-z * slope)

    @staticmethod
    def _fd_derivative(func, z):
        h = np.minimum(np.maximum(1e-6, 1e-6 * z), 0.25 * z)
        return five_point_derivative(func, z, h)

    def cdf(self, z):
        """G(z) = F1(rho(z))."""
        return _out(self.f1.cdf(self.rho(z)))

    def sf(self, z):
        return _out(self.f1.sf(self.rho(z)))

    def z_range(self, tail: float = 1e-10) -> tuple[float, float]:
        """Products of the curve points at the f1 quantiles ``tail`` and ``1 - tail``."""
        lo = float(self.f1.quantile(tail))
        hi = float(self.f1.isf(tail))
        dlo, dhi = self.curve.domain
        lo, hi = max(lo, dlo), min(hi, dhi)
        return lo * float(self.curve.phi(lo)), hi * float(self.curve.phi(hi))

    def normalization(self, tail: float = 1e-10, panels: int = 400, order: int = 30) -> float:
        """Integral of g over the quantile-bounded z-range, in log(z)."""
        z_lo, z_hi = self.z_range(tail)
        edges = np.linspace(math.log(z_lo), math.log(z_hi), panels + 1)
        nodes, weights = gauss_legendre(order)
        width = np.diff(edges)
        u = edges[:-1, None] + width[:, None] * nodes
        zz = np.exp(u)
        vals = np.asarray(self.density(zz.ravel())).reshape(zz.shape) * zz
        return float(np.sum(width * (vals @ weights)))


def build_product_model(curve: MonotoneCurve) -> ProductDensityModel:
    return ProductDensityModel(curve)


def rho(model: ProductDensityModel, z):
    return model.rho(z)


def rho_derivative(model: ProductDensityModel, z):
    return model.rho_prime(z)


def product_density(model: ProductDensityModel, z):
    return model.density(z)


def product_density_via_f2(model: ProductDensityModel, z):
    return model.density_via_f2(z)


def product_cdf(model: ProductDensityModel, z):
    return model.cdf(z)


def lin_function_of_product(model: ProductDensityModel, z):
    return model.lin(z)


PRODUCT_COLUMNS = ("z", "rho", "g", "L_g")


def write_product_csv(path, model: ProductDensityModel, zs) -> Path:
    path = Path(path)
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    cols = [zs, np.atleast_1d(model.rho(zs)), np.atleast_1d(model.density(zs)), np.atleast_1d(model.lin(zs))]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRODUCT_COLUMNS)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])
    return path
