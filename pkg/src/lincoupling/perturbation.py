"""Local mass surgery on the coupling curve that makes L_g oscillate.

Inside a rectangle [a, b] x [phi(a), phi(b)] mass with a rapidly
oscillating density is lifted off the top of the curve (mu1), dropped a
distance d lower (mu2), and compensated by lifting an equal x2-profile
(mu3) from the bottom of the curve up by d (mu4). Both marginals are left
untouched while the product density picks up the oscillation.

Two readings of the removed density are supported:

``"z"``
    mu1 has density tau(z) with respect to the product value z, so the
    product density on the window is g(z) - tau(z).
``"x1"``
    mu1 has density tau(x1 phi(x1)) with respect to x1, giving
    (f1(rho(z)) - tau(z)) rho'(z) on the window.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import special
from scipy.interpolate import PchipInterpolator
from scipy.optimize import minimize_scalar

from ._numerics import gauss_legendre, monotone_root, panel_integrals, ridders_derivative
from .coupling_curve import MonotoneCurve, build_curve
from .marginal_models import DensityModel, _out, density_from_record
from .product_density import ProductDensityModel

INTERPRETATIONS = ("z", "x1")

TABLE_NODES = 4096


class InfeasibleSpecError(ValueError):
    pass


class RectangleInfeasibleError(InfeasibleSpecError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"rectangle {index}: {reason}")
        self.index = index


class ResolutionWarning(UserWarning):
    pass


def _interp(name: str) -> str:
    key = {"z-density": "z", "x1-density": "x1"}.get(name, name)
    if key not in INTERPRETATIONS:
        raise ValueError(f"interpretation must be one of {INTERPRETATIONS}, got {name!r}")
    return key


# geometry -----------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    a: float
    b: float
    delta: float
    epsilon: float
    nu: float
    s: float
    t: float
    b_prime: float
    d: float
    a_prime: float
    interpretation: str = "z"

    @property
    def window(self) -> tuple[float, float]:
        """Support of the bump, [t - 3 delta, t]."""
        return self.t - 3.0 * self.delta, self.t

    @property
    def plateau(self) -> tuple[float, float]:
        return self.t - 2.0 * self.delta, self.t - self.delta

    def to_dict(self) -> dict:
        return asdict(self)


def derive_spec(
    curve: MonotoneCurve,
    a: float,
    b: float,
    delta: float,
    epsilon: float,
    nu: float,
    interpretation: str = "z",
    product: ProductDensityModel | None = None,
) -> PerturbationSpec:
    """Derived geometry of one rectangle; raises on an infeasible delta."""
    interpretation = _interp(interpretation)
    if not 0 < a < b:
        raise InfeasibleSpecError(f"need 0 < a < b, got a={a}, b={b}")
    if not delta > 0:
        raise InfeasibleSpecError("delta must be positive")
    if not epsilon >= 0:
        raise InfeasibleSpecError("epsilon must be nonnegative")
    if not nu > 0:
        raise InfeasibleSpecError("nu must be positive")
    product = product or ProductDensityModel(curve)
    phi_a, phi_b = float(curve.phi(a)), float(curve.phi(b))
    s, t = a * phi_a, b * phi_b
    if not t - 3.0 * delta > s:
        raise InfeasibleSpecError(f"t - 3 delta = {t - 3 * delta:.6g} must exceed s = {s:.6g}")
    b_prime = float(product.rho(t - 3.0 * delta))
    phi_bp = float(curve.phi(b_prime))
    d = phi_bp - phi_a
    rise = phi_b - phi_bp
    if not rise < d:
        raise InfeasibleSpecError(
            f"phi(b) - phi(b') = {rise:.6g} must be below phi(b') - phi(a) = {d:.6g}; shrink delta"
        )
    a_prime = float(curve.phi_inverse(phi_a + rise))
    if not a_prime < b_prime:
        raise InfeasibleSpecError(f"a' = {a_prime:.6g} must be below b' = {b_prime:.6g}")
    return PerturbationSpec(
        a=float(a),
        b=float(b),
        delta=float(delta),
        epsilon=float(epsilon),
        nu=float(nu),
        s=s,
        t=t,
        b_prime=b_prime,
        d=d,
        a_prime=a_prime,
        interpretation=interpretation,
    )


# bump ---------------------------------------------------------------------


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1, built from exp(-1/x)."""
    x = np.asarray(x, dtype=float)
    inner = (x > 0.0) & (x < 1.0)
    xc = np.where(inner, x, 0.5)
    with np.errstate(over="ignore", divide="ignore"):
        val = special.expit(1.0 / (1.0 - xc) - 1.0 / xc)
    return np.where(x >= 1.0, 1.0, np.where(inner, val, 0.0))


def smooth_step_prime(x):
    x = np.asarray(x, dtype=float)
    inner = (x > 0.0) & (x < 1.0)
    xc = np.where(inner, x, 0.5)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        st = special.expit(1.0 / (1.0 - xc) - 1.0 / xc)
        val = st * (1.0 - st) * (1.0 / (1.0 - xc) ** 2 + 1.0 / xc**2)
    # near the ends the flat factor wins; 0 * inf there means 0
    return np.where(inner & np.isfinite(val), val, 0.0)


@dataclass(frozen=True)
class BumpFunction:
    """tau(z) = epsilon sin^2(nu z) sigma(z), sigma a smooth cutoff of the window."""

    spec: PerturbationSpec

    def cutoff(self, z):
        sp = self.spec
        up = (np.asarray(z, dtype=float) - (sp.t - 3.0 * sp.delta)) / sp.delta
        down = (sp.t - np.asarray(z, dtype=float)) / sp.delta
        return smooth_step(up) * smooth_step(down)

    def cutoff_prime(self, z):
        sp = self.spec
        z = np.asarray(z, dtype=float)
        up = (z - (sp.t - 3.0 * sp.delta)) / sp.delta
        down = (sp.t - z) / sp.delta
        return (smooth_step_prime(up) * smooth_step(down) - smooth_step(up) * smooth_step_prime(down)) / sp.delta

    def shape(self, z):
        z = np.asarray(z, dtype=float)
        return np.sin(self.spec.nu * z) ** 2 * self.cutoff(z)

    def __call__(self, z):
        return _out(self.spec.epsilon * self.shape(z))

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        nu = self.spec.nu
        val = nu * np.sin(2.0 * nu * z) * self.cutoff(z) + np.sin(nu * z) ** 2 * self.cutoff_prime(z)
        return _out(self.spec.epsilon * val)


def eval_tau(bump: BumpFunction, z):
    return bump(z)


# arc measures -------------------------------------------------------------


class ArcMeasure:
    """Mass on the arc x2 = phi(x1) + shift, lo <= x1 <= hi.

    ``density`` is the density with respect to x1. The cumulative mass is
    tabulated on ``TABLE_NODES`` points with a Gauss-Legendre rule per
    interval; a monotone cubic through the table inverts it for sampling.
    """

    def __init__(self, name: str, curve: MonotoneCurve, lo: float, hi: float, shift: float, density, sign: int = 1):
        self.name = name
        self.curve = curve
        self.lo = float(lo)
        self.hi = float(hi)
        self.shift = float(shift)
        self.sign = int(sign)
        self._density = density
        self.nodes = np.linspace(self.lo, self.hi, TABLE_NODES)
        pieces = panel_integrals(self._inside_density, self.nodes[:-1], self.nodes[1:], order=10)
        self.cum = np.concatenate(([0.0], np.cumsum(pieces)))
        self.mass = float(self.cum[-1])
        self.node_density = np.asarray(self._inside_density(self.nodes))

    def __repr__(self) -> str:
        return f"ArcMeasure({self.name}, [{self.lo:.6g}, {self.hi:.6g}], shift={self.shift:.6g}, mass={self.mass:.3g})"

    def _inside_density(self, x):
        return np.asarray(self._density(np.asarray(x, dtype=float)), dtype=float)

    def density_x1(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lo) & (x <= self.hi)
        xc = np.clip(x, self.lo, self.hi)
        return _out(np.where(inside, self._inside_density(xc), 0.0))

    def path(self, x):
        return np.asarray(self.curve.phi(x)) + self.shift

    x1_projection = density_x1

    def x2_projection(self, y):
        y = np.asarray(y, dtype=float)
        y_lo, y_hi = float(self.path(self.lo)), float(self.path(self.hi))
        inside = (y >= y_lo) & (y <= y_hi)
        yc = np.clip(y, y_lo, y_hi) - self.shift
        x = np.clip(np.asarray(self.curve.phi_inverse(yc)), self.lo, self.hi)
        val = self._inside_density(x) / np.asarray(self.curve.phi_prime(x))
        return _out(np.where(inside, val, 0.0))

    @property
    def product_range(self) -> tuple[float, float]:
        return self.lo * float(self.path(self.lo)), self.hi * float(self.path(self.hi))

    def intersect(self, z):
        """x1 on the arc with x1 * (phi(x1) + shift) = z, NaN when none."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        z_lo, z_hi = self.product_range
        hit = (z >= z_lo) & (z <= z_hi)
        out = np.full(z.shape, np.nan)
        if hit.any():
            zh = z[hit]
            x = np.empty_like(zh)
            at_lo = zh == z_lo
            at_hi = zh == z_hi
            x[at_lo] = self.lo
            x[at_hi] = self.hi
            mid = ~(at_lo | at_hi)
            if mid.any():
                # initial guess by linear interpolation of the product along the arc
                guess = self.lo + (zh[mid] - z_lo) / (z_hi - z_lo) * (self.hi - self.lo)
                x[mid] = monotone_root(
                    lambda v: v * self.path(v),
                    zh[mid],
                    guess,
                    dfun=lambda v: self.path(v) + v * np.asarray(self.curve.phi_prime(v)),
                    lower=np.nextafter(self.lo, -np.inf),
                    upper=np.nextafter(self.hi, np.inf),
                )
            out[hit] = np.clip(x, self.lo, self.hi)
        return out

    def product_density(self, z):
        """Density of x1 * x2 under this arc measure (unsigned)."""
        shape = np.shape(z)
        x = self.intersect(z)
        hit = ~np.isnan(x)
        out = np.zeros(x.shape)
        if hit.any():
            xh = x[hit]
            jac = self.path(xh) + xh * np.asarray(self.curve.phi_prime(xh))
            out[hit] = self._inside_density(xh) / jac
        return _out(out.reshape(shape))

    def cumulative(self, x):
        """Arc mass on [lo, x]."""
        x = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        k = np.clip(np.searchsorted(self.nodes, x, side="right") - 1, 0, TABLE_NODES - 2)
        nodes, weights = gauss_legendre(10)
        start = self.nodes[k]
        width = x - start
        pts = start[..., None] + width[..., None] * nodes
        part = width * (self._inside_density(pts) @ weights)
        return _out(self.cum[k] + part)

    def mass_below_product(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        z_lo, z_hi = self.product_range
        out = np.where(z >= z_hi, self.mass, 0.0)
        mid = (z > z_lo) & (z < z_hi)
        if mid.any():
            out[mid] = self.cumulative(self.intersect(z[mid]))
        return out

    def ppf(self, u):
        """x1 with cumulative(x1) = u * mass, via the monotone cubic table."""
        if not hasattr(self, "_inverse"):
            # collapse stretches with (numerically) no mass so slopes stay finite
            keep = np.concatenate(([True], np.diff(self.cum) > 1e-13 * self.mass))
            keep[-1] = True
            c, x = self.cum[keep], self.nodes[keep]
            good = np.concatenate(([True], np.diff(c) > 0))
            self._inverse = PchipInterpolator(c[good], x[good], extrapolate=False)
        x = self._inverse(np.asarray(u, dtype=float) * self.mass)
        return np.clip(np.nan_to_num(x, nan=self.hi), self.lo, self.hi)


# perturbed measure --------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityReport:
    epsilon: float
    eps_max_removal: float
    eps_max_compensation: float
    eps_max: float
    feasible: bool
    z_argmin: float
    y_argmin: float

    def to_dict(self) -> dict:
        return asdict(self)


def _kappa(spec: PerturbationSpec, product: ProductDensityModel, z):
    if spec.interpretation == "z":
        return np.ones_like(np.asarray(z, dtype=float))
    return np.asarray(product.rho_prime(z))


def _min_on(func, lo: float, hi: float, n: int = 2001) -> tuple[float, float]:
    xs = np.linspace(lo, hi, n)
    vals = np.asarray(func(xs))
    i = int(np.argmin(vals))
    best, arg = float(vals[i]), float(xs[i])
    if 0 < i < n - 1:
        res = minimize_scalar(
            lambda v: float(func(np.array([v]))[0]), bounds=(xs[i - 1], xs[i + 1]), method="bounded",
            options={"xatol": 1e-12 * max(1.0, abs(arg))},
        )
        if res.fun < best:
            best, arg = float(res.fun), float(res.x)
    return best, arg


def validate_spec(spec: PerturbationSpec, f1: DensityModel, product: ProductDensityModel) -> FeasibilityReport:
    """Largest epsilon keeping Q - mu1 and Q - mu3 nonnegative for any nu.

    The removal bound is min over the bump window of the curve's density
    divided by the per-unit-epsilon removal density (sin^2 and the cutoff
    bounded by 1). The compensation bound compares f2 on [phi(a), phi(a')]
    with the x2-profile of mu1 shifted down by d.
    """
    curve = product.curve
    lo, hi = spec.window

    def removal_ratio(z):
        if spec.interpretation == "x1":
            # g / rho' is just f1 at the intersection point
            return np.asarray(f1.pdf(product.rho(z)))
        return np.asarray(product.density(z))

    eps1, z_arg = _min_on(removal_ratio, lo, hi)

    def compensation_ratio(y):
        yp = np.asarray(y) + spec.d
        xp = np.asarray(curve.phi_inverse(yp))
        dphi = np.asarray(curve.phi_prime(xp))
        zp = xp * np.asarray(curve.phi(xp))
        per_unit = _kappa(spec, product, zp) * (yp + xp * dphi) / dphi
        return np.asarray(curve.f2.pdf(y)) / per_unit

    y_lo = float(curve.phi(spec.a))
    y_hi = float(curve.phi(spec.a_prime))
    eps3, y_arg = _min_on(compensation_ratio, y_lo, y_hi)
    eps_max = min(eps1, eps3)
    return FeasibilityReport(
        epsilon=spec.epsilon,
        eps_max_removal=eps1,
        eps_max_compensation=eps3,
        eps_max=eps_max,
        feasible=spec.epsilon <= eps_max,
        z_argmin=z_arg,
        y_argmin=y_arg,
    )


class PerturbedMeasure:
    """Q~ = Q - mu1 + mu2 - mu3 + mu4 on one rectangle."""

    def __init__(self, spec: PerturbationSpec, product: ProductDensityModel):
        self.spec = spec
        self.product = product
        self.curve = curve = product.curve
        self.bump = bump = BumpFunction(spec)
        sp = spec

        if sp.interpretation == "z":
            def m1(x):
                z = x * np.asarray(curve.phi(x))
                return bump.spec.epsilon * bump.shape(z) * (np.asarray(curve.phi(x)) + x * np.asarray(curve.phi_prime(x)))
        else:
            def m1(x):
                return bump.spec.epsilon * bump.shape(x * np.asarray(curve.phi(x)))

        def mu3_x2_density(y):
            # x2-profile of mu2 at y equals that of mu1 at y + d
            xp = np.asarray(curve.phi_inverse(np.asarray(y) + sp.d))
            xp = np.clip(xp, sp.b_prime, sp.b)
            return m1(xp) / np.asarray(curve.phi_prime(xp))

        def m3(x):
            return mu3_x2_density(np.asarray(curve.phi(x))) * np.asarray(curve.phi_prime(x))

        self.removal_density = m1
        self.mu3_x2_density = mu3_x2_density
        self.mu1 = ArcMeasure("mu1", curve, sp.b_prime, sp.b, 0.0, m1, sign=-1)
        self.mu2 = ArcMeasure("mu2", curve, sp.b_prime, sp.b, -sp.d, m1, sign=+1)
        self.mu3 = ArcMeasure("mu3", curve, sp.a, sp.a_prime, 0.0, m3, sign=-1)
        self.mu4 = ArcMeasure("mu4", curve, sp.a, sp.a_prime, +sp.d, m3, sign=+1)

    @property
    def arcs(self) -> list[ArcMeasure]:
        return [self.mu1, self.mu2, self.mu3, self.mu4]

    @property
    def masses(self) -> dict[str, float]:
        return {arc.name: arc.mass for arc in self.arcs}

    # projections

    def x1_projection(self, x):
        x = np.asarray(x, dtype=float)
        sp = self.spec
        base = np.where((x >= sp.a) & (x <= sp.b), np.asarray(self.product.f1.pdf(x)), 0.0)
        return _out(base + sum(arc.sign * np.asarray(arc.x1_projection(x)) for arc in self.arcs))

    def x2_projection(self, y):
        y = np.asarray(y, dtype=float)
        lo, hi = float(self.curve.phi(self.spec.a)), float(self.curve.phi(self.spec.b))
        base = np.where((y >= lo) & (y <= hi), np.asarray(self.product.f2.pdf(y)), 0.0)
        return _out(base + sum(arc.sign * np.asarray(arc.x2_projection(y)) for arc in self.arcs))

    # product law

    def arc_contributions(self, z):
        z = np.asarray(z, dtype=float)
        return sum(arc.sign * np.asarray(arc.product_density(z)) for arc in self.arcs)

    def product_density(self, z):
        z = np.asarray(z, dtype=float)
        return _out(np.asarray(self.product.density(z)) + self.arc_contributions(z))

    def removal_rate(self, z):
        """z-density of mu1: tau(z) kappa(z) on the window."""
        z = np.asarray(z, dtype=float)
        lo, hi = self.spec.window
        inside = (z >= lo) & (z <= hi)
        zc = np.clip(z, lo, hi)
        val = np.asarray(self.bump(zc)) * _kappa(self.spec, self.product, zc)
        return _out(np.where(inside, val, 0.0))

    def removal_rate_prime(self, z):
        z = np.asarray(z, dtype=float)
        lo, hi = self.spec.window
        inside = (z >= lo) & (z <= hi)
        zc = np.clip(z, lo, hi)
        tau = np.asarray(self.bump(zc))
        dtau = np.asarray(self.bump.derivative(zc))
        if self.spec.interpretation == "z":
            val = dtau
        else:
            val = dtau * np.asarray(self.product.rho_prime(zc)) + tau * np.asarray(self.product.rho_second(zc))
        return _out(np.where(inside, val, 0.0))

    def product_density_prime(self, z):
        """g'(z, Q~): analytic for the curve and mu1, numerical for the other arcs."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        out = np.asarray(self.product.density_prime(z)) - np.asarray(self.removal_rate_prime(z))
        for arc in (self.mu2, self.mu3, self.mu4):
            if arc.mass == 0.0:
                continue
            z_lo, z_hi = arc.product_range
            hit = (z > z_lo) & (z < z_hi)
            if hit.any():
                zh = z[hit]
                h = 0.25 * np.minimum(zh - z_lo, z_hi - zh)
                h = np.minimum(h, 1e-3 * (z_hi - z_lo))
                d, _ = ridders_derivative(arc.product_density, zh, h)
                out[hit] += arc.sign * d
        return out

    def lin(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        return -z * self.product_density_prime(z) / np.asarray(self.product_density(z))

    def product_cdf(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        out = np.asarray(self.product.cdf(z), dtype=float)
        for arc in self.arcs:
            out = out + arc.sign * arc.mass_below_product(z)
        return out


def build_perturbed_measure(spec: PerturbationSpec, product: ProductDensityModel, check: bool = True) -> PerturbedMeasure:
    if check and spec.epsilon > 0:
        report = validate_spec(spec, product.f1, product)
        if not report.feasible:
            raise InfeasibleSpecError(
                f"epsilon = {spec.epsilon:.6g} exceeds the positivity bound {report.eps_max:.6g}"
            )
    return PerturbedMeasure(spec, product)


def perturbed_product_density(pm: PerturbedMeasure, z):
    return pm.product_density(z)


def perturbed_lin_function(pm: PerturbedMeasure, z):
    return _out(pm.lin(z)) if np.ndim(z) else float(pm.lin(z)[0])


@dataclass(frozen=True)
class ArcHit:
    arc: str
    hit: bool
    x1: float | None
    boundary: bool


def arc_hyperbola_intersection(pm: PerturbedMeasure, z: float) -> list[ArcHit]:
    """Where the hyperbola x1 x2 = z meets the shifted arcs l2 and l4."""
    hits = []
    for arc in (pm.mu2, pm.mu4):
        x = float(arc.intersect(z)[0])
        if math.isnan(x):
            hits.append(ArcHit(arc.name, False, None, False))
        else:
            hits.append(ArcHit(arc.name, True, x, x in (arc.lo, arc.hi)))
    return hits


# oscillation ---------------------------------------------------------------


@dataclass(frozen=True)
class OscillationExtrema:
    lmin: float
    lmax: float
    zmin: float
    zmax: float
    n_grid: int


def oscillation_extrema(pm: PerturbedMeasure, resolution: int = 32, refine: bool = True) -> OscillationExtrema:
    """Extrema of L_g over the plateau [t - 2 delta, t - delta]."""
    if resolution < 10:
        warnings.warn(f"{resolution} points per period undersamples sin(2 nu z)", ResolutionWarning, stacklevel=2)
    lo, hi = pm.spec.plateau
    period = math.pi / pm.spec.nu
    n = max(int(math.ceil(resolution * (hi - lo) / period)) + 1, 65)
    zs = np.linspace(lo, hi, n)
    lin = pm.lin(zs)
    i_min, i_max = int(np.argmin(lin)), int(np.argmax(lin))
    lmin, zmin = float(lin[i_min]), float(zs[i_min])
    lmax, zmax = float(lin[i_max]), float(zs[i_max])
    if refine:
        f = lambda v: float(pm.lin(np.array([v]))[0])  # noqa: E731
        if 0 < i_min < n - 1:
            r = minimize_scalar(f, bracket=(zs[i_min - 1], zs[i_min], zs[i_min + 1]), method="golden")
            if r.fun < lmin and lo <= r.x <= hi:
                lmin, zmin = float(r.fun), float(r.x)
        if 0 < i_max < n - 1:
            r = minimize_scalar(lambda v: -f(v), bracket=(zs[i_max - 1], zs[i_max], zs[i_max + 1]), method="golden")
            if -r.fun > lmax and lo <= r.x <= hi:
                lmax, zmax = float(-r.fun), float(r.x)
    return OscillationExtrema(lmin=lmin, lmax=lmax, zmin=zmin, zmax=zmax, n_grid=n)


# rectangle sequence --------------------------------------------------------


@dataclass
class RectangleResult:
    index: int
    spec: PerturbationSpec
    measure: PerturbedMeasure
    extrema: OscillationExtrema
    target: float
    search_target: float
    eps_max: float
    met: bool

    def summary_row(self) -> dict:
        sp = self.spec
        return {
            "n": self.index,
            "a": sp.a,
            "b": sp.b,
            "delta": sp.delta,
            "epsilon": sp.epsilon,
            "nu": sp.nu,
            "Lmin": self.extrema.lmin,
            "Lmax": self.extrema.lmax,
        }


@dataclass
class RectangleSequence:
    product: ProductDensityModel
    interpretation: str
    rectangles: list[RectangleResult] = field(default_factory=list)

    @property
    def all_met(self) -> bool:
        return all(r.met for r in self.rectangles)

    def summary(self) -> list[dict]:
        return [r.summary_row() for r in self.rectangles]


def _per_rect(value, n: int, name: str):
    if value is None:
        return [None] * n
    if np.ndim(value) == 0:
        return [float(value)] * n
    value = [None if v is None else float(v) for v in value]
    if len(value) != n:
        raise ValueError(f"{name} override needs {n} entries, got {len(value)}")
    return value


def build_rectangle_sequence(
    product: ProductDensityModel,
    n_rects: int,
    magnitudes=None,
    interpretation: str = "z",
    a=None,
    b=None,
    delta=None,
    epsilon=None,
    nu=None,
    width_factor: float = 1.5,
    delta_fraction: float = 0.05,
    epsilon_fraction: float = 0.5,
    resolution: int = 32,
    max_doublings: int = 24,
    max_grid: int = 1_000_000,
    escalate: bool = True,
) -> RectangleSequence:
    """Disjoint rectangles a_n = 2^n with nu_n found by doubling.

    With ``escalate`` each rectangle must also beat the extrema reached on
    the previous one, so the achieved magnitudes grow strictly along the
    sequence. A search whose oscillation stops growing under doubling (e.g.
    epsilon = 0), or whose plateau grid would exceed ``max_grid`` points,
    gives up and reports the target as unmet.
    """
    if n_rects < 1:
        raise ValueError("n_rects must be at least 1")
    interpretation = _interp(interpretation)
    if magnitudes is None:
        magnitudes = [10.0 * (n + 1) for n in range(n_rects)]
    magnitudes = [float(m) for m in magnitudes]
    if len(magnitudes) != n_rects:
        raise ValueError("one magnitude target per rectangle is required")
    a_list = _per_rect(a, n_rects, "a")
    b_list = _per_rect(b, n_rects, "b")
    d_list = _per_rect(delta, n_rects, "delta")
    e_list = _per_rect(epsilon, n_rects, "epsilon")
    nu_list = _per_rect(nu, n_rects, "nu")

    curve = product.curve
    seq = RectangleSequence(product=product, interpretation=interpretation)
    prev_top = 0.0
    prev_b = 0.0
    for i in range(n_rects):
        idx = i + 1
        a_n = a_list[i] if a_list[i] is not None else 2.0**idx
        b_n = b_list[i] if b_list[i] is not None else width_factor * a_n
        if not a_n > prev_b:
            raise RectangleInfeasibleError(idx, f"[{a_n}, {b_n}] overlaps the previous rectangle")
        try:
            if d_list[i] is None:
                s_n = a_n * float(curve.phi(a_n))
                t_n = b_n * float(curve.phi(b_n))
                delta_n = delta_fraction * (t_n - s_n)
            else:
                delta_n = d_list[i]
            geom = derive_spec(curve, a_n, b_n, delta_n, 0.0, 1.0, interpretation, product)
            report = validate_spec(geom, product.f1, product)
            eps_n = epsilon_fraction * report.eps_max if e_list[i] is None else e_list[i]
            if eps_n > report.eps_max:
                raise InfeasibleSpecError(f"epsilon {eps_n:.6g} exceeds bound {report.eps_max:.6g}")
        except InfeasibleSpecError as exc:
            raise RectangleInfeasibleError(idx, str(exc)) from exc

        target = magnitudes[i]
        search_target = max(target, prev_top) if escalate else target

        def attempt(nu_val):
            spec = replace(geom, epsilon=eps_n, nu=nu_val)
            pm = PerturbedMeasure(spec, product)
            return spec, pm, oscillation_extrema(pm, resolution=resolution)

        def reached(ext):
            return ext.lmin < -search_target and ext.lmax > search_target

        if nu_list[i] is not None:
            spec, pm, ext = attempt(nu_list[i])
        else:
            nu_val = 10.0 * math.pi / geom.delta
            spec, pm, ext = attempt(nu_val)
            for _ in range(max_doublings):
                if reached(ext):
                    break
                swing = 0.5 * (ext.lmax - ext.lmin)
                if 2 * ext.n_grid > max_grid:
                    break
                nu_val *= 2.0
                spec, pm, ext = attempt(nu_val)
                if 0.5 * (ext.lmax - ext.lmin) < 1.5 * swing:
                    break
        met = ext.lmin <= -target and ext.lmax >= target
        if escalate:
            met = met and reached(ext)
        seq.rectangles.append(
            RectangleResult(
                index=idx,
                spec=spec,
                measure=pm,
                extrema=ext,
                target=target,
                search_target=search_target,
                eps_max=report.eps_max,
                met=met,
            )
        )
        prev_top = max(prev_top, -ext.lmin, ext.lmax)
        prev_b = b_n
    return seq


# assembled measure ---------------------------------------------------------


class AssembledMeasure:
    """P = P~ - sum Q_n + sum Q~_n: the base coupling plus all rectangle surgeries."""

    def __init__(self, product: ProductDensityModel, measures: list[PerturbedMeasure]):
        self.product = product
        self.curve = product.curve
        self.f1 = product.f1
        self.f2 = product.f2
        self.measures = list(measures)

    @property
    def arcs(self) -> list[ArcMeasure]:
        return [arc for pm in self.measures for arc in pm.arcs]

    def density(self, z):
        z = np.asarray(z, dtype=float)
        out = np.asarray(self.product.density(z), dtype=float)
        for pm in self.measures:
            out = out + pm.arc_contributions(z)
        return _out(out)

    def cdf(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        out = np.asarray(self.product.cdf(z), dtype=float)
        for arc in self.arcs:
            out = out + arc.sign * arc.mass_below_product(z)
        return out

    def x1_density(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.f1.pdf(x), dtype=float)
        for arc in self.arcs:
            out = out + arc.sign * np.asarray(arc.x1_projection(x))
        return _out(out)

    def x2_density(self, y):
        y = np.asarray(y, dtype=float)
        out = np.asarray(self.f2.pdf(y), dtype=float)
        for arc in self.arcs:
            out = out + arc.sign * np.asarray(arc.x2_projection(y))
        return _out(out)


@dataclass
class MeasureDescription:
    """Serializable description of P: marginals, curve and rectangle surgeries."""

    marginal1: dict
    marginal2: dict
    curve_method: str = "quantile"
    interpretation: str = "z"
    rectangles: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "marginal1": dict(self.marginal1),
            "marginal2": dict(self.marginal2),
            "curve_method": self.curve_method,
            "interpretation": self.interpretation,
            "rectangles": [dict(r) for r in self.rectangles],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MeasureDescription":
        unknown = set(data) - {"marginal1", "marginal2", "curve_method", "interpretation", "rectangles"}
        if unknown:
            raise ValueError(f"unknown measure description fields: {sorted(unknown)}")
        return cls(
            marginal1=dict(data["marginal1"]),
            marginal2=dict(data["marginal2"]),
            curve_method=data.get("curve_method", "quantile"),
            interpretation=_interp(data.get("interpretation", "z")),
            rectangles=[dict(r) for r in data.get("rectangles", [])],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MeasureDescription":
        return cls.from_dict(json.loads(text))

    def build(self) -> AssembledMeasure:
        f1 = density_from_record(self.marginal1)
        f2 = density_from_record(self.marginal2)
        product = ProductDensityModel(build_curve(f1, f2, self.curve_method))
        spec_fields = set(PerturbationSpec.__dataclass_fields__)
        measures = []
        for rect in self.rectangles:
            spec = PerturbationSpec(**{k: v for k, v in rect.items() if k in spec_fields})
            measures.append(PerturbedMeasure(spec, product))
        return AssembledMeasure(product, measures)


def assemble_measure_description(seq: RectangleSequence | None, product: ProductDensityModel | None = None) -> MeasureDescription:
    """Describe P; rectangles with zero bump amplitude leave P~ unchanged and are omitted."""
    product = product or seq.product
    rects = []
    interpretation = "z"
    if seq is not None:
        interpretation = seq.interpretation
        for r in seq.rectangles:
            if r.spec.epsilon == 0.0:
                continue
            entry = r.spec.to_dict()
            entry["masses"] = r.measure.masses
            rects.append(entry)
    return MeasureDescription(
        marginal1=product.f1.to_record(),
        marginal2=product.f2.to_record(),
        curve_method=product.curve.method,
        interpretation=interpretation,
        rectangles=rects,
    )
