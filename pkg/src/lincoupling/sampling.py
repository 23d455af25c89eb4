"""Monte Carlo draws from the curve coupling and its perturbations, with KS checks.

Every component of a measure lives on a monotone curve parameterized by
x1, so each is sampled by inverse transform along x1. Index blocks of
fixed size get their own stream derived from the master seed, which keeps
batches bit-identical for any number of workers.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from ._numerics import panel_integrals
from .coupling_curve import MonotoneCurve
from .marginal_models import DensityModel
from .perturbation import ArcMeasure, AssembledMeasure, MeasureDescription

BLOCK_SIZE = 1 << 16
ALPHA = 0.01


class NegativeComponentError(RuntimeError):
    pass


class SampleSizeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleBatch:
    pairs: np.ndarray
    seed: int
    source: str
    rects: tuple[int, ...] = ()

    @property
    def x1(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def x2(self) -> np.ndarray:
        return self.pairs[:, 1]

    @property
    def products(self) -> np.ndarray:
        return self.pairs[:, 0] * self.pairs[:, 1]

    def __len__(self) -> int:
        return len(self.pairs)


def _open_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    # strictly inside (0, 1) so quantiles stay finite and positive
    return (rng.integers(0, 1 << 53, size=size) + 0.5) / float(1 << 53)


def _blocks(n: int, seed: int, draw, workers: int) -> np.ndarray:
    starts = list(range(0, n, BLOCK_SIZE))

    def run(k: int) -> np.ndarray:
        size = min(BLOCK_SIZE, n - starts[k])
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        return draw(rng, size)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(k) for k in range(len(starts))]
    return np.concatenate(parts, axis=0)


def _check_n(n: int, minimum: int = 1) -> int:
    n = int(n)
    if n < minimum:
        raise SampleSizeError(f"need at least {minimum} samples, got {n}")
    return n


def sample_base(curve: MonotoneCurve, f1: DensityModel, n: int, seed: int, workers: int = 1) -> SampleBatch:
    """X1 = Q1(U), X2 = phi(X1)."""
    n = _check_n(n)

    def draw(rng, size):
        x1 = np.asarray(f1.quantile(_open_uniform(rng, size)), dtype=float)
        return np.column_stack([x1, np.asarray(curve.phi(x1), dtype=float)])

    return SampleBatch(_blocks(n, seed, draw, workers), int(seed), "base-curve")


# perturbed sampler ---------------------------------------------------------


class _CurveGap:
    """Curve mass with x1 outside the excised intervals, sampled in F1-probability space."""

    name = "curve"

    def __init__(self, curve: MonotoneCurve, f1: DensityModel, excised: list[tuple[float, float]]):
        self.curve = curve
        self.f1 = f1
        gaps = sorted((float(f1.cdf(lo)), float(f1.cdf(hi))) for lo, hi in excised)
        self.gaps = gaps
        self.mass = 1.0 - sum(hi - lo for lo, hi in gaps)

    def draw(self, u: np.ndarray) -> np.ndarray:
        p = u * self.mass
        for lo, hi in self.gaps:
            p = np.where(p >= lo, p + (hi - lo), p)
        x1 = np.asarray(self.f1.quantile(np.clip(p, 1e-300, 1.0 - 1e-16)), dtype=float)
        return np.column_stack([x1, np.asarray(self.curve.phi(x1), dtype=float)])


class _ArcComponent:
    def __init__(self, arc: ArcMeasure):
        self.arc = arc
        self.name = arc.name
        self.mass = arc.mass

    def draw(self, u: np.ndarray) -> np.ndarray:
        x1 = self.arc.ppf(u)
        return np.column_stack([x1, np.asarray(self.arc.path(x1), dtype=float)])


def _residual(name: str, measure_curve: MonotoneCurve, f1: DensityModel, arc: ArcMeasure) -> ArcMeasure:
    def density(x, _arc=arc):
        return np.asarray(f1.pdf(x)) - _arc._inside_density(x)

    res = ArcMeasure(name, measure_curve, arc.lo, arc.hi, 0.0, density, sign=1)
    scale = float(np.max(f1.pdf(res.nodes)))
    worst = int(np.argmin(res.node_density))
    if res.node_density[worst] < -1e-12 * scale:
        raise NegativeComponentError(
            f"component {name} has density {res.node_density[worst]:.3e} at x1 = {res.nodes[worst]:.6g}"
        )
    return res


def mixture_components(measure: AssembledMeasure) -> list:
    """Nonnegative pieces of P whose masses sum to one."""
    curve, f1 = measure.curve, measure.f1
    comps: list = []
    excised = []
    for k, pm in enumerate(measure.measures, start=1):
        sp = pm.spec
        excised += [(sp.b_prime, sp.b), (sp.a, sp.a_prime)]
        comps.append(_ArcComponent(_residual(f"curve-minus-mu1[{k}]", curve, f1, pm.mu1)))
        comps.append(_ArcComponent(_residual(f"curve-minus-mu3[{k}]", curve, f1, pm.mu3)))
        for arc in (pm.mu2, pm.mu4):
            comp = _ArcComponent(arc)
            comp.name = f"{arc.name}[{k}]"
            comps.append(comp)
    return [_CurveGap(curve, f1, excised)] + comps


def component_masses(measure: AssembledMeasure) -> dict[str, float]:
    return {c.name: c.mass for c in mixture_components(measure)}


def _as_measure(desc) -> AssembledMeasure:
    if isinstance(desc, AssembledMeasure):
        return desc
    if isinstance(desc, MeasureDescription):
        return desc.build()
    if isinstance(desc, dict):
        return MeasureDescription.from_dict(desc).build()
    raise TypeError(f"cannot sample from {type(desc).__name__}")


def sample_perturbed(desc, n: int, seed: int, workers: int = 1) -> SampleBatch:
    """Draw from P by picking a component by mass, then inverse transform along it."""
    n = _check_n(n)
    measure = _as_measure(desc)
    comps = mixture_components(measure)
    masses = np.array([c.mass for c in comps])
    edges = np.cumsum(masses) / masses.sum()
    edges[-1] = 1.0

    def draw(rng, size):
        u = _open_uniform(rng, 2 * size).reshape(2, size)
        which = np.searchsorted(edges, u[0], side="right")
        out = np.empty((size, 2))
        for k, comp in enumerate(comps):
            sel = which == k
            if sel.any():
                out[sel] = comp.draw(u[1, sel])
        return out

    rects = tuple(range(1, len(measure.measures) + 1))
    return SampleBatch(_blocks(n, seed, draw, workers), int(seed), "perturbed", rects)


# statistics ----------------------------------------------------------------


def ks_critical_value(n: int, alpha: float = ALPHA) -> float:
    """Asymptotic KS critical value sqrt(n)-scaled from the Kolmogorov law."""
    return float(stats.kstwobign.isf(alpha)) / math.sqrt(n)


@dataclass(frozen=True)
class KSReport:
    label: str
    n: int
    statistic: float
    pvalue: float
    critical: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{self.label}: n={self.n} D={self.statistic:.6g} "
            f"critical={self.critical:.6g} p={self.pvalue:.4g} {verdict}"
        )


def _ks(data: np.ndarray, cdf, label: str, alpha: float) -> KSReport:
    res = stats.kstest(data, cdf, method="asymp")
    crit = ks_critical_value(len(data), alpha)
    return KSReport(label, len(data), float(res.statistic), float(res.pvalue), crit, bool(res.statistic < crit))


def ks_marginal_test(batch: SampleBatch, which: str, model: DensityModel, alpha: float = ALPHA) -> KSReport:
    if which not in ("x1", "x2"):
        raise ValueError("which must be 'x1' or 'x2'")
    _check_n(len(batch), 100)
    data = batch.x1 if which == "x1" else batch.x2
    return _ks(data, lambda v: np.asarray(model.cdf(v)), f"{batch.source} {which} marginal", alpha)


@dataclass(frozen=True)
class ProductLawReport:
    ks: KSReport
    rel_l1: float
    n_bins: int
    l1_tol: float
    passed: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ks"] = self.ks.to_dict()
        return out

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.ks.to_text()}; binned L1={self.rel_l1:.4g} over {self.n_bins} bins (tol {self.l1_tol}) {verdict}"


def _law_functions(law):
    cdf = getattr(law, "cdf", None) or law.product_cdf
    density = getattr(law, "density", None) or law.product_density
    return cdf, density


def binned_relative_l1(products: np.ndarray, density, n_bins: int = 100, min_expected: float = 20.0) -> tuple[float, int]:
    """sum |observed - expected| / sum expected over log-spaced bins with enough expected counts.

    Expected counts integrate the density with Gauss-Legendre panels, so the
    comparison is independent of the CDF used by the KS test.
    """
    n = len(products)
    lo, hi = np.quantile(products, [0.0005, 0.9995])
    edges = np.geomspace(lo, hi, n_bins + 1)
    sub = 16
    fine = np.geomspace(lo, hi, n_bins * sub + 1)
    pieces = panel_integrals(lambda z: np.asarray(density(z)), fine[:-1], fine[1:], order=32)
    expected = n * pieces.reshape(n_bins, sub).sum(axis=1)
    observed, _ = np.histogram(products, bins=edges)
    keep = expected >= min_expected
    if not keep.any():
        return math.nan, 0
    return float(np.abs(observed[keep] - expected[keep]).sum() / expected[keep].sum()), int(keep.sum())


def product_law_test(
    batch: SampleBatch,
    law,
    alpha: float = ALPHA,
    n_bins: int = 100,
    l1_tol: float = 0.05,
    min_expected: float = 20.0,
) -> ProductLawReport:
    """KS of x1 * x2 against the analytic CDF plus a binned density comparison.

    ``law`` is a ProductDensityModel, PerturbedMeasure or AssembledMeasure.
    """
    _check_n(len(batch), 1000)
    cdf, density = _law_functions(law)
    z = batch.products
    ks = _ks(z, lambda v: np.asarray(cdf(v)), f"{batch.source} product law", alpha)
    l1, used = binned_relative_l1(z, density, n_bins, min_expected)
    return ProductLawReport(ks, l1, used, l1_tol, ks.passed and l1 <= l1_tol)


# export ---------------------------------------------------------------------

BATCH_COLUMNS = ("x1", "x2", "product")


def write_batch_csv(path, batch: SampleBatch) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BATCH_COLUMNS)
        for x1, x2 in batch.pairs:
            w.writerow([repr(float(x1)), repr(float(x2)), repr(float(x1 * x2))])
    return path


def write_reports(path, reports: list) -> Path:
    """Reports as JSON (``.json``) or one line of text per report."""
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    else:
        path.write_text("\n".join(r.to_text() for r in reports) + "\n")
    return path
