import math

import pytest

from lincoupling.coupling_curve import build_curve
from lincoupling.marginal_models import make_density
from lincoupling.perturbation import PerturbedMeasure, derive_spec
from lincoupling.product_density import ProductDensityModel


@pytest.fixture(scope="session")
def expo():
    return make_density("exponential", [1.0])


@pytest.fixture(scope="session")
def weib():
    return make_density("weibull", [2.0])


@pytest.fixture(scope="session")
def same_product(expo):
    """Identical exponential(1) marginals: phi = id, rho = sqrt(z)."""
    return ProductDensityModel(build_curve(expo, expo))


@pytest.fixture(scope="session")
def sqrt_product(expo, weib):
    """exponential(1) -> weibull(2): phi(x) = sqrt(x), rho(z) = z^(2/3)."""
    return ProductDensityModel(build_curve(expo, weib))


@pytest.fixture(scope="session")
def reference_measure(same_product):
    """One rectangle a=1, b=2, delta=0.1, eps=0.01, nu=200 pi on the diagonal coupling."""
    spec = derive_spec(same_product.curve, 1.0, 2.0, 0.1, 0.01, 200 * math.pi, "z", same_product)
    return PerturbedMeasure(spec, same_product)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
