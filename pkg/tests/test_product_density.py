import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lincoupling.coupling_curve import build_curve
from lincoupling.marginal_models import FAMILIES, UserDensity, make_density
from lincoupling.product_density import (
    ProductDensityModel,
    lin_function_of_product,
    product_cdf,
    product_density,
    product_density_via_f2,
    rho,
    rho_derivative,
    write_product_csv,
)


def test_rho_values(same_product, sqrt_product):
    assert rho(same_product, 4.0) == pytest.approx(2.0, rel=1e-15)
    assert rho(sqrt_product, 8.0) == pytest.approx(4.0, rel=1e-15)
    assert rho_derivative(same_product, 4.0) == pytest.approx(0.25, rel=1e-14)
    assert rho_derivative(sqrt_product, 8.0) == pytest.approx(1 / 3, rel=1e-14)


@given(st.floats(min_value=1e-4, max_value=1e4))
@settings(max_examples=100, deadline=None)
def test_rho_fixed_point_property(z):
    model = _pair_models()[("gamma", "lognormal")]
    x = model.rho(z)
    assert abs(x * model.curve.phi(x) - z) <= 1e-12 * (1 + z)


def test_rho_derivative_against_central_difference(sqrt_product):
    z = np.geomspace(1e-2, 1e2, 30)
    h = 1e-5 * z
    fd = (np.asarray(sqrt_product.rho(z + h)) - np.asarray(sqrt_product.rho(z - h))) / (2 * h)
    assert np.max(np.abs(sqrt_product.rho_prime(z) - fd)) <= 1e-6


def test_density_values(same_product, sqrt_product):
    assert product_density(same_product, 4.0) == pytest.approx(math.exp(-2) / 4, rel=1e-14)
    assert product_density(sqrt_product, 8.0) == pytest.approx(math.exp(-4) / 3, rel=1e-14)
    assert product_density_via_f2(sqrt_product, 8.0) == pytest.approx(math.exp(-4) / 3, rel=1e-14)
    z = np.geomspace(1e-3, 1e3, 50)
    np.testing.assert_allclose(same_product.density(z), same_product.density_via_f2(z), rtol=4 * np.finfo(float).eps)


def test_cdf_values(same_product, sqrt_product):
    assert product_cdf(same_product, 4.0) == pytest.approx(1 - math.exp(-2), rel=1e-15)
    assert product_cdf(sqrt_product, 8.0) == pytest.approx(1 - math.exp(-4), rel=1e-15)


def test_lin_values(same_product, sqrt_product):
    assert lin_function_of_product(same_product, 4.0) == pytest.approx(1.5, rel=1e-13)
    assert lin_function_of_product(sqrt_product, 8.0) == pytest.approx(3.0, rel=1e-13)


_CACHE = {}


def _pair_models():
    if not _CACHE:
        for a in FAMILIES:
            for b in FAMILIES:
                _CACHE[(a, b)] = ProductDensityModel(build_curve(make_density(a), make_density(b)))
    return _CACHE


@pytest.mark.parametrize("pair", [(a, b) for a in FAMILIES for b in FAMILIES])
def test_lemma_identities_on_all_pairs(pair):
    model = _pair_models()[pair]
    z = np.geomspace(1e-4, 1e4, 120)
    x = np.asarray(model.rho(z))
    assert np.all(np.abs(x * np.asarray(model.curve.phi(x)) - z) <= 1e-12 * (1 + z))
    assert np.all(np.diff(x) > 0)
    g = np.asarray(model.density(z))
    ok = g > 1e-250
    simplified = np.asarray(model.f1.pdf(x)) * np.asarray(model.rho_prime(z))
    np.testing.assert_allclose(g[ok], simplified[ok], rtol=1e-10)
    np.testing.assert_allclose(g[ok], np.asarray(model.density_via_f2(z))[ok], rtol=1e-8)
    assert 1 - 1e-6 <= model.normalization() <= 1 + 1e-12
    lin = np.asarray(model.lin(z))[ok]
    assert np.all(np.diff(lin) >= -1e-9 * (1 + np.abs(lin[1:])))


@pytest.mark.parametrize("pair", [("exponential", "gamma"), ("weibull", "half-normal"), ("lognormal", "exponential")])
def test_cdf_derivative_and_lin_against_finite_differences(pair):
    model = _pair_models()[pair]
    z = np.geomspace(1e-2, 30, 40)
    h = 1e-4 * z
    # difference whichever tail is resolved in double precision
    dG = (np.asarray(model.cdf(z + h)) - np.asarray(model.cdf(z - h))) / (2 * h)
    dS = (np.asarray(model.sf(z - h)) - np.asarray(model.sf(z + h))) / (2 * h)
    dG = np.where(np.asarray(model.cdf(z)) > 0.5, dS, dG)
    g = np.asarray(model.density(z))
    np.testing.assert_allclose(dG, g, rtol=1e-6)
    dg = (np.asarray(model.density(z + h)) - np.asarray(model.density(z - h))) / (2 * h)
    np.testing.assert_allclose(model.density_prime(z), dg, rtol=1e-5, atol=1e-9)


def test_user_density_falls_back_to_finite_differences():
    user = UserDensity(lambda x: np.exp(-x), name="exp")
    model = ProductDensityModel(build_curve(user, user))
    assert not model.analytic
    z = np.array([0.5, 4.0, 20.0])
    np.testing.assert_allclose(model.lin(z), 0.5 + 0.5 * np.sqrt(z), rtol=1e-6)


def test_product_csv(tmp_path, same_product):
    path = write_product_csv(tmp_path / "p.csv", same_product, [4.0])
    header, row = path.read_text().splitlines()
    assert header == "z,rho,g,L_g"
    assert [float(v) for v in row.split(",")] == pytest.approx([4.0, 2.0, math.exp(-2) / 4, 1.5])
