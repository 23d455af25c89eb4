import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid

from lincoupling._numerics import gauss_legendre, panel_integrals, ridders_derivative
from lincoupling.perturbation import (
    smooth_step_prime,
    BumpFunction,
    InfeasibleSpecError,
    MeasureDescription,
    PerturbedMeasure,
    RectangleInfeasibleError,
    ResolutionWarning,
    arc_hyperbola_intersection,
    assemble_measure_description,
    build_perturbed_measure,
    build_rectangle_sequence,
    derive_spec,
    eval_tau,
    oscillation_extrema,
    perturbed_lin_function,
    perturbed_product_density,
    smooth_step,
    validate_spec,
)

NU = 200 * math.pi


def q_diag(z):
    """Product density of the diagonal exponential(1) coupling."""
    r = np.sqrt(z)
    return np.exp(-r) / (2 * r)


def integrate_product_law(pm, n_log=600, n_window=600):
    """Integral of the perturbed product density with breakpoints at every kink."""
    lo, hi = pm.product.z_range(1e-12)
    w_lo, w_hi = pm.spec.window
    pieces = [np.geomspace(lo, hi, n_log), np.linspace(w_lo, w_hi, n_window)]
    # the shifted arcs carry the same oscillation into their own product ranges
    for arc in pm.arcs:
        pieces.append(np.linspace(*arc.product_range, n_window))
    edges = np.unique(np.concatenate(pieces))
    return float(panel_integrals(lambda z: np.asarray(pm.product_density(z)), edges[:-1], edges[1:], order=20).sum())


# geometry -------------------------------------------------------------------


def test_derive_spec_diagonal(same_product):
    sp = derive_spec(same_product.curve, 1.0, 2.0, 0.1, 0.01, NU, product=same_product)
    assert (sp.s, sp.t) == pytest.approx((1.0, 4.0), rel=1e-15)
    assert sp.b_prime == pytest.approx(math.sqrt(3.7), rel=1e-14)
    assert sp.d == pytest.approx(math.sqrt(3.7) - 1, rel=1e-13)
    assert sp.a_prime == pytest.approx(1 + 2 - math.sqrt(3.7), rel=1e-13)
    assert sp.a_prime < sp.b_prime


def test_derive_spec_sqrt_curve(sqrt_product):
    sp = derive_spec(sqrt_product.curve, 1.0, 4.0, 0.1, 0.01, NU, product=sqrt_product)
    assert (sp.s, sp.t) == pytest.approx((1.0, 8.0), rel=1e-14)
    assert sp.b_prime == pytest.approx(7.7 ** (2 / 3), rel=1e-13)


def test_derive_spec_rejects_wide_window(same_product):
    with pytest.raises(InfeasibleSpecError, match="must exceed s"):
        derive_spec(same_product.curve, 1.0, 2.0, 1.01, 0.01, NU, product=same_product)
    with pytest.raises(InfeasibleSpecError):
        derive_spec(same_product.curve, 2.0, 1.0, 0.1, 0.01, NU, product=same_product)


def test_validate_spec_bounds(expo, same_product, reference_measure):
    sp = reference_measure.spec
    report = validate_spec(sp, expo, same_product)
    z = np.linspace(3.7, 4.0, 30001)
    assert report.eps_max_removal == pytest.approx(q_diag(z).min(), rel=1e-12)
    assert report.eps_max_removal == pytest.approx(math.exp(-2) / 4, rel=1e-12)
    assert report.eps_max_compensation > report.eps_max_removal
    assert report.feasible
    assert validate_spec(replace(sp, epsilon=0.0), expo, same_product).feasible
    too_big = replace(sp, epsilon=1.0)
    assert not validate_spec(too_big, expo, same_product).feasible
    with pytest.raises(InfeasibleSpecError, match="positivity bound"):
        build_perturbed_measure(too_big, same_product)


# bump ----------------------------------------------------------------------


def test_tau_values(reference_measure):
    bump = reference_measure.bump
    assert eval_tau(bump, 3.85) == pytest.approx(0.0, abs=1e-20)
    assert eval_tau(bump, 3.7 - 1e-9) == 0.0
    assert eval_tau(bump, 4.0 + 1e-9) == 0.0
    z = 3.85 + 1 / 800
    assert eval_tau(bump, z) == pytest.approx(0.01 * math.sin(NU * z) ** 2, rel=1e-14)
    zs = np.linspace(3.8, 3.9, 101)
    np.testing.assert_array_equal(bump(zs), 0.01 * np.sin(NU * zs) ** 2)


@given(st.floats(min_value=-0.5, max_value=1.5))
def test_smooth_step_is_a_step(x):
    v = float(smooth_step(x))
    assert 0.0 <= v <= 1.0
    if x <= 0:
        assert v == 0.0
    if x >= 1:
        assert v == 1.0
    assert float(smooth_step(1 - x)) == pytest.approx(1 - v, abs=1e-15)


def test_smooth_step_prime_is_finite_at_the_flat_ends():
    x = np.array([5e-324, 1e-300, 1e-3, 0.5, 1 - 1e-16])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        d = smooth_step_prime(x)
    assert np.all(np.isfinite(d))
    assert d[0] == 0.0 and d[-1] == 0.0
    assert d[3] == pytest.approx(2.0)


@given(st.floats(min_value=3.5, max_value=4.2))
@settings(max_examples=200)
def test_tau_bounded_by_epsilon(reference_measure, z):
    tau = float(reference_measure.bump(z))
    assert 0.0 <= tau <= 0.01
    if not 3.7 <= z <= 4.0:
        assert tau == 0.0


def test_tau_derivative_and_smooth_bridges(reference_measure):
    bump = reference_measure.bump
    z = np.concatenate([np.linspace(3.701, 3.799, 15), np.linspace(3.901, 3.999, 15)])
    fd, _ = ridders_derivative(bump, z, 1e-4)
    np.testing.assert_allclose(bump.derivative(z), fd, rtol=1e-7, atol=1e-9)
    # high-order differences stay bounded near the support edge (no jump in any low derivative)
    h = 2e-3
    edge = 3.7 + h * np.arange(-6, 7)
    shape_vals = np.asarray(bump.cutoff(edge))
    fourth = np.diff(shape_vals, 4) / h**4
    assert np.all(np.isfinite(fourth)) and np.max(np.abs(fourth)) < 1e8


# perturbed measure ----------------------------------------------------------


def test_mass_balance(reference_measure):
    m = reference_measure.masses
    assert m["mu1"] == pytest.approx(m["mu2"], rel=1e-14)
    assert m["mu3"] == pytest.approx(m["mu4"], rel=1e-14)
    assert m["mu1"] == pytest.approx(m["mu3"], rel=1e-8)
    # mu1 carries int tau dz
    z = np.linspace(3.7, 4.0, 20001)
    tau = np.asarray(reference_measure.bump(z))
    assert m["mu1"] == pytest.approx(trapezoid(tau, z), rel=1e-6)


def test_projection_mass_on_rectangle(expo, reference_measure):
    sp = reference_measure.spec
    total = panel_integrals(reference_measure.x1_projection, np.linspace(sp.a, sp.b, 401)[:-1], np.linspace(sp.a, sp.b, 401)[1:])
    assert total.sum() == pytest.approx(float(expo.cdf(sp.b) - expo.cdf(sp.a)), abs=1e-12)


@pytest.mark.parametrize("interpretation", ["z", "x1"])
@given(data=st.data())
@settings(max_examples=20, deadline=None)
def test_projection_preservation_on_subintervals(same_product, sqrt_product, interpretation, data):
    product = data.draw(st.sampled_from([same_product, sqrt_product]))
    sp = derive_spec(product.curve, 1.0, 2.0, 0.1, 0.0, NU, interpretation, product)
    report = validate_spec(sp, product.f1, product)
    pm = PerturbedMeasure(replace(sp, epsilon=0.9 * report.eps_max), product)
    curve = product.curve
    u = sorted(data.draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    for proj, model, lo, hi in (
        (pm.x1_projection, product.f1, sp.a, sp.b),
        (pm.x2_projection, product.f2, float(curve.phi(sp.a)), float(curve.phi(sp.b))),
    ):
        x0, x1 = lo + (hi - lo) * u[0], lo + (hi - lo) * u[1]
        edges = np.linspace(x0, x1, 401)
        got = panel_integrals(proj, edges[:-1], edges[1:]).sum()
        assert got == pytest.approx(float(model.cdf(x1) - model.cdf(x0)), abs=1e-6)


@pytest.mark.parametrize("interpretation", ["z", "x1"])
def test_window_density_formulas(same_product, interpretation):
    sp = derive_spec(same_product.curve, 1.0, 2.0, 0.1, 0.01, NU, interpretation, same_product)
    pm = build_perturbed_measure(sp, same_product)
    z = np.linspace(3.7, 4.0, 301)
    tau = np.asarray(pm.bump(z))
    if interpretation == "z":
        expected = q_diag(z) - tau
    else:
        r = np.sqrt(z)
        expected = (np.exp(-r) - tau) / (2 * r)
    np.testing.assert_allclose(perturbed_product_density(pm, z), expected, rtol=1e-12)
    assert integrate_product_law(pm) == pytest.approx(1.0, abs=1e-6)


def test_reference_density_value(reference_measure):
    assert float(reference_measure.product_density(3.85)) == pytest.approx(q_diag(3.85), rel=1e-12)
    assert q_diag(3.85) == pytest.approx(0.0358173, rel=1e-5)


def test_nonnegative_residuals_at_feasible_epsilon(same_product, sqrt_product):
    for product in (same_product, sqrt_product):
        sp = derive_spec(product.curve, 1.0, 2.0, 0.1, 0.0, NU, "z", product)
        eps = validate_spec(sp, product.f1, product).eps_max
        pm = PerturbedMeasure(replace(sp, epsilon=0.999 * eps), product)
        z = np.linspace(*sp.window, 20001)
        assert np.all(np.asarray(product.density(z)) - np.asarray(pm.removal_rate(z)) >= 0)
        assert np.all(np.asarray(pm.product_density(z)) > 0)
        x = np.linspace(sp.a, sp.a_prime, 20001)
        assert np.all(np.asarray(product.f1.pdf(x)) - np.asarray(pm.mu3.density_x1(x)) >= -1e-15)


def test_epsilon_bound_is_tight(same_product):
    sp = derive_spec(same_product.curve, 1.0, 2.0, 0.1, 0.0, NU, "z", same_product)
    eps = validate_spec(sp, same_product.f1, same_product).eps_max
    pm = PerturbedMeasure(replace(sp, epsilon=0.95 * eps), same_product)
    z = np.linspace(*sp.window, 200001)
    q = q_diag(z)
    assert np.min(q - np.asarray(pm.bump(z))) < 0.1 * q.min()


def test_zero_epsilon_collapse(same_product):
    sp = derive_spec(same_product.curve, 1.0, 2.0, 0.1, 0.0, NU, "z", same_product)
    pm = build_perturbed_measure(sp, same_product)
    z = np.geomspace(0.5, 10, 500)
    assert all(m == 0.0 for m in pm.masses.values())
    np.testing.assert_allclose(pm.product_density(z), same_product.density(z), rtol=1e-12, atol=0)
    np.testing.assert_allclose(pm.lin(z), same_product.lin(z), rtol=1e-12, atol=0)
    np.testing.assert_allclose(pm.product_cdf(z), same_product.cdf(z), rtol=1e-12, atol=0)
    ext = oscillation_extrema(pm)
    lo, hi = sp.plateau
    assert ext.lmin == pytest.approx(float(same_product.lin(lo)), rel=1e-12)
    assert ext.lmax == pytest.approx(float(same_product.lin(hi)), rel=1e-12)


def test_arc_intersections(reference_measure):
    for z in (3.75, 3.85, 3.95):
        assert not any(h.hit for h in arc_hyperbola_intersection(reference_measure, z))
    assert not any(h.hit for h in arc_hyperbola_intersection(reference_measure, 0.5))
    mu2 = reference_measure.mu2
    z_end = mu2.product_range[1]
    hit = {h.arc: h for h in arc_hyperbola_intersection(reference_measure, z_end)}["mu2"]
    assert hit.hit and hit.boundary and hit.x1 == mu2.hi
    mid = 0.5 * sum(mu2.product_range)
    hit = {h.arc: h for h in arc_hyperbola_intersection(reference_measure, mid)}["mu2"]
    assert hit.hit and not hit.boundary
    assert hit.x1 * (hit.x1 - reference_measure.spec.d) == pytest.approx(mid, rel=1e-14)


def test_arc_contribution_and_cdf_consistency(reference_measure):
    pm = reference_measure
    z = np.linspace(1.95, 2.1, 7)
    dG, _ = ridders_derivative(pm.product_cdf, z, 2e-4)
    np.testing.assert_allclose(dG, pm.product_density(z), rtol=1e-6)


def test_plateau_derivative_decomposition(reference_measure):
    pm = reference_measure
    z = np.linspace(3.8, 3.9, 41)
    analytic = np.asarray(pm.product_density_prime(z))
    expected = np.asarray(pm.product.density_prime(z)) - np.asarray(pm.bump.derivative(z))
    assert np.max(np.abs(analytic - expected)) <= 1e-8
    fd, _ = ridders_derivative(pm.product_density, z, 2e-4)
    assert np.max(np.abs(fd - expected)) <= 1e-8


def test_lin_oscillation_magnitude(reference_measure):
    pm = reference_measure
    # where sin(2 nu z) = +-1 the perturbation dominates L_g
    z = (np.arange(1521, 1560) + 0.5) * math.pi / (2 * NU)
    lin = np.array([perturbed_lin_function(pm, v) for v in z])
    assert np.max(np.abs(lin)) > 300
    ext = oscillation_extrema(pm)
    assert ext.lmin <= -300 and ext.lmax >= 300
    assert 3.8 <= ext.zmin <= 3.9 and 3.8 <= ext.zmax <= 3.9


def test_extrema_scale_with_frequency(same_product):
    sp = derive_spec(same_product.curve, 1.0, 2.0, 0.1, 0.01, NU, "z", same_product)
    base = oscillation_extrema(PerturbedMeasure(sp, same_product))
    four = oscillation_extrema(PerturbedMeasure(replace(sp, nu=4 * NU), same_product))
    ten = oscillation_extrema(PerturbedMeasure(replace(sp, nu=10 * NU), same_product))
    assert four.lmax / base.lmax == pytest.approx(4, rel=0.1)
    assert four.lmin / base.lmin == pytest.approx(4, rel=0.1)
    assert ten.lmax / base.lmax == pytest.approx(10, rel=0.1)
    assert ten.lmin / base.lmin == pytest.approx(10, rel=0.1)


def test_resolution_warning(reference_measure):
    with pytest.warns(ResolutionWarning):
        oscillation_extrema(reference_measure, resolution=5, refine=False)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        oscillation_extrema(reference_measure, resolution=10, refine=False)


# rectangle sequence and description ------------------------------------------


def test_single_rectangle_sequence(same_product):
    seq = build_rectangle_sequence(same_product, 1, magnitudes=[10.0])
    (r,) = seq.rectangles
    assert (r.spec.a, r.spec.b) == (2.0, 3.0)
    assert r.spec.delta == pytest.approx(0.05 * (9 - 4))
    assert r.spec.epsilon == pytest.approx(0.5 * r.eps_max)
    assert r.met and seq.all_met


def test_sequence_escalates_and_is_disjoint(sqrt_product):
    seq = build_rectangle_sequence(sqrt_product, 3, magnitudes=[10, 20, 30])
    specs = [r.spec for r in seq.rectangles]
    for prev, nxt in zip(specs, specs[1:]):
        assert prev.b < nxt.a
    tops = [max(-r.extrema.lmin, r.extrema.lmax) for r in seq.rectangles]
    lows = [min(-r.extrema.lmin, r.extrema.lmax) for r in seq.rectangles]
    assert all(low > top for top, low in zip(tops, lows[1:]))
    assert seq.all_met
    assert [row["n"] for row in seq.summary()] == [1, 2, 3]


def test_sequence_failures(same_product):
    with pytest.raises(RectangleInfeasibleError) as info:
        build_rectangle_sequence(same_product, 2, magnitudes=[10, 20], epsilon=[None, 1.0])
    assert info.value.index == 2
    seq = build_rectangle_sequence(same_product, 1, magnitudes=[10], epsilon=0.0)
    assert not seq.all_met


def test_measure_descriptions(same_product, reference_measure):
    empty = assemble_measure_description(None, same_product)
    assert empty.rectangles == []
    zero = build_rectangle_sequence(same_product, 1, magnitudes=[10], epsilon=0.0)
    assert assemble_measure_description(zero) == empty

    seq = build_rectangle_sequence(same_product, 2, magnitudes=[10, 20])
    desc = assemble_measure_description(seq)
    again = MeasureDescription.from_json(desc.to_json())
    assert again == desc
    assert again.to_dict() == desc.to_dict()
    rebuilt = again.build()
    z = np.linspace(*seq.rectangles[0].spec.window, 200)
    np.testing.assert_allclose(rebuilt.density(z), seq.rectangles[0].measure.product_density(z), rtol=1e-13)
    with pytest.raises(ValueError):
        MeasureDescription.from_dict(dict(desc.to_dict(), extra=1))
