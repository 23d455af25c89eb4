"""Singular couplings along a monotone curve and perturbations of their product law."""

from .coupling_curve import (
    CurveConstructionError,
    DyadicApproximation,
    MonotoneCurve,
    OdeCurve,
    QuantileGrid,
    QuantileTransportCurve,
    build_curve,
    build_dyadic_approximation,
    build_quantile_grid,
    eval_approx_density,
    verify_curve,
)
from .marginal_models import (
    FAMILIES,
    DensityModel,
    DomainError,
    UserDensity,
    check_lin_condition,
    density_from_record,
    eval_cdf,
    eval_density,
    eval_quantile,
    lin_function,
    make_density,
)
from .perturbation import (
    ArcMeasure,
    AssembledMeasure,
    BumpFunction,
    InfeasibleSpecError,
    MeasureDescription,
    PerturbationSpec,
    PerturbedMeasure,
    arc_hyperbola_intersection,
    assemble_measure_description,
    build_perturbed_measure,
    build_rectangle_sequence,
    derive_spec,
    eval_tau,
    oscillation_extrema,
    perturbed_lin_function,
    perturbed_product_density,
    validate_spec,
)
from .product_density import (
    ProductDensityModel,
    build_product_model,
    lin_function_of_product,
    product_cdf,
    product_density,
    product_density_via_f2,
    rho,
    rho_derivative,
)
from .sampling import (
    SampleBatch,
    ks_marginal_test,
    product_law_test,
    sample_base,
    sample_perturbed,
)

__all__ = [name for name in dir() if not name.startswith("_")]
