"""Conditional tail-dependence modelling for stationary time series.

The package covers the full workflow: semi-parametric marginal tail
fitting and transformation to Laplace margins (:mod:`tailchain.margins`),
composite-likelihood fitting of conditional norming models with
structured lag coefficients (:mod:`tailchain.fit`,
:mod:`tailchain.norming`, :mod:`tailchain.dists`), Monte Carlo and
importance-sampling estimation of extremal block functionals
(:mod:`tailchain.simulate`, :mod:`tailchain.functionals`), block
bootstraps (:mod:`tailchain.resample`), synthetic reference processes
(:mod:`tailchain.generators`), and a command-line driver
(:mod:`tailchain.cli`).
"""

from .errors import FitError, InputError
from .report import EstimateReport
from .dists import (
    DeltaLaplaceParams,
    ResidualCopula,
    build_conditional_precision,
    dl_cdf,
    dl_log_density,
    dl_mle,
    dl_quantile,
    dl_sample,
    gaussian_copula_sample,
)
from .norming import (
    ARCorrAlpha,
    BackwardForwardSpec,
    FreeAlpha,
    GeometricAlpha,
    NormingSpec,
    PTAlpha,
    alpha_sequence,
    norm_location,
    norm_scale,
    pt_from_ar2,
)
from .margins import (
    LaplaceSeries,
    MarginalModel,
    RawSeries,
    fit_marginal,
    from_laplace,
    laplace_cdf,
    laplace_quantile,
    read_series_csv,
    threshold_stability_scan,
    to_laplace,
    write_series_csv,
)
from .fit import (
    BackwardForwardFit,
    ExceedanceBlockSet,
    ParamFit,
    SemiParamFit,
    composite_nll,
    extract_blocks,
    fit_backward_forward,
    fit_parametric,
    fit_semiparametric,
    load_fit,
    parameter_stability_scan,
    residual_diagnostics,
    save_fit,
)
from .simulate import (
    AloeResult,
    SimConfig,
    aloe_conditional_expectation,
    aloe_estimate,
    aloe_expectation,
    aloe_pstar_distribution,
    draw_residual_vector,
    estimate_conditional,
    forward_simulate,
    variance_bound_check,
)
from .functionals import (
    Cluster,
    FunctionalSpec,
    empirical_functional,
    estimate_functional,
    evaluate_functional,
    extract_clusters,
)
from .resample import BootstrapResult, BootstrapScheme, bootstrap_estimate, resample_series
from .generators import (
    GeneratorSpec,
    generate,
    oracle_conditional_probability,
    oracle_union_probability,
)

__version__ = "0.1.0"

__all__ = [
    "AloeResult",
    "ARCorrAlpha",
    "BackwardForwardFit",
    "BackwardForwardSpec",
    "BootstrapResult",
    "BootstrapScheme",
    "Cluster",
    "DeltaLaplaceParams",
    "EstimateReport",
    "ExceedanceBlockSet",
    "FitError",
    "FreeAlpha",
    "FunctionalSpec",
    "GeneratorSpec",
    "GeometricAlpha",
    "InputError",
    "LaplaceSeries",
    "MarginalModel",
    "NormingSpec",
    "ParamFit",
    "PTAlpha",
    "RawSeries",
    "ResidualCopula",
    "SemiParamFit",
    "SimConfig",
    "aloe_conditional_expectation",
    "aloe_estimate",
    "aloe_expectation",
    "aloe_pstar_distribution",
    "alpha_sequence",
    "bootstrap_estimate",
    "build_conditional_precision",
    "composite_nll",
    "dl_cdf",
    "dl_log_density",
    "dl_mle",
    "dl_quantile",
    "dl_sample",
    "draw_residual_vector",
    "empirical_functional",
    "estimate_conditional",
    "estimate_functional",
    "evaluate_functional",
    "extract_blocks",
    "extract_clusters",
    "fit_backward_forward",
    "fit_marginal",
    "fit_parametric",
    "fit_semiparametric",
    "forward_simulate",
    "from_laplace",
    "gaussian_copula_sample",
    "generate",
    "laplace_cdf",
    "laplace_quantile",
    "load_fit",
    "norm_location",
    "norm_scale",
    "oracle_conditional_probability",
    "oracle_union_probability",
    "parameter_stability_scan",
    "pt_from_ar2",
    "read_series_csv",
    "resample_series",
    "residual_diagnostics",
    "save_fit",
    "threshold_stability_scan",
    "to_laplace",
    "variance_bound_check",
    "write_series_csv",
]
