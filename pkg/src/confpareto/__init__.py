"""Pareto-efficient decisions with conformal confidence from logged multi-reward data."""

from .bundle import ModelBundle, build_bundle
from .conformal import (
    AlphaSpec,
    BoundResult,
    ResidualDistribution,
    adjustment_kappa,
    bounds_batch,
    compute_residuals,
    reward_bound,
    weighted_quantile,
)
from .data import (
    CsvSchema,
    Dataset,
    DataSplit,
    Sample,
    StarCostConfig,
    calibrate_omega,
    export_csv,
    load_csv,
    split_random,
    star_synthesize_costs,
)
from .errors import (
    CalibrationError,
    ConfParetoError,
    DegenerateWeightsError,
    DomainError,
    FormatError,
    InsufficientDataError,
    OptimizationError,
    ParseError,
    ProvenanceError,
    SchemaError,
    StateError,
)
from .pareto import BoundPoint, FrontierReport, efficient_set, frontier_report, strictly_dominates
from .policy import (
    GmmFitReport,
    PolicyModel,
    fit_generative_policy,
    fit_gmm_em,
    fit_propensity_policy,
    known_policy_fixed,
    known_policy_synthetic,
    normalized_weights,
    weight,
)
from .quantile import (
    QuantileFitConfig,
    QuantileModel,
    encode_features,
    fit_linear_pinball,
    fit_quantile_forest,
    pinball_loss,
    predict_quantile,
    predict_quantiles,
)
from .scenarios import (
    CoverageReport,
    SyntheticConfig,
    coverage_mc,
    draw_interventional,
    gen_synthetic,
    star_standin,
)

__version__ = "0.1.0"
