"""Time and memory cost models over sequence length."""

from .analytic import (
    GiB,
    GridParams,
    ProfileRecord,
    analytic_profile,
    collective_schedule,
    comm_time,
    layer_flops,
    length_sweep,
    model_memory,
)
from .forest import RandomForest, RegressionTree
from .hybrid import (
    CostModelSet,
    FeatureEncoder,
    ForestModel,
    HybridCostModel,
    ProfileFormatError,
    export_model,
    fit_cost_models,
    fit_forest,
    fit_hybrid,
    fit_poly_records,
    import_model,
    ingest_profiles,
    predict,
    write_profiles,
)
from .poly import PolyModel, aic, fit_poly

__all__ = [
    "GiB", "GridParams", "ProfileRecord", "analytic_profile", "collective_schedule",
    "comm_time", "layer_flops", "length_sweep", "model_memory", "RandomForest",
    "RegressionTree", "CostModelSet", "FeatureEncoder", "ForestModel", "HybridCostModel",
    "ProfileFormatError", "export_model", "fit_cost_models", "fit_forest", "fit_hybrid",
    "fit_poly_records", "import_model", "ingest_profiles", "predict", "write_profiles",
    "PolyModel", "aic", "fit_poly",
]
