"""Bayesian spatial and spatio-temporal regression for areal panel data."""

__version__ = "0.1.0"

from .car_spatial import (  # noqa: F401
    DivergenceError,
    Hyperpriors,
    LerouxFit,
    LerouxState,
    MCMCConfig,
    ModelError,
    fit_spatial,
    fitted_and_residuals,
    leroux_precision,
)
from .esda import MoranResult, morans_i, pearson_matrix, permutation_pvalue  # noqa: F401
from .graph import (  # noqa: F401
    ArealGraph,
    ContiguityRule,
    GraphError,
    build_contiguity,
    connected_components,
    grid_graph,
    laplacian_eigenvalues,
    read_geojson,
    read_graph,
    write_graph,
)
from .model_eval import FitSummary, convergence, dic, residual_moran, stepwise_select, waic  # noqa: F401
from .pipeline import (  # noqa: F401
    AreaPanel,
    PipelineError,
    TransformSpec,
    aggregate_events,
    apply_transform,
    build_design,
    read_panel_csv,
    summarize,
    weekend_indicator,
    write_panel_csv,
)
from .st_ar import STFit, STState, fit_quality, fit_st, st_effect_logdensity  # noqa: F401
from .synth import SimScenario, generate_spatial_dataset, generate_st_dataset, sample_car_field  # noqa: F401
