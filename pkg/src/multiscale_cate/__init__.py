"""Multi-scale treatment effect heterogeneity from Earth-observation imagery.

Single-scale CATE estimation becomes multi-scale by concatenating per-scale
patch encodings (optionally PCA-reduced) before fitting an honest causal
forest; targeting value is measured with rank-weighted metrics (AUTOC/QINI
ratios, Qini curves) on doubly robust scores, and scale choice via a grid
search over scale pairs.
"""
from .causal_forest import (
    CausalForestModel,
    DrScores,
    ForestConfig,
    dr_scores,
    fit,
    load_model,
    model_hash,
    predict,
    predict_oob,
    save_model,
    scale_fraction_top10,
    variable_importance,
)
from .config import RunConfig, config_hash, load_config
from .data_model import (
    EmbeddingTable,
    RasterBundle,
    UnitRecord,
    load_embeddings,
    load_raster,
    load_units,
    save_embeddings,
    save_raster,
    save_units,
)
from .embedding import (
    ConcatSpec,
    EncoderSpec,
    FetchContext,
    PcaModel,
    concat_representations,
    encode,
    encode_units,
    fit_pca,
    mean_within_group_distance,
    project,
    pyramid_features,
)
from .errors import (
    ConfigError,
    DataError,
    MscateError,
    NumericalError,
)
from .experiment import (
    DisplacedReport,
    GainReport,
    InterpretReport,
    ScaleGrid,
    ScalingCurve,
    build_scale_embeddings,
    combo_features,
    displaced_analysis,
    displaced_centers,
    gain_from_tables,
    grid_search,
    interpretability_heatmap,
    scaling_scales,
)
from .hte_metrics import (
    PipelineConfig,
    PriorityRule,
    QiniCurve,
    RateReport,
    policy_gain,
    qini_curve,
    qini_pipeline,
    rate,
    rate_point,
    rate_ratio_pipeline,
    toc_curve,
)
from .imaging import (
    FetchMode,
    ImagePatch,
    Perturbation,
    PerturbationKind,
    apply_perturbation,
    displace_center,
    fetch,
    overlap_fraction,
    window_origin,
)
from .simulation import (
    MlpConfig,
    SimDesign,
    SimReport,
    assign_perturbations,
    cv_r2,
    generate_outcomes,
    outcome_moments,
    run_design,
    run_experiment,
    train_mlp,
)

__version__ = "0.1.0"

__all__ = [
    "CausalForestModel", "DrScores", "ForestConfig", "dr_scores", "fit",
    "load_model", "model_hash", "predict", "predict_oob", "save_model",
    "scale_fraction_top10", "variable_importance",
    "RunConfig", "config_hash", "load_config",
    "EmbeddingTable", "RasterBundle", "UnitRecord", "load_embeddings",
    "load_raster", "load_units", "save_embeddings", "save_raster", "save_units",
    "ConcatSpec", "EncoderSpec", "FetchContext", "PcaModel",
    "concat_representations", "encode", "encode_units", "fit_pca",
    "mean_within_group_distance", "project", "pyramid_features",
    "ConfigError", "DataError", "MscateError", "NumericalError",
    "DisplacedReport", "GainReport", "InterpretReport", "ScaleGrid",
    "ScalingCurve", "build_scale_embeddings", "combo_features",
    "displaced_analysis", "displaced_centers", "gain_from_tables",
    "grid_search", "interpretability_heatmap", "scaling_scales",
    "PipelineConfig", "PriorityRule", "QiniCurve", "RateReport", "policy_gain",
    "qini_curve", "qini_pipeline", "rate", "rate_point", "rate_ratio_pipeline",
    "toc_curve",
    "FetchMode", "ImagePatch", "Perturbation", "PerturbationKind",
    "apply_perturbation", "displace_center", "fetch", "overlap_fraction",
    "window_origin",
    "MlpConfig", "SimDesign", "SimReport", "assign_perturbations", "cv_r2",
    "generate_outcomes", "outcome_moments", "run_design", "run_experiment",
    "train_mlp",
    "__version__",
]
