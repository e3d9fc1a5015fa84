"""Integrated Gradients and saliency post-processing for specialist branches."""

from .integrated_gradients import (
    TOKEN_STEPS,
    TS_STEPS,
    DifferentiableScorer,
    IGConfig,
    LinearScorer,
    MLPScorer,
    builtin_linear_scorer,
    builtin_mlp_scorer,
    completeness_gap,
    integrated_gradients,
)
from .saliency import (
    AttributionMatrix,
    SaliencyWindow,
    aggregate_matrix,
    aggregate_onehot,
    heatmap_mask,
    matrix_drivers,
    rank_features,
    render_drivers,
    saliency_windows,
    top_k_drivers,
)
from .tokens import TokenAttribution, TokenReport, TokenReportOptions, attribute_tokens, token_report

__all__ = [
    "TOKEN_STEPS",
    "TS_STEPS",
    "DifferentiableScorer",
    "IGConfig",
    "LinearScorer",
    "MLPScorer",
    "builtin_linear_scorer",
    "builtin_mlp_scorer",
    "completeness_gap",
    "integrated_gradients",
    "AttributionMatrix",
    "SaliencyWindow",
    "aggregate_matrix",
    "aggregate_onehot",
    "heatmap_mask",
    "matrix_drivers",
    "rank_features",
    "render_drivers",
    "saliency_windows",
    "top_k_drivers",
    "TokenAttribution",
    "TokenReport",
    "TokenReportOptions",
    "attribute_tokens",
    "token_report",
]
