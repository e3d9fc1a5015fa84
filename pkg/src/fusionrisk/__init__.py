"""Transparent late fusion of specialist risk predictions.

Clipped-logit stacking with a logistic meta-learner, per-case modality
attribution, post-hoc calibration, missing-modality fallback, bootstrap
evaluation and Integrated Gradients saliency post-processing.
"""

__version__ = "0.1.0"

from .calibration import (
    Calibrator,
    FallbackScenario,
    apply_calibrator,
    fallback_predict,
    fallback_scores,
    fit_isotonic,
    fit_platt,
    fit_temperature,
    select_calibrator,
)
from .data import (
    BranchParams,
    CohortSummary,
    PredictionRecord,
    SyntheticConfig,
    cohort_summary,
    generate_synthetic_cohort,
    load_predictions,
    save_predictions,
)
from .fusion import (
    StackingModel,
    agreement_label,
    average_fusion,
    explain_case,
    fit_meta_logreg,
    fit_stacker,
    fit_standardizer,
    global_weights,
    modality_contributions,
    predict_meta,
    to_logit,
)
from .metrics import (
    auprc,
    auroc,
    bootstrap_ci,
    brier,
    calibration_slope_intercept,
    ece_equal_frequency,
    evaluate_scores,
    reliability_bins,
    thresholded_metrics,
)
