//! Evaluation protocols: classifier retraining over all classes, full and
//! per-stage subset accuracies, ΔM′, average incremental accuracy, layerwise
//! CKA curves, feature-shift exports, and per-stage input perturbations.

mod perturb;
mod report;

pub use perturb::{perturb_stage_inputs, Perturbation, PerturbationKind};
pub use report::{
    accuracy, analyze_run, avg_incremental_accuracy, cka_curve, delta_metric, feature_shift_export,
    retrain_classifier_full, AnalysisParams, FeatureShift, RetrainedModel, RunAnalysis, StageReport,
};
