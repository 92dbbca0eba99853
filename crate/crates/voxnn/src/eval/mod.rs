//! Confusion-matrix metrics, ROC/AUC, stratified cross-validation, and the
//! t-SNE feature projection.

mod crossval;
mod kfold;
mod metrics;
mod roc;
mod tsne;

pub use crossval::{
    aggregate, embedding_csv, metrics_csv, roc_csv, run_crossval, run_crossval_with, score_fold,
    CrossvalOutcome, FoldClassifier, PipelineClassifier, ScoredSample, TrainingRecipe,
};
pub use kfold::{stratified_kfold, FoldPlan};
pub use metrics::{confusion, metrics, ConfusionCounts, MetricsReport};
pub use roc::{roc_auc, RocPoint};
pub use tsne::{tsne_embed, TsneParams};
