//! Layer-grouped classifier, its losses, and distillation-based incremental
//! training.

pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod tasks;
pub mod train;

pub use loss::{
    asoftmax_loss, asoftmax_loss_grad, blended_asoftmax_loss_grad, distillation_loss,
    distillation_loss_grad, group_distance, margin_psi, multitask_loss, softmax_loss,
    softmax_loss_grad, task_loss, task_loss_grad, Margin, MultiTaskTerms,
};
pub use model::{Dense, Forward, Gradients, GroupedClassifier, HeadGradient, HeadKind, ModelError};
pub use tasks::{
    AngularTask, ClusterData, ClusterTask, ForgettingExperiment, ForgettingReport, HeadComparison,
};
pub use train::{
    fine_tune, incremental_train, top1_error, train_supervised, EvalPoint, LabeledSample,
    Objective, TrainConfig, TrainError, TrainOutcome, TrainReport,
};
