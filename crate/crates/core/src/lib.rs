//! Desk-scale transformer laboratory.
//!
//! A small dense-matrix engine with reverse-mode differentiation, a
//! configurable transformer encoder, the two training objectives it
//! contrasts (supervised sequence classification and masked
//! reconstruction), layer-wise over-smoothing diagnostics with empirical
//! verifiers, compute-matched depth/width planning, and deterministic
//! synthetic data — everything seeded, everything reproducible bit for bit.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod matrix;
pub mod model;
pub mod planner;
pub mod report;
pub mod train;

pub use data::{generate, oracle_label, Dataset, SyntheticSpec};
pub use diagnostics::{
    centered_pair_cosine, compare_residual_delta, diagnose, mean_token_std, variance_trace,
    verify_lemma1, verify_lemma2, DiagnosticReport, MetricOptions, PositionsMode,
};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use mask::{sample_mask, MaskPlan};
pub use matrix::{ActivationKind, Matrix, Precision, Scalar};
pub use model::{
    attention, build, classification_head, forward, reconstruction_head, ActivationTrace,
    HeadMode, ModelConfig, NormPlacement, Objective, Output, Parameters,
};
pub use planner::{cost_ratio, flops_per_token, param_count, plan_widths, PlannedConfig, ReferenceScale};
pub use train::{
    adam_step, cls_loss, mae_loss, pretrain_then_finetune, train, TrainConfig, TrainRun,
    TrainState,
};

pub use experiment::{ExperimentSpec, VerifyOutcome, VerifySpec};
