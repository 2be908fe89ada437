//! Decision-based knowledge distillation: estimates a black-box classifier's
//! logits from its top-1 decisions on augmented inputs, by matching the
//! empirical decision distribution against a non-centred Gaussian orthant
//! probability and solving for the logits with fixed-point iteration. The
//! estimated logits then drive standard distillation soft labels.

pub mod augment;
pub mod core;
pub mod decision_model;
pub mod distill;
pub mod error;
pub mod orthant;
pub mod solver;
pub mod teacher;

pub use crate::core::{
    argmax_decision, one_hot, DecisionDistribution, LabelSpace, LogitsVector, NoiseScale,
};
pub use crate::error::{Error, Result};
