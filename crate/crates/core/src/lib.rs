//! Desk-scale adversarial training laboratory.
//!
//! Single-step (FGSM) and multi-step (PGD) adversarial training for small
//! image classifiers, the noise-based catastrophic-overfitting mitigations
//! (NoiseAug, GradAlign, LogitAlign), and the instruments used to study them:
//! local linearity, layerwise noise sensitivity, robustness evaluation and
//! collapse detection.
//!
//! Everything runs on a small in-crate tensor type with an eager
//! reverse-mode autodiff graph that supports differentiating through input
//! gradients.

pub mod attacks;
pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod models;
pub mod tensor;
pub mod training;

pub use attacks::{AttackFamily, AttackSpec, InitMode, Objective, Perturbation};
pub use augment::{NoiseDist, NoiseSpec};
pub use data::{BatchOrder, Dataset};
pub use diagnostics::{detect_co, evaluate, local_linearity, noise_sensitivity_profile, CoThresholds, CoVerdict, SensitivityProfile};
pub use error::{Error, Result};
pub use graph::{finite_diff_grad, Gradients, Graph, LeafKind, NodeId};
pub use models::{build_linear, build_small_cnn, build_toy_cnn, Bound, Model, ParamSet};
pub use training::{EpochRecord, Mode, Regularizer, RunHistory, TrainConfig};
pub use tensor::{cosine_similarity, one_hot, Real, Tensor};
