//! Feature importance-aware transferable adversarial attacks at desk scale.
//!
//! The crate is organized around the attack pipeline:
//!
//! * [`image`] — pixel-space batches, the ℓ∞ perturbation budget, and the
//!   projection/clipping primitives every attack relies on.
//! * [`rng`] — the single-seed reproducibility contract; all randomness in a
//!   run flows from one 64-bit seed through documented derivations.
//! * [`zoo`] — small convolutional classifiers with named feature taps,
//!   manual backprop (logit→feature and loss→input gradients), training,
//!   checkpoints, and the synthetic 10-class dataset they are trained on.
//! * [`featimp`] — the aggregate gradient: per-feature importance obtained by
//!   averaging logit gradients over Bernoulli pixel-drop copies of the input.
//! * [`attacks`] — the importance-weighted feature attack plus the transfer
//!   baselines (momentum sign-step family, input diversity, translation
//!   invariance, patch-wise amplification, and the feature-distortion
//!   losses), all sharing one momentum optimizer.
//! * [`harness`] — transfer matrices, hyperparameter sweeps, and the
//!   ablation runner, with CSV/JSON result persistence.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`).
//! The pipeline runs in `f32`; tests instantiate `f64` where finite
//! differences need the headroom.

pub mod attacks;
pub mod error;
pub mod featimp;
pub mod harness;
pub mod image;
pub mod rng;
pub mod scalar;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar used by the training and attack pipelines.
pub type Pix = f32;

/// Pixel-space image batch at pipeline precision.
pub type ImageBatch32 = image::ImageBatch<f32>;
/// Single labelled image at pipeline precision.
pub type LabelledExample32 = image::LabelledExample<f32>;
/// ℓ∞ budget at pipeline precision.
pub type PerturbationBudget32 = image::PerturbationBudget<f32>;
/// Classifier handle at pipeline precision.
pub type ModelHandle32 = zoo::ModelHandle<f32>;
/// Attack configuration at pipeline precision.
pub type AttackConfig32 = attacks::AttackConfig<f32>;
/// Attack output at pipeline precision.
pub type AttackResult32 = attacks::AttackResult<f32>;
/// Aggregate feature-importance map at pipeline precision.
pub type AggregateGradient32 = featimp::AggregateGradient<f32>;
