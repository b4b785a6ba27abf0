//! Conditional denoising diffusion for paired image-to-image synthesis, with
//! relativistic adversarial supervision and a zero-centered gradient penalty
//! applied to intermediate clean-image estimates.
//!
//! Everything is built from scratch on a minimal reverse-mode autodiff engine
//! ([`tensor`]): the conditional U-Net generator and patch discriminator
//! ([`nn`]), the noise schedule and ancestral sampler ([`diffusion`]), the
//! training losses ([`losses`]), a procedural phantom dataset with a bit-exact
//! volume format ([`phantom`]), image-quality metrics ([`metrics`]), analytic
//! verification oracles ([`oracle`]), and the training/evaluation harness
//! behind the CLI ([`harness`]).

pub mod diffusion;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod phantom;
pub mod tensor;

pub use tensor::{backward, GradMap, Tape, Tensor, TensorError};
