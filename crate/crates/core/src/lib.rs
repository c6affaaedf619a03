//! Reparameterized absorbing discrete diffusion over token sequences.
//!
//! The concrete score of an absorbing-state diffusion factors into an analytic
//! time scalar times a time-independent conditional of clean data. This crate
//! builds on that factorization:
//!
//! - [`schedule`]: noise schedules and the masking probability `lambda(t)`.
//! - [`space`]: vocabularies, sequences and a brute-force joint-distribution oracle.
//! - [`forward`]: closed-form forward transitions, joint laws, concrete scores
//!   and the exact reverse kernel.
//! - [`model`]: the time-independent conditional model with oracle, tabular and
//!   small neural backends.
//! - [`losses`]: Monte-Carlo estimators and exact evaluators for the DSE, t-DCE,
//!   lambda-DCE and any-order autoregressive objectives.
//! - [`trainer`]: Adam with clipping and EMA over any of those losses.
//! - [`sampler`]: Tweedie / Euler reverse steps with prediction caching, any-order
//!   sampling and expected-NFE formulas.
//! - [`eval`]: perplexity, total variation and unigram entropy.
//! - [`corpus`]: byte-level text blocks.
//! - [`verify`]: the enumeration-based identity suite.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod forward;
pub mod losses;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod space;
pub mod trainer;
pub mod verify;

pub use error::{RaddError, Result};
pub use forward::ForwardKernel;
pub use losses::LossKind;
pub use model::{
    Backend, ConditionalModel, NeuralModel, OracleModel, Probs, TabularModel, Trainable,
    UniformModel,
};
pub use sampler::{SamplingMethod, StepGrid};
pub use schedule::NoiseSchedule;
pub use space::{ExactJointTable, SequenceState, Vocab};
