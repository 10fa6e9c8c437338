//! Few-step flow-matching laboratory on labeled 2-D mixtures.
//!
//! The crate covers the whole pipeline: a dense network with exact gradients
//! ([`net`], [`adam`]), conditional flow matching ([`flow`]), few-step Euler
//! sampling ([`sampler`]), step distillation ([`distill`]), on-policy
//! self-distillation with an EMA teacher ([`opsd`]), the comparison trainers
//! ([`baselines`]), distribution metrics ([`metrics`]) and the experiment
//! harness ([`harness`]).
//!
//! Batch work fans out over rayon when the `parallel` feature is enabled
//! (default). Reductions always run in a fixed order, so results are
//! bit-identical with or without the feature.

// `!(a < b)` comparisons are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod baselines;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod opsd;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
pub use flow::{Condition, ConditionEncoder, Point, TrainingPair, VelocityField};
pub use net::{Activation, GradVector, NetSpec, ParamVector};
pub use sampler::{Schedule, Trajectory};
