//! Offline neural surrogate for indoor wireless ray tracing.
//!
//! The crate pairs a deterministic shooting-and-bouncing-ray (SBS) oracle
//! with a small decision-transformer policy trained offline on traced ray
//! sequences, plus the reward stack, Fibonacci-sphere augmentation, channel
//! aggregation and evaluation harness that tie the two together.

pub mod augment;
pub mod autodiff;
pub mod channel;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod rewards;
pub mod scenegen;
pub mod tracer;
pub mod training;
