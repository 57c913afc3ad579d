//! A small transformer encoder-decoder for assembly-to-assembly rewriting,
//! trained on CPU with hand-written backpropagation.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;

pub use config::{AdamConfig, ModelConfig, ScheduleConfig};
pub use decode::{beam_decode, greedy, sample, sample_batch, Hypothesis};
pub use model::{Example, Model, ModelError, Objective, StepStats};
pub use optim::Adam;
pub use real::Real;
