//! Instruction-driven image editing with learnable regions, end to end on
//! a synthetic shape world: a dense-tensor autodiff engine, toy contrastive
//! dual encoders, an instruction-conditioned region predictor, and a
//! region-conditioned DDIM inpainting sampler.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod img_io;
pub mod metrics;
pub mod objectives;
pub mod pipeline;
pub mod region;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
