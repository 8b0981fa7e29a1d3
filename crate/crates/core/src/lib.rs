//! Garment-conditioned diffusion transformer for virtual try-on, small
//! enough to train on a CPU.

pub mod analysis;
pub mod conditioning;
pub mod dit;
pub mod error;
pub mod maskgen;
pub mod nn;
pub mod pipeline;
pub mod rflow;
pub mod spectral;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
