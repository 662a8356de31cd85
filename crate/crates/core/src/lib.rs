//! User-adaptive spatio-temporal evidence masking with mask-guided
//! diffusion completion of behavior tensors.

pub mod config;
pub mod diffusion;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod policy;
pub mod profile;
pub mod regime;
pub mod rng;
pub mod runconfig;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
