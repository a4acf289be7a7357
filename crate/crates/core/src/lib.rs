pub mod adaptation;
pub mod backbone;
pub mod ckpt;
pub mod codec;
pub mod error;
pub mod eval;
pub mod lc_decoder;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prelim;
pub mod training;
pub mod resize;
pub mod synth;
pub mod task;

pub use error::{IcmError, Result};
