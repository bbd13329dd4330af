//! Co-finetuning for spatio-temporal action detection at desk scale.
//!
//! A single transformer backbone is trained simultaneously on several
//! classification and detection datasets, each minibatch drawn from exactly
//! one dataset. The crate provides the model (tubelet tokenizer, encoder,
//! per-dataset heads with an ROI-Align detection head), the two minibatch
//! schedulers, the co-finetuning and sequential transfer-learning drivers,
//! a synthetic dataset suite for controlled experiments, and a frame-AP
//! evaluation with Head/Mid/Tail long-tail reporting.
//!
//! All numerical code is generic over the scalar type via [`Float`];
//! concrete aliases for the common instantiations live at the crate root.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Float;

/// Token grid instantiations.
pub type TokenGridF32 = model::TokenGrid<f32>;
pub type TokenGridF64 = model::TokenGrid<f64>;

/// Model state instantiations.
pub type ModelStateF32 = model::ModelState<f32>;
pub type ModelStateF64 = model::ModelState<f64>;

/// Video clip instantiations.
pub type VideoClipF32 = data::VideoClip<f32>;
pub type VideoClipF64 = data::VideoClip<f64>;
