//! Continual all-in-one adverse weather removal.
//!
//! One restoration network is trained on a sequence of weather tasks
//! (haze, rain, snow). Forgetting is mitigated by replaying degraded-only
//! memory images through the previous model (output-level distillation) and
//! through a frozen channel-attention projector (principal feature
//! distillation).

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod projector;
pub mod replay;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
