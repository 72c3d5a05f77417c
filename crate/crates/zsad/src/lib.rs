//! Zero-shot anomaly detection with object-agnostic prompt learning over a
//! frozen dual-encoder vision-language backbone.
//!
//! The library covers the full loop: a deterministic backbone (with a desk-
//! scale stub for tests), learnable normality/abnormality prompts with deep
//! textual tuning, value-value attention refocusing in the visual encoder,
//! glocal (image + pixel) training losses with reverse-mode autodiff, anomaly
//! map composition, and the standard detection/segmentation metrics.
//!
//! Entry points:
//! - [`runner::RunConfig`] — one config struct for every knob;
//! - [`runner::run_train`] / [`runner::run_infer`] / [`runner::run_eval`];
//! - `examples/` — runnable walkthroughs of each capability.

pub mod backbone;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod optim;
pub mod prompts;
pub mod runner;
pub mod scoring;
pub mod tape;

pub use error::{Error, Result};
