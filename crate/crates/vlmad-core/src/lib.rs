//! Knowledge distillation toolkit for driving planners: prompt and
//! annotation handling, supervision encoding, auxiliary attention heads,
//! distillation losses, and a synthetic end-to-end training harness.

pub mod annotation;
pub mod autodiff;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod hash;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod projection;
pub mod store;

pub use error::{Error, Result};
