//! Group-relative policy optimization for a pair of cooperating toy
//! generative policies: a captioner that reasons about what happens next
//! in a symbolic video, and a frame policy that renders the answer.

pub mod curves;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod math;
pub mod par;
pub mod policy;
pub mod reward;
pub mod train;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
