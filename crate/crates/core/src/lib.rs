//! Learning from label proportions.
//!
//! Instance-level classifiers trained from bags that carry only their class
//! proportions. The crate provides bag construction, the bag-level losses
//! (cross-entropy of the mean prediction, the averaged instance baseline,
//! exact combinatorial oracles, and the entropic unbalanced transport loss),
//! a small reverse-mode MLP, an SGD trainer and the experiment harness behind
//! the `llp` command-line tool.

pub mod autodiff;
pub mod bags;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{LlpError, Result};
