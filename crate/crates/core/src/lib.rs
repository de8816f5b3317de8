//! Active multi-task representation learning for bilinear models.
//!
//! The crate plants a bilinear multi-task model (or wraps a pendulum
//! simulator), runs passive and active source-task sampling strategies against
//! it, and scores the learned representation on a target distribution.

pub mod config;
pub mod design;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod learner;
pub mod linalg;
pub mod model;
pub mod oracles;
pub mod pendulum;
pub mod persist;
pub mod seed;

pub use error::{Error, Result};
