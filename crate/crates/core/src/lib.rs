//! Position-role-sensitive score maps and pairwise RoI pooling for weakly
//! supervised visual relation detection.

pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inspect;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod train;
pub mod wsod;
pub mod wspp;

pub use error::{Error, Result};
