//! Semi-supervised object detection with prediction-guided label assignment,
//! positive-proposal consistency voting and multi-view scale-invariant
//! learning, run against a desk-scale synthetic detection world.

pub mod assignment;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod msl;
pub mod pcv;
pub mod pseudo;
pub mod sim;

pub use error::{Error, Result};
pub use geometry::BBox;
