//! The synthetic detection world: scenes, proposals, a linear detector head,
//! and the training loops that exercise the core algorithms.

pub mod ablation;
pub mod analysis;
pub mod detector;
pub mod noise;
pub mod proposals;
pub mod rng;
pub mod scene;
pub mod teacher;
pub mod train;
pub mod world;
