//! Planar door-opening world, demonstration generation, the SafeDiff
//! diffusion planner, closed-loop execution and force-safety metrics.

pub mod benchmark;
pub mod dataset;
pub mod door;
pub mod geometry;
pub mod model;
pub mod runtime;

pub use geometry::Vec2;
