//! Cycle-consistent controllable triplane generation, end to end on the CPU.
//!
//! The pipeline: a conditional generator maps a 2D condition map (edge,
//! sketch, depth, or normal) plus a text prompt and camera pose to a
//! triplane radiance field; a differentiable volume renderer produces
//! images and depth at arbitrary views; differentiable extractors recover
//! condition maps from those renders; and the trainer closes the loop with
//! condition-cycle and view-cycle consistency losses. A procedural
//! primitive-scene dataset with an analytic ray-trace oracle supplies
//! ground truth, and a controllability metric suite scores the results.

pub mod camera;
pub mod conditions;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod render;
pub mod scene;
pub mod t32;
pub mod tensor;
pub mod trainer;
pub mod triplane;

pub use tensor::{directional_fd_check, finite_difference_check, CutSet, Gradients, Tape, Tensor, TensorError};
