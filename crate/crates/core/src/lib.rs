//! Command-conditioned grasp detection.

pub mod geometry;
pub mod nn;
pub mod command;
pub mod scene;
pub mod manifest;
pub mod dataset;
pub mod model;
pub mod train;
pub mod eval;
pub mod pipeline;
pub mod render;
pub mod cli;
