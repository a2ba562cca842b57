//! Desk-scale dynamic 4D reconstruction.

pub mod diagnostics;
pub mod encoder;
pub mod geometry;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod mta;
pub mod numerics;
pub mod rasterizer;
pub mod synth;
