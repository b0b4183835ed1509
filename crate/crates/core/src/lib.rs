//! Unsupervised 3D change segmentation between a reference scan and a rescan.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod gmp;
pub mod io;
pub mod masks;
pub mod pipeline;
pub mod postprocess;
pub mod render;
pub mod seeds;
pub mod spatial;
pub mod supervoxel;
pub mod synth;

pub use error::{Error, Result};
