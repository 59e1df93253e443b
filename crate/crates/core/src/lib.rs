//! Multi-scale implicit surface reconstruction from point clouds.
//!
//! Point features are computed once per cloud, independently of any query
//! (`encoder`); per-query features are then sampled lazily from the query's
//! cell at every scale (`sampler`), fused across scales by a one-token-per-
//! scale attention layer (`attention`) and regressed to a signed distance
//! (`head`). `reconstruct` evaluates the field on voxels near the input,
//! propagates signs into the rest of the grid and runs marching cubes.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod head;
pub mod io;
pub mod marching_cubes;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod reconstruct;
pub mod sampler;
pub mod shapes;
pub mod train;

pub use error::{Error, Result};
