//! Magnification-aware distillation (MAD) for desk-scale digital
//! pathology experiments: synthesize multi-magnification slide pyramids,
//! cut hierarchically aligned tiles, train a small ViT by teacher/student
//! self-distillation where the teacher looks at low-magnification context
//! and the student at aligned high-magnification children, then score the
//! learned embeddings.
//!
//! Everything is deterministic given the run seed: reruns produce
//! byte-identical artifacts independent of thread count.

pub mod distill;
pub mod error;
pub mod evalsuite;
pub mod nnet;
pub mod pnm;
pub mod raster;
pub mod rng;
pub mod slidegen;
pub mod tiler;
pub mod views;

pub use error::{Error, Result};

/// Version string embedded in artifact provenance blocks.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stamp carried by every output artifact so any file can be traced back
/// to the exact configuration and seed that produced it.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
    pub tool_version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}
