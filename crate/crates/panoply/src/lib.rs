//! Open-vocabulary panoptic pseudo-labels for 3D point clouds, plus a
//! toy-scale hierarchical mixture-of-experts model trained on them.
//!
//! The library is organized stage-by-stage:
//!
//! - [`cloud`]: point-cloud data model, PLY I/O, voxel subsampling
//! - [`render`]: synthetic camera rigs and z-buffer point-splat rendering
//! - [`embed`]: embedding providers (deterministic mock + file-backed),
//!   view sanity filtering, things/stuff discrimination
//! - [`lift`]: pixel-to-point feature lifting with depth screening and the
//!   recursive coverage loop
//! - [`pseudolabel`]: spherical k-means pseudo-classes and per-class adaptive
//!   DBSCAN pseudo-instances
//! - [`superpoint`]: graph-energy superpoint hierarchy and target propagation
//! - [`moe`]: the mixture-of-experts graph transformer, its losses, analytic
//!   gradients, and toy training loop
//! - [`panoptic`]: instance clustering, text queries, PQ/mIoU/mAcc metrics
//! - [`pipeline`]: file-level stage orchestration shared with the CLI

pub mod cloud;
pub mod embed;
pub mod error;
pub mod lift;
pub mod moe;
pub mod panoptic;
pub mod par;
pub mod pipeline;
pub mod ply;
pub mod pseudolabel;
pub mod render;
pub mod spatial;
pub mod superpoint;
pub mod synthetic;

pub use error::{Error, Result};

/// Stable 64-bit hash used wherever deterministic sub-seeds are derived.
/// (The std hasher is randomly seeded per process, so it is unusable here.)
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed, a tag, and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut x = base ^ stable_hash(tag.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
