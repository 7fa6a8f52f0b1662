//! Differentiable multi-view rendering with learned camera viewpoints.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod camera;
pub mod geom;
pub mod gradcheck;
pub mod mesh;
pub mod nn;
pub mod dataset;
pub mod render;
pub mod retrieval;
pub mod train;
pub mod viewdist;

/// Mixes a base seed with a stream tag (SplitMix64 finalizer), so separate
/// consumers of one user seed draw independent streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
