//! splitnerf reconstructs a rigidly moving object and its static background
//! from calibrated multi-view RGB video. The scene is represented by two
//! neural radiance fields (static and dynamic) composed along each camera
//! ray, plus one SE(3) pose per video frame that carries world points into
//! the dynamic field's canonical frame. Fields and poses are optimized
//! jointly from photometric error alone; no masks or pose annotations.
//!
//! Module map:
//! - [`se3`]: rigid transforms, se(3) twists, exp/log, analytic point Jacobian.
//! - [`field`]: positional encoding and the radiance-field MLPs (forward only).
//! - [`render`]: ray sampling, importance sampling, quadrature compositing.
//! - [`loss`]: photometric MSE plus the transparency-entropy regularizer.
//! - [`diff`]: hand-derived adjoints; exact gradients for fields and poses.
//! - [`optim`]: ADAM with separate field/pose groups and on-manifold updates.
//! - [`trainer`]: appearance initialization, online frame admission, checkpoints.
//! - [`scene`]: procedural analytic scenes, reference renderer, dataset format.
//! - [`eval`]: PSNR/SSIM with fg/bg split, pose tracking error, occupancy grids.
//! - [`cli`]: the `splitnerf` command-line entry points.

pub mod cli;
pub mod diff;
pub mod eval;
pub mod field;
pub mod loss;
pub mod optim;
pub mod render;
pub mod scene;
pub mod se3;
pub mod trainer;

/// Splits a 64-bit seed and a stream of tag words into a fresh RNG seed.
///
/// All randomness in the crate is derived through this: every consumer
/// (weight init, batch selection, per-ray jitter) gets an independent
/// deterministic stream keyed by its coordinates, so results do not depend
/// on thread count or call order.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    // SplitMix64 over the concatenated words.
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        state = state.wrapping_add(t).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_tag_sensitive() {
        let a = derive_seed(7, &[1, 2, 3]);
        let b = derive_seed(7, &[1, 2, 3]);
        let c = derive_seed(7, &[1, 2, 4]);
        let d = derive_seed(8, &[1, 2, 3]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
