#![allow(dead_code)]

pub mod brute;
pub mod oracle;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spinevox_core::volgrid::{Dims, GridKind, Spacing, VoxelGrid};

/// Random intensity grid up to 8×8×8; integer-valued when `integer`.
pub fn random_grid(rng: &mut ChaCha8Rng, integer: bool) -> VoxelGrid {
    let dims = Dims::new(rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
    let voxels = (0..dims.len())
        .map(|_| {
            if integer {
                rng.gen_range(-20i32..=60) as f64
            } else {
                rng.gen_range(-3.0..3.0)
            }
        })
        .collect();
    VoxelGrid::new(dims, Spacing::UNIT, GridKind::Intensity, voxels).unwrap()
}
