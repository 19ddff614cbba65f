//! 2.5D classifier inputs: fifteen five-plane stacks per vertebra, built
//! either from raw slices or from MIPs of five-slice mini-stacks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::project::sidecar_path;
use crate::volgrid::{save_vvol, Dims, GridKind, Spacing, VoxelGrid, WindowSpec};

pub const STACKS: usize = 15;
pub const PLANES: usize = 5;
pub const PLANE_SIZE: usize = 256;
/// Slices sampled for the MIP variant (one mini-stack per plane).
pub const MIP_SAMPLES: usize = STACKS * PLANES;
/// Neighbours on each side of a centre slice.
const HALF: isize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackVariant {
    Raw,
    Mip,
}

impl std::str::FromStr for StackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(StackVariant::Raw),
            "mip" => Ok(StackVariant::Mip),
            other => Err(Error::Param(format!("unknown stack variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub index: usize,
    pub vertebra: Option<u8>,
    pub variant: StackVariant,
    /// Five `256 × 256` planes, row-major, values in `[0, 1]`.
    pub planes: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackSet {
    pub variant: StackVariant,
    pub vertebra: Option<u8>,
    /// Sampled slice centres: 15 for raw stacks, 75 for MIP stacks.
    pub centers: Vec<usize>,
    pub stacks: Vec<SliceStack>,
}

/// `round(linspace(0, z - 1, n))` with halves rounded up, in exact integer
/// arithmetic.
pub fn linspace_centers(z: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    let span = z.saturating_sub(1);
    (0..n)
        .map(|i| (2 * i * span + (n - 1)) / (2 * (n - 1)))
        .collect()
}

/// Indices `c-2 ..= c+2` with out-of-range neighbours replaced by the edge slice.
pub fn neighbourhood(center: usize, z: usize) -> [usize; PLANES] {
    let mut out = [0; PLANES];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (center as isize + k as isize - HALF).clamp(0, z as isize - 1) as usize;
    }
    out
}

/// Centre-pad `h × w` with zeros to a square, then bilinearly resize to
/// `size × size` (pixel-centre aligned).
pub fn pad_resize_bilinear(plane: &[f64], h: usize, w: usize, size: usize) -> Vec<f32> {
    let side = h.max(w);
    let (top, left) = ((side - h) / 2, (side - w) / 2);
    let padded = |r: usize, c: usize| -> f64 {
        if r < top || c < left || r - top >= h || c - left >= w {
            0.0
        } else {
            plane[(r - top) * w + (c - left)]
        }
    };
    let scale = side as f64 / size as f64;
    let axis = |dst: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(side - 1), s - i0 as f64)
    };
    let cols: Vec<_> = (0..size).map(axis).collect();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let (r0, r1, fr) = axis(r);
        for &(c0, c1, fc) in &cols {
            let top_row = padded(r0, c0) * (1.0 - fc) + padded(r0, c1) * fc;
            let bottom_row = padded(r1, c0) * (1.0 - fc) + padded(r1, c1) * fc;
            out.push((top_row * (1.0 - fr) + bottom_row * fr) as f32);
        }
    }
    out
}

fn windowed(vert: &VoxelGrid, window: WindowSpec) -> Result<Vec<f64>> {
    vert.require_kind(GridKind::Intensity)?;
    Ok(vert.voxels().iter().map(|&v| window.map(v)).collect())
}

fn assemble(
    variant: StackVariant,
    vertebra: Option<u8>,
    centers: Vec<usize>,
    mut planes: Vec<Vec<f32>>,
) -> StackSet {
    let mut stacks = Vec::with_capacity(STACKS);
    for index in (0..STACKS).rev() {
        let group = planes.split_off(index * PLANES);
        stacks.push(SliceStack {
            index,
            vertebra,
            variant,
            planes: group,
        });
    }
    stacks.reverse();
    StackSet {
        variant,
        vertebra,
        centers,
        stacks,
    }
}

/// Fifteen evenly spaced centre slices, each with two neighbours per side.
pub fn build_raw_stacks(vert: &VoxelGrid, window: WindowSpec) -> Result<StackSet> {
    build_raw_stacks_with(vert, window, None, Exec::default())
}

pub fn build_raw_stacks_with(vert: &VoxelGrid, window: WindowSpec, vertebra: Option<u8>, exec: Exec) -> Result<StackSet> {
    let d = vert.dims();
    let data = windowed(vert, window)?;
    let centers = linspace_centers(d.z, STACKS);
    let slab = d.slab_len();
    let planes = par::map_indexed(exec, STACKS * PLANES, |i| {
        let z = neighbourhood(centers[i / PLANES], d.z)[i % PLANES];
        pad_resize_bilinear(&data[z * slab..(z + 1) * slab], d.y, d.x, PLANE_SIZE)
    });
    Ok(assemble(StackVariant::Raw, vertebra, centers, planes))
}

/// Seventy-five evenly spaced mini-stacks reduced by MIP, grouped in fives.
pub fn build_mip_stacks(vert: &VoxelGrid, window: WindowSpec) -> Result<StackSet> {
    build_mip_stacks_with(vert, window, None, Exec::default())
}

pub fn build_mip_stacks_with(vert: &VoxelGrid, window: WindowSpec, vertebra: Option<u8>, exec: Exec) -> Result<StackSet> {
    let d = vert.dims();
    let data = windowed(vert, window)?;
    let centers = linspace_centers(d.z, MIP_SAMPLES);
    let slab = d.slab_len();
    let planes = par::map_indexed(exec, MIP_SAMPLES, |i| {
        let mut mip = vec![f64::NEG_INFINITY; slab];
        for z in neighbourhood(centers[i], d.z) {
            for (m, &v) in mip.iter_mut().zip(&data[z * slab..(z + 1) * slab]) {
                *m = m.max(v);
            }
        }
        pad_resize_bilinear(&mip, d.y, d.x, PLANE_SIZE)
    });
    Ok(assemble(StackVariant::Mip, vertebra, centers, planes))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StackIndex {
    pub variant: StackVariant,
    pub vertebra: Option<u8>,
    pub centers: Vec<usize>,
    pub stacks: usize,
    pub planes_per_stack: usize,
    pub plane_size: usize,
}

/// Stack-major VVOL (75 planes of 256 × 256) plus a JSON index at
/// `<path>.json`.
pub fn save_stacks(set: &StackSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let voxels: Vec<f64> = set
        .stacks
        .iter()
        .flat_map(|s| s.planes.iter().flatten().map(|&v| v as f64))
        .collect();
    let grid = VoxelGrid::new(
        Dims::new(STACKS * PLANES, PLANE_SIZE, PLANE_SIZE),
        Spacing::UNIT,
        GridKind::Intensity,
        voxels,
    )?;
    save_vvol(&grid, path)?;
    let index = StackIndex {
        variant: set.variant,
        vertebra: set.vertebra,
        centers: set.centers.clone(),
        stacks: STACKS,
        planes_per_stack: PLANES,
        plane_size: PLANE_SIZE,
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(side, e))
}
