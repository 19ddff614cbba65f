//! Exhaustive voxel-scan references for masks, boxes and distances.

#![allow(dead_code)]

use spinevox_core::volgrid::{Axis, VoxelGrid};

pub type Image = Vec<Vec<bool>>;

/// Projection of the voxels whose label is in `keep`, by scanning every voxel.
pub fn project_labels(grid: &VoxelGrid, axis: Axis, keep: &[u8]) -> Image {
    let d = grid.dims();
    let (h, w) = match axis {
        Axis::Axial => (d.y, d.x),
        Axis::Sagittal => (d.z, d.y),
        Axis::Coronal => (d.z, d.x),
    };
    let mut img = vec![vec![false; w]; h];
    for z in 0..d.z {
        for y in 0..d.y {
            for x in 0..d.x {
                if keep.iter().any(|&l| grid.get(z, y, x) == l as f64) {
                    let (r, c) = match axis {
                        Axis::Axial => (y, x),
                        Axis::Sagittal => (z, y),
                        Axis::Coronal => (z, x),
                    };
                    img[r][c] = true;
                }
            }
        }
    }
    img
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components by union-find; each component lists its pixels in
/// raster order and components are ordered by their first pixel.
pub fn components(img: &Image) -> Vec<Vec<(usize, usize)>> {
    let h = img.len();
    let w = img.first().map_or(0, Vec::len);
    let mut parent: Vec<usize> = (0..h * w).collect();
    for (r, row) in img.iter().enumerate() {
        for (c, &set) in row.iter().enumerate() {
            if !set {
                continue;
            }
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr < h as isize && cc >= 0 && cc < w as isize && img[rr as usize][cc as usize] {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, rr as usize * w + cc as usize);
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for (r, row) in img.iter().enumerate() {
        for (c, &set) in row.iter().enumerate() {
            if set {
                let root = find(&mut parent, r * w + c);
                match groups.iter_mut().find(|(k, _)| *k == root) {
                    Some((_, px)) => px.push((r, c)),
                    None => groups.push((root, vec![(r, c)])),
                }
            }
        }
    }
    groups.into_iter().map(|(_, px)| px).collect()
}

/// `(x0, y0, x1, y1)` of the largest component; earlier components win ties.
pub fn largest_component_box(img: &Image) -> Option<(usize, usize, usize, usize)> {
    let comps = components(img);
    let best = comps.iter().fold(None::<&Vec<(usize, usize)>>, |best, c| match best {
        Some(b) if b.len() >= c.len() => Some(b),
        _ => Some(c),
    })?;
    let x0 = best.iter().map(|p| p.1).min()?;
    let x1 = best.iter().map(|p| p.1).max()? + 1;
    let y0 = best.iter().map(|p| p.0).min()?;
    let y1 = best.iter().map(|p| p.0).max()? + 1;
    Some((x0, y0, x1, y1))
}

/// Type-7 percentile of unsorted values.
pub fn percentile7(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Physical coordinates of set voxels in a z-major boolean buffer.
pub fn points(data: &[bool], dims: (usize, usize, usize), spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let (_, ny, nx) = dims;
    data.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            let (z, y, x) = (i / (ny * nx), (i / nx) % ny, i % nx);
            [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]
        })
        .collect()
}

/// Larger of the two directed 95th-percentile nearest-point distances.
pub fn hd95(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    percentile7(&directed(a, b), 95.0).max(percentile7(&directed(b, a), 95.0))
}

/// Classic Hausdorff distance.
pub fn hausdorff(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let worst = |d: Vec<f64>| d.into_iter().fold(0.0, f64::max);
    worst(directed(a, b)).max(worst(directed(b, a)))
}
