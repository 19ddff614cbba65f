//! ROI geometry: boxes from masks, sequential slice selection, fusion of
//! three 2D boxes into a 3D VOI, and box overlap.
//!
//! Image boxes use `x` for the column and `y` for the row of the projection
//! image. For a sagittal image (rows `z`, cols `y`) the box `x` range is a
//! `y` range in the volume; for coronal (rows `z`, cols `x`) it is an `x`
//! range; for axial (rows `y`, cols `x`) rows map to `y`.

use std::collections::VecDeque;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask2D, Mask3D};
use crate::project::{project, ProjImage, ProjParams, ProjectionOp};
use crate::volgrid::{Axis, Dims, VoxelGrid};

/// Half-open 2D pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box2D {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Box2D {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        let b = Box2D { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0 < self.x1 && self.y0 < self.y1 {
            Ok(())
        } else {
            Err(Error::Geometry(format!("degenerate box {self:?}")))
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Half-open 3D voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box3D {
    pub z0: usize,
    pub z1: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Box3D {
    pub fn new(z: (usize, usize), y: (usize, usize), x: (usize, usize)) -> Result<Self> {
        let b = Box3D {
            z0: z.0,
            z1: z.1,
            y0: y.0,
            y1: y.1,
            x0: x.0,
            x1: x.1,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z0 < self.z1 && self.y0 < self.y1 && self.x0 < self.x1 {
            Ok(())
        } else {
            Err(Error::Geometry(format!("degenerate box {self:?}")))
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0)
    }

    pub fn volume(&self) -> usize {
        self.dims().len()
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.z0..self.z1).contains(&z) && (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn contains_box(&self, other: &Box3D) -> bool {
        self.z0 <= other.z0
            && other.z1 <= self.z1
            && self.y0 <= other.y0
            && other.y1 <= self.y1
            && self.x0 <= other.x0
            && other.x1 <= self.x1
    }

    pub fn from_bounds(b: [(usize, usize); 3]) -> Self {
        Box3D {
            z0: b[0].0,
            z1: b[0].1,
            y0: b[1].0,
            y1: b[1].1,
            x0: b[2].0,
            x1: b[2].1,
        }
    }

    /// Grow by `margin` on every side, clamped to `dims`.
    pub fn expand(&self, margin: usize, dims: Dims) -> Box3D {
        Box3D {
            z0: self.z0.saturating_sub(margin),
            z1: (self.z1 + margin).min(dims.z),
            y0: self.y0.saturating_sub(margin),
            y1: (self.y1 + margin).min(dims.y),
            x0: self.x0.saturating_sub(margin),
            x1: (self.x1 + margin).min(dims.x),
        }
    }

    pub fn crop(&self, grid: &VoxelGrid) -> Result<VoxelGrid> {
        grid.crop(self.z0..self.z1, self.y0..self.y1, self.x0..self.x1)
    }
}

/// Axis-aligned boxes measured in whole pixels or voxels.
pub trait CountBox {
    fn size(&self) -> usize;
    fn intersection(&self, other: &Self) -> usize;
}

fn overlap(a0: usize, a1: usize, b0: usize, b1: usize) -> usize {
    a1.min(b1).saturating_sub(a0.max(b0))
}

impl CountBox for Box2D {
    fn size(&self) -> usize {
        self.area()
    }

    fn intersection(&self, o: &Self) -> usize {
        overlap(self.x0, self.x1, o.x0, o.x1) * overlap(self.y0, self.y1, o.y0, o.y1)
    }
}

impl CountBox for Box3D {
    fn size(&self) -> usize {
        self.volume()
    }

    fn intersection(&self, o: &Self) -> usize {
        overlap(self.z0, self.z1, o.z0, o.z1) * overlap(self.y0, self.y1, o.y0, o.y1) * overlap(self.x0, self.x1, o.x0, o.x1)
    }
}

/// Intersection over union on pixel/voxel counts.
pub fn box_iou<B: CountBox>(a: &B, b: &B) -> f64 {
    let inter = a.intersection(b);
    let union = a.size() + b.size() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn miou<B: CountBox>(pairs: &[(B, B)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("mIoU needs at least one box pair"));
    }
    Ok(pairs.iter().map(|(a, b)| box_iou(a, b)).sum::<f64>() / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Components and boxes from masks

/// Keep only the largest 8-connected component. Ties go to the component
/// whose first pixel comes first in raster order.
pub fn largest_component(mask: &Mask2D) -> Result<Mask2D> {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![0u32; h * w];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if mask.data[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    let (keep, _) = best.ok_or(Error::EmptyMask)?;
    Ok(Mask2D {
        height: h,
        width: w,
        data: label.iter().map(|&l| l == keep).collect(),
    })
}

/// Same as [`largest_component`] on a projection image whose pixels are
/// 0 or 1.
pub fn largest_component_image(img: &ProjImage) -> Result<ProjImage> {
    if let Some(v) = img.pixels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Value(format!("binary image expected, found pixel {v}")));
    }
    let mask = Mask2D {
        height: img.height,
        width: img.width,
        data: img.pixels.iter().map(|&v| v == 1.0).collect(),
    };
    let kept = largest_component(&mask)?;
    Ok(ProjImage {
        pixels: kept.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ..img.clone()
    })
}

/// Tight box of the set pixels.
pub fn tight_box(mask: &Mask2D) -> Result<Box2D> {
    let mut b: Option<Box2D> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                let cur = b.get_or_insert(Box2D {
                    x0: c,
                    y0: r,
                    x1: c + 1,
                    y1: r + 1,
                });
                cur.x0 = cur.x0.min(c);
                cur.x1 = cur.x1.max(c + 1);
                cur.y0 = cur.y0.min(r);
                cur.y1 = cur.y1.max(r + 1);
            }
        }
    }
    b.ok_or(Error::EmptyMask)
}

/// Ground-truth 2D box: binarise `labels`, max-project along `axis`, keep
/// the largest 8-connected component and return its tight box.
pub fn bbox_from_mask(mask3d: &VoxelGrid, axis: Axis, labels: &[u8]) -> Result<Box2D> {
    let selected = Mask3D::from_grid(mask3d, |v| labels.iter().any(|&l| l as f64 == v));
    if selected.is_empty() {
        return Err(Error::EmptyMask);
    }
    tight_box(&largest_component(&selected.project(axis))?)
}

// ---------------------------------------------------------------------------
// Sequential slice selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRanges {
    pub sagittal: (usize, usize),
    pub coronal: (usize, usize),
    pub axial: (usize, usize),
}

/// Boxes produced while selecting slices, one per view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewBoxes {
    pub sagittal: Box2D,
    pub coronal: Box2D,
    pub axial: Box2D,
}

pub const DEFAULT_SAGITTAL_RANGE: (usize, usize) = (100, 420);

/// Mean of two integer endpoints; lower endpoints round down and upper
/// endpoints round up so the result never shrinks.
fn mean_lo(a: usize, b: usize) -> usize {
    (a + b) / 2
}

fn mean_hi(a: usize, b: usize) -> usize {
    (a + b).div_ceil(2)
}

/// Narrow the slices used for each view in turn.
///
/// 1. Variance projection of sagittal slices `base_sagittal` (clamped to the
///    grid) goes to the detector.
/// 2. The sagittal box's column extent (a `y` range) selects the coronal
///    slices; their variance projection goes to the detector.
/// 3. The mean of the sagittal and coronal row extents (`z`) selects the
///    axial slices; their projection goes to the detector.
///
/// The detector receives the projection and its view and returns a box in
/// that projection's coordinates.
pub fn sequential_slice_select<F>(
    grid: &VoxelGrid,
    mut detector: F,
    base_sagittal: (usize, usize),
) -> Result<(SliceRanges, ViewBoxes)>
where
    F: FnMut(&ProjImage, Axis) -> Result<Box2D>,
{
    let d = grid.dims();
    let params = ProjParams::default();
    let sag_range = (base_sagittal.0.min(d.x), base_sagittal.1.min(d.x));
    if sag_range.0 >= sag_range.1 {
        return Err(Error::Geometry(format!(
            "sagittal range {base_sagittal:?} does not intersect grid width {}",
            d.x
        ))
        .in_stage("sagittal"));
    }

    let mut stage = |axis: Axis, range: (usize, usize), name: &'static str| -> Result<Box2D> {
        let slab = grid.slab_range(axis, range.0..range.1).map_err(|e| e.in_stage(name))?;
        let op = if range.1 - range.0 >= 2 {
            ProjectionOp::Variance
        } else {
            ProjectionOp::Max
        };
        let img = project(&slab, axis, op, &params).map_err(|e| e.in_stage(name))?;
        let b = detector(&img, axis).map_err(|e| e.in_stage(name))?;
        b.validate().map_err(|e| e.in_stage(name))?;
        if b.x1 > img.width || b.y1 > img.height {
            return Err(Error::Geometry(format!(
                "box {b:?} exceeds {}x{} projection",
                img.height, img.width
            ))
            .in_stage(name));
        }
        Ok(b)
    };

    let sag_box = stage(Axis::Sagittal, sag_range, "sagittal")?;
    let cor_range = (sag_box.x0, sag_box.x1);
    let cor_box = stage(Axis::Coronal, cor_range, "coronal")?;
    let axial_range = (mean_lo(sag_box.y0, cor_box.y0), mean_hi(sag_box.y1, cor_box.y1));
    let ax_box = stage(Axis::Axial, axial_range, "axial")?;
    Ok((
        SliceRanges {
            sagittal: sag_range,
            coronal: cor_range,
            axial: axial_range,
        },
        ViewBoxes {
            sagittal: sag_box,
            coronal: cor_box,
            axial: ax_box,
        },
    ))
}

// ---------------------------------------------------------------------------
// VOI fusion

pub const DEFAULT_TOLERANCE: usize = 20;

/// Fuse coronal, sagittal and axial boxes into a 3D VOI.
///
/// Height (`z`) averages the coronal and sagittal row extents, width (`x`)
/// the coronal and axial column extents, depth (`y`) the sagittal column and
/// axial row extents. Each side then grows by `t` and is clamped to the grid.
pub fn fuse_voi(c: &Box2D, s: &Box2D, a: &Box2D, t: usize, grid_dims: Dims) -> Result<Box3D> {
    for b in [c, s, a] {
        b.validate()?;
    }
    let grow = |lo: usize, hi: usize, limit: usize| (lo.saturating_sub(t).min(limit), (hi + t).min(limit));
    let z = grow(mean_lo(c.y0, s.y0), mean_hi(c.y1, s.y1), grid_dims.z);
    let x = grow(mean_lo(c.x0, a.x0), mean_hi(c.x1, a.x1), grid_dims.x);
    let y = grow(mean_lo(s.x0, a.y0), mean_hi(s.x1, a.y1), grid_dims.y);
    Box3D::new(z, y, x).map_err(|_| {
        Error::Geometry(format!("fused VOI z{z:?} y{y:?} x{x:?} is empty inside grid {grid_dims}"))
    })
}

// ---------------------------------------------------------------------------
// Detector output files

/// One line of the detector boxes JSONL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub view: Axis,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub score: f64,
}

/// Keep the highest-scoring box per view; every view must be present.
pub fn read_view_boxes(reader: impl BufRead) -> Result<ViewBoxes> {
    let mut best: [Option<ScoredBox>; 3] = [None; 3];
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<boxes>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let b: ScoredBox = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("boxes line {}: {e}", n + 1)))?;
        Box2D::new(b.x0, b.y0, b.x1, b.y1)?;
        let slot = &mut best[Axis::ALL.iter().position(|&a| a == b.view).unwrap()];
        if slot.is_none_or(|cur| b.score > cur.score) {
            *slot = Some(b);
        }
    }
    let pick = |axis: Axis| -> Result<Box2D> {
        let b = best[Axis::ALL.iter().position(|&a| a == axis).unwrap()]
            .ok_or_else(|| Error::Format(format!("no {} box", axis.name())))?;
        Box2D::new(b.x0, b.y0, b.x1, b.y1)
    };
    Ok(ViewBoxes {
        sagittal: pick(Axis::Sagittal)?,
        coronal: pick(Axis::Coronal)?,
        axial: pick(Axis::Axial)?,
    })
}
