//! Per-vertebra 2D masks, their 3D approximation by extrusion and
//! intersection, and cropping of vertebra volumes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask2D, Mask3D};
use crate::par::{self, Exec};
use crate::project::sidecar_path;
use crate::roivoi::Box3D;
use crate::volgrid::{load_vvol, save_vvol, Axis, Dims, GridKind, Spacing, VoxelGrid};

/// Number of cervical vertebrae, C1..C7.
pub const CERVICAL: usize = 7;

/// Seven binary channels, C1 first. Channels may overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabelMask {
    pub axis: Axis,
    pub channels: Vec<Mask2D>,
}

impl MultiLabelMask {
    pub fn new(axis: Axis, channels: Vec<Mask2D>) -> Result<Self> {
        if axis == Axis::Axial {
            return Err(Error::Param("multi-label masks are sagittal or coronal".into()));
        }
        if channels.len() != CERVICAL {
            return Err(Error::Arity {
                expected: CERVICAL,
                found: channels.len(),
            });
        }
        let (h, w) = (channels[0].height, channels[0].width);
        if channels.iter().any(|c| c.height != h || c.width != w) {
            return Err(Error::Shape("channel dimensions differ".into()));
        }
        Ok(MultiLabelMask { axis, channels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.channels[0].height, self.channels[0].width)
    }

    pub fn channel(&self, vertebra: u8) -> &Mask2D {
        &self.channels[vertebra as usize - 1]
    }
}

/// Channel `v` is the max-projection of `label == v` along `axis`.
pub fn multilabel_project(mask3d: &VoxelGrid, axis: Axis) -> Result<MultiLabelMask> {
    mask3d.require_kind(GridKind::Label)?;
    if axis == Axis::Axial {
        return Err(Error::Param("multi-label masks are sagittal or coronal".into()));
    }
    let d = mask3d.dims();
    let (h, w) = axis.image_dims(d);
    let mut channels = vec![Mask2D::empty(h, w); CERVICAL];
    for z in 0..d.z {
        for y in 0..d.y {
            for x in 0..d.x {
                let v = mask3d.get(z, y, x) as usize;
                if (1..=CERVICAL).contains(&v) {
                    let (r, c) = if axis == Axis::Sagittal { (z, y) } else { (z, x) };
                    channels[v - 1].set(r, c, true);
                }
            }
        }
    }
    MultiLabelMask::new(axis, channels)
}

/// Approximate 3D masks, one per vertebra, on the VOI grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApproxMask3D {
    pub dims: Dims,
    pub masks: Vec<Mask3D>,
}

impl ApproxMask3D {
    pub fn mask(&self, vertebra: u8) -> &Mask3D {
        &self.masks[vertebra as usize - 1]
    }
}

/// `(z, y, x)` belongs to vertebra `v` iff `sag_v(z, y)` and `cor_v(z, x)`.
pub fn approximate_mask3d(sag: &MultiLabelMask, cor: &MultiLabelMask, voi_dims: Dims) -> Result<ApproxMask3D> {
    approximate_mask3d_with(sag, cor, voi_dims, Exec::default())
}

pub fn approximate_mask3d_with(
    sag: &MultiLabelMask,
    cor: &MultiLabelMask,
    voi_dims: Dims,
    exec: Exec,
) -> Result<ApproxMask3D> {
    if sag.axis != Axis::Sagittal || cor.axis != Axis::Coronal {
        return Err(Error::Param("expected a sagittal and a coronal mask".into()));
    }
    if sag.dims() != (voi_dims.z, voi_dims.y) || cor.dims() != (voi_dims.z, voi_dims.x) {
        return Err(Error::Shape(format!(
            "sagittal {:?} and coronal {:?} do not match VOI {voi_dims}",
            sag.dims(),
            cor.dims()
        )));
    }
    let masks = par::map_indexed(exec, CERVICAL, |i| {
        let (s, c) = (&sag.channels[i], &cor.channels[i]);
        let mut m = Mask3D::empty(voi_dims);
        for z in 0..voi_dims.z {
            if !s.row_has_any(z) || !c.row_has_any(z) {
                continue;
            }
            for y in (0..voi_dims.y).filter(|&y| s.get(z, y)) {
                let base = voi_dims.index(z, y, 0);
                for x in 0..voi_dims.x {
                    m.data[base + x] = c.get(z, x);
                }
            }
        }
        m
    });
    Ok(ApproxMask3D { dims: voi_dims, masks })
}

// ---------------------------------------------------------------------------
// Square pad + resize and its inverse

/// Nearest-neighbour resample with pixel-centre alignment.
fn resize_nearest(m: &Mask2D, h: usize, w: usize) -> Mask2D {
    let src = |dst: usize, from: usize, to: usize| (((dst as f64 + 0.5) * from as f64 / to as f64).floor() as usize).min(from - 1);
    Mask2D::from_fn(h, w, |r, c| m.get(src(r, m.height, h), src(c, m.width, w)))
}

fn pad_offsets(h: usize, w: usize) -> (usize, usize, usize) {
    let side = h.max(w);
    (side, (side - h) / 2, (side - w) / 2)
}

/// Centre-pad to a square and resize to `size × size`.
pub fn pad_resize_mask(m: &Mask2D, size: usize) -> Mask2D {
    let (side, top, left) = pad_offsets(m.height, m.width);
    let padded = Mask2D::from_fn(side, side, |r, c| {
        r >= top && c >= left && r - top < m.height && c - left < m.width && m.get(r - top, c - left)
    });
    resize_nearest(&padded, size, size)
}

/// Undo [`pad_resize_mask`]: resize back to the padded square, then crop the
/// centred `original` window.
pub fn unpad_resize(m: &Mask2D, original: (usize, usize)) -> Result<Mask2D> {
    let (h, w) = original;
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!("original dimensions {original:?} must be positive")));
    }
    if m.height != m.width {
        return Err(Error::Shape(format!("expected a square mask, got {}x{}", m.height, m.width)));
    }
    let (side, top, left) = pad_offsets(h, w);
    let square = resize_nearest(m, side, side);
    Ok(Mask2D::from_fn(h, w, |r, c| square.get(r + top, c + left)))
}

pub fn unpad_resize_mask(pred: &MultiLabelMask, original: (usize, usize)) -> Result<MultiLabelMask> {
    let channels = pred
        .channels
        .iter()
        .map(|c| unpad_resize(c, original))
        .collect::<Result<Vec<_>>>()?;
    MultiLabelMask::new(pred.axis, channels)
}

// ---------------------------------------------------------------------------
// Extraction

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedVertebra {
    pub vertebra: u8,
    /// Crop box in the coordinates of the source volume.
    pub bbox: Box3D,
    pub volume: VoxelGrid,
}

/// Crop the tight box of vertebra `v`'s approximate mask, grown by `margin`
/// and clamped. Intensities are returned unmasked.
pub fn extract_vertebra(vol: &VoxelGrid, approx: &ApproxMask3D, vertebra: u8, margin: usize) -> Result<ExtractedVertebra> {
    vol.require_kind(GridKind::Intensity)?;
    if !(1..=CERVICAL as u8).contains(&vertebra) {
        return Err(Error::Param(format!("vertebra must be 1..=7, got {vertebra}")));
    }
    if vol.dims() != approx.dims {
        return Err(Error::Shape(format!("volume {} vs mask {}", vol.dims(), approx.dims)));
    }
    let bounds = approx.mask(vertebra).bounds().ok_or_else(|| Error::Extraction {
        vertebra,
        reason: "approximate mask is empty".into(),
    })?;
    let bbox = Box3D::from_bounds(bounds).expand(margin, vol.dims());
    Ok(ExtractedVertebra {
        vertebra,
        bbox,
        volume: bbox.crop(vol)?,
    })
}

// ---------------------------------------------------------------------------
// Multi-label mask files

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    axis: Axis,
}

/// VVOL label grid with one `z` plane per vertebra plus a `<path>.json`
/// sidecar naming the axis.
pub fn save_multilabel(m: &MultiLabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = m.dims();
    let voxels = m
        .channels
        .iter()
        .flat_map(|c| c.data.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    let grid = VoxelGrid::new(Dims::new(CERVICAL, h, w), Spacing::UNIT, GridKind::Label, voxels)?;
    save_vvol(&grid, path)?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&MaskSidecar { axis: m.axis })?).map_err(|e| Error::io(side, e))
}

/// Inverse of [`save_multilabel`]. Intensity-kind files are read as
/// probabilities and thresholded at 0.5; label files treat any non-zero
/// code as set.
pub fn load_multilabel(path: impl AsRef<Path>) -> Result<MultiLabelMask> {
    let path = path.as_ref();
    let grid = load_vvol(path)?;
    let side = sidecar_path(path);
    let meta: MaskSidecar = serde_json::from_slice(&std::fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    multilabel_from_planes(&grid, meta.axis)
}

pub fn multilabel_from_planes(grid: &VoxelGrid, axis: Axis) -> Result<MultiLabelMask> {
    let d = grid.dims();
    if d.z != CERVICAL {
        return Err(Error::Shape(format!("multi-label file needs {CERVICAL} planes, has {}", d.z)));
    }
    let keep = |v: f64| match grid.kind() {
        GridKind::Intensity => v >= 0.5,
        GridKind::Label => v != 0.0,
    };
    let channels = (0..CERVICAL)
        .map(|k| Mask2D {
            height: d.y,
            width: d.x,
            data: grid.slab(k).iter().map(|&v| keep(v)).collect(),
        })
        .collect();
    MultiLabelMask::new(axis, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_grid(dims: Dims, voxels: &[((usize, usize, usize), u8)]) -> VoxelGrid {
        let mut g = vec![0.0; dims.len()];
        for &((z, y, x), l) in voxels {
            g[dims.index(z, y, x)] = l as f64;
        }
        VoxelGrid::new(dims, Spacing::UNIT, GridKind::Label, g).unwrap()
    }

    #[test]
    fn multilabel_examples() {
        let dims = Dims::new(4, 5, 6);
        let g = label_grid(dims, &[((1, 2, 3), 3)]);
        let sag = multilabel_project(&g, Axis::Sagittal).unwrap();
        assert!(sag.channel(3).get(1, 2));
        for v in (1..=7).filter(|&v| v != 3) {
            assert!(sag.channel(v).is_empty());
        }

        // C6 and C7 at the same (z, x) but different y overlap in the coronal view.
        let g = label_grid(dims, &[((2, 0, 4), 6), ((2, 3, 4), 7)]);
        let cor = multilabel_project(&g, Axis::Coronal).unwrap();
        assert!(cor.channel(6).get(2, 4) && cor.channel(7).get(2, 4));

        let empty = label_grid(dims, &[]);
        let sag = multilabel_project(&empty, Axis::Sagittal).unwrap();
        assert_eq!(sag.channels.len(), 7);
        assert!(sag.channels.iter().all(Mask2D::is_empty));
    }

    fn single_channel(axis: Axis, h: usize, w: usize, v: u8, pixels: &[(usize, usize)]) -> MultiLabelMask {
        let mut channels = vec![Mask2D::empty(h, w); 7];
        for &(r, c) in pixels {
            channels[v as usize - 1].set(r, c, true);
        }
        MultiLabelMask::new(axis, channels).unwrap()
    }

    #[test]
    fn single_voxel_intersection() {
        let dims = Dims::new(4, 5, 6);
        let sag = single_channel(Axis::Sagittal, 4, 5, 2, &[(2, 3)]);
        let cor = single_channel(Axis::Coronal, 4, 6, 2, &[(2, 5)]);
        let approx = approximate_mask3d(&sag, &cor, dims).unwrap();
        assert_eq!(approx.mask(2).count(), 1);
        assert!(approx.mask(2).get(2, 3, 5));

        let cor = single_channel(Axis::Coronal, 4, 6, 2, &[(3, 5)]);
        let approx = approximate_mask3d(&sag, &cor, dims).unwrap();
        assert!(approx.mask(2).is_empty());

        assert!(matches!(approximate_mask3d(&sag, &cor, Dims::new(4, 5, 7)), Err(Error::Shape(_))));
    }

    #[test]
    fn unpad_square_and_empty() {
        let m = Mask2D::from_fn(8, 8, |r, c| r < 4 && c > 2);
        let up = pad_resize_mask(&m, 16);
        assert_eq!(unpad_resize(&up, (8, 8)).unwrap(), m);
        let zero = Mask2D::empty(256, 256);
        assert!(unpad_resize(&zero, (30, 50)).unwrap().is_empty());
        assert!(unpad_resize(&zero, (0, 50)).is_err());
    }

    #[test]
    fn extraction_examples() {
        let dims = Dims::new(4, 5, 6);
        let vol = VoxelGrid::from_fn(dims, Spacing::UNIT, GridKind::Intensity, |z, y, x| (100 * z + 10 * y + x) as f64).unwrap();
        let sag = single_channel(Axis::Sagittal, 4, 5, 4, &[(1, 2)]);
        let cor = single_channel(Axis::Coronal, 4, 6, 4, &[(1, 3)]);
        let approx = approximate_mask3d(&sag, &cor, dims).unwrap();

        let one = extract_vertebra(&vol, &approx, 4, 0).unwrap();
        assert_eq!(one.volume.dims(), Dims::new(1, 1, 1));
        assert_eq!(one.volume.get(0, 0, 0), 123.0);

        let all = extract_vertebra(&vol, &approx, 4, 50).unwrap();
        assert_eq!(all.volume, vol);

        assert!(matches!(extract_vertebra(&vol, &approx, 1, 0), Err(Error::Extraction { vertebra: 1, .. })));
    }

    #[test]
    fn multilabel_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sag.vvol");
        let m = single_channel(Axis::Sagittal, 3, 4, 5, &[(0, 0), (2, 3)]);
        save_multilabel(&m, &path).unwrap();
        assert_eq!(load_multilabel(&path).unwrap(), m);

        // Probability planes are thresholded at 0.5.
        let probs = VoxelGrid::from_fn(Dims::new(7, 1, 3), Spacing::UNIT, GridKind::Intensity, |z, _, x| {
            if z == 0 {
                [0.2, 0.5, 0.9][x]
            } else {
                0.0
            }
        })
        .unwrap();
        let m = multilabel_from_planes(&probs, Axis::Coronal).unwrap();
        assert_eq!(m.channel(1).data, vec![false, true, true]);
    }
}
