//! Binary masks in 2D and 3D.

use crate::error::{Error, Result};
use crate::volgrid::{Axis, Dims, GridKind, Spacing, VoxelGrid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask2D {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask2D {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Mask2D { height, width, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn row_has_any(&self, row: usize) -> bool {
        self.data[row * self.width..(row + 1) * self.width].iter().any(|&b| b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3D {
    pub dims: Dims,
    pub data: Vec<bool>,
}

impl Mask3D {
    pub fn empty(dims: Dims) -> Self {
        Mask3D {
            dims,
            data: vec![false; dims.len()],
        }
    }

    /// Voxels of `grid` whose value satisfies `keep`.
    pub fn from_grid(grid: &VoxelGrid, keep: impl Fn(f64) -> bool) -> Self {
        Mask3D {
            dims: grid.dims(),
            data: grid.voxels().iter().map(|&v| keep(v)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Max-projection (logical OR) along `axis`.
    pub fn project(&self, axis: Axis) -> Mask2D {
        let d = self.dims;
        let (h, w) = axis.image_dims(d);
        let mut out = Mask2D::empty(h, w);
        for z in 0..d.z {
            for y in 0..d.y {
                for x in 0..d.x {
                    if self.data[d.index(z, y, x)] {
                        let (r, c) = match axis {
                            Axis::Axial => (y, x),
                            Axis::Sagittal => (z, y),
                            Axis::Coronal => (z, x),
                        };
                        out.set(r, c, true);
                    }
                }
            }
        }
        out
    }

    /// Tight half-open bounds `[(z0,z1), (y0,y1), (x0,x1)]`, or `None` when empty.
    pub fn bounds(&self) -> Option<[(usize, usize); 3]> {
        let d = self.dims;
        let mut b = [(usize::MAX, 0usize); 3];
        let mut any = false;
        for z in 0..d.z {
            for y in 0..d.y {
                for x in 0..d.x {
                    if self.data[d.index(z, y, x)] {
                        any = true;
                        for (slot, v) in b.iter_mut().zip([z, y, x]) {
                            slot.0 = slot.0.min(v);
                            slot.1 = slot.1.max(v + 1);
                        }
                    }
                }
            }
        }
        any.then_some(b)
    }

    pub fn to_label_grid(&self, spacing: Spacing) -> Result<VoxelGrid> {
        VoxelGrid::new(
            self.dims,
            spacing,
            GridKind::Label,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn is_subset_of(&self, other: &Mask3D) -> Result<bool> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("{} vs {}", self.dims, other.dims)));
        }
        Ok(self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b))
    }
}

impl From<Mask2D> for Mask3D {
    fn from(m: Mask2D) -> Self {
        Mask3D {
            dims: Dims::new(1, m.height, m.width),
            data: m.data,
        }
    }
}
