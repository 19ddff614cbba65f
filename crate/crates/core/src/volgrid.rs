//! Voxel grids, the VVOL container, HU windowing, slice interpolation and
//! the synthetic spine phantom.
//!
//! Axis convention used across the crate: voxels are addressed `(z, y, x)`
//! with `z` the axial slice index, `y` rows (anterior–posterior) and `x`
//! columns (left–right). Buffers are z-major, then y, then x.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Highest label code allowed in a label grid (0 background, 1–7 cervical,
/// 8–19 thoracic).
pub const MAX_LABEL: u8 = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Dims { z, y, x }
    }

    pub fn len(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.y + y) * self.x + x
    }

    pub fn slab_len(&self) -> usize {
        self.y * self.x
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.z, self.y, self.x)
    }
}

/// Millimetres per voxel along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing {
        z: 1.0,
        y: 1.0,
        x: 1.0,
    };

    pub fn new(z: f64, y: f64, x: f64) -> Self {
        Spacing { z, y, x }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.z, self.y, self.x] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Param(format!("spacing must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Intensity,
    Label,
}

/// One of the three principal viewing directions.
///
/// Axial reduces `z` and yields an image indexed `(y, x)`; sagittal reduces
/// `x` and yields `(z, y)`; coronal reduces `y` and yields `(z, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Sagittal,
    Coronal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Sagittal, Axis::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
        }
    }

    /// Number of samples along the reduced axis.
    pub fn depth(self, dims: Dims) -> usize {
        match self {
            Axis::Axial => dims.z,
            Axis::Sagittal => dims.x,
            Axis::Coronal => dims.y,
        }
    }

    /// `(rows, cols)` of the projected image.
    pub fn image_dims(self, dims: Dims) -> (usize, usize) {
        match self {
            Axis::Axial => (dims.y, dims.x),
            Axis::Sagittal => (dims.z, dims.y),
            Axis::Coronal => (dims.z, dims.x),
        }
    }

    /// Voxel coordinate `(z, y, x)` of image pixel `(row, col)` at depth `k`.
    #[inline]
    pub fn voxel(self, row: usize, col: usize, k: usize) -> (usize, usize, usize) {
        match self {
            Axis::Axial => (k, row, col),
            Axis::Sagittal => (row, col, k),
            Axis::Coronal => (row, k, col),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(Axis::Axial),
            "sagittal" => Ok(Axis::Sagittal),
            "coronal" => Ok(Axis::Coronal),
            other => Err(Error::Param(format!("unknown axis `{other}`"))),
        }
    }
}

/// 3D scalar field: a CT volume in HU or a label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: Spacing,
    kind: GridKind,
    voxels: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(dims: Dims, spacing: Spacing, kind: GridKind, voxels: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Geometry(format!("degenerate dimensions {dims}")));
        }
        if voxels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "voxel buffer holds {} values, dims {dims} need {}",
                voxels.len(),
                dims.len()
            )));
        }
        spacing.validate()?;
        if kind == GridKind::Label {
            if let Some(bad) = voxels
                .iter()
                .find(|v| !(v.fract() == 0.0 && **v >= 0.0 && **v <= MAX_LABEL as f64))
            {
                return Err(Error::Value(format!("label grid holds invalid code {bad}")));
            }
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            kind,
            voxels,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, kind: GridKind, value: f64) -> Result<Self> {
        Self::new(dims, spacing, kind, vec![value; dims.len()])
    }

    /// Build from a closure evaluated at every `(z, y, x)`.
    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        kind: GridKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.len());
        for z in 0..dims.z {
            for y in 0..dims.y {
                for x in 0..dims.x {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, spacing, kind, voxels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.dims.index(z, y, x)]
    }

    /// Contiguous `y × x` slab at slice `z`.
    pub fn slab(&self, z: usize) -> &[f64] {
        let n = self.dims.slab_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn require_kind(&self, kind: GridKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Kind(format!("expected {kind:?} grid, got {:?}", self.kind)))
        }
    }

    /// Sub-volume over half-open ranges; spacing is kept.
    pub fn crop(&self, z: Range<usize>, y: Range<usize>, x: Range<usize>) -> Result<VoxelGrid> {
        let d = self.dims;
        if z.start >= z.end || y.start >= y.end || x.start >= x.end || z.end > d.z || y.end > d.y || x.end > d.x
        {
            return Err(Error::Geometry(format!(
                "crop {z:?},{y:?},{x:?} outside grid {d}"
            )));
        }
        let out = Dims::new(z.len(), y.len(), x.len());
        let mut voxels = Vec::with_capacity(out.len());
        for zz in z {
            for yy in y.clone() {
                let start = d.index(zz, yy, x.start);
                voxels.extend_from_slice(&self.voxels[start..start + x.len()]);
            }
        }
        Ok(VoxelGrid {
            dims: out,
            spacing: self.spacing,
            kind: self.kind,
            voxels,
        })
    }

    /// Restrict the grid to `range` along the axis a projection would reduce.
    pub fn slab_range(&self, axis: Axis, range: Range<usize>) -> Result<VoxelGrid> {
        let d = self.dims;
        match axis {
            Axis::Axial => self.crop(range, 0..d.y, 0..d.x),
            Axis::Sagittal => self.crop(0..d.z, 0..d.y, range),
            Axis::Coronal => self.crop(0..d.z, range, 0..d.x),
        }
    }

    /// Distinct label codes present, ascending.
    pub fn labels_present(&self) -> Vec<u8> {
        let mut seen = [false; MAX_LABEL as usize + 1];
        for &v in &self.voxels {
            if let Some(s) = seen.get_mut(v as usize) {
                *s = true;
            }
        }
        (0..=MAX_LABEL).filter(|&l| seen[l as usize]).collect()
    }
}

// ---------------------------------------------------------------------------
// VVOL container

const VVOL_MAGIC: &[u8; 4] = b"VVOL";
const VVOL_VERSION: u32 = 1;
pub const VVOL_HEADER_LEN: usize = 36;

pub fn encode_vvol(grid: &VoxelGrid) -> Vec<u8> {
    let d = grid.dims;
    let bytes_per = match grid.kind {
        GridKind::Intensity => 4,
        GridKind::Label => 1,
    };
    let mut out = Vec::with_capacity(VVOL_HEADER_LEN + d.len() * bytes_per);
    out.extend_from_slice(VVOL_MAGIC);
    out.extend_from_slice(&VVOL_VERSION.to_le_bytes());
    out.push(match grid.kind {
        GridKind::Intensity => 0,
        GridKind::Label => 1,
    });
    out.extend_from_slice(&[0u8; 3]);
    for n in [d.z, d.y, d.x] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    let s = grid.spacing;
    for v in [s.z, s.y, s.x] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    match grid.kind {
        GridKind::Intensity => {
            for &v in &grid.voxels {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        GridKind::Label => out.extend(grid.voxels.iter().map(|&v| v as u8)),
    }
    out
}

pub fn decode_vvol(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < VVOL_HEADER_LEN {
        return Err(Error::Format(format!(
            "header needs {VVOL_HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != VVOL_MAGIC {
        return Err(Error::Format("bad magic, expected `VVOL`".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VVOL_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = match bytes[8] {
        0 => GridKind::Intensity,
        1 => GridKind::Label,
        k => return Err(Error::Format(format!("unknown kind byte {k}"))),
    };
    let dims = Dims::new(u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    if dims.is_empty() {
        return Err(Error::Format(format!("degenerate dimensions {dims}")));
    }
    let spacing = Spacing::new(f32_at(24) as f64, f32_at(28) as f64, f32_at(32) as f64);
    let body = &bytes[VVOL_HEADER_LEN..];
    let bytes_per = if kind == GridKind::Intensity { 4 } else { 1 };
    let expected = dims
        .len()
        .checked_mul(bytes_per)
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if body.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after voxel data",
            body.len() - expected
        )));
    }
    let voxels = match kind {
        GridKind::Intensity => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        GridKind::Label => body.iter().map(|&b| b as f64).collect(),
    };
    VoxelGrid::new(dims, spacing, kind, voxels).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_vvol(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vvol(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_vvol(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vvol(&bytes)
}

// ---------------------------------------------------------------------------
// Windowing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
}

impl WindowSpec {
    /// Bone window with the literal published values (width 400, level 1400).
    pub const BONE: WindowSpec = WindowSpec {
        width: 400.0,
        level: 1400.0,
    };

    pub fn new(width: f64, level: f64) -> Result<Self> {
        if !(width.is_finite() && width > 0.0 && level.is_finite()) {
            return Err(Error::Param(format!(
                "window width must be positive (got width {width}, level {level})"
            )));
        }
        Ok(WindowSpec { width, level })
    }

    #[inline]
    pub fn map(&self, v: f64) -> f64 {
        ((v - (self.level - self.width / 2.0)) / self.width).clamp(0.0, 1.0)
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::BONE
    }
}

/// Linear window to `[0, 1]`.
///
/// Monotone non-decreasing in the voxel value. Not idempotent in general; a
/// second pass is the identity only with `width = 1, level = 0.5`.
pub fn apply_window(grid: &VoxelGrid, w: WindowSpec) -> Result<VoxelGrid> {
    grid.require_kind(GridKind::Intensity)?;
    let mut voxels = grid.voxels.clone();
    par::for_each_chunk(Exec::default(), &mut voxels, 1 << 16, |_, c| {
        c.iter_mut().for_each(|v| *v = w.map(*v))
    });
    Ok(VoxelGrid { voxels, ..grid.clone() })
}

// ---------------------------------------------------------------------------
// Slice interpolation

pub const DEFAULT_MIN_SLICES: usize = 400;

/// Resample along `z` to `min_slices` slices when the grid has fewer.
///
/// Intensity grids use a natural cubic spline per `(y, x)` column; label
/// grids use nearest neighbour so no new codes appear. `sz` is scaled so the
/// physical extent `Z·sz` is preserved.
pub fn interpolate_slices(grid: &VoxelGrid, min_slices: usize) -> Result<VoxelGrid> {
    interpolate_slices_with(grid, min_slices, Exec::default())
}

pub fn interpolate_slices_with(grid: &VoxelGrid, min_slices: usize, exec: Exec) -> Result<VoxelGrid> {
    if min_slices == 0 {
        return Err(Error::Param("min_slices must be at least 1".into()));
    }
    let d = grid.dims;
    if d.z >= min_slices {
        return Ok(grid.clone());
    }
    if grid.kind == GridKind::Intensity && d.z < 2 {
        return Err(Error::InsufficientSamples(d.z));
    }
    let new_z = min_slices;
    let out_dims = Dims::new(new_z, d.y, d.x);
    let slab = d.slab_len();
    // Source position of output slice k on the old index axis.
    let step = if new_z > 1 {
        (d.z - 1) as f64 / (new_z - 1) as f64
    } else {
        0.0
    };
    let position = |k: usize| k as f64 * step;

    let mut voxels = vec![0.0; out_dims.len()];
    match grid.kind {
        GridKind::Label => {
            par::for_each_chunk(exec, &mut voxels, slab, |k, out| {
                let src = ((position(k) + 0.5).floor() as usize).min(d.z - 1);
                out.copy_from_slice(grid.slab(src));
            });
        }
        GridKind::Intensity => {
            let second = spline_second_derivatives(grid, exec);
            par::for_each_chunk(exec, &mut voxels, slab, |k, out| {
                let t = position(k);
                let i = (t.floor() as usize).min(d.z - 2);
                let u = t - i as f64;
                let w = 1.0 - u;
                let (ca, cb) = ((w * w * w - w) / 6.0, (u * u * u - u) / 6.0);
                let (y0, y1) = (grid.slab(i), grid.slab(i + 1));
                let (m0, m1) = (&second[i * slab..(i + 1) * slab], &second[(i + 1) * slab..(i + 2) * slab]);
                for j in 0..slab {
                    out[j] = w * y0[j] + u * y1[j] + ca * m0[j] + cb * m1[j];
                }
            });
        }
    }
    let spacing = Spacing {
        z: grid.spacing.z * d.z as f64 / new_z as f64,
        ..grid.spacing
    };
    Ok(VoxelGrid {
        dims: out_dims,
        spacing,
        kind: grid.kind,
        voxels,
    })
}

/// Second derivatives of the natural cubic spline through every `z` column,
/// laid out like the grid. Unit knot spacing; all columns share one
/// tridiagonal matrix, so the Thomas sweep runs slab by slab.
fn spline_second_derivatives(grid: &VoxelGrid, exec: Exec) -> Vec<f64> {
    let n = grid.dims.z;
    let slab = grid.dims.slab_len();
    let mut m = vec![0.0; n * slab];
    if n < 3 {
        return m;
    }
    // Interior unknowns 1..n-1: M[i-1] + 4 M[i] + M[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]).
    let mut cprime = vec![0.0; n];
    let mut denom = vec![0.0; n];
    for i in 1..n - 1 {
        let prev = if i == 1 { 0.0 } else { cprime[i - 1] };
        denom[i] = 4.0 - prev;
        cprime[i] = 1.0 / denom[i];
    }
    const CHUNK: usize = 4096;
    for i in 1..n - 1 {
        let (done, rest) = m.split_at_mut(i * slab);
        let prev = &done[(i - 1) * slab..];
        let cur = &mut rest[..slab];
        let (ym, y0, yp) = (grid.slab(i - 1), grid.slab(i), grid.slab(i + 1));
        let dn = denom[i];
        let first = i == 1;
        par::for_each_chunk(exec, cur, CHUNK, |c, out| {
            let base = c * CHUNK;
            for (j, o) in out.iter_mut().enumerate() {
                let g = base + j;
                let rhs = 6.0 * (yp[g] - 2.0 * y0[g] + ym[g]);
                let carried = if first { 0.0 } else { prev[g] };
                *o = (rhs - carried) / dn;
            }
        });
    }
    for i in (1..n - 2).rev() {
        let (head, tail) = m.split_at_mut((i + 1) * slab);
        let next = &tail[..slab];
        let cur = &mut head[i * slab..];
        let cp = cprime[i];
        par::for_each_chunk(exec, cur, CHUNK, |c, out| {
            let base = c * CHUNK;
            for (j, o) in out.iter_mut().enumerate() {
                *o -= cp * next[base + j];
            }
        });
    }
    m
}

// ---------------------------------------------------------------------------
// Phantom

pub const PHANTOM_BONE_HU: f64 = 1200.0;
pub const PHANTOM_TISSUE_HU: f64 = 40.0;

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn distance(&self, z: f64, y: f64, x: f64) -> f64 {
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let dx = (x - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx
    }
}

/// Deterministic spine phantom: `(intensity, label)`.
///
/// Vertebra `k` (label `k+1`) is a body ellipsoid plus a smaller posterior
/// process shifted caudally, centred on a sinusoidally curving column. The
/// body ellipsoids of neighbours overlap in `z`; overlapping voxels go to the
/// nearer vertebra, so labels are disjoint while every projection stays one
/// connected silhouette and the coronal channels of neighbours overlap.
pub fn make_phantom(seed: u64, n_vertebrae: usize, dims: Dims) -> Result<(VoxelGrid, VoxelGrid)> {
    if n_vertebrae == 0 || n_vertebrae > 7 {
        return Err(Error::Geometry(format!(
            "phantom supports 1..=7 vertebrae, got {n_vertebrae}"
        )));
    }
    if dims.z < 10 * n_vertebrae || dims.y < 16 || dims.x < 16 {
        return Err(Error::Geometry(format!(
            "dims {dims} too small for {n_vertebrae} vertebrae (need z >= {}, y and x >= 16)",
            10 * n_vertebrae
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (zf, yf, xf) = (dims.z as f64, dims.y as f64, dims.x as f64);
    let amp_x = rng.gen_range(0.04..0.08) * xf;
    let amp_y = rng.gen_range(0.02..0.05) * yf;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    // Column occupies the central 80% of z.
    let top = 0.1 * zf;
    let band = 0.8 * zf / n_vertebrae as f64;

    let mut parts: Vec<(u8, Ellipsoid)> = Vec::with_capacity(2 * n_vertebrae);
    for k in 0..n_vertebrae {
        let a = phase + std::f64::consts::PI * k as f64 / n_vertebrae as f64;
        let cz = top + band * (k as f64 + 0.5);
        let cy = 0.42 * yf + amp_y * a.cos();
        let cx = 0.5 * xf + amp_x * a.sin();
        let label = k as u8 + 1;
        parts.push((
            label,
            Ellipsoid {
                center: [cz, cy, cx],
                radii: [0.6 * band, 0.14 * yf, 0.15 * xf],
            },
        ));
        parts.push((
            label,
            Ellipsoid {
                center: [cz + 0.35 * band, cy + 0.2 * yf, cx],
                radii: [0.3 * band, 0.09 * yf, 0.05 * xf],
            },
        ));
    }

    let mut labels = Vec::with_capacity(dims.len());
    let mut intensity = Vec::with_capacity(dims.len());
    for z in 0..dims.z {
        for y in 0..dims.y {
            for x in 0..dims.x {
                let (zc, yc, xc) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let mut best = (0u8, f64::INFINITY);
                for (label, e) in &parts {
                    let d = e.distance(zc, yc, xc);
                    if d <= 1.0 && d < best.1 {
                        best = (*label, d);
                    }
                }
                labels.push(best.0 as f64);
                let hu = if best.0 > 0 {
                    PHANTOM_BONE_HU + rng.gen_range(-50.0..50.0)
                } else {
                    PHANTOM_TISSUE_HU + rng.gen_range(-20.0..20.0)
                };
                intensity.push(hu);
            }
        }
    }
    let spacing = Spacing::new(1.0, 0.8, 0.8);
    Ok((
        VoxelGrid::new(dims, spacing, GridKind::Intensity, intensity)?,
        VoxelGrid::new(dims, spacing, GridKind::Label, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(z: usize) -> VoxelGrid {
        VoxelGrid::from_fn(Dims::new(z, 3, 2), Spacing::new(2.0, 1.0, 1.0), GridKind::Intensity, |z, _, _| z as f64)
            .unwrap()
    }

    #[test]
    fn vvol_round_trip_is_byte_identical() {
        let g = VoxelGrid::from_fn(Dims::new(2, 2, 2), Spacing::UNIT, GridKind::Intensity, |z, y, x| {
            (z * 4 + y * 2 + x) as f64
        })
        .unwrap();
        let bytes = encode_vvol(&g);
        let back = decode_vvol(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(encode_vvol(&back), bytes);
    }

    #[test]
    fn vvol_rejects_zero_dimension() {
        let g = VoxelGrid::filled(Dims::new(1, 4, 4), Spacing::UNIT, GridKind::Label, 0.0).unwrap();
        let mut bytes = encode_vvol(&g);
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_vvol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn vvol_detects_truncation() {
        let g = VoxelGrid::filled(Dims::new(2, 2, 2), Spacing::UNIT, GridKind::Intensity, 1.0).unwrap();
        let mut bytes = encode_vvol(&g);
        bytes.pop();
        assert!(matches!(decode_vvol(&bytes), Err(Error::Truncated { .. })));
    }

    #[test]
    fn vvol_bad_magic_and_version() {
        let g = VoxelGrid::filled(Dims::new(1, 1, 1), Spacing::UNIT, GridKind::Label, 3.0).unwrap();
        let mut bytes = encode_vvol(&g);
        bytes[0] = b'X';
        assert!(matches!(decode_vvol(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_vvol(&g);
        bytes[4] = 2;
        assert!(matches!(decode_vvol(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn label_grid_rejects_bad_codes() {
        assert!(VoxelGrid::filled(Dims::new(1, 1, 1), Spacing::UNIT, GridKind::Label, 20.0).is_err());
        assert!(VoxelGrid::filled(Dims::new(1, 1, 1), Spacing::UNIT, GridKind::Label, 1.5).is_err());
    }

    #[test]
    fn window_examples() {
        let w = WindowSpec::BONE;
        assert_eq!(w.map(1400.0), 0.5);
        assert_eq!(w.map(1000.0), 0.0);
        assert_eq!(w.map(1800.0), 1.0);
        assert_eq!(w.map(1300.0), 0.25);
        let label = VoxelGrid::filled(Dims::new(1, 1, 1), Spacing::UNIT, GridKind::Label, 1.0).unwrap();
        assert!(matches!(apply_window(&label, w), Err(Error::Kind(_))));
        assert!(WindowSpec::new(0.0, 10.0).is_err());
    }

    #[test]
    fn interpolation_leaves_tall_grids_alone() {
        let g = ramp(450);
        assert_eq!(interpolate_slices(&g, 400).unwrap(), g);
    }

    #[test]
    fn interpolation_reproduces_linear_ramp() {
        let g = ramp(100);
        let out = interpolate_slices(&g, 400).unwrap();
        assert_eq!(out.dims(), Dims::new(400, 3, 2));
        for z in 0..400 {
            let expect = z as f64 * 99.0 / 399.0;
            assert!((out.get(z, 1, 1) - expect).abs() < 1e-9);
        }
        let before = 100.0 * g.spacing().z;
        let after = 400.0 * out.spacing().z;
        assert!(((before - after) / before).abs() < 1e-6);
    }

    #[test]
    fn interpolation_two_samples_and_errors() {
        let g = ramp(2);
        let out = interpolate_slices(&g, 5).unwrap();
        assert!((out.get(2, 0, 0) - 0.5).abs() < 1e-12);
        let one = ramp(1);
        assert!(matches!(interpolate_slices(&one, 5), Err(Error::InsufficientSamples(1))));
    }

    #[test]
    fn interpolation_sequential_matches_parallel() {
        let g = VoxelGrid::from_fn(Dims::new(7, 5, 9), Spacing::UNIT, GridKind::Intensity, |z, y, x| {
            ((z * 31 + y * 7 + x * 3) % 11) as f64
        })
        .unwrap();
        let a = interpolate_slices_with(&g, 40, Exec::Sequential).unwrap();
        let b = interpolate_slices_with(&g, 40, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_is_deterministic_and_well_formed() {
        let dims = Dims::new(140, 48, 48);
        let (a, la) = make_phantom(3, 7, dims).unwrap();
        let (b, lb) = make_phantom(3, 7, dims).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.labels_present(), (0..=7).collect::<Vec<u8>>());
        for (v, l) in a.voxels().iter().zip(la.voxels()) {
            if *l > 0.0 {
                assert!(*v >= 1000.0);
            }
        }
        assert!(make_phantom(3, 7, Dims::new(30, 48, 48)).is_err());
    }
}
