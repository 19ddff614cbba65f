//! Orthogonal projections of a voxel grid to a 2D image.
//!
//! Two families of operators exist. Column operators reduce the samples
//! along the viewing axis at each pixel (mean, variance, energy, ...).
//! Slice-filter operators run a 2D filter over every slice perpendicular to
//! the viewing axis and accumulate the filtered slices (sum, or max for
//! `gradient_max`).
//!
//! Work is split by output row for column operators and by fixed groups of
//! slices for filter operators; partial results are combined in slice
//! order, so the output does not depend on the thread schedule.

mod column;
mod filters;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::volgrid::{Axis, Dims, GridKind, VoxelGrid};

use filters::Plane;

pub(crate) use column::percentile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionOp {
    Max,
    Mean,
    Sum,
    GradientMax,
    Variance,
    Difference,
    Energy,
    GradientMagnitude,
    Kurtosis,
    Median,
    PercentileRange,
    Skewness,
    Stddev,
    Edge,
    Gabor,
    Frangi,
    Hessian,
    Wavelet,
    Diffusion,
    Nonlinear,
    TextureEnergy,
    Standardized,
    Inversion,
    Sobel,
    Zscore,
    TotalVariation,
    Min,
}

impl ProjectionOp {
    pub const ALL: [ProjectionOp; 27] = {
        use ProjectionOp::*;
        [
            Max,
            Mean,
            Sum,
            GradientMax,
            Variance,
            Difference,
            Energy,
            GradientMagnitude,
            Kurtosis,
            Median,
            PercentileRange,
            Skewness,
            Stddev,
            Edge,
            Gabor,
            Frangi,
            Hessian,
            Wavelet,
            Diffusion,
            Nonlinear,
            TextureEnergy,
            Standardized,
            Inversion,
            Sobel,
            Zscore,
            TotalVariation,
            Min,
        ]
    };

    pub fn name(self) -> &'static str {
        use ProjectionOp::*;
        match self {
            Max => "max",
            Mean => "mean",
            Sum => "sum",
            GradientMax => "gradient_max",
            Variance => "variance",
            Difference => "difference",
            Energy => "energy",
            GradientMagnitude => "gradient_magnitude",
            Kurtosis => "kurtosis",
            Median => "median",
            PercentileRange => "percentile_range",
            Skewness => "skewness",
            Stddev => "stddev",
            Edge => "edge",
            Gabor => "gabor",
            Frangi => "frangi",
            Hessian => "hessian",
            Wavelet => "wavelet",
            Diffusion => "diffusion",
            Nonlinear => "nonlinear",
            TextureEnergy => "texture_energy",
            Standardized => "standardized",
            Inversion => "inversion",
            Sobel => "sobel",
            Zscore => "zscore",
            TotalVariation => "total_variation",
            Min => "min",
        }
    }

    /// Operators that run a 2D filter per slice rather than a column statistic.
    pub fn is_slice_filter(self) -> bool {
        use ProjectionOp::*;
        matches!(
            self,
            GradientMax
                | GradientMagnitude
                | Edge
                | Gabor
                | Frangi
                | Hessian
                | Wavelet
                | Diffusion
                | TextureEnergy
                | Sobel
                | TotalVariation
        )
    }

    /// Operators that are undefined with a single sample along the axis.
    pub fn needs_depth(self) -> bool {
        use ProjectionOp::*;
        matches!(
            self,
            Variance | Stddev | Skewness | Kurtosis | Difference | PercentileRange | Standardized | Zscore
        )
    }
}

impl fmt::Display for ProjectionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        ProjectionOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown projection operator `{s}`")))
    }
}

/// Tunables for the parameterised operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjParams {
    /// Exponent of the nonlinear enhancement operator.
    pub power: f64,
    /// Lower and upper percentile of `percentile_range`.
    pub percentiles: (f64, f64),
    pub frangi_beta: f64,
    pub frangi_gamma: f64,
    pub gabor_wavelength: f64,
    pub gabor_orientations: usize,
    pub wavelet_level: usize,
    pub diffusion_iterations: usize,
    pub diffusion_kappa: f64,
    pub diffusion_dt: f64,
    /// Standard deviations at or below this count as zero.
    pub epsilon: f64,
    /// Canny hysteresis thresholds as fractions of the slice's peak gradient.
    pub canny_thresholds: (f64, f64),
}

impl Default for ProjParams {
    fn default() -> Self {
        ProjParams {
            power: 2.0,
            percentiles: (5.0, 95.0),
            frangi_beta: 0.5,
            frangi_gamma: 15.0,
            gabor_wavelength: 8.0,
            gabor_orientations: 4,
            wavelet_level: 1,
            diffusion_iterations: 10,
            diffusion_kappa: 30.0,
            diffusion_dt: 0.15,
            epsilon: 1e-8,
            canny_thresholds: (0.1, 0.3),
        }
    }
}

impl ProjParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("power", self.power),
            ("frangi_beta", self.frangi_beta),
            ("frangi_gamma", self.frangi_gamma),
            ("gabor_wavelength", self.gabor_wavelength),
            ("diffusion_kappa", self.diffusion_kappa),
            ("diffusion_dt", self.diffusion_dt),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        let (lo, hi) = self.percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::Param(format!("percentiles must satisfy 0 <= low < high <= 100, got ({lo}, {hi})")));
        }
        let (cl, ch) = self.canny_thresholds;
        if !(cl > 0.0 && cl <= ch && ch <= 1.0) {
            return Err(Error::Param(format!("canny thresholds must satisfy 0 < low <= high <= 1, got ({cl}, {ch})")));
        }
        if self.gabor_orientations == 0 || self.wavelet_level == 0 {
            return Err(Error::Param("gabor_orientations and wavelet_level must be at least 1".into()));
        }
        Ok(())
    }
}

/// A projected image with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub axis: Axis,
    pub op: ProjectionOp,
    pub source_dims: Dims,
}

impl ProjImage {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

pub fn project(grid: &VoxelGrid, axis: Axis, op: ProjectionOp, params: &ProjParams) -> Result<ProjImage> {
    project_with(grid, axis, op, params, Exec::default())
}

pub fn project_with(
    grid: &VoxelGrid,
    axis: Axis,
    op: ProjectionOp,
    params: &ProjParams,
    exec: Exec,
) -> Result<ProjImage> {
    params.validate()?;
    if grid.kind() == GridKind::Label && !matches!(op, ProjectionOp::Max | ProjectionOp::Min) {
        return Err(Error::Kind(format!("operator `{op}` is not defined for label grids")));
    }
    let dims = grid.dims();
    let depth = axis.depth(dims);
    if op.needs_depth() && depth < 2 {
        return Err(Error::InsufficientDepth { op: op.name(), depth });
    }
    let pixels = if op.is_slice_filter() {
        project_filtered(grid, axis, op, params, exec)
    } else {
        project_columns(grid, axis, op, params, exec)
    };
    let (height, width) = axis.image_dims(dims);
    Ok(ProjImage {
        height,
        width,
        pixels,
        axis,
        op,
        source_dims: dims,
    })
}

fn project_columns(grid: &VoxelGrid, axis: Axis, op: ProjectionOp, params: &ProjParams, exec: Exec) -> Vec<f64> {
    let d = grid.dims();
    let (h, w) = axis.image_dims(d);
    let n = axis.depth(d);
    let vox = grid.voxels();
    let mut out = vec![0.0; h * w];
    if axis != Axis::Sagittal && column::streams(op) {
        // Depth steps are contiguous segments of the output row; fold them in
        // order instead of transposing.
        par::for_each_chunk(exec, &mut out, w, |row, dst| {
            let segment = |k: usize| {
                let start = match axis {
                    Axis::Axial => d.index(k, row, 0),
                    _ => d.index(row, k, 0),
                };
                &vox[start..start + w]
            };
            column::reduce_streaming(op, n, segment, dst);
        });
        return out;
    }
    par::for_each_chunk(exec, &mut out, w, |row, dst| {
        let mut scratch = Vec::with_capacity(n);
        match axis {
            // Columns are contiguous runs along x.
            Axis::Sagittal => {
                for (col, px) in dst.iter_mut().enumerate() {
                    let start = d.index(row, col, 0);
                    *px = column::reduce(op, &vox[start..start + n], params, &mut scratch);
                }
            }
            // Each depth step contributes one contiguous segment of the
            // output row; transpose the block so every column is contiguous.
            Axis::Axial | Axis::Coronal => {
                let mut block = vec![0.0; w * n];
                for k in 0..n {
                    let start = match axis {
                        Axis::Axial => d.index(k, row, 0),
                        _ => d.index(row, k, 0),
                    };
                    for (col, &v) in vox[start..start + w].iter().enumerate() {
                        block[col * n + k] = v;
                    }
                }
                for (col, px) in dst.iter_mut().enumerate() {
                    *px = column::reduce(op, &block[col * n..(col + 1) * n], params, &mut scratch);
                }
            }
        }
    });
    out
}

/// Slice `k` perpendicular to `axis`, oriented like the projection image.
fn extract_slice(grid: &VoxelGrid, axis: Axis, k: usize) -> Vec<f64> {
    let d = grid.dims();
    match axis {
        Axis::Axial => grid.slab(k).to_vec(),
        Axis::Coronal => {
            let mut out = Vec::with_capacity(d.z * d.x);
            for z in 0..d.z {
                let start = d.index(z, k, 0);
                out.extend_from_slice(&grid.voxels()[start..start + d.x]);
            }
            out
        }
        Axis::Sagittal => {
            let mut out = Vec::with_capacity(d.z * d.y);
            for z in 0..d.z {
                for y in 0..d.y {
                    out.push(grid.get(z, y, k));
                }
            }
            out
        }
    }
}

const SLICE_GROUP: usize = 4;

fn project_filtered(grid: &VoxelGrid, axis: Axis, op: ProjectionOp, params: &ProjParams, exec: Exec) -> Vec<f64> {
    use ProjectionOp::*;
    let d = grid.dims();
    let (h, w) = axis.image_dims(d);
    let n = axis.depth(d);
    let gabor = (op == Gabor).then(|| filters::GaborBank::new(params.gabor_wavelength, params.gabor_orientations));
    let use_max = op == GradientMax;

    let filter = |k: usize| -> Vec<f64> {
        let slice = extract_slice(grid, axis, k);
        let p = Plane::new(h, w, &slice);
        match op {
            GradientMax | Sobel => filters::sobel_magnitude(&p),
            GradientMagnitude => filters::central_gradient_magnitude(&p),
            TotalVariation => filters::forward_gradient_magnitude(&p),
            TextureEnergy => filters::texture_energy(&p),
            Hessian => filters::hessian_determinant(&p),
            Frangi => filters::frangi(&p, params.frangi_beta, params.frangi_gamma),
            Edge => filters::canny(&p, params.canny_thresholds.0, params.canny_thresholds.1),
            Gabor => gabor.as_ref().expect("gabor bank").apply(&p),
            Wavelet => filters::haar_detail(&p, params.wavelet_level),
            Diffusion => filters::perona_malik(&p, params.diffusion_iterations, params.diffusion_kappa, params.diffusion_dt),
            _ => unreachable!("{op} is a column operator"),
        }
    };
    let combine = |acc: &mut Vec<f64>, next: &[f64]| {
        for (a, b) in acc.iter_mut().zip(next) {
            if use_max {
                *a = a.max(*b);
            } else {
                *a += *b;
            }
        }
    };

    let groups = n.div_ceil(SLICE_GROUP);
    let partials = par::map_indexed(exec, groups, |g| {
        let lo = g * SLICE_GROUP;
        let hi = (lo + SLICE_GROUP).min(n);
        let mut acc = filter(lo);
        for k in lo + 1..hi {
            combine(&mut acc, &filter(k));
        }
        acc
    });
    let mut iter = partials.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![0.0; h * w]);
    for p in iter {
        combine(&mut acc, &p);
    }
    acc
}

// ---------------------------------------------------------------------------
// 16-bit PGM with JSON sidecar

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjSidecar {
    min: f64,
    max: f64,
    axis: Axis,
    operator: ProjectionOp,
    source_dims: Dims,
}

/// Sidecar path for an artifact: `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write a binary 16-bit PGM after min–max quantisation, plus a JSON
/// sidecar holding the range and provenance.
pub fn save_proj(img: &ProjImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = img.pixels.iter().find(|v| !v.is_finite()) {
        return Err(Error::Value(format!("projection pixel {bad} cannot be quantised")));
    }
    if img.pixels.len() != img.height * img.width || img.pixels.is_empty() {
        return Err(Error::Shape(format!(
            "{} pixels for a {}x{} image",
            img.pixels.len(),
            img.height,
            img.width
        )));
    }
    let min = img.pixels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = img.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut bytes = Vec::with_capacity(32 + 2 * img.pixels.len());
    write!(bytes, "P5\n{} {}\n65535\n", img.width, img.height).expect("write to vec");
    for &v in &img.pixels {
        let q = if range > 0.0 {
            ((v - min) / range * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = ProjSidecar {
        min,
        max,
        axis: img.axis,
        operator: img.op,
        source_dims: img.source_dims,
    };
    let side_path = sidecar_path(path);
    fs::write(&side_path, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(side_path, e))
}

pub fn load_proj(path: impl AsRef<Path>) -> Result<ProjImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side_path = sidecar_path(path);
    let side: ProjSidecar =
        serde_json::from_slice(&fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?)?;
    let (width, height, maxval, offset) = parse_pgm_header(&bytes)?;
    if maxval != 65535 {
        return Err(Error::Format(format!("expected 16-bit PGM (maxval 65535), got {maxval}")));
    }
    let body = &bytes[offset..];
    let expected = 2 * width * height;
    if body.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: body.len(),
        });
    }
    let range = side.max - side.min;
    let pixels = body[..expected]
        .chunks_exact(2)
        .map(|c| {
            let q = u16::from_be_bytes([c[0], c[1]]) as f64;
            if range > 0.0 {
                side.min + q / 65535.0 * range
            } else {
                side.min
            }
        })
        .collect();
    Ok(ProjImage {
        height,
        width,
        pixels,
        axis: side.axis,
        op: side.operator,
        source_dims: side.source_dims,
    })
}

/// Returns `(width, height, maxval, body offset)`.
fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("PGM header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PGM header field".into()))?;
    }
    // Exactly one whitespace byte separates the header from the samples.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PGM header not terminated".into()));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}
