//! Slow reference implementations used to check the engine.
//!
//! Everything here is written from the operator definitions with plain
//! nested loops and no shared code with the library beyond the data types.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::f64::consts::PI;

use spinevox_core::project::{ProjParams, ProjectionOp};
use spinevox_core::volgrid::{Axis, VoxelGrid};

/// Voxel seen at image `(r, c)` on slice `k` of `axis`.
pub fn sample(grid: &VoxelGrid, axis: Axis, r: usize, c: usize, k: usize) -> f64 {
    match axis {
        Axis::Axial => grid.get(k, r, c),
        Axis::Sagittal => grid.get(r, c, k),
        Axis::Coronal => grid.get(r, k, c),
    }
}

pub fn image_shape(grid: &VoxelGrid, axis: Axis) -> (usize, usize, usize) {
    let d = grid.dims();
    match axis {
        Axis::Axial => (d.y, d.x, d.z),
        Axis::Sagittal => (d.z, d.y, d.x),
        Axis::Coronal => (d.z, d.x, d.y),
    }
}

type Img = Vec<Vec<f64>>;

fn px(img: &Img, r: isize, c: isize) -> f64 {
    let h = img.len() as isize;
    let w = img[0].len() as isize;
    img[r.clamp(0, h - 1) as usize][c.clamp(0, w - 1) as usize]
}

fn mean(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

fn moment(v: &[f64], k: i32) -> f64 {
    let mu = mean(v);
    let mut s = 0.0;
    for x in v {
        s += (x - mu).powi(k);
    }
    s / v.len() as f64
}

/// Percentile by linear interpolation between closest ranks.
pub fn percentile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (s.len() - 1) as f64;
    let below = pos.floor();
    let frac = pos - below;
    let i = below as usize;
    if i + 1 >= s.len() {
        s[i]
    } else {
        s[i] * (1.0 - frac) + s[i + 1] * frac
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn column_stat(op: ProjectionOp, col: &[f64], p: &ProjParams) -> f64 {
    use ProjectionOp::*;
    let n = col.len() as f64;
    let sigma = moment(col, 2).sqrt();
    let degenerate = sigma <= p.epsilon;
    match op {
        Max => col.iter().cloned().fold(f64::MIN, f64::max),
        Min => col.iter().cloned().fold(f64::MAX, f64::min),
        Sum => col.iter().sum(),
        Mean => mean(col),
        Energy => col.iter().map(|v| v * v).sum(),
        Variance => moment(col, 2),
        Stddev => sigma,
        Difference => {
            let mut s = 0.0;
            for z in 1..col.len() {
                s += (col[z] - col[z - 1]).abs();
            }
            s
        }
        Skewness if degenerate => 0.0,
        Skewness => moment(col, 3) / sigma.powi(3),
        Kurtosis if degenerate => 0.0,
        Kurtosis => moment(col, 4) / moment(col, 2).powi(2),
        Median => median(col),
        PercentileRange => percentile(col, p.percentiles.1) - percentile(col, p.percentiles.0),
        Nonlinear => {
            let pw = |v: f64| {
                if p.power.fract() == 0.0 {
                    v.powi(p.power as i32)
                } else {
                    v.signum() * v.abs().powf(p.power)
                }
            };
            col.iter().map(|&v| pw(v)).sum::<f64>() / n
        }
        Standardized if degenerate => 0.0,
        Standardized => {
            let mu = mean(col);
            col.iter().map(|v| (v - mu) / sigma).sum::<f64>() / n
        }
        Zscore if degenerate => 0.0,
        Zscore => {
            let mu = mean(col);
            col.iter().map(|v| ((v - mu) / sigma).abs()).fold(0.0, f64::max)
        }
        Inversion => {
            let top = col.iter().cloned().fold(f64::MIN, f64::max);
            col.iter().map(|v| top - v).sum::<f64>() / n
        }
        _ => unreachable!(),
    }
}

/// Sobel as smoothing `[1, 2, 1]` across the derivative direction times a
/// central difference along it.
fn sobel(img: &Img, r: usize, c: usize) -> (f64, f64) {
    let (r, c) = (r as isize, c as isize);
    let smooth = [(-1isize, 1.0), (0, 2.0), (1, 1.0)];
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (o, wgt) in smooth {
        gx += wgt * (px(img, r + o, c + 1) - px(img, r + o, c - 1));
        gy += wgt * (px(img, r + 1, c + o) - px(img, r - 1, c + o));
    }
    (gx, gy)
}

fn second_derivatives(img: &Img, r: usize, c: usize) -> (f64, f64, f64) {
    let (r, c) = (r as isize, c as isize);
    let f = |dr: isize, dc: isize| px(img, r + dr, c + dc);
    let ixx = f(0, 1) + f(0, -1) - 2.0 * f(0, 0);
    let iyy = f(1, 0) + f(-1, 0) - 2.0 * f(0, 0);
    let ixy = (f(1, 1) + f(-1, -1) - f(1, -1) - f(-1, 1)) / 4.0;
    (ixx, iyy, ixy)
}

fn central_diff(line: &[f64], i: usize) -> f64 {
    let n = line.len();
    if n == 1 {
        0.0
    } else if i == 0 {
        line[1] - line[0]
    } else if i == n - 1 {
        line[n - 1] - line[n - 2]
    } else {
        0.5 * (line[i + 1] - line[i - 1])
    }
}

fn canny(img: &Img, lo_frac: f64, hi_frac: f64) -> Img {
    let (h, w) = (img.len(), img[0].len());
    let mut mag = vec![vec![0.0; w]; h];
    let mut dir = vec![vec![(0isize, 0isize); w]; h];
    for r in 0..h {
        for c in 0..w {
            let (gx, gy) = sobel(img, r, c);
            mag[r][c] = gx.hypot(gy);
            let mut deg = gy.atan2(gx) * 180.0 / PI;
            if deg < 0.0 {
                deg += 180.0;
            }
            if deg >= 180.0 {
                deg -= 180.0;
            }
            dir[r][c] = if !(22.5..157.5).contains(&deg) {
                (0, 1)
            } else if deg < 67.5 {
                (1, 1)
            } else if deg < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
        }
    }
    let peak = mag.iter().flatten().cloned().fold(0.0, f64::max);
    let mut edges = vec![vec![0.0; w]; h];
    if peak <= 0.0 {
        return edges;
    }
    let neighbour = |r: isize, c: isize| -> f64 {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            mag[r as usize][c as usize]
        } else {
            0.0
        }
    };
    let mut kept = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = dir[r][c];
            let (ri, ci) = (r as isize, c as isize);
            let m = mag[r][c];
            if m >= neighbour(ri + dr, ci + dc) && m >= neighbour(ri - dr, ci - dc) {
                kept[r][c] = m;
            }
        }
    }
    let (lo, hi) = (lo_frac * peak, hi_frac * peak);
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if kept[r][c] >= hi {
                edges[r][c] = 1.0;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                if edges[rr][cc] == 0.0 && kept[rr][cc] >= lo {
                    edges[rr][cc] = 1.0;
                    queue.push_back((rr, cc));
                }
            }
        }
    }
    edges
}

fn gabor(img: &Img, r: usize, c: usize, wavelength: f64, orientations: usize) -> f64 {
    let sigma = 0.56 * wavelength;
    let gamma = 0.5;
    let reach = (3.0 * sigma).ceil() as isize;
    let mut total = 0.0;
    for k in 0..orientations {
        let theta = PI * k as f64 / orientations as f64;
        let mut resp = 0.0;
        for v in -reach..=reach {
            for u in -reach..=reach {
                let xp = u as f64 * theta.cos() + v as f64 * theta.sin();
                let yp = v as f64 * theta.cos() - u as f64 * theta.sin();
                let g = (-(xp * xp + gamma * gamma * yp * yp) / (2.0 * sigma * sigma)).exp()
                    * (2.0 * PI * xp / wavelength).cos();
                resp += g * px(img, r as isize + v, c as isize + u);
            }
        }
        total += resp.abs();
    }
    total / orientations as f64
}

/// Undecimated Haar transform: separable low/high taps at dilation `2^l`.
fn haar(img: &Img, levels: usize) -> Img {
    let (h, w) = (img.len(), img[0].len());
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let low = [s, s];
    let high = [s, -s];
    let mut approx = img.clone();
    let mut out = vec![vec![0.0; w]; h];
    for l in 0..levels {
        let d = 1isize << l;
        let band = |a: &Img, fy: &[f64; 2], fx: &[f64; 2], r: usize, c: usize| -> f64 {
            let mut acc = 0.0;
            for (i, wy) in fy.iter().enumerate() {
                for (j, wx) in fx.iter().enumerate() {
                    acc += wy * wx * px(a, r as isize + i as isize * d, c as isize + j as isize * d);
                }
            }
            acc
        };
        let mut next = vec![vec![0.0; w]; h];
        for r in 0..h {
            for c in 0..w {
                let lh = band(&approx, &high, &low, r, c);
                let hl = band(&approx, &low, &high, r, c);
                let hh = band(&approx, &high, &high, r, c);
                out[r][c] += lh.abs() + hl.abs() + hh.abs();
                next[r][c] = band(&approx, &low, &low, r, c) / 2.0;
            }
        }
        approx = next;
    }
    out
}

fn diffuse(img: &Img, iterations: usize, kappa: f64, dt: f64) -> Img {
    let (h, w) = (img.len(), img[0].len());
    let mut cur = img.clone();
    for _ in 0..iterations {
        let mut next = cur.clone();
        for r in 0..h {
            for c in 0..w {
                let centre = cur[r][c];
                let mut flux = 0.0;
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let grad = px(&cur, r as isize + dr, c as isize + dc) - centre;
                    flux += (-(grad / kappa) * (grad / kappa)).exp() * grad;
                }
                next[r][c] = centre + dt * flux;
            }
        }
        cur = next;
    }
    cur
}

fn slice_response(op: ProjectionOp, img: &Img, p: &ProjParams) -> Img {
    use ProjectionOp::*;
    let (h, w) = (img.len(), img[0].len());
    let per_pixel = |f: &dyn Fn(usize, usize) -> f64| -> Img {
        (0..h).map(|r| (0..w).map(|c| f(r, c)).collect()).collect()
    };
    match op {
        GradientMax | Sobel => per_pixel(&|r, c| {
            let (gx, gy) = sobel(img, r, c);
            gx.hypot(gy)
        }),
        GradientMagnitude => per_pixel(&|r, c| {
            let column: Vec<f64> = (0..h).map(|rr| img[rr][c]).collect();
            central_diff(&img[r], c).hypot(central_diff(&column, r))
        }),
        TotalVariation => per_pixel(&|r, c| {
            let (ri, ci) = (r as isize, c as isize);
            let dx = px(img, ri, ci + 1) - img[r][c];
            let dy = px(img, ri + 1, ci) - img[r][c];
            dx.hypot(dy)
        }),
        Hessian => per_pixel(&|r, c| {
            let (ixx, iyy, ixy) = second_derivatives(img, r, c);
            ixx * iyy - ixy * ixy
        }),
        TextureEnergy => per_pixel(&|r, c| {
            let (ixx, iyy, _) = second_derivatives(img, r, c);
            (ixx * ixx + iyy * iyy).sqrt()
        }),
        Frangi => per_pixel(&|r, c| {
            let (ixx, iyy, ixy) = second_derivatives(img, r, c);
            let tr = ixx + iyy;
            let det = ixx * iyy - ixy * ixy;
            let root = (tr * tr / 4.0 - det).max(0.0).sqrt();
            let (a, b) = (tr / 2.0 + root, tr / 2.0 - root);
            let (l1, l2) = if a.abs() <= b.abs() { (a, b) } else { (b, a) };
            (-l1 * l1 / (2.0 * p.frangi_beta.powi(2)) - l2 * l2 / (2.0 * p.frangi_gamma.powi(2))).exp()
        }),
        Edge => canny(img, p.canny_thresholds.0, p.canny_thresholds.1),
        Gabor => per_pixel(&|r, c| gabor(img, r, c, p.gabor_wavelength, p.gabor_orientations)),
        Wavelet => haar(img, p.wavelet_level),
        Diffusion => diffuse(img, p.diffusion_iterations, p.diffusion_kappa, p.diffusion_dt),
        _ => unreachable!(),
    }
}

/// Row-major projection image of `grid` along `axis`.
pub fn naive_project(grid: &VoxelGrid, axis: Axis, op: ProjectionOp, p: &ProjParams) -> Vec<f64> {
    let (h, w, n) = image_shape(grid, axis);
    let mut out = vec![0.0; h * w];
    if op.is_slice_filter() {
        for k in 0..n {
            let img: Img = (0..h).map(|r| (0..w).map(|c| sample(grid, axis, r, c, k)).collect()).collect();
            let resp = slice_response(op, &img, p);
            for r in 0..h {
                for c in 0..w {
                    let o = &mut out[r * w + c];
                    if op == ProjectionOp::GradientMax {
                        *o = if k == 0 { resp[r][c] } else { o.max(resp[r][c]) };
                    } else {
                        *o += resp[r][c];
                    }
                }
            }
        }
    } else {
        for r in 0..h {
            for c in 0..w {
                let col: Vec<f64> = (0..n).map(|k| sample(grid, axis, r, c, k)).collect();
                out[r * w + c] = column_stat(op, &col, p);
            }
        }
    }
    out
}

/// Relative error with a unit floor on the scale.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}
