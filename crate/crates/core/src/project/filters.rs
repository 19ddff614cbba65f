//! 2D filters applied to each slice in the plane of the projection image.
//!
//! `x` is the image column and `y` the image row. All neighbourhood
//! accesses replicate the border pixel.

use std::f64::consts::PI;

/// Borrowed row-major image.
#[derive(Clone, Copy)]
pub(super) struct Plane<'a> {
    pub h: usize,
    pub w: usize,
    pub data: &'a [f64],
}

impl<'a> Plane<'a> {
    pub fn new(h: usize, w: usize, data: &'a [f64]) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Plane { h, w, data }
    }

    #[inline]
    pub fn at(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = c.clamp(0, self.w as isize - 1) as usize;
        self.data[r * self.w + c]
    }

    fn map(&self, f: impl Fn(isize, isize) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h * self.w);
        for r in 0..self.h as isize {
            for c in 0..self.w as isize {
                out.push(f(r, c));
            }
        }
        out
    }
}

#[inline]
fn sobel_xy(p: &Plane, r: isize, c: isize) -> (f64, f64) {
    let a = |dr, dc| p.at(r + dr, c + dc);
    let gx = (a(-1, 1) + 2.0 * a(0, 1) + a(1, 1)) - (a(-1, -1) + 2.0 * a(0, -1) + a(1, -1));
    let gy = (a(1, -1) + 2.0 * a(1, 0) + a(1, 1)) - (a(-1, -1) + 2.0 * a(-1, 0) + a(-1, 1));
    (gx, gy)
}

pub(super) fn sobel_magnitude(p: &Plane) -> Vec<f64> {
    p.map(|r, c| {
        let (gx, gy) = sobel_xy(p, r, c);
        gx.hypot(gy)
    })
}

/// Central differences inside, one-sided differences on the border, zero
/// along a unit-length axis.
pub(super) fn central_gradient_magnitude(p: &Plane) -> Vec<f64> {
    let diff = |len: usize, i: isize, get: &dyn Fn(isize) -> f64| -> f64 {
        if len < 2 {
            0.0
        } else if i == 0 {
            get(1) - get(0)
        } else if i == len as isize - 1 {
            get(i) - get(i - 1)
        } else {
            (get(i + 1) - get(i - 1)) / 2.0
        }
    };
    p.map(|r, c| {
        let dx = diff(p.w, c, &|cc| p.at(r, cc));
        let dy = diff(p.h, r, &|rr| p.at(rr, c));
        dx.hypot(dy)
    })
}

/// Forward differences, zero past the last row/column.
pub(super) fn forward_gradient_magnitude(p: &Plane) -> Vec<f64> {
    p.map(|r, c| {
        let dx = p.at(r, c + 1) - p.at(r, c);
        let dy = p.at(r + 1, c) - p.at(r, c);
        dx.hypot(dy)
    })
}

#[inline]
fn hessian(p: &Plane, r: isize, c: isize) -> (f64, f64, f64) {
    let v = p.at(r, c);
    let ixx = p.at(r, c + 1) - 2.0 * v + p.at(r, c - 1);
    let iyy = p.at(r + 1, c) - 2.0 * v + p.at(r - 1, c);
    let ixy = (p.at(r + 1, c + 1) - p.at(r + 1, c - 1) - p.at(r - 1, c + 1) + p.at(r - 1, c - 1)) / 4.0;
    (ixx, iyy, ixy)
}

pub(super) fn hessian_determinant(p: &Plane) -> Vec<f64> {
    p.map(|r, c| {
        let (ixx, iyy, ixy) = hessian(p, r, c);
        ixx * iyy - ixy * ixy
    })
}

pub(super) fn texture_energy(p: &Plane) -> Vec<f64> {
    p.map(|r, c| {
        let (ixx, iyy, _) = hessian(p, r, c);
        ixx.hypot(iyy)
    })
}

/// `exp(-λ1²/2β² - λ2²/2γ²)` with Hessian eigenvalues ordered `|λ1| ≤ |λ2|`.
pub(super) fn frangi(p: &Plane, beta: f64, gamma: f64) -> Vec<f64> {
    p.map(|r, c| {
        let (ixx, iyy, ixy) = hessian(p, r, c);
        let half_trace = (ixx + iyy) / 2.0;
        let disc = (((ixx - iyy) / 2.0).powi(2) + ixy * ixy).sqrt();
        let (mut l1, mut l2) = (half_trace - disc, half_trace + disc);
        if l1.abs() > l2.abs() {
            std::mem::swap(&mut l1, &mut l2);
        }
        (-(l1 * l1) / (2.0 * beta * beta) - (l2 * l2) / (2.0 * gamma * gamma)).exp()
    })
}

/// Canny edge map (values 0 or 1): Sobel gradient, four-direction
/// non-maximum suppression, thresholds as fractions of the slice's peak
/// gradient, 8-connected hysteresis.
pub(super) fn canny(p: &Plane, low: f64, high: f64) -> Vec<f64> {
    let (h, w) = (p.h, p.w);
    let mut mag = vec![0.0; h * w];
    let mut angle = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (gx, gy) = sobel_xy(p, r as isize, c as isize);
            mag[r * w + c] = gx.hypot(gy);
            angle[r * w + c] = gy.atan2(gx).to_degrees().rem_euclid(180.0);
        }
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return vec![0.0; h * w];
    }
    let m_at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[r as usize * w + c as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            let a = angle[i];
            let (dr, dc) = if !(22.5..157.5).contains(&a) {
                (0, 1)
            } else if a < 67.5 {
                (1, 1)
            } else if a < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let m = mag[i];
            if m >= m_at(r + dr, c + dc) && m >= m_at(r - dr, c - dc) {
                thin[i] = m;
            }
        }
    }
    let (lo, hi) = (low * peak, high * peak);
    let mut edge = vec![0.0; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= hi).collect();
    for &i in &stack {
        edge[i] = 1.0;
    }
    while let Some(i) = stack.pop() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let j = rr as usize * w + cc as usize;
                if edge[j] == 0.0 && thin[j] >= lo {
                    edge[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

/// Real Gabor kernel bank, one `(2r+1)²` kernel per orientation.
pub(super) struct GaborBank {
    radius: isize,
    kernels: Vec<Vec<f64>>,
}

impl GaborBank {
    pub fn new(wavelength: f64, orientations: usize) -> Self {
        let sigma = 0.56 * wavelength;
        let aspect = 0.5;
        let radius = (3.0 * sigma).ceil() as isize;
        let side = (2 * radius + 1) as usize;
        let kernels = (0..orientations)
            .map(|k| {
                let theta = k as f64 * PI / orientations as f64;
                let (s, c) = theta.sin_cos();
                let mut kernel = Vec::with_capacity(side * side);
                for v in -radius..=radius {
                    for u in -radius..=radius {
                        let (u, v) = (u as f64, v as f64);
                        let xr = u * c + v * s;
                        let yr = -u * s + v * c;
                        let env = (-(xr * xr + aspect * aspect * yr * yr) / (2.0 * sigma * sigma)).exp();
                        kernel.push(env * (2.0 * PI * xr / wavelength).cos());
                    }
                }
                kernel
            })
            .collect();
        GaborBank { radius, kernels }
    }

    /// Mean absolute response over the orientations.
    pub fn apply(&self, p: &Plane) -> Vec<f64> {
        let r0 = self.radius;
        let side = (2 * r0 + 1) as usize;
        let k = self.kernels.len() as f64;
        p.map(|r, c| {
            let mut total = 0.0;
            for kernel in &self.kernels {
                let mut acc = 0.0;
                for dv in -r0..=r0 {
                    let row = &kernel[(dv + r0) as usize * side..];
                    for du in -r0..=r0 {
                        acc += row[(du + r0) as usize] * p.at(r + dv, c + du);
                    }
                }
                total += acc.abs();
            }
            total / k
        })
    }
}

/// Stationary Haar detail energy summed over `levels` dilations.
pub(super) fn haar_detail(p: &Plane, levels: usize) -> Vec<f64> {
    let mut approx = p.data.to_vec();
    let mut out = vec![0.0; p.h * p.w];
    for level in 0..levels {
        let d = 1isize << level;
        let cur = Plane::new(p.h, p.w, &approx);
        let mut next = Vec::with_capacity(approx.len());
        let mut i = 0;
        for r in 0..p.h as isize {
            for c in 0..p.w as isize {
                let a = cur.at(r, c);
                let b = cur.at(r, c + d);
                let e = cur.at(r + d, c);
                let f = cur.at(r + d, c + d);
                let lh = (a + b - e - f) / 2.0;
                let hl = (a - b + e - f) / 2.0;
                let hh = (a - b - e + f) / 2.0;
                out[i] += lh.abs() + hl.abs() + hh.abs();
                next.push((a + b + e + f) / 4.0);
                i += 1;
            }
        }
        approx = next;
    }
    out
}

/// Perona–Malik diffusion with exponential conductance on the four
/// neighbour differences; zero flux across the border.
pub(super) fn perona_malik(p: &Plane, iterations: usize, kappa: f64, dt: f64) -> Vec<f64> {
    let mut cur = p.data.to_vec();
    let conduct = |g: f64| (-(g / kappa).powi(2)).exp();
    for _ in 0..iterations {
        let plane = Plane::new(p.h, p.w, &cur);
        let next = plane.map(|r, c| {
            let v = plane.at(r, c);
            let flux: f64 = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .map(|&(dr, dc)| {
                    let g = plane.at(r + dr, c + dc) - v;
                    conduct(g) * g
                })
                .sum();
            v + dt * flux
        });
        cur = next;
    }
    cur
}
