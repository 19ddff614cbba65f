//! Per-column reductions: each output pixel is a statistic of the samples
//! along the viewing axis.

use super::{ProjParams, ProjectionOp};

pub(super) fn reduce(op: ProjectionOp, col: &[f64], params: &ProjParams, scratch: &mut Vec<f64>) -> f64 {
    use ProjectionOp::*;
    let n = col.len() as f64;
    match op {
        Max => col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Min => col.iter().copied().fold(f64::INFINITY, f64::min),
        Sum => col.iter().sum(),
        Mean => mean(col),
        Energy => col.iter().map(|v| v * v).sum(),
        Variance => central_moment(col, mean(col), 2),
        Stddev => central_moment(col, mean(col), 2).sqrt(),
        Difference => col.windows(2).map(|w| (w[1] - w[0]).abs()).sum(),
        Skewness => {
            let mu = mean(col);
            let sigma = central_moment(col, mu, 2).sqrt();
            if sigma <= params.epsilon {
                0.0
            } else {
                central_moment(col, mu, 3) / (sigma * sigma * sigma)
            }
        }
        Kurtosis => {
            let mu = mean(col);
            let m2 = central_moment(col, mu, 2);
            if m2.sqrt() <= params.epsilon {
                0.0
            } else {
                central_moment(col, mu, 4) / (m2 * m2)
            }
        }
        Median => {
            sorted_into(col, scratch);
            percentile_sorted(scratch, 50.0)
        }
        PercentileRange => {
            sorted_into(col, scratch);
            let (lo, hi) = params.percentiles;
            percentile_sorted(scratch, hi) - percentile_sorted(scratch, lo)
        }
        Nonlinear => col.iter().map(|&v| signed_power(v, params.power)).sum::<f64>() / n,
        Standardized => {
            let mu = mean(col);
            let sigma = central_moment(col, mu, 2).sqrt();
            if sigma <= params.epsilon {
                0.0
            } else {
                col.iter().map(|v| (v - mu) / sigma).sum::<f64>() / n
            }
        }
        Zscore => {
            let mu = mean(col);
            let sigma = central_moment(col, mu, 2).sqrt();
            if sigma <= params.epsilon {
                0.0
            } else {
                col.iter().map(|v| ((v - mu) / sigma).abs()).fold(0.0, f64::max)
            }
        }
        Inversion => {
            let top = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            col.iter().map(|v| top - v).sum::<f64>() / n
        }
        GradientMax | GradientMagnitude | Edge | Gabor | Frangi | Hessian | Wavelet | Diffusion
        | TextureEnergy | Sobel | TotalVariation => {
            unreachable!("{} is a slice-filter operator", op.name())
        }
    }
}

/// Operators that [`reduce_streaming`] handles.
pub(super) fn streams(op: ProjectionOp) -> bool {
    use ProjectionOp::*;
    matches!(op, Max | Min | Sum | Mean | Energy | Variance | Stddev)
}

/// Same result as [`reduce`] on every column of a row, reading the row one
/// depth step at a time. `segment(k)` holds sample `k` of each column.
pub(super) fn reduce_streaming<'a>(op: ProjectionOp, n: usize, segment: impl Fn(usize) -> &'a [f64], out: &mut [f64]) {
    use ProjectionOp::*;
    let fold = |init: f64, out: &mut [f64], f: &dyn Fn(f64, f64) -> f64| {
        out.fill(init);
        for k in 0..n {
            for (o, &v) in out.iter_mut().zip(segment(k)) {
                *o = f(*o, v);
            }
        }
    };
    let nf = n as f64;
    match op {
        Max => fold(f64::NEG_INFINITY, out, &f64::max),
        Min => fold(f64::INFINITY, out, &f64::min),
        Sum => fold(0.0, out, &|a, v| a + v),
        Mean => {
            fold(0.0, out, &|a, v| a + v);
            out.iter_mut().for_each(|o| *o /= nf);
        }
        Energy => fold(0.0, out, &|a, v| a + v * v),
        Variance | Stddev => {
            let mut mu = vec![0.0; out.len()];
            fold(0.0, &mut mu, &|a, v| a + v);
            mu.iter_mut().for_each(|m| *m /= nf);
            out.fill(0.0);
            for k in 0..n {
                for ((o, &v), &m) in out.iter_mut().zip(segment(k)).zip(&mu) {
                    let dv = v - m;
                    *o += dv * dv;
                }
            }
            for o in out.iter_mut() {
                *o /= nf;
                if op == Stddev {
                    *o = o.sqrt();
                }
            }
        }
        _ => unreachable!("{} does not stream", op.name()),
    }
}

#[inline]
fn mean(col: &[f64]) -> f64 {
    col.iter().sum::<f64>() / col.len() as f64
}

#[inline]
fn central_moment(col: &[f64], mu: f64, k: i32) -> f64 {
    col.iter().map(|v| (v - mu).powi(k)).sum::<f64>() / col.len() as f64
}

fn sorted_into(col: &[f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(col);
    scratch.sort_unstable_by(f64::total_cmp);
}

/// Linear-interpolated percentile (the "type 7" rule) of sorted data.
pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `v^p`, keeping the sign of `v` when `p` is not an integer.
pub(crate) fn signed_power(v: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() < i32::MAX as f64 {
        v.powi(p as i32)
    } else {
        v.signum() * v.abs().powf(p)
    }
}
