//! Overlap and distance metrics, segmentation losses, classification
//! metrics and inter-rater agreement.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask3D;
use crate::par::{self, Exec};
use crate::project::percentile_sorted;
use crate::volgrid::{Dims, Spacing};

fn same_dims(a: Dims, b: Dims) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{a} vs {b}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub iou: f64,
    pub dice: f64,
}

/// IoU and Dice of two binary masks; two empty masks agree perfectly.
pub fn overlap_metrics(pred: &Mask3D, gt: &Mask3D) -> Result<Overlap> {
    same_dims(pred.dims, gt.dims)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(Overlap { iou: 1.0, dice: 1.0 });
    }
    Ok(Overlap {
        iou: tp as f64 / (tp + fp + fn_) as f64,
        dice: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
    })
}

pub const DEFAULT_LOSS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLosses {
    pub dice: f64,
    pub jaccard: f64,
    pub combined: f64,
}

/// Smoothed soft Dice and Jaccard losses over flattened pixels/channels.
pub fn seg_losses(pred: &[f64], gt: &[bool], eps: f64) -> Result<SegLosses> {
    if pred.len() != gt.len() {
        return Err(Error::Arity {
            expected: gt.len(),
            found: pred.len(),
        });
    }
    if let Some(p) = pred.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Value(format!("probability {p} outside [0, 1]")));
    }
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let y = if g { 1.0 } else { 0.0 };
        inter += y * p;
        total += y + p;
    }
    let dice = 1.0 - (2.0 * inter + eps) / (total + eps);
    let jaccard = 1.0 - (inter + eps) / (total - inter + eps);
    Ok(SegLosses {
        dice,
        jaccard,
        combined: (dice + jaccard) / 2.0,
    })
}

/// One pass of the lower-envelope distance transform along a line.
///
/// `f` holds squared distances (`INFINITY` for "no site"); samples are
/// `step` apart. Writes `min_q (step·(p − q))² + f[q]` into `out`.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |i: usize| i as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((fq + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(i) {
            k += 1;
        }
        let d = pos(i) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest foreground
/// voxel of `mask`, in physical units.
pub fn squared_distance_transform(mask: &Mask3D, spacing: Spacing, exec: Exec) -> Vec<f64> {
    let d = mask.dims;
    let mut g: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();

    // x lines are contiguous.
    par::for_each_chunk(exec, &mut g, d.x, |_, line| {
        let src = line.to_vec();
        edt_line(&src, spacing.x, line, &mut Vec::new(), &mut Vec::new());
    });
    // y lines are strided within each slab.
    par::for_each_chunk(exec, &mut g, d.slab_len(), |_, slab| {
        let (mut src, mut dst) = (vec![0.0; d.y], vec![0.0; d.y]);
        let (mut v, mut z) = (Vec::new(), Vec::new());
        for x in 0..d.x {
            for y in 0..d.y {
                src[y] = slab[y * d.x + x];
            }
            edt_line(&src, spacing.y, &mut dst, &mut v, &mut z);
            for y in 0..d.y {
                slab[y * d.x + x] = dst[y];
            }
        }
    });
    if d.z > 1 {
        // z lines: transform column blocks per output row, then scatter back.
        let rows = par::map_indexed(exec, d.y, |y| {
            let (mut src, mut dst) = (vec![0.0; d.z], vec![0.0; d.z]);
            let (mut v, mut zs) = (Vec::new(), Vec::new());
            let mut block = vec![0.0; d.z * d.x];
            for x in 0..d.x {
                for z in 0..d.z {
                    src[z] = g[d.index(z, y, x)];
                }
                edt_line(&src, spacing.z, &mut dst, &mut v, &mut zs);
                for z in 0..d.z {
                    block[z * d.x + x] = dst[z];
                }
            }
            block
        });
        for (y, block) in rows.iter().enumerate() {
            for z in 0..d.z {
                let at = d.index(z, y, 0);
                g[at..at + d.x].copy_from_slice(&block[z * d.x..(z + 1) * d.x]);
            }
        }
    }
    g
}

fn directed_distances(from: &Mask3D, to_sq: &[f64]) -> Vec<f64> {
    from.data
        .iter()
        .zip(to_sq)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

fn p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 95.0)
}

/// 95th-percentile symmetric Hausdorff distance over all foreground voxels.
pub fn hd95(a: &Mask3D, b: &Mask3D, spacing: Spacing) -> Result<f64> {
    hd95_with(a, b, spacing, Exec::default())
}

pub fn hd95_with(a: &Mask3D, b: &Mask3D, spacing: Spacing, exec: Exec) -> Result<f64> {
    same_dims(a.dims, b.dims)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance("HD95 needs two non-empty masks"));
    }
    let to_b = squared_distance_transform(b, spacing, exec);
    let to_a = squared_distance_transform(a, spacing, exec);
    Ok(p95(directed_distances(a, &to_b)).max(p95(directed_distances(b, &to_a))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub iou: f64,
    pub dice: f64,
    pub hd95: f64,
}

/// `IoU/max IoU + Dice/max Dice − HD95/max HD95` per entry. The HD95 term is
/// zero when every entry has HD95 = 0.
pub fn composite_score(entries: &[SegScores]) -> Result<Vec<f64>> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("composite score needs at least one entry"));
    }
    for e in entries {
        if ![e.iou, e.dice, e.hd95].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Value(format!("invalid score entry {e:?}")));
        }
    }
    let max = |f: fn(&SegScores) -> f64| entries.iter().map(f).fold(0.0, f64::max);
    let (mi, md, mh) = (max(|e| e.iou), max(|e| e.dice), max(|e| e.hd95));
    let ratio = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
    Ok(entries
        .iter()
        .map(|e| ratio(e.iou, mi) + ratio(e.dice, md) - ratio(e.hd95, mh))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[bool], pred: &[bool]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Arity {
                expected: truth.len(),
                found: pred.len(),
            });
        }
        let mut c = ConfusionCounts::default();
        for (&t, &p) in truth.iter().zip(pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// A ratio whose denominator may be zero; `undefined` marks a `0/0`
/// reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

impl Rate {
    fn of(num: u64, den: u64) -> Self {
        if den == 0 {
            Rate {
                value: 0.0,
                undefined: true,
            }
        } else {
            Rate {
                value: num as f64 / den as f64,
                undefined: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    pub accuracy: f64,
    pub precision: Rate,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub f1: Rate,
}

pub fn cls_metrics(c: ConfusionCounts) -> Result<ClsMetrics> {
    if c.total() == 0 {
        return Err(Error::EmptyInput("confusion counts are all zero"));
    }
    Ok(ClsMetrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision: Rate::of(c.tp, c.tp + c.fp),
        sensitivity: Rate::of(c.tp, c.tp + c.fn_),
        specificity: Rate::of(c.tn, c.tn + c.fp),
        f1: Rate::of(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}

/// Mann–Whitney AUC with midranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Arity {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Value("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    pub observed: f64,
    pub expected: f64,
    /// Chance agreement was 1, so the ratio was replaced by its limit.
    pub degenerate: bool,
}

pub fn cohen_kappa(a: &[bool], b: &[bool]) -> Result<Kappa> {
    if a.len() != b.len() {
        return Err(Error::Arity {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("kappa needs at least one rated subject"));
    }
    // Integer form: kappa = (n·agree − Σ marg) / (n² − Σ marg), one rounding.
    let n = a.len() as u128;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as u128;
    let pos_a = a.iter().filter(|&&x| x).count() as u128;
    let pos_b = b.iter().filter(|&&x| x).count() as u128;
    let marg = pos_a * pos_b + (n - pos_a) * (n - pos_b);
    let observed = agree as f64 / n as f64;
    let expected = marg as f64 / (n * n) as f64;
    if marg == n * n {
        return Ok(Kappa {
            kappa: if agree == n { 1.0 } else { 0.0 },
            observed,
            expected,
            degenerate: true,
        });
    }
    Ok(Kappa {
        kappa: (n as f64 * agree as f64 - marg as f64) / ((n * n - marg) as f64),
        observed,
        expected,
        degenerate: false,
    })
}

fn chance_corrected(observed: f64, expected: f64) -> Kappa {
    let degenerate = (1.0 - expected).abs() < 1e-12;
    let kappa = if degenerate {
        if (1.0 - observed).abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        (observed - expected) / (1.0 - expected)
    };
    Kappa {
        kappa,
        observed,
        expected,
        degenerate,
    }
}

/// Fleiss' kappa from a subjects × categories count matrix with `n` raters.
pub fn fleiss_kappa(counts: &[Vec<u32>], n: u32) -> Result<Kappa> {
    if counts.is_empty() {
        return Err(Error::EmptyInput("Fleiss kappa needs at least one subject"));
    }
    if n < 2 {
        return Err(Error::Param(format!("Fleiss kappa needs at least 2 raters, got {n}")));
    }
    let cats = counts[0].len();
    let mut totals = vec![0u64; cats];
    let mut p_bar = 0.0;
    let nf = n as f64;
    for (row, r) in counts.iter().enumerate() {
        let sum: u32 = r.iter().sum();
        if r.len() != cats || sum != n {
            return Err(Error::InconsistentRows {
                row,
                expected: n,
                found: sum,
            });
        }
        let sq: f64 = r.iter().map(|&c| (c as f64) * (c as f64)).sum();
        p_bar += (sq - nf) / (nf * (nf - 1.0));
        for (t, &c) in totals.iter_mut().zip(r) {
            *t += c as u64;
        }
    }
    let subjects = counts.len() as f64;
    p_bar /= subjects;
    let p_e: f64 = totals
        .iter()
        .map(|&t| {
            let p = t as f64 / (subjects * nf);
            p * p
        })
        .sum();
    Ok(chance_corrected(p_bar, p_e))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct RatingRow {
    subject_id: String,
    rater_id: String,
    label: u32,
}

/// Long-form ratings: every rater labels every subject exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratings {
    pub subjects: Vec<String>,
    pub raters: Vec<String>,
    /// Sorted category labels.
    pub categories: Vec<u32>,
    /// `labels[rater][subject]`.
    pub labels: Vec<Vec<u32>>,
}

impl Ratings {
    /// Read the `subject_id,rater_id,label` CSV.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut cells: BTreeMap<(String, String), u32> = BTreeMap::new();
        let (mut subjects, mut raters, mut categories) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
        for row in csv::Reader::from_reader(reader).deserialize() {
            let r: RatingRow = row?;
            subjects.insert(r.subject_id.clone());
            raters.insert(r.rater_id.clone());
            categories.insert(r.label);
            if cells.insert((r.rater_id.clone(), r.subject_id.clone()), r.label).is_some() {
                return Err(Error::Format(format!(
                    "rater {} labels subject {} twice",
                    r.rater_id, r.subject_id
                )));
            }
        }
        if cells.is_empty() {
            return Err(Error::EmptyInput("ratings file has no rows"));
        }
        let subjects: Vec<String> = subjects.into_iter().collect();
        let raters: Vec<String> = raters.into_iter().collect();
        let mut labels = Vec::with_capacity(raters.len());
        for r in &raters {
            let mut row = Vec::with_capacity(subjects.len());
            for s in &subjects {
                let v = cells.get(&(r.clone(), s.clone())).ok_or_else(|| {
                    Error::Format(format!("rater {r} has no label for subject {s}"))
                })?;
                row.push(*v);
            }
            labels.push(row);
        }
        Ok(Ratings {
            subjects,
            raters,
            categories: categories.into_iter().collect(),
            labels,
        })
    }

    /// Subjects × categories counts for Fleiss' kappa.
    pub fn count_matrix(&self) -> Vec<Vec<u32>> {
        (0..self.subjects.len())
            .map(|s| {
                self.categories
                    .iter()
                    .map(|c| self.labels.iter().filter(|r| r[s] == *c).count() as u32)
                    .collect()
            })
            .collect()
    }

    pub fn fleiss(&self) -> Result<Kappa> {
        fleiss_kappa(&self.count_matrix(), self.raters.len() as u32)
    }

    /// Cohen's kappa for exactly two raters on binary labels.
    pub fn cohen(&self) -> Result<Kappa> {
        if self.raters.len() != 2 {
            return Err(Error::Arity {
                expected: 2,
                found: self.raters.len(),
            });
        }
        if let Some(c) = self.categories.iter().find(|&&c| c > 1) {
            return Err(Error::Value(format!("label {c} is not binary")));
        }
        let as_bool = |r: &Vec<u32>| r.iter().map(|&v| v == 1).collect::<Vec<_>>();
        cohen_kappa(&as_bool(&self.labels[0]), &as_bool(&self.labels[1]))
    }
}
