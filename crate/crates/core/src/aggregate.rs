//! Stack-level probabilities to vertebra- and patient-level decisions.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacks::STACKS;
use crate::vertmask::CERVICAL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Model {
    /// Raw slice stacks.
    A,
    /// MIP stacks.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub patient_id: String,
    pub vertebra: u8,
    pub stack_index: usize,
    pub model: Model,
    pub prob: f64,
}

/// Per-stack probabilities keyed by `(patient, vertebra, stack, model)`.
#[derive(Debug, Clone, Default)]
pub struct PredictionTable {
    rows: BTreeMap<(String, u8, usize, Model), f64>,
}

impl PredictionTable {
    pub fn insert(&mut self, row: PredictionRow) -> Result<()> {
        if !(1..=CERVICAL as u8).contains(&row.vertebra) {
            return Err(Error::Param(format!("vertebra must be 1..=7, got {}", row.vertebra)));
        }
        if row.stack_index >= STACKS {
            return Err(Error::Param(format!("stack index must be < {STACKS}, got {}", row.stack_index)));
        }
        if !(0.0..=1.0).contains(&row.prob) {
            return Err(Error::Value(format!("probability {} outside [0, 1]", row.prob)));
        }
        let key = (row.patient_id, row.vertebra, row.stack_index, row.model);
        if self.rows.contains_key(&key) {
            return Err(Error::Param(format!("duplicate prediction row {key:?}")));
        }
        self.rows.insert(key, row.prob);
        Ok(())
    }

    /// Read the `patient_id,vertebra,stack_index,model,prob` CSV.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut table = PredictionTable::default();
        for row in csv::Reader::from_reader(reader).deserialize() {
            table.insert(row?)?;
        }
        Ok(table)
    }

    pub fn patients(&self) -> Vec<String> {
        let mut out: Vec<String> = self.rows.keys().map(|k| k.0.clone()).collect();
        out.dedup();
        out
    }

    pub fn has_model(&self, patient: &str, model: Model) -> bool {
        self.rows.keys().any(|k| k.0 == patient && k.3 == model)
    }

    /// The 15 stack probabilities of one vertebra, in stack order.
    pub fn stack_probs(&self, patient: &str, vertebra: u8, model: Model) -> Result<Vec<f64>> {
        (0..STACKS)
            .map(|s| {
                self.rows
                    .get(&(patient.to_string(), vertebra, s, model))
                    .copied()
                    .ok_or_else(|| {
                        Error::Completeness(format!(
                            "patient {patient}: no {model:?} prediction for C{vertebra} stack {s}"
                        ))
                    })
            })
            .collect()
    }
}

fn check_len(values: &[f64], expected: usize) -> Result<()> {
    if values.len() == expected {
        Ok(())
    } else {
        Err(Error::Arity {
            expected,
            found: values.len(),
        })
    }
}

pub const DEFAULT_VOTE_THRESHOLD: f64 = 0.5;

/// Fractured when at least 8 of the 15 stack probabilities exceed `thr`.
pub fn majority_vote(probs: &[f64], thr: f64) -> Result<bool> {
    check_len(probs, STACKS)?;
    Ok(probs.iter().filter(|&&p| p > thr).count() > STACKS / 2)
}

/// Element-wise `weight·A + (1 − weight)·B`.
pub fn score_fuse(a: &[f64], b: &[f64], weight: f64) -> Result<Vec<f64>> {
    check_len(a, STACKS)?;
    check_len(b, STACKS)?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Param(format!("fusion weight {weight} outside [0, 1]")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| weight * x + (1.0 - weight) * y).collect())
}

pub fn patient_if_any(vertebra_decisions: &[bool]) -> Result<bool> {
    if vertebra_decisions.len() != CERVICAL {
        return Err(Error::Arity {
            expected: CERVICAL,
            found: vertebra_decisions.len(),
        });
    }
    Ok(vertebra_decisions.iter().any(|&d| d))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveParams {
    pub thr_low: f64,
    pub thr_high: f64,
    pub d_ref: f64,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        AdaptiveParams {
            thr_low: 0.4,
            thr_high: 0.6,
            d_ref: 0.2,
        }
    }
}

impl AdaptiveParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(in_unit(self.thr_low) && in_unit(self.thr_high) && self.thr_low <= self.thr_high) {
            return Err(Error::Param(format!(
                "need 0 < thr_low <= thr_high < 1, got ({}, {})",
                self.thr_low, self.thr_high
            )));
        }
        if !(self.d_ref.is_finite() && self.d_ref > 0.0) {
            return Err(Error::Param(format!("d_ref must be positive, got {}", self.d_ref)));
        }
        Ok(())
    }

    /// Threshold ramps linearly from `thr_low` at full agreement to
    /// `thr_high` once the mean disagreement reaches `d_ref`.
    pub fn threshold(&self, disagreement: f64) -> f64 {
        self.thr_low + (self.thr_high - self.thr_low) * (disagreement / self.d_ref).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveDecision {
    pub decision: bool,
    pub score: f64,
    pub threshold: f64,
    pub disagreement: f64,
}

/// Patient decision from the per-vertebra stack means of models A and B.
///
/// Each vertebra's unified score is the mean of its two model means; the
/// patient score is the highest unified score. The threshold tightens with
/// the mean absolute gap between the model means.
pub fn patient_adaptive(table: &PredictionTable, patient: &str, params: &AdaptiveParams) -> Result<AdaptiveDecision> {
    params.validate()?;
    let mut score = f64::NEG_INFINITY;
    let mut gap = 0.0;
    for v in 1..=CERVICAL as u8 {
        let mean = |m| -> Result<f64> { Ok(running_mean(&table.stack_probs(patient, v, m)?)) };
        let (ma, mb) = (mean(Model::A)?, mean(Model::B)?);
        score = score.max((ma + mb) / 2.0);
        gap += (ma - mb).abs();
    }
    let disagreement = gap / CERVICAL as f64;
    let threshold = params.threshold(disagreement);
    Ok(AdaptiveDecision {
        decision: score > threshold,
        score,
        threshold,
        disagreement,
    })
}

/// Incremental mean; exact when all values are equal.
fn running_mean(values: &[f64]) -> f64 {
    let mut mean = 0.0;
    for (k, &v) in values.iter().enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

pub const DEFAULT_POS_WEIGHT: f64 = 2.0;
const BCE_EPS: f64 = 1e-7;

/// Class-weighted binary cross-entropy normalised by the total weight.
pub fn weighted_bce(y: &[u8], yhat: &[f64], pos_weight: f64) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyInput("weighted BCE needs at least one sample"));
    }
    if y.len() != yhat.len() {
        return Err(Error::Arity {
            expected: y.len(),
            found: yhat.len(),
        });
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&label, &p) in y.iter().zip(yhat) {
        if label > 1 {
            return Err(Error::Value(format!("label {label} is not 0 or 1")));
        }
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let w = if label == 1 { pos_weight } else { 1.0 };
        let t = label as f64;
        num += w * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        den += w;
    }
    Ok(-num / den)
}

/// One line of the decisions JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub patient_id: String,
    pub vertebra_decisions: Vec<bool>,
    pub patient_if_any: Option<bool>,
    pub patient_adaptive: Option<bool>,
    pub score: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregateMode {
    IfAny,
    Adaptive,
    Both,
}

impl std::str::FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "if-any" => Ok(AggregateMode::IfAny),
            "adaptive" => Ok(AggregateMode::Adaptive),
            "both" => Ok(AggregateMode::Both),
            other => Err(Error::Param(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionParams {
    pub vote_threshold: f64,
    /// Weight of model A when both models are present.
    pub fusion_weight: f64,
    pub adaptive: AdaptiveParams,
}

impl Default for DecisionParams {
    fn default() -> Self {
        DecisionParams {
            vote_threshold: DEFAULT_VOTE_THRESHOLD,
            fusion_weight: 0.5,
            adaptive: AdaptiveParams::default(),
        }
    }
}

/// Vertebra decisions by majority vote over fused probabilities when both
/// models are present, otherwise over the single model's; patient decisions
/// per `mode`.
pub fn decide_patient(
    table: &PredictionTable,
    patient: &str,
    mode: AggregateMode,
    params: &DecisionParams,
) -> Result<PatientDecision> {
    let (has_a, has_b) = (table.has_model(patient, Model::A), table.has_model(patient, Model::B));
    let mut vertebra_decisions = Vec::with_capacity(CERVICAL);
    for v in 1..=CERVICAL as u8 {
        let probs = match (has_a, has_b) {
            (true, true) => score_fuse(
                &table.stack_probs(patient, v, Model::A)?,
                &table.stack_probs(patient, v, Model::B)?,
                params.fusion_weight,
            )?,
            (true, false) => table.stack_probs(patient, v, Model::A)?,
            (false, true) => table.stack_probs(patient, v, Model::B)?,
            (false, false) => return Err(Error::Completeness(format!("no predictions for patient {patient}"))),
        };
        vertebra_decisions.push(majority_vote(&probs, params.vote_threshold)?);
    }
    let if_any = matches!(mode, AggregateMode::IfAny | AggregateMode::Both)
        .then(|| patient_if_any(&vertebra_decisions))
        .transpose()?;
    let adaptive = matches!(mode, AggregateMode::Adaptive | AggregateMode::Both)
        .then(|| patient_adaptive(table, patient, &params.adaptive))
        .transpose()?;
    Ok(PatientDecision {
        patient_id: patient.to_string(),
        vertebra_decisions,
        patient_if_any: if_any,
        patient_adaptive: adaptive.map(|a| a.decision),
        score: adaptive.map(|a| a.score),
        threshold: adaptive.map(|a| a.threshold),
    })
}

pub fn decide_all(table: &PredictionTable, mode: AggregateMode, params: &DecisionParams) -> Result<Vec<PatientDecision>> {
    table
        .patients()
        .iter()
        .map(|p| decide_patient(table, p, mode, params))
        .collect()
}

/// One JSON object per line.
pub fn write_decisions_jsonl(decisions: &[PatientDecision], mut out: impl Write) -> Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io("<decisions>", e))?;
    }
    Ok(())
}
