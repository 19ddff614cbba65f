//! Manifest-driven staged run for one patient.
//!
//! Every stage writes its artifacts under `<out>/<patient>/<stage>/` with a
//! content-hash suffix and a `stage.json` record. A stage whose fingerprint
//! (its parameters plus the hashes of everything it reads) matches an
//! existing record with intact artifacts is not recomputed. Downstream
//! stages always read their inputs back from disk, so fresh and resumed
//! runs see identical data.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::aggregate::{decide_patient, write_decisions_jsonl, AggregateMode, DecisionParams, Model, PatientDecision, PredictionTable};
use crate::error::{Error, Result};
use crate::mask::Mask3D;
use crate::metrics::{hd95_with, overlap_metrics};
use crate::par::{self, Exec};
use crate::project::{project_with, save_proj, sidecar_path, ProjParams, ProjectionOp};
use crate::roivoi::{bbox_from_mask, box_iou, fuse_voi, read_view_boxes, sequential_slice_select, Box3D, SliceRanges, ViewBoxes};
use crate::stacks::{build_mip_stacks_with, build_raw_stacks_with, save_stacks, StackVariant};
use crate::vertmask::{
    approximate_mask3d_with, extract_vertebra, load_multilabel, multilabel_project, save_multilabel, unpad_resize_mask,
    ApproxMask3D, MultiLabelMask, CERVICAL,
};
use crate::volgrid::{interpolate_slices_with, load_vvol, save_vvol, Axis, GridKind, VoxelGrid, WindowSpec, DEFAULT_MIN_SLICES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Interpolate,
    Project,
    Detect,
    Fuse,
    Segment,
    Approximate,
    Extract,
    Stacks,
    Aggregate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Interpolate,
        Stage::Project,
        Stage::Detect,
        Stage::Fuse,
        Stage::Segment,
        Stage::Approximate,
        Stage::Extract,
        Stage::Stacks,
        Stage::Aggregate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Interpolate => "interpolate",
            Stage::Project => "project",
            Stage::Detect => "detect",
            Stage::Fuse => "fuse",
            Stage::Segment => "segment",
            Stage::Approximate => "approximate",
            Stage::Extract => "extract",
            Stage::Stacks => "stacks",
            Stage::Aggregate => "aggregate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Process exit code for a failure in this stage: 10 for interpolate
    /// through 19 for evaluate.
    pub fn exit_code(self) -> i32 {
        10 + Stage::ALL.iter().position(|&s| s == self).unwrap() as i32
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Exit code for an error surfaced by [`run_pipeline`]: the failing stage's
/// code, 2 for manifest problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Stage { stage, .. } => Stage::from_name(stage).map_or(1, Stage::exit_code),
        Error::Param(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPaths {
    pub sagittal: PathBuf,
    pub coronal: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunParams {
    pub window: WindowSpec,
    /// VOI tolerance in voxels per side.
    pub t: usize,
    pub min_slices: usize,
    /// Sagittal slices shown to the detector first; the full width when absent.
    pub sagittal_range: Option<(usize, usize)>,
    /// Extraction margin in voxels per side.
    pub margin: usize,
    pub stack_variants: Vec<StackVariant>,
    pub aggregation: DecisionParams,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            window: WindowSpec::BONE,
            t: crate::roivoi::DEFAULT_TOLERANCE,
            min_slices: DEFAULT_MIN_SLICES,
            sagittal_range: None,
            margin: 2,
            stack_variants: vec![StackVariant::Raw, StackVariant::Mip],
            aggregation: DecisionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub patient_id: String,
    pub volume: PathBuf,
    #[serde(default)]
    pub label: Option<PathBuf>,
    /// Detector boxes JSONL.
    #[serde(default)]
    pub boxes: Option<PathBuf>,
    /// Multi-label sagittal and coronal segmentation files.
    #[serde(default)]
    pub masks: Option<MaskPaths>,
    /// Stack predictions CSV.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
    #[serde(default)]
    pub params: RunParams,
}

impl Manifest {
    /// Parse a manifest file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut m.volume);
        for p in [&mut m.label, &mut m.boxes, &mut m.predictions].into_iter().flatten() {
            resolve(p);
        }
        if let Some(masks) = &mut m.masks {
            resolve(&mut masks.sagittal);
            resolve(&mut masks.coronal);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.patient_id;
        if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\']) {
            return Err(Error::Param(format!("patient_id `{id}` is not a valid directory name")));
        }
        let p = &self.params;
        WindowSpec::new(p.window.width, p.window.level)?;
        if p.min_slices == 0 {
            return Err(Error::Param("min_slices must be positive".into()));
        }
        if let Some((a, b)) = p.sagittal_range {
            if a >= b {
                return Err(Error::Param(format!("empty sagittal range ({a}, {b})")));
            }
        }
        if p.stack_variants.is_empty() {
            return Err(Error::Param("stack_variants must not be empty".into()));
        }
        let a = &p.aggregation;
        if !(0.0..=1.0).contains(&a.vote_threshold) || !(0.0..=1.0).contains(&a.fusion_weight) {
            return Err(Error::Param("vote_threshold and fusion_weight must lie in [0, 1]".into()));
        }
        a.adaptive.validate()
    }
}

// ---------------------------------------------------------------------------
// Artifacts and stage records

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// File name inside the stage directory.
    pub file: String,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub artifacts: Vec<Artifact>,
    pub summary: Value,
}

impl StageRecord {
    fn path(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| dir.join(&a.file))
            .ok_or_else(|| Error::Format(format!("stage {} has no artifact `{name}`", self.stage.name())))
    }

    fn hashes(&self) -> Vec<&str> {
        self.artifacts.iter().map(|a| a.sha256.as_str()).collect()
    }
}

const RECORD_FILE: &str = "stage.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

fn fingerprint(v: &Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

/// Write through `save` to a scratch name, then rename to
/// `<name>-<hash16>.<ext>` (and likewise any sidecar `save` produced).
fn persist(dir: &Path, name: &str, ext: &str, save: impl FnOnce(&Path) -> Result<()>) -> Result<Artifact> {
    let scratch = dir.join(format!("{name}.partial.{ext}"));
    save(&scratch)?;
    let sha = sha256_file(&scratch)?;
    let file = format!("{name}-{}.{ext}", &sha[..16]);
    let target = dir.join(&file);
    fs::rename(&scratch, &target).map_err(|e| Error::io(&target, e))?;
    let scratch_side = sidecar_path(&scratch);
    let sidecar_sha256 = if scratch_side.exists() {
        let side = sidecar_path(&target);
        fs::rename(&scratch_side, &side).map_err(|e| Error::io(&side, e))?;
        Some(sha256_file(&side)?)
    } else {
        None
    };
    Ok(Artifact {
        name: name.to_string(),
        file,
        sha256: sha,
        sidecar_sha256,
    })
}

fn persist_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<Artifact> {
    persist(dir, name, "json", |p| {
        fs::write(p, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(p, e))
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path).map_err(|e| Error::io(path, e))?)?)
}

fn artifacts_intact(dir: &Path, record: &StageRecord) -> bool {
    record.artifacts.iter().all(|a| {
        let path = dir.join(&a.file);
        let main_ok = sha256_file(&path).is_ok_and(|h| h == a.sha256);
        let side_ok = a
            .sidecar_sha256
            .as_ref()
            .is_none_or(|want| sha256_file(&sidecar_path(&path)).is_ok_and(|h| &h == want));
        main_ok && side_ok
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Resumed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub millis: f64,
    pub fingerprint: Option<String>,
    pub artifacts: Vec<Artifact>,
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertebraEvaluation {
    pub vertebra: u8,
    pub label_voxels: usize,
    /// Fraction of this label's voxels inside the extracted volume.
    pub containment: f64,
    pub iou: f64,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub gt_box: Box3D,
    pub voi: Box3D,
    pub voi_iou: f64,
    pub voi_contains_gt: bool,
    pub vertebrae: Vec<VertebraEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub patient_id: String,
    pub run_dir: PathBuf,
    pub stages: Vec<StageReport>,
    pub voi: Box3D,
    pub evaluation: Option<Evaluation>,
    pub decision: Option<PatientDecision>,
}

impl RunReport {
    pub fn stage(&self, stage: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

// ---------------------------------------------------------------------------
// Runner

struct Runner<'a> {
    manifest: &'a Manifest,
    dir: PathBuf,
    stages: Vec<StageReport>,
}

impl Runner<'_> {
    /// Reuse the stage's record if its fingerprint and artifacts check out,
    /// otherwise recompute it into a fresh directory.
    fn stage<F>(&mut self, stage: Stage, inputs: Value, compute: F) -> Result<(PathBuf, StageRecord)>
    where
        F: FnOnce(&Path) -> Result<(Vec<Artifact>, Value)>,
    {
        let started = Instant::now();
        let fp = fingerprint(&json!({ "stage": stage.name(), "inputs": inputs }));
        let dir = self.dir.join(stage.name());
        let record_path = dir.join(RECORD_FILE);
        let existing = read_json::<StageRecord>(&record_path)
            .ok()
            .filter(|r| r.fingerprint == fp && artifacts_intact(&dir, r));
        let (record, status) = match existing {
            Some(r) => (r, StageStatus::Resumed),
            None => {
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let (artifacts, summary) = compute(&dir).map_err(|e| e.in_stage(stage.name()))?;
                let record = StageRecord {
                    stage,
                    fingerprint: fp,
                    artifacts,
                    summary,
                };
                fs::write(&record_path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&record_path, e))?;
                (record, StageStatus::Computed)
            }
        };
        let millis = started.elapsed().as_secs_f64() * 1e3;
        log::info!(
            "{}: {} {} ({millis:.1} ms)",
            self.manifest.patient_id,
            stage.name(),
            if status == StageStatus::Resumed { "resumed" } else { "computed" }
        );
        self.stages.push(StageReport {
            stage,
            status,
            millis,
            fingerprint: Some(record.fingerprint.clone()),
            artifacts: record.artifacts.clone(),
        });
        Ok((dir, record))
    }

    fn skip(&mut self, stage: Stage, why: &str) -> Result<()> {
        let dir = self.dir.join(stage.name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        log::info!("{}: {} skipped ({why})", self.manifest.patient_id, stage.name());
        self.stages.push(StageReport {
            stage,
            status: StageStatus::Skipped,
            millis: 0.0,
            fingerprint: None,
            artifacts: Vec::new(),
        });
        Ok(())
    }
}

fn cervical_labels() -> Vec<u8> {
    (1..=CERVICAL as u8).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DetectOutput {
    source: String,
    boxes: ViewBoxes,
    ranges: Option<SliceRanges>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExtractedEntry {
    vertebra: u8,
    /// Crop box in VOI coordinates.
    bbox: Box3D,
}

fn load_label(grid: VoxelGrid) -> Result<VoxelGrid> {
    grid.require_kind(GridKind::Label)?;
    Ok(grid)
}

fn fit_masks(m: MultiLabelMask, axis: Axis, expected: (usize, usize)) -> Result<MultiLabelMask> {
    if m.axis != axis {
        return Err(Error::Param(format!("expected a {} mask file, got {}", axis.name(), m.axis.name())));
    }
    if m.dims() == expected {
        Ok(m)
    } else {
        unpad_resize_mask(&m, expected)
    }
}

/// Run every stage for one manifest, writing under `out_root/<patient_id>/`.
pub fn run_pipeline(manifest: &Manifest, out_root: impl AsRef<Path>) -> Result<RunReport> {
    run_pipeline_with(manifest, out_root, Exec::default())
}

pub fn run_pipeline_with(manifest: &Manifest, out_root: impl AsRef<Path>, exec: Exec) -> Result<RunReport> {
    manifest.validate()?;
    let params = &manifest.params;
    let dir = out_root.as_ref().join(&manifest.patient_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Runner {
        manifest,
        dir: dir.clone(),
        stages: Vec::new(),
    };

    // interpolate
    let volume_hash = sha256_file(&manifest.volume).map_err(|e| e.in_stage("interpolate"))?;
    let label_hash = manifest
        .label
        .as_deref()
        .map(sha256_file)
        .transpose()
        .map_err(|e| e.in_stage("interpolate"))?;
    let (d_interp, r_interp) = run.stage(
        Stage::Interpolate,
        json!({ "volume": volume_hash, "label": label_hash, "min_slices": params.min_slices }),
        |out| {
            let vol = load_vvol(&manifest.volume)?;
            vol.require_kind(GridKind::Intensity)?;
            let resampled = interpolate_slices_with(&vol, params.min_slices, exec)?;
            let mut artifacts = vec![persist(out, "volume", "vvol", |p| save_vvol(&resampled, p))?];
            if let Some(path) = &manifest.label {
                let label = load_label(load_vvol(path)?)?;
                if label.dims() != vol.dims() {
                    return Err(Error::Shape(format!("label {} vs volume {}", label.dims(), vol.dims())));
                }
                let label = interpolate_slices_with(&label, params.min_slices, exec)?;
                artifacts.push(persist(out, "label", "vvol", |p| save_vvol(&label, p))?);
            }
            let summary = json!({
                "source_dims": vol.dims().to_string(),
                "dims": resampled.dims().to_string(),
            });
            Ok((artifacts, summary))
        },
    )?;
    let vol = load_vvol(r_interp.path(&d_interp, "volume")?)?;
    let label = match manifest.label {
        Some(_) => Some(load_label(load_vvol(r_interp.path(&d_interp, "label")?)?)?),
        None => None,
    };
    let dims = vol.dims();

    // project
    let proj_ops = [ProjectionOp::Variance, ProjectionOp::Energy];
    run.stage(
        Stage::Project,
        json!({ "upstream": r_interp.hashes(), "ops": proj_ops.map(|o| o.name()) }),
        |out| {
            let pp = ProjParams::default();
            let mut artifacts = Vec::new();
            for axis in Axis::ALL {
                for op in proj_ops {
                    let img = project_with(&vol, axis, op, &pp, exec)?;
                    let name = format!("{}_{}", axis.name(), op.name());
                    artifacts.push(persist(out, &name, "pgm", |p| save_proj(&img, p))?);
                }
            }
            Ok((artifacts, Value::Null))
        },
    )?;

    // detect
    let boxes_hash = manifest.boxes.as_deref().map(sha256_file).transpose().map_err(|e| e.in_stage("detect"))?;
    let (d_detect, r_detect) = run.stage(
        Stage::Detect,
        json!({
            "upstream": r_interp.hashes(),
            "boxes": boxes_hash,
            "sagittal_range": params.sagittal_range,
        }),
        |out| {
            let detected = if let Some(path) = &manifest.boxes {
                let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                DetectOutput {
                    source: "boxes".into(),
                    boxes: read_view_boxes(BufReader::new(f))?,
                    ranges: None,
                }
            } else if let Some(label) = &label {
                let labels = cervical_labels();
                let range = params.sagittal_range.unwrap_or((0, dims.x));
                let (ranges, boxes) =
                    sequential_slice_select(&vol, |_, axis| bbox_from_mask(label, axis, &labels), range)?;
                DetectOutput {
                    source: "label".into(),
                    boxes,
                    ranges: Some(ranges),
                }
            } else {
                return Err(Error::Dependency("no detector boxes and no label volume to derive them from".into()));
            };
            let summary = serde_json::to_value(&detected)?;
            Ok((vec![persist_json(out, "boxes", &detected)?], summary))
        },
    )?;
    let detected: DetectOutput = read_json(&r_detect.path(&d_detect, "boxes")?)?;

    // fuse
    let (d_fuse, r_fuse) = run.stage(
        Stage::Fuse,
        json!({ "upstream": [r_interp.hashes(), r_detect.hashes()], "t": params.t }),
        |out| {
            let b = &detected.boxes;
            let voi = fuse_voi(&b.coronal, &b.sagittal, &b.axial, params.t, dims)?;
            Ok((vec![persist_json(out, "voi", &voi)?], serde_json::to_value(voi)?))
        },
    )?;
    let voi: Box3D = read_json(&r_fuse.path(&d_fuse, "voi")?)?;
    let voi_dims = voi.dims();

    // segment
    let mask_hashes = match &manifest.masks {
        Some(m) => Some([
            sha256_file(&m.sagittal).map_err(|e| e.in_stage("segment"))?,
            sha256_file(&m.coronal).map_err(|e| e.in_stage("segment"))?,
        ]),
        None => None,
    };
    let (d_seg, r_seg) = run.stage(
        Stage::Segment,
        json!({ "upstream": [r_interp.hashes(), r_fuse.hashes()], "masks": mask_hashes }),
        |out| {
            let (sag, cor, source) = if let Some(m) = &manifest.masks {
                (
                    fit_masks(load_multilabel(&m.sagittal)?, Axis::Sagittal, (voi_dims.z, voi_dims.y))?,
                    fit_masks(load_multilabel(&m.coronal)?, Axis::Coronal, (voi_dims.z, voi_dims.x))?,
                    "masks",
                )
            } else if let Some(label) = &label {
                let crop = voi.crop(label)?;
                (
                    multilabel_project(&crop, Axis::Sagittal)?,
                    multilabel_project(&crop, Axis::Coronal)?,
                    "label",
                )
            } else {
                return Err(Error::Dependency("no segmentation masks and no label volume to derive them from".into()));
            };
            let artifacts = vec![
                persist(out, "sagittal_masks", "vvol", |p| save_multilabel(&sag, p))?,
                persist(out, "coronal_masks", "vvol", |p| save_multilabel(&cor, p))?,
            ];
            Ok((artifacts, json!({ "source": source })))
        },
    )?;
    let sag = load_multilabel(r_seg.path(&d_seg, "sagittal_masks")?)?;
    let cor = load_multilabel(r_seg.path(&d_seg, "coronal_masks")?)?;

    // approximate
    let (d_approx, r_approx) = run.stage(
        Stage::Approximate,
        json!({ "upstream": [r_fuse.hashes(), r_seg.hashes()] }),
        |out| {
            let approx = approximate_mask3d_with(&sag, &cor, voi_dims, exec)?;
            let mut artifacts = Vec::new();
            let mut counts = Vec::new();
            for (i, m) in approx.masks.iter().enumerate() {
                let grid = m.to_label_grid(vol.spacing())?;
                artifacts.push(persist(out, &format!("mask_c{}", i + 1), "vvol", |p| save_vvol(&grid, p))?);
                counts.push(m.count());
            }
            Ok((artifacts, json!({ "voxels": counts })))
        },
    )?;
    let approx = ApproxMask3D {
        dims: voi_dims,
        masks: (1..=CERVICAL)
            .map(|v| {
                let grid = load_vvol(r_approx.path(&d_approx, &format!("mask_c{v}"))?)?;
                Ok(Mask3D::from_grid(&grid, |x| x != 0.0))
            })
            .collect::<Result<_>>()?,
    };

    // extract
    let (d_extract, r_extract) = run.stage(
        Stage::Extract,
        json!({ "upstream": [r_interp.hashes(), r_fuse.hashes(), r_approx.hashes()], "margin": params.margin }),
        |out| {
            let voi_vol = voi.crop(&vol)?;
            let mut artifacts = Vec::new();
            let mut entries = Vec::new();
            for v in 1..=CERVICAL as u8 {
                if approx.mask(v).is_empty() {
                    continue;
                }
                let ex = extract_vertebra(&voi_vol, &approx, v, params.margin)?;
                artifacts.push(persist(out, &format!("c{v}"), "vvol", |p| save_vvol(&ex.volume, p))?);
                entries.push(ExtractedEntry {
                    vertebra: v,
                    bbox: ex.bbox,
                });
            }
            artifacts.push(persist_json(out, "vertebrae", &entries)?);
            Ok((artifacts, serde_json::to_value(&entries)?))
        },
    )?;
    let extracted: Vec<ExtractedEntry> = read_json(&r_extract.path(&d_extract, "vertebrae")?)?;

    // stacks
    run.stage(
        Stage::Stacks,
        json!({
            "upstream": r_extract.hashes(),
            "window": params.window,
            "variants": params.stack_variants,
        }),
        |out| {
            let mut artifacts = Vec::new();
            for e in &extracted {
                let vert = load_vvol(r_extract.path(&d_extract, &format!("c{}", e.vertebra))?)?;
                for &variant in &params.stack_variants {
                    let set = match variant {
                        StackVariant::Raw => build_raw_stacks_with(&vert, params.window, Some(e.vertebra), exec)?,
                        StackVariant::Mip => build_mip_stacks_with(&vert, params.window, Some(e.vertebra), exec)?,
                    };
                    let name = format!("c{}_{}", e.vertebra, serde_json::to_value(variant)?.as_str().unwrap());
                    artifacts.push(persist(out, &name, "vvol", |p| save_stacks(&set, p))?);
                }
            }
            Ok((artifacts, Value::Null))
        },
    )?;

    // aggregate
    let decision = match &manifest.predictions {
        None => {
            run.skip(Stage::Aggregate, "no predictions")?;
            None
        }
        Some(path) => {
            let hash = sha256_file(path).map_err(|e| e.in_stage("aggregate"))?;
            let (d, r) = run.stage(
                Stage::Aggregate,
                json!({ "predictions": hash, "params": params.aggregation }),
                |out| {
                    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                    let table = PredictionTable::from_csv(BufReader::new(f))?;
                    let id = &manifest.patient_id;
                    let both = table.has_model(id, Model::A) && table.has_model(id, Model::B);
                    let mode = if both { AggregateMode::Both } else { AggregateMode::IfAny };
                    let d = decide_patient(&table, id, mode, &params.aggregation)?;
                    let artifact = persist(out, "decisions", "jsonl", |p| {
                        let f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
                        write_decisions_jsonl(std::slice::from_ref(&d), std::io::BufWriter::new(f))
                    })?;
                    Ok((vec![artifact], serde_json::to_value(&d)?))
                },
            )?;
            let text = fs::read_to_string(r.path(&d, "decisions")?).map_err(|e| Error::io(&d, e))?;
            Some(serde_json::from_str(text.trim_end())?)
        }
    };

    // evaluate
    let evaluation = match &label {
        None => {
            run.skip(Stage::Evaluate, "no label volume")?;
            None
        }
        Some(label) => {
            let (d, r) = run.stage(
                Stage::Evaluate,
                json!({ "upstream": [r_interp.hashes(), r_fuse.hashes(), r_approx.hashes(), r_extract.hashes()] }),
                |out| {
                    let e = evaluate(label, voi, &approx, &extracted, exec)?;
                    Ok((vec![persist_json(out, "metrics", &e)?], serde_json::to_value(&e)?))
                },
            )?;
            Some(read_json(&r.path(&d, "metrics")?)?)
        }
    };

    let report = RunReport {
        patient_id: manifest.patient_id.clone(),
        run_dir: dir.clone(),
        stages: run.stages,
        voi,
        evaluation,
        decision,
    };
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(report)
}

fn evaluate(label: &VoxelGrid, voi: Box3D, approx: &ApproxMask3D, extracted: &[ExtractedEntry], exec: Exec) -> Result<Evaluation> {
    let cervical = Mask3D::from_grid(label, |v| (1.0..=CERVICAL as f64).contains(&v));
    let gt_box = Box3D::from_bounds(cervical.bounds().ok_or(Error::EmptyMask)?);
    let voi_label = voi.crop(label)?;
    let d = label.dims();
    let mut vertebrae = Vec::new();
    for v in label.labels_present().into_iter().filter(|&v| (1..=CERVICAL as u8).contains(&v)) {
        let code = v as f64;
        let total = label.voxels().iter().filter(|&&x| x == code).count();
        let inside = extracted.iter().find(|e| e.vertebra == v).map_or(0, |e| {
            let b = e.bbox;
            let mut n = 0;
            for z in voi.z0 + b.z0..voi.z0 + b.z1 {
                for y in voi.y0 + b.y0..voi.y0 + b.y1 {
                    let row = d.index(z, y, voi.x0 + b.x0);
                    n += label.voxels()[row..row + b.x1 - b.x0].iter().filter(|&&x| x == code).count();
                }
            }
            n
        });
        let gt = Mask3D::from_grid(&voi_label, |x| x == code);
        let pred = approx.mask(v);
        let o = overlap_metrics(pred, &gt)?;
        let hd = if gt.is_empty() || pred.is_empty() {
            None
        } else {
            Some(hd95_with(pred, &gt, label.spacing(), exec)?)
        };
        vertebrae.push(VertebraEvaluation {
            vertebra: v,
            label_voxels: total,
            containment: inside as f64 / total as f64,
            iou: o.iou,
            dice: o.dice,
            hd95_mm: hd,
        });
    }
    Ok(Evaluation {
        gt_box,
        voi,
        voi_iou: box_iou(&voi, &gt_box),
        voi_contains_gt: voi.contains_box(&gt_box),
        vertebrae,
    })
}

/// Run several patients concurrently, each in its own directory.
pub fn run_batch(manifests: &[Manifest], out_root: impl AsRef<Path>, exec: Exec) -> Vec<Result<RunReport>> {
    let out_root = out_root.as_ref();
    par::map_slice(exec, manifests, |m| run_pipeline_with(m, out_root, exec))
}
