use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use spinevox_core::aggregate::{decide_all, write_decisions_jsonl, AdaptiveParams, AggregateMode, DecisionParams, PredictionTable};
use spinevox_core::mask::Mask3D;
use spinevox_core::metrics::{hd95_with, overlap_metrics, Ratings};
use spinevox_core::pipeline::{self, run_batch, Manifest};
use spinevox_core::project::{project_with, save_proj, ProjParams, ProjectionOp};
use spinevox_core::roivoi::{fuse_voi, read_view_boxes, Box3D};
use spinevox_core::stacks::{build_mip_stacks_with, build_raw_stacks_with, save_stacks, StackVariant};
use spinevox_core::vertmask::{approximate_mask3d_with, extract_vertebra, load_multilabel, ApproxMask3D, CERVICAL};
use spinevox_core::volgrid::{load_vvol, make_phantom, save_vvol, Axis, Dims, Spacing, WindowSpec};
use spinevox_core::Exec;

#[derive(Parser)]
#[command(name = "spinevox", version, about = "Projection-driven cervical-spine CT pipeline")]
struct Cli {
    #[arg(long, value_enum, default_value_t = LogFormat::Text, global = true)]
    log_format: LogFormat,

    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaMode {
    Cohen,
    Fleiss,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic spine phantom and its label volume.
    Phantom {
        #[arg(long)]
        seed: u64,
        /// Z,Y,X
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        #[arg(long, default_value_t = 7)]
        vertebrae: usize,
        #[arg(long)]
        out_intensity: PathBuf,
        #[arg(long)]
        out_label: PathBuf,
    },
    /// Project a volume along one axis to a 16-bit PGM.
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        axis: Axis,
        #[arg(long)]
        op: ProjectionOp,
        /// JSON file overriding operator parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse per-view detector boxes into a 3D VOI.
    VoiFuse {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        #[arg(long, default_value_t = 20)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Approximate per-vertebra 3D masks from sagittal and coronal masks.
    Mask3d {
        #[arg(long)]
        sag: PathBuf,
        #[arg(long)]
        cor: PathBuf,
        #[arg(long)]
        voi: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Crop each vertebra from a volume using approximate masks.
    Extract {
        #[arg(long)]
        vol: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Crop the volume to this VOI first when it is the full scan.
        #[arg(long)]
        voi: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        margin: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the fifteen 2.5D stacks of one vertebra volume.
    Stacks {
        #[arg(long)]
        vert: PathBuf,
        #[arg(long)]
        variant: StackVariant,
        #[arg(long, default_value_t = WindowSpec::BONE.width)]
        window_width: f64,
        #[arg(long, default_value_t = WindowSpec::BONE.level)]
        window_level: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn stack probabilities into vertebra and patient decisions.
    Aggregate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value = "both")]
        mode: AggregateMode,
        #[arg(long, default_value_t = 0.4)]
        thr_low: f64,
        #[arg(long, default_value_t = 0.6)]
        thr_high: f64,
        #[arg(long, default_value_t = 0.2)]
        d_ref: f64,
        #[arg(long, default_value_t = 0.5)]
        vote_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlap and distance metrics between two masks.
    Evaluate {
        #[arg(long)]
        pred_mask: PathBuf,
        #[arg(long)]
        gt_mask: PathBuf,
        /// sz,sy,sx in mm; defaults to the ground-truth file's spacing.
        #[arg(long, value_parser = parse_spacing)]
        spacing: Option<Spacing>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Inter-rater agreement from a long-form ratings CSV.
    Kappa {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum, default_value_t = KappaMode::Fleiss)]
        mode: KappaMode,
    },
    /// Execute the full staged pipeline for one or more manifests.
    Run {
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|e| format!("`{p}`: {e}"))?;
    }
    Ok(out)
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let [z, y, x] = parse_triple(s)?;
    if [z, y, x].iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(format!("dimensions must be positive integers, got `{s}`"));
    }
    Ok(Dims::new(z as usize, y as usize, x as usize))
}

fn parse_spacing(s: &str) -> Result<Spacing, String> {
    let [z, y, x] = parse_triple(s)?;
    if [z, y, x].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(format!("spacing must be positive, got `{s}`"));
    }
    Ok(Spacing::new(z, y, x))
}

fn init_logging(format: LogFormat) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let LogFormat::Json = format {
        b.format(|buf, record| {
            let line = json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    b.init();
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPINEVOX_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SPINEVOX_THREADS=`{v}` is not a count"))?;
        if n == 0 {
            bail!("SPINEVOX_THREADS must be at least 1");
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_voi(path: &Path) -> Result<Box3D> {
    let voi: Box3D = serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?;
    voi.validate()?;
    Ok(voi)
}

fn mask_path(dir: &Path, v: usize) -> PathBuf {
    dir.join(format!("mask_c{v}.vvol"))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Phantom {
            seed,
            dims,
            vertebrae,
            out_intensity,
            out_label,
        } => {
            let (vol, label) = make_phantom(seed, vertebrae, dims)?;
            save_vvol(&vol, &out_intensity)?;
            save_vvol(&label, &out_label)?;
            log::info!("phantom {dims} written to {}", out_intensity.display());
        }
        Command::Project {
            input,
            axis,
            op,
            params,
            out,
        } => {
            let params: ProjParams = match params {
                Some(p) => serde_json::from_slice(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => ProjParams::default(),
            };
            let grid = load_vvol(&input)?;
            let img = project_with(&grid, axis, op, &params, exec)?;
            save_proj(&img, &out)?;
            log::info!("{} {} projection {}x{}", axis.name(), op.name(), img.height, img.width);
        }
        Command::VoiFuse { boxes, dims, t, out } => {
            let f = fs::File::open(&boxes).with_context(|| format!("opening {}", boxes.display()))?;
            let b = read_view_boxes(BufReader::new(f))?;
            let voi = fuse_voi(&b.coronal, &b.sagittal, &b.axial, t, dims)?;
            write_json(&out, &serde_json::to_value(voi)?)?;
        }
        Command::Mask3d { sag, cor, voi, out_dir } => {
            let voi = read_voi(&voi)?;
            let approx = approximate_mask3d_with(&load_multilabel(&sag)?, &load_multilabel(&cor)?, voi.dims(), exec)?;
            fs::create_dir_all(&out_dir)?;
            for (i, m) in approx.masks.iter().enumerate() {
                save_vvol(&m.to_label_grid(Spacing::UNIT)?, mask_path(&out_dir, i + 1))?;
            }
            write_json(&out_dir.join("voi.json"), &serde_json::to_value(voi)?)?;
        }
        Command::Extract {
            vol,
            masks,
            voi,
            margin,
            out_dir,
        } => {
            let mut grid = load_vvol(&vol)?;
            if let Some(voi) = voi {
                grid = read_voi(&voi)?.crop(&grid)?;
            }
            let masks = (1..=CERVICAL)
                .map(|v| Ok(Mask3D::from_grid(&load_vvol(mask_path(&masks, v))?, |x| x != 0.0)))
                .collect::<Result<Vec<_>>>()?;
            let approx = ApproxMask3D {
                dims: masks[0].dims,
                masks,
            };
            fs::create_dir_all(&out_dir)?;
            let mut index = Vec::new();
            for v in 1..=CERVICAL as u8 {
                if approx.mask(v).is_empty() {
                    log::warn!("C{v}: empty mask, skipped");
                    continue;
                }
                let ex = extract_vertebra(&grid, &approx, v, margin)?;
                save_vvol(&ex.volume, out_dir.join(format!("c{v}.vvol")))?;
                index.push(json!({ "vertebra": v, "bbox": ex.bbox }));
            }
            write_json(&out_dir.join("vertebrae.json"), &json!(index))?;
        }
        Command::Stacks {
            vert,
            variant,
            window_width,
            window_level,
            out,
        } => {
            let window = WindowSpec::new(window_width, window_level)?;
            let grid = load_vvol(&vert)?;
            let set = match variant {
                StackVariant::Raw => build_raw_stacks_with(&grid, window, None, exec)?,
                StackVariant::Mip => build_mip_stacks_with(&grid, window, None, exec)?,
            };
            save_stacks(&set, &out)?;
        }
        Command::Aggregate {
            pred,
            mode,
            thr_low,
            thr_high,
            d_ref,
            vote_threshold,
            out,
        } => {
            let f = fs::File::open(&pred).with_context(|| format!("opening {}", pred.display()))?;
            let table = PredictionTable::from_csv(BufReader::new(f))?;
            let params = DecisionParams {
                vote_threshold,
                adaptive: AdaptiveParams { thr_low, thr_high, d_ref },
                ..DecisionParams::default()
            };
            let decisions = decide_all(&table, mode, &params)?;
            let f = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(f);
            write_decisions_jsonl(&decisions, &mut w)?;
            w.flush()?;
            log::info!("{} patients decided", decisions.len());
        }
        Command::Evaluate {
            pred_mask,
            gt_mask,
            spacing,
            json: json_out,
        } => {
            let pred = load_vvol(&pred_mask)?;
            let gt = load_vvol(&gt_mask)?;
            let spacing = spacing.unwrap_or(gt.spacing());
            let (p, g) = (Mask3D::from_grid(&pred, |v| v != 0.0), Mask3D::from_grid(&gt, |v| v != 0.0));
            let o = overlap_metrics(&p, &g)?;
            let hd = if p.is_empty() || g.is_empty() {
                None
            } else {
                Some(hd95_with(&p, &g, spacing, exec)?)
            };
            let result = json!({ "iou": o.iou, "dice": o.dice, "hd95_mm": hd });
            println!("{result}");
            if let Some(path) = json_out {
                write_json(&path, &result)?;
            }
        }
        Command::Kappa { ratings, mode } => {
            let f = fs::File::open(&ratings).with_context(|| format!("opening {}", ratings.display()))?;
            let r = Ratings::from_csv(BufReader::new(f))?;
            let k = match mode {
                KappaMode::Cohen => r.cohen()?,
                KappaMode::Fleiss => r.fleiss()?,
            };
            println!("{}", serde_json::to_string(&k)?);
        }
        Command::Run { manifest, out } => {
            let manifests = manifest.iter().map(Manifest::load).collect::<Result<Vec<_>, _>>()?;
            let mut first_err = None;
            for (m, result) in manifests.iter().zip(run_batch(&manifests, &out, exec)) {
                match result {
                    Ok(report) => {
                        let voi_iou = report.evaluation.as_ref().map(|e| e.voi_iou);
                        println!(
                            "{}",
                            json!({
                                "patient_id": report.patient_id,
                                "report": report.run_dir.join("report.json"),
                                "voi": report.voi,
                                "voi_iou": voi_iou,
                            })
                        );
                    }
                    Err(e) => {
                        log::error!("{}: {e}", m.patient_id);
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_format);
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        let code = e
            .downcast_ref::<spinevox_core::Error>()
            .map_or(1, pipeline::exit_code);
        return ExitCode::from(code as u8);
    }
    ExitCode::SUCCESS
}
