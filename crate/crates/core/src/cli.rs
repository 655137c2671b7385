//! The `detfuse` command line.
//!
//! Exit status: 0 on success, 1 for usage, parse and validation errors, 2
//! when an internal invariant breaks.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, AugmentConfig, AugmentError, DirSource, PasteOptions};
use crate::eval::{self, EvalConfig, EvalError, Preset};
use crate::formats::{self, Dataset, DetectionFile, FormatError, ImageInfo};
use crate::fusion::{self, FusionConfig, FusionError, RescaleMode, SoftNmsConfig, SoftNmsMethod};
use crate::geometry::CategoryTable;
use crate::selftest;
use crate::synth::{self, DetectorProfile, ExperimentConfig, SceneConfig, SynthError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: no ground-truth file has this stem")]
    UnknownStem { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("self-test failed: {0}")]
    SelfTest(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "detfuse",
    version,
    about = "Detection ensembling, evaluation and augmentation toolkit"
)]
pub struct Cli {
    /// Worker threads; results are identical for any value.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse the detections of several models.
    Fuse(FuseArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Cut-paste augmentation of a dataset.
    Augment(AugmentArgs),
    /// Synthetic scenes, simulated detectors and the ensemble experiment.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Reference loss math.
    Refmath {
        #[command(subcommand)]
        command: RefmathCommand,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Coco,
    Visdrone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetArg {
    Coco,
    Visdrone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wbf,
    Nms,
    SoftNms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleArg {
    None,
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftMethodArg {
    Linear,
    Gaussian,
}

#[derive(Debug, Args, Serialize)]
pub struct FuseArgs {
    /// Comma-separated detection files (COCO) or directories (VisDrone).
    #[arg(long, value_delimiter = ',', required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FileFormat::Coco)]
    pub format: FileFormat,
    #[arg(long, value_enum, default_value_t = Method::Wbf)]
    pub method: Method,
    /// Cluster-matching IoU (WBF) or suppression IoU (NMS, soft-NMS).
    #[arg(long, default_value_t = 0.55)]
    pub iou: f64,
    #[arg(long, value_enum, default_value_t = RescaleArg::Clamped)]
    pub rescale: RescaleArg,
    /// Drop outputs scoring below this (defaults: 0 for WBF/NMS, 0.001 for soft-NMS).
    #[arg(long)]
    pub score_floor: Option<f64>,
    /// Comma-separated per-model weights for WBF.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SoftMethodArg::Linear)]
    pub soft_method: SoftMethodArg,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = PresetArg::Coco)]
    pub preset: PresetArg,
    /// Overrides the preset's file format.
    #[arg(long, value_enum)]
    pub format: Option<FileFormat>,
    /// VisDrone image directory, used for image sizes.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub max_dets: Option<usize>,
    /// Also write the machine-readable report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    /// COCO annotation file, or a VisDrone annotation directory.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "per-image", default_value_t = 2)]
    pub per_image: usize,
    #[arg(long, default_value_t = 11)]
    pub min: usize,
    #[arg(long, default_value_t = 29)]
    pub max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample categories uniformly before sampling instances.
    #[arg(long)]
    pub balanced: bool,
    /// Reject placements overlapping existing boxes beyond --overlap-cap.
    #[arg(long)]
    pub no_overlap: bool,
    #[arg(long, default_value_t = 0.0)]
    pub overlap_cap: f64,
    #[arg(long)]
    pub feather: bool,
    #[arg(long, default_value_t = 1.0)]
    pub scale_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub scale_max: f64,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Run the two-detector fusion experiment.
    Experiment(ExperimentArgs),
    /// Write a synthetic ground-truth dataset (COCO layout).
    Scenes(ScenesArgs),
    /// Simulate one detector over a COCO dataset.
    Detect(DetectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// Key-value config (TOML); missing keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScenesArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileArg {
    MultiStage,
    SingleStage,
    Perfect,
    AllMiss,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = ProfileArg::MultiStage)]
    pub profile: ProfileArg,
    #[arg(long, default_value_t = 0)]
    pub model: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum RefmathCommand {
    /// Run the fixture and gradient battery.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub tool_version: String,
    pub seed: u64,
    pub started_at_unix: u64,
    pub wall_time_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn fmt_err(path: &Path) -> impl FnOnce(FormatError) -> CliError + '_ {
    move |source| CliError::Format {
        path: path.to_path_buf(),
        source,
    }
}

/// SHA-256 of a file, or of the sorted (name, contents) list of a directory.
fn digest(path: &Path) -> Result<InputDigest, CliError> {
    let mut h = Sha256::new();
    if path.is_dir() {
        for entry in sorted_entries(path)? {
            h.update(entry.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(&entry).map_err(io_err(&entry))?);
        }
    } else {
        h.update(fs::read(path).map_err(io_err(path))?);
    }
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(h.finalize()),
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    v.sort();
    Ok(v)
}

fn txt_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
        .collect())
}

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "JPG"];

/// Loads a VisDrone annotation directory. Image ids follow sorted file stems.
/// With an image directory, sizes come from the rasters and boxes are
/// clipped; otherwise sizes are the boxes' extent.
pub fn load_visdrone_dataset(ann_dir: &Path, images: Option<&Path>) -> Result<Dataset, CliError> {
    let mut ds = Dataset {
        categories: CategoryTable::visdrone(),
        ..Dataset::default()
    };
    for (i, (stem, path)) in txt_files(ann_dir)?.into_iter().enumerate() {
        let id = i as u64 + 1;
        let gts = formats::parse_visdrone_ground_truth(&read(&path)?, id).map_err(fmt_err(&path))?;
        let mut file_name = format!("{stem}.jpg");
        let mut size = None;
        if let Some(dir) = images {
            for ext in IMAGE_EXTENSIONS {
                let candidate = dir.join(format!("{stem}.{ext}"));
                if candidate.is_file() {
                    file_name = format!("{stem}.{ext}");
                    size = image::image_dimensions(&candidate).ok();
                    break;
                }
            }
        }
        let (width, height) = size.unwrap_or_else(|| {
            let w = gts.iter().map(|g| g.bbox.x_br()).fold(1.0, f64::max).ceil() as u32;
            let h = gts.iter().map(|g| g.bbox.y_br()).fold(1.0, f64::max).ceil() as u32;
            (w, h)
        });
        ds.images.push(ImageInfo {
            id,
            width,
            height,
            file_name,
        });
        ds.ground_truth.extend(gts.into_iter().map(|mut g| {
            g.bbox = g.bbox.clip(width as f64, height as f64);
            g
        }));
    }
    Ok(ds)
}

fn stem_ids(ds: &Dataset) -> BTreeMap<String, u64> {
    ds.images
        .iter()
        .map(|i| {
            let stem = Path::new(&i.file_name)
                .file_stem()
                .map_or(i.file_name.clone(), |s| s.to_string_lossy().into_owned());
            (stem, i.id)
        })
        .collect()
}

fn load_visdrone_detections(dir: &Path, ids: &BTreeMap<String, u64>, model: u32) -> Result<DetectionFile, CliError> {
    let mut detections = Vec::new();
    for (stem, path) in txt_files(dir)? {
        let Some(&id) = ids.get(&stem) else {
            return Err(CliError::UnknownStem { path });
        };
        detections.extend(formats::parse_visdrone_detections(&read(&path)?, id, model).map_err(fmt_err(&path))?);
    }
    Ok(DetectionFile { model, detections })
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

struct Run {
    start: Instant,
    started_at: u64,
}

impl Run {
    fn start() -> Self {
        Self {
            start: Instant::now(),
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    fn manifest<C: Serialize>(
        &self,
        subcommand: &str,
        config: &C,
        inputs: &[&Path],
        seed: u64,
    ) -> Result<String, CliError> {
        let m = RunManifest {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Internal(e.to_string()))?,
            inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_, _>>()?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_at_unix: self.started_at,
            wall_time_ms: self.start.elapsed().as_millis(),
        };
        let mut s = serde_json::to_string_pretty(&m).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }
}

fn fuse(args: &FuseArgs) -> Result<(), CliError> {
    let run = Run::start();
    let files: Vec<DetectionFile>;
    let mut stems: BTreeMap<String, u64> = BTreeMap::new();
    match args.format {
        FileFormat::Coco => {
            files = args
                .inputs
                .iter()
                .enumerate()
                .map(|(m, p)| formats::parse_coco_detections(&read(p)?, m as u32).map_err(fmt_err(p)))
                .collect::<Result<_, _>>()?;
        }
        FileFormat::Visdrone => {
            for p in &args.inputs {
                for stem in txt_files(p)?.into_keys() {
                    stems.entry(stem).or_insert(0);
                }
            }
            for (i, id) in stems.values_mut().enumerate() {
                *id = i as u64 + 1;
            }
            files = args
                .inputs
                .iter()
                .enumerate()
                .map(|(m, p)| load_visdrone_detections(p, &stems, m as u32))
                .collect::<Result<_, _>>()?;
        }
    }
    let fused = match args.method {
        Method::Wbf => {
            let cfg = FusionConfig {
                match_iou: args.iou,
                num_models: files.len(),
                rescale: match args.rescale {
                    RescaleArg::None => RescaleMode::None,
                    RescaleArg::Clamped => RescaleMode::ClampedCount,
                },
                score_floor: args.score_floor.unwrap_or(0.0),
                model_weights: args.weights.clone(),
            };
            fusion::ensemble(&files, &cfg)?
        }
        Method::Nms => {
            let floor = args.score_floor.unwrap_or(0.0);
            fusion::combine_per_image(&files, |d| {
                Ok(fusion::nms(d, args.iou)?
                    .into_iter()
                    .filter(|d| d.score >= floor)
                    .collect())
            })?
        }
        Method::SoftNms => {
            let cfg = SoftNmsConfig {
                iou_thresh: args.iou,
                method: match args.soft_method {
                    SoftMethodArg::Linear => SoftNmsMethod::Linear,
                    SoftMethodArg::Gaussian => SoftNmsMethod::Gaussian,
                },
                sigma: args.sigma,
                score_floor: args.score_floor.unwrap_or(0.001),
            };
            fusion::combine_per_image(&files, |d| fusion::soft_nms(d, &cfg))?
        }
    };
    match args.format {
        FileFormat::Coco => write(&args.out, &formats::write_coco_detections(&fused))?,
        FileFormat::Visdrone => {
            fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
            let by_image = fused.by_image();
            for (stem, id) in &stems {
                let text = formats::write_visdrone_detections(by_image.get(id).into_iter().flatten());
                write(&args.out.join(format!("{stem}.txt")), &text)?;
            }
        }
    }
    let inputs: Vec<&Path> = args.inputs.iter().map(PathBuf::as_path).collect();
    write(
        &manifest_path(&args.out),
        &run.manifest("fuse", args, &inputs, args.seed)?,
    )?;
    log::info!(
        "fused {} detections into {}",
        files.iter().map(|f| f.detections.len()).sum::<usize>(),
        fused.detections.len()
    );
    Ok(())
}

fn evaluate(args: &EvalArgs) -> Result<(), CliError> {
    let run = Run::start();
    let (preset, default_format) = match args.preset {
        PresetArg::Coco => (Preset::Coco, FileFormat::Coco),
        PresetArg::Visdrone => (Preset::Visdrone, FileFormat::Visdrone),
    };
    let mut cfg = EvalConfig::preset(preset);
    if let Some(m) = args.max_dets {
        cfg.max_dets = m;
    }
    let (ds, dets) = match args.format.unwrap_or(default_format) {
        FileFormat::Coco => {
            let ds = formats::parse_coco_annotations(&read(&args.gt)?).map_err(fmt_err(&args.gt))?;
            let dets = formats::parse_coco_detections(&read(&args.dets)?, 0).map_err(fmt_err(&args.dets))?;
            (ds, dets)
        }
        FileFormat::Visdrone => {
            let ds = load_visdrone_dataset(&args.gt, args.images.as_deref())?;
            let dets = load_visdrone_detections(&args.dets, &stem_ids(&ds), 0)?;
            (ds, dets)
        }
    };
    let report = eval::evaluate(&dets, &ds, &cfg)?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        write(out, &report.to_json())?;
        write(
            &manifest_path(out),
            &run.manifest("eval", args, &[&args.dets, &args.gt], args.seed)?,
        )?;
    }
    Ok(())
}

fn augment_cmd(args: &AugmentArgs) -> Result<(), CliError> {
    let run = Run::start();
    let visdrone = args.dataset.is_dir();
    let ds = if visdrone {
        load_visdrone_dataset(&args.dataset, Some(&args.images))?
    } else {
        formats::parse_coco_annotations(&read(&args.dataset)?).map_err(fmt_err(&args.dataset))?
    };
    let cfg = AugmentConfig {
        per_source_images: args.per_image,
        min_objects: args.min,
        max_objects: args.max,
        seed: args.seed,
        paste: PasteOptions {
            balanced: args.balanced,
            allow_overlap: !args.no_overlap,
            overlap_iou_cap: args.overlap_cap,
            scale_jitter: (args.scale_min, args.scale_max),
            feather: args.feather,
            ..PasteOptions::default()
        },
    };
    let out = augment::augment_dataset(&ds, &DirSource::new(&args.images), &cfg)?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let images_out = args.out.join("images");
    fs::create_dir_all(&images_out).map_err(io_err(&images_out))?;
    for img in &ds.images {
        let src = args.images.join(&img.file_name);
        let dst = images_out.join(&img.file_name);
        fs::copy(&src, &dst).map_err(io_err(&src))?;
    }
    augment::write_rasters(&out.images, &images_out)?;
    if visdrone {
        let ann = args.out.join("annotations");
        fs::create_dir_all(&ann).map_err(io_err(&ann))?;
        let by_image = out.dataset.gt_by_image();
        for img in &out.dataset.images {
            let stem = Path::new(&img.file_name)
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy();
            let text = formats::write_visdrone_ground_truth(by_image.get(&img.id).into_iter().flatten().copied());
            write(&ann.join(format!("{stem}.txt")), &text)?;
        }
    } else {
        write(
            &args.out.join("annotations.json"),
            &formats::write_coco_annotations(&out.dataset),
        )?;
    }
    write(
        &args.out.join("manifest.json"),
        &run.manifest("augment", args, &[&args.dataset, &args.images], args.seed)?,
    )?;
    eprintln!(
        "augmented {} source images into {} new images",
        ds.images.len(),
        out.images.len()
    );
    Ok(())
}

/// Overlays a user TOML table on the serialized defaults so nested sections
/// may be partially specified. Unknown keys are rejected.
fn merge(base: &mut toml::Value, overlay: toml::Value, prefix: &str) -> Result<(), String> {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(format!("unknown key `{key}`")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

pub fn load_config<T>(path: Option<&Path>, defaults: &T) -> Result<T, CliError>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let cfg_err = |p: &Path, m: String| CliError::Config {
        path: p.to_path_buf(),
        message: m,
    };
    let mut base = toml::Value::try_from(defaults).map_err(|e| CliError::Internal(e.to_string()))?;
    if let Some(p) = path {
        let overlay: toml::Table = read(p)?
            .parse()
            .map_err(|e: toml::de::Error| cfg_err(p, e.to_string()))?;
        merge(&mut base, toml::Value::Table(overlay), "").map_err(|m| cfg_err(p, m))?;
        return base.try_into().map_err(|e: toml::de::Error| cfg_err(p, e.to_string()));
    }
    base.try_into()
        .map_err(|e: toml::de::Error| CliError::Internal(e.to_string()))
}

fn experiment(args: &ExperimentArgs) -> Result<(), CliError> {
    let run = Run::start();
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref(), &ExperimentConfig::default())?;
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = synth::run_ensemble_experiment(&cfg)?;
    print!("{}", report.to_table());
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    write(&args.out, &json)?;
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    write(
        &manifest_path(&args.out),
        &run.manifest("synth experiment", &cfg, &inputs, cfg.seed)?,
    )?;
    Ok(())
}

fn scenes(args: &ScenesArgs) -> Result<(), CliError> {
    let run = Run::start();
    let mut cfg: SceneConfig = load_config(args.config.as_deref(), &SceneConfig::default())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let ds = synth::generate_scenes(&cfg)?;
    write(&args.out, &formats::write_coco_annotations(&ds))?;
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    write(
        &manifest_path(&args.out),
        &run.manifest("synth scenes", &cfg, &inputs, cfg.seed)?,
    )?;
    Ok(())
}

fn detect(args: &DetectArgs) -> Result<(), CliError> {
    let run = Run::start();
    let ds = formats::parse_coco_annotations(&read(&args.gt)?).map_err(fmt_err(&args.gt))?;
    let profile = match args.profile {
        ProfileArg::MultiStage => DetectorProfile::multi_stage(),
        ProfileArg::SingleStage => DetectorProfile::single_stage(),
        ProfileArg::Perfect => DetectorProfile::perfect(),
        ProfileArg::AllMiss => DetectorProfile::all_miss(),
    };
    let dets = synth::simulate_detector(&ds, &profile, args.model, args.seed)?;
    write(&args.out, &formats::write_coco_detections(&dets))?;
    write(
        &manifest_path(&args.out),
        &run.manifest("synth detect", args, &[&args.gt], args.seed)?,
    )?;
    Ok(())
}

fn refmath_check(seed: u64) -> Result<(), CliError> {
    let checks = selftest::run(seed);
    let mut failed = Vec::new();
    for c in &checks {
        println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelfTest(failed.join(", ")))
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if cli.threads > 0 {
        builder = builder.num_threads(cli.threads);
    }
    let pool = builder.build().map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => evaluate(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Synth { command } => match command {
            SynthCommand::Experiment(a) => experiment(a),
            SynthCommand::Scenes(a) => scenes(a),
            SynthCommand::Detect(a) => detect(a),
        },
        Command::Refmath {
            command: RefmathCommand::Check { seed },
        } => refmath_check(*seed),
    })
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| execute(&cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => 2,
    }
}
