//! The `geocond` command line: one subcommand per pipeline stage.
//!
//! Every run prints a single JSON [`RunReport`] line on stderr. Log records
//! are JSON lines on stderr too, filtered by `GEOCOND_LOG`
//! (error, warn, info, debug; default warn). Exit codes: 0 ok, 1 validation
//! or data error, 2 usage error, 3 i/o error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::conditions::{
    build_triplet, read_embeddings_file, read_masks_file, read_triplet, validate_triplet, write_json, ConditionInputs,
    KeyframePolicy, TRIPLET_FILE,
};
use crate::depth_align::{align_clip, AlignmentConfig, IterationStats};
use crate::edm::{build_schedule, diagnostics, heun_sample_batch, sample_moments, EdmConfig, GaussianOracleDenoiser};
use crate::error::{Error, Result};
use crate::geometry::{normals_from_depth, NormalFrame};
use crate::layout::{pack_latents, unpack_latents, LayoutSidecar, PatchEncoder, DEFAULT_PATCH_SIZE, SIDECAR_FILE};
use crate::metrics::{evaluate, read_matches, BlockMatchConfig, EvalOptions, DEFAULT_SCORE_THRESHOLD};
use crate::pack::{read_sidecar, stream_name, Pack, StreamKind, DEFAULT_FPS, DEFAULT_FRAME_COUNT};
use crate::raster::{DType, DepthFrame, Raster};
use crate::synth::{
    observation_pack, render, write_perception_sidecars, CorruptionSpec, RenderConfig, SceneSpec, DEFAULT_HEIGHT,
    DEFAULT_WIDTH,
};

pub const LOG_ENV: &str = "GEOCOND_LOG";
pub const ALIGNMENT_FILE: &str = "alignment.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Clone, PartialEq, Parser, Serialize, Deserialize)]
#[command(name = "geocond", version, about = "Multi-view geometry-conditioned video data tools")]
pub struct Cli {
    /// Seed for every random draw. `synth` falls back to the scene's own
    /// seed when this is not given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a synthetic tabletop scene into a pack.
    Synth(SynthArgs),
    /// Anchor relative depth to sensor depth, adding depth_metric_m streams.
    AlignDepth(AlignArgs),
    /// Derive camera-frame normals from depth, adding normal_cam streams.
    Normals(NormalsArgs),
    /// Assemble the condition triplet of a pack.
    BuildConditions(ConditionsArgs),
    /// Concatenate views and patch-encode streams, or undo it.
    #[command(subcommand)]
    Layout(LayoutCommand),
    /// Compare a predicted pack against ground truth.
    Eval(EvalArgs),
    /// Noise schedule, oracle sampling and self-checks.
    #[command(subcommand)]
    Edm(EdmCommand),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::AlignDepth(_) => "align-depth",
            Command::Normals(_) => "normals",
            Command::BuildConditions(_) => "build-conditions",
            Command::Layout(LayoutCommand::Pack(_)) => "layout pack",
            Command::Layout(LayoutCommand::Unpack(_)) => "layout unpack",
            Command::Eval(_) => "eval",
            Command::Edm(EdmCommand::Schedule(_)) => "edm schedule",
            Command::Edm(EdmCommand::Sample(_)) => "edm sample",
            Command::Edm(EdmCommand::Check(_)) => "edm check",
        }
    }
}

/// `WIDTHxHEIGHT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(width), Some(height)) => Ok(Self { width, height }),
            _ => Err(format!("expected positive WIDTHxHEIGHT, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Scene JSON; the built-in two-object tabletop when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = Resolution { width: DEFAULT_WIDTH, height: DEFAULT_HEIGHT })]
    pub res: Resolution,
    #[arg(long, default_value_t = DEFAULT_FRAME_COUNT)]
    pub frames: usize,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Corruption JSON. When given, `--out` receives the observation pack
    /// (rgb, sensor and relative depth) and the ground truth goes to `--gt-out`.
    #[arg(long)]
    pub corrupt: Option<PathBuf>,
    /// Ground-truth pack location with `--corrupt` [default: OUT/ground_truth].
    #[arg(long)]
    pub gt_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub pack: PathBuf,
    /// View to align; every view when omitted.
    #[arg(long)]
    pub view: Option<String>,
    /// One (scale, shift) per clip. This is the default.
    #[arg(long, conflicts_with = "per_frame")]
    pub joint: bool,
    /// One (scale, shift) per frame.
    #[arg(long)]
    pub per_frame: bool,
    #[arg(long, default_value_t = AlignmentConfig::default().iterations)]
    pub iterations: usize,
    #[arg(long, default_value_t = AlignmentConfig::default().inlier_percentile)]
    pub percentile: f64,
    #[arg(long, default_value_t = AlignmentConfig::default().min_inliers)]
    pub min_inliers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    #[value(name = "depth_metric_m")]
    DepthMetricM,
    #[value(name = "depth_sensor_mm")]
    DepthSensorMm,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct NormalsArgs {
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long)]
    pub view: Option<String>,
    #[arg(long, value_enum, default_value = "depth_metric_m")]
    pub src: DepthSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArg {
    Temporal,
    Content,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ConditionsArgs {
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long, value_enum)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// JSON array of per-frame object areas; required by the content policy.
    #[arg(long)]
    pub areas: Option<PathBuf>,
    /// JSON map from view id to an inpainted u8 RGB frame file.
    #[arg(long)]
    pub inpaint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutCommand {
    /// Encode every stream of a pack into a latent pack plus channels.json.
    Pack(LayoutPackArgs),
    /// Restore the original pack from a latent pack.
    Unpack(LayoutUnpackArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LayoutPackArgs {
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LayoutUnpackArgs {
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pack_pred: PathBuf,
    #[arg(long)]
    pub pack_gt: PathBuf,
    /// Text file of `frame u1 v1 u2 v2 score` lines.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Count matches with the built-in block matcher when no file is given.
    #[arg(long)]
    pub block_match: bool,
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
    pub score_threshold: f64,
    /// Compare normals up to sign.
    #[arg(long)]
    pub flip_normals: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdmCommand {
    /// Print the sigma ladder as a JSON array.
    Schedule(ScheduleArgs),
    /// Sample a Gaussian oracle and report the sample moments.
    Sample(SampleArgs),
    /// Run the weighting, loss and gradient self-checks.
    Check(CheckArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = EdmConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = EdmConfig::default().rho)]
    pub rho: f64,
    #[arg(long, default_value_t = EdmConfig::default().sigma_min)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = EdmConfig::default().sigma_max)]
    pub sigma_max: f64,
}

impl ScheduleArgs {
    fn config(&self) -> EdmConfig {
        EdmConfig {
            steps: self.steps,
            rho: self.rho,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            ..EdmConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Zero-mean isotropic Gaussian data with std sigma_data.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub oracle: OracleKind,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = EdmConfig::default().sigma_data)]
    pub sigma_data: f64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Directory for samples.raw (float64, sample-major) and moments.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CheckArgs {
    #[arg(long, default_value_t = EdmConfig::default().sigma_data)]
    pub sigma_data: f64,
}

/// Printed as one JSON line on stderr after every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// The fully resolved arguments; parsing it back as [`Cli`] and running
    /// again reproduces the outputs.
    pub config_echo: Value,
    pub outputs: Vec<PathBuf>,
    pub diagnostics: Vec<String>,
    pub wall_time_s: f64,
}

/// Files written and warnings gathered by one command.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub diagnostics: Vec<String>,
}

struct JsonLogger {
    level: log::LevelFilter,
}

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            let line = json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            eprintln!("{line}");
        }
    }

    fn flush(&self) {}
}

/// Installs the JSON-lines stderr logger. Later calls keep the first logger.
pub fn init_logging() {
    let raw = std::env::var(LOG_ENV).unwrap_or_default();
    let level = match raw.to_ascii_lowercase().as_str() {
        "error" => log::LevelFilter::Error,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        _ => log::LevelFilter::Warn,
    };
    if log::set_logger(Box::leak(Box::new(JsonLogger { level }))).is_ok() {
        log::set_max_level(level);
        if !raw.is_empty() && !["error", "warn", "info", "debug"].contains(&raw.to_ascii_lowercase().as_str()) {
            log::warn!("{LOG_ENV}={raw:?} is not a level; using warn");
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn error_line(e: &Error) -> Value {
    let mut v = json!({ "level": "error", "kind": e.kind(), "message": e.to_string() });
    if let Error::Validation { object_ids, .. } = e {
        v["object_ids"] = json!(object_ids);
    }
    v
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    let start = Instant::now();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{}", json!({ "level": "error", "kind": "usage", "message": e.to_string() }));
            return EXIT_USAGE;
        }
    };
    let result = pool.install(|| run(&cli));
    let (outcome, code) = match result {
        Ok(o) => (o, EXIT_OK),
        Err(e) => {
            eprintln!("{}", error_line(&e));
            (Outcome::default(), exit_code(&e))
        }
    };
    let report = RunReport {
        command: cli.command.name().to_string(),
        config_echo: serde_json::to_value(&cli).expect("arguments serialize"),
        outputs: outcome.outputs,
        diagnostics: outcome.diagnostics,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
    code
}

/// Runs a parsed command on the current rayon pool.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::AlignDepth(a) => align_depth(a),
        Command::Normals(a) => normals(a),
        Command::BuildConditions(a) => build_conditions(a),
        Command::Layout(LayoutCommand::Pack(a)) => layout_pack(a),
        Command::Layout(LayoutCommand::Unpack(a)) => layout_unpack(a),
        Command::Eval(a) => eval(a),
        Command::Edm(EdmCommand::Schedule(a)) => edm_schedule(a),
        Command::Edm(EdmCommand::Sample(a)) => edm_sample(a, seed),
        Command::Edm(EdmCommand::Check(a)) => edm_check(a, seed),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth(a: &SynthArgs, cli_seed: Option<u64>) -> Result<Outcome> {
    let scene = match &a.spec {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => SceneSpec::default_tabletop(),
    };
    let cfg = RenderConfig { width: a.res.width, height: a.res.height, frame_count: a.frames, fps: a.fps };
    let seed = cli_seed.unwrap_or(scene.seed);
    let rendered = render(&scene, &cfg)?;
    let gt = rendered.to_pack()?;
    let mut out = Outcome::default();
    create_dir(&a.out)?;
    match &a.corrupt {
        Some(path) => {
            let spec: CorruptionSpec = read_json(path)?;
            observation_pack(&rendered, &spec, seed)?.write(&a.out)?;
            let gt_dir = a.gt_out.clone().unwrap_or_else(|| a.out.join("ground_truth"));
            gt.write(&gt_dir)?;
            out.outputs.push(a.out.clone());
            out.outputs.push(gt_dir);
        }
        None => {
            if a.gt_out.is_some() {
                out.diagnostics.push("--gt-out has no effect without --corrupt".into());
            }
            gt.write(&a.out)?;
            out.outputs.push(a.out.clone());
        }
    }
    out.outputs.extend(write_perception_sidecars(&rendered, &scene, &a.out)?);
    Ok(out)
}

fn selected_views(pack: &Pack, view: &Option<String>) -> Result<Vec<String>> {
    match view {
        Some(v) if pack.manifest.view(v).is_none() => Err(Error::InvalidInput(format!("pack has no view {v}"))),
        Some(v) => Ok(vec![v.clone()]),
        None => Ok(pack.manifest.views.iter().map(|v| v.view_id.clone()).collect()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct FitReport {
    /// Frame index for per-frame fits; absent for a joint fit.
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<usize>,
    scale: f64,
    shift: f64,
    inlier_count: usize,
    residual_rmse_m: f64,
    per_iteration: Vec<IterationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ViewAlignment {
    view_id: String,
    mode: &'static str,
    fits: Vec<FitReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct AlignmentReport {
    config: AlignmentConfig,
    views: Vec<ViewAlignment>,
}

fn align_depth(a: &AlignArgs) -> Result<Outcome> {
    let mut pack = Pack::read(&a.pack)?;
    let cfg = AlignmentConfig {
        iterations: a.iterations,
        inlier_percentile: a.percentile,
        min_inliers: a.min_inliers,
        joint: !a.per_frame,
        ..AlignmentConfig::default()
    };
    cfg.validate()?;
    let mut views = Vec::new();
    for id in selected_views(&pack, &a.view)? {
        let (_, rel) = pack.find(&id, StreamKind::DepthPredRel)?;
        let (_, sensor) = pack.find(&id, StreamKind::DepthSensorMm)?;
        let rel = rel.iter().map(DepthFrame::from_f32_raster).collect::<Result<Vec<_>>>()?;
        let sensor = sensor.iter().map(DepthFrame::from_sensor_mm).collect::<Result<Vec<_>>>()?;
        let (metric, results) = align_clip(&rel, &sensor, &cfg)?;
        let fits = results
            .iter()
            .enumerate()
            .map(|(i, r)| FitReport {
                frame: (!cfg.joint).then_some(i),
                scale: r.scale,
                shift: r.shift,
                inlier_count: r.inlier_count,
                residual_rmse_m: r.residual_rmse_m,
                per_iteration: r.per_iteration.clone(),
            })
            .collect();
        views.push(ViewAlignment { view_id: id.clone(), mode: if cfg.joint { "joint" } else { "per_frame" }, fits });
        let frames = metric.iter().map(DepthFrame::to_f32_raster).collect();
        pack.put_stream(&stream_name(&id, StreamKind::DepthMetricM), &id, StreamKind::DepthMetricM, frames)?;
    }
    pack.write(&a.pack)?;
    let report = write_json(&a.pack.join(ALIGNMENT_FILE), &AlignmentReport { config: cfg, views })?;
    Ok(Outcome { outputs: vec![a.pack.clone(), report], diagnostics: Vec::new() })
}

fn normals(a: &NormalsArgs) -> Result<Outcome> {
    let mut pack = Pack::read(&a.pack)?;
    let eps = AlignmentConfig::default().validity_epsilon;
    let mut diagnostics = Vec::new();
    for id in selected_views(&pack, &a.view)? {
        let view = pack.manifest.view(&id).expect("selected").clone();
        let depth: Vec<DepthFrame> = match a.src {
            DepthSource::DepthMetricM => {
                let (_, f) = pack.find(&id, StreamKind::DepthMetricM)?;
                f.iter().map(DepthFrame::from_f32_raster).collect::<Result<_>>()?
            }
            DepthSource::DepthSensorMm => {
                let (_, f) = pack.find(&id, StreamKind::DepthSensorMm)?;
                f.iter().map(DepthFrame::from_sensor_mm).collect::<Result<_>>()?
            }
        };
        let frames = depth
            .iter()
            .map(|d| normals_from_depth(d, &view, &d.valid_mask(eps)).map(|n| n.to_raster()))
            .collect::<Result<Vec<_>>>()?;
        let invalid: usize = frames
            .iter()
            .map(|r| NormalFrame::from_raster(r).map(|n| n.data().len() - n.valid_mask().count()))
            .sum::<Result<usize>>()?;
        if invalid > 0 {
            diagnostics.push(format!("view {id}: {invalid} pixels without a valid normal"));
        }
        pack.put_stream(&stream_name(&id, StreamKind::NormalCam), &id, StreamKind::NormalCam, frames)?;
    }
    pack.write(&a.pack)?;
    Ok(Outcome { outputs: vec![a.pack.clone()], diagnostics })
}

fn build_conditions(a: &ConditionsArgs) -> Result<Outcome> {
    let pack = Pack::read(&a.pack)?;
    let policy = match a.policy {
        PolicyArg::Temporal => KeyframePolicy::Temporal,
        PolicyArg::Content => KeyframePolicy::Content,
    };
    let mut fills = BTreeMap::new();
    if let Some(path) = &a.inpaint {
        let files: BTreeMap<String, String> = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (view_id, rel) in files {
            let v = pack
                .manifest
                .view(&view_id)
                .ok_or_else(|| Error::Format(format!("inpaint file names unknown view {view_id}")))?;
            let bytes = read_sidecar(base, &rel)?;
            fills.insert(view_id, Raster::from_le_bytes(v.height, v.width, 3, DType::Uint8, &bytes)?);
        }
    }
    let inputs = ConditionInputs {
        masks: a.masks.as_deref().map(read_masks_file).transpose()?,
        embeddings: a.embeddings.as_deref().map(read_embeddings_file).transpose()?,
        areas: a.areas.as_deref().map(read_json::<Vec<u64>>).transpose()?,
        fills,
    };
    let built = build_triplet(&pack, policy, &inputs)?;
    let path = built.write(&a.pack)?;
    validate_triplet(&read_triplet(&a.pack)?, &pack, &a.pack)?;
    let mut diagnostics = Vec::new();
    if built.triplet.appearance.objects.is_empty() {
        diagnostics.push("no object records: no masks were given".into());
    }
    debug_assert_eq!(path.file_name().and_then(|n| n.to_str()), Some(TRIPLET_FILE));
    Ok(Outcome { outputs: vec![path], diagnostics })
}

fn layout_pack(a: &LayoutPackArgs) -> Result<Outcome> {
    let pack = Pack::read(&a.pack)?;
    let (latent, sidecar) = pack_latents(&pack, PatchEncoder::new(a.patch_size)?)?;
    latent.write(&a.out)?;
    let side = write_json(&a.out.join(SIDECAR_FILE), &sidecar)?;
    Ok(Outcome { outputs: vec![a.out.clone(), side], diagnostics: Vec::new() })
}

fn layout_unpack(a: &LayoutUnpackArgs) -> Result<Outcome> {
    let latent = Pack::read(&a.pack)?;
    let sidecar: LayoutSidecar = read_json(&a.pack.join(SIDECAR_FILE))?;
    unpack_latents(&latent, &sidecar)?.write(&a.out)?;
    Ok(Outcome { outputs: vec![a.out.clone()], diagnostics: Vec::new() })
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let pred = Pack::read(&a.pack_pred)?;
    let gt = Pack::read(&a.pack_gt)?;
    let opts = EvalOptions {
        matches: a.matches.as_deref().map(read_matches).transpose()?,
        score_threshold: a.score_threshold,
        block_match: a.block_match.then(BlockMatchConfig::default),
        embeddings: a.embeddings.as_deref().map(read_embeddings_file).transpose()?.map(|s| s.vectors),
        flip_normals: a.flip_normals,
    };
    let report = evaluate(&pred, &gt, &opts)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let path = write_json(&a.out, &report)?;
    Ok(Outcome { outputs: vec![path], diagnostics: report.notes.clone() })
}

fn edm_schedule(a: &ScheduleArgs) -> Result<Outcome> {
    let schedule = build_schedule(&a.config())?;
    println!("{}", serde_json::to_string(&schedule).expect("schedule serializes"));
    Ok(Outcome::default())
}

fn edm_sample(a: &SampleArgs, seed: u64) -> Result<Outcome> {
    let OracleKind::Gaussian = a.oracle;
    let cfg = EdmConfig { sigma_data: a.sigma_data, ..a.schedule.config() };
    let schedule = build_schedule(&cfg)?;
    let oracle = GaussianOracleDenoiser::isotropic(a.dim, a.sigma_data)?;
    let samples = heun_sample_batch(&oracle, &schedule, &(), seed, a.n, a.dim)?;
    let moments = sample_moments(&samples)?;
    let report = json!({
        "oracle_variance": a.sigma_data * a.sigma_data,
        "steps": cfg.steps,
        "seed": seed,
        "moments": moments,
    });
    println!("{report}");
    let mut out = Outcome::default();
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let bytes: Vec<u8> = samples.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        let raw = dir.join("samples.raw");
        std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
        out.outputs.push(raw);
        out.outputs.push(write_json(&dir.join("moments.json"), &report)?);
    }
    Ok(out)
}

fn edm_check(a: &CheckArgs, seed: u64) -> Result<Outcome> {
    let cfg = EdmConfig { sigma_data: a.sigma_data, ..EdmConfig::default() };
    let outcomes = diagnostics(&cfg, seed)?;
    println!("{}", serde_json::to_string_pretty(&outcomes).expect("outcomes serialize"));
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(Outcome::default())
    } else {
        Err(Error::validation(format!("edm checks failed: {}", failed.join(", "))))
    }
}
