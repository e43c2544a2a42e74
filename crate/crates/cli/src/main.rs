use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use frustum_core::cloud::{load_cloud, load_labels, save_labels, LabeledCloud, PointCloud};
use frustum_core::cluster::{refine_labels, write_refinement_stats, KMeansConfig, RefineConfig, Selection};
use frustum_core::config::KeyValues;
use frustum_core::depth::{render, write_raster, DepthImageSpec};
use frustum_core::detections::{filter_oversized, parse_detections, DetectionSet, DEFAULT_OVERSIZED_RATIO};
use frustum_core::eval::benchmark;
use frustum_core::frustum::label_points;
use frustum_core::geometry::load_rig;
use frustum_core::pipeline::{build_frame_index, run_eval, run_pipeline, write_eval_report, PipelineConfig};
use frustum_core::synth::{write_dataset, SceneConfig};

/// Frustum-based lidar point labeling from 2D detections.
#[derive(Parser)]
#[command(name = "frustum", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label one cloud with the detections of one frame.
    Label(LabelArgs),
    /// Refine a labeled cloud with per-frustum k-means.
    Refine(RefineArgs),
    /// Render depth and label rasters from a labeled cloud.
    Render(RenderArgs),
    /// Score predicted label rasters against ground truth.
    Eval(EvalArgs),
    /// Time label, refine and render on every frame of a dataset.
    Bench(BenchArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Run the full pipeline over a dataset.
    Run(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Frame whose detections are used.
    #[arg(long, default_value_t = 0)]
    frame: u64,
    #[arg(long, default_value_t = DEFAULT_OVERSIZED_RATIO)]
    oversized_ratio: f64,
    /// Output point-label file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: u64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = Selection::Nearest)]
    selection: Selection,
    #[arg(long)]
    out: PathBuf,
    /// Refinement stats CSV.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    label_image: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Directory for the report files; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Reference figure in seconds per million points for a relative time.
    #[arg(long)]
    baseline: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene file; an empty scene on the reference rig when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    frames: u64,
    /// Camera timestamps trail the clouds by this many seconds.
    #[arg(long, default_value_t = 0.01)]
    image_offset: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure class mapped to the process exit code.
enum Outcome {
    Ok,
    Partial,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FP_LOG", "info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Label(a) => label(a),
        Command::Refine(a) => refine(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
    }
}

fn pipeline_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let (mut kv, base) = match &args.config {
        Some(path) => {
            let kv = KeyValues::load(path).with_context(|| format!("reading {}", path.display()))?;
            (kv, path.parent().unwrap_or(Path::new("")).to_path_buf())
        }
        None => (KeyValues::default(), PathBuf::new()),
    };
    for o in &args.overrides {
        kv.push_override(o)?;
    }
    Ok(PipelineConfig::from_key_values(&kv, &base)?)
}

fn load_detections(path: &Path) -> Result<DetectionSet> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_detections(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// Point labels store no detection count; recover it from the largest index.
fn labeled_cloud(cloud: &Path, labels: &Path, frame: u64) -> Result<LabeledCloud> {
    let points = load_cloud(cloud).with_context(|| format!("reading {}", cloud.display()))?;
    let labels = load_labels(labels).with_context(|| format!("reading {}", labels.display()))?;
    if labels.len() != points.len() {
        bail!("{} labels for {} points", labels.len(), points.len());
    }
    let detection_count = labels.iter().flatten().map(|l| l.detection_index as usize + 1).max().unwrap_or(0);
    Ok(LabeledCloud { cloud: PointCloud::new(frame, 0.0, points), labels, detection_count })
}

fn label(a: LabelArgs) -> Result<Outcome> {
    let rig = load_rig(&a.rig)?;
    let dets: DetectionSet = load_detections(&a.detections)?.iter().filter(|d| d.frame_id == a.frame).copied().collect();
    let dets = filter_oversized(&dets, &rig, a.oversized_ratio)?;
    let points = load_cloud(&a.cloud).with_context(|| format!("reading {}", a.cloud.display()))?;
    let lc = label_points(PointCloud::new(a.frame, 0.0, points), &rig, dets.as_slice());
    save_labels(&a.out, &lc.labels)?;
    info!("{} of {} points labeled by {} detection(s)", lc.labeled_count(), lc.cloud.len(), dets.len());
    Ok(Outcome::Ok)
}

fn refine(a: RefineArgs) -> Result<Outcome> {
    let lc = labeled_cloud(&a.cloud, &a.labels, a.frame)?;
    let cfg = RefineConfig {
        kmeans: KMeansConfig { k: a.k, max_iter: a.max_iter, tol: a.tol, seed: a.seed, restarts: a.restarts, selection: a.selection },
        ..Default::default()
    };
    cfg.kmeans.validate()?;
    let (refined, stats) = refine_labels(&lc, &cfg);
    save_labels(&a.out, &refined.labels)?;
    if let Some(path) = &a.stats {
        write_refinement_stats(fs::File::create(path)?, &stats)?;
    }
    info!("{} -> {} labeled points", lc.labeled_count(), refined.labeled_count());
    Ok(Outcome::Ok)
}

fn render_cmd(a: RenderArgs) -> Result<Outcome> {
    let lc = labeled_cloud(&a.cloud, &a.labels, 0)?;
    let img = render(&lc, &DepthImageSpec::default());
    write_raster(&img, &a.depth, &a.label_image)?;
    info!("{} labeled pixels", img.labeled_pixels());
    Ok(Outcome::Ok)
}

fn eval(a: EvalArgs) -> Result<Outcome> {
    let report = run_eval(&a.pred, &a.gt, &DepthImageSpec::default())?;
    match &a.out {
        Some(dir) => write_eval_report(&report, dir)?,
        None => print!("{}", report.to_text()),
    }
    Ok(Outcome::Ok)
}

fn bench(a: BenchArgs) -> Result<Outcome> {
    let cfg = pipeline_config(&a.config)?;
    let rig = load_rig(&cfg.rig)?;
    let index = build_frame_index(&cfg.dataset, &load_detections(&cfg.detections)?, cfg.max_skew)?;
    let mut frames = Vec::with_capacity(index.frames.len());
    for f in index.frames {
        let points = load_cloud(&f.cloud_file).with_context(|| format!("reading {}", f.cloud_file.display()))?;
        frames.push((PointCloud::new(f.frame_id, f.timestamp, points), f.detections));
    }
    let run = benchmark(&frames, &rig, &cfg.frame, cfg.workers)?;
    fs::create_dir_all(&cfg.output)?;
    run.timing.write_csv(fs::File::create(cfg.output.join("timing.csv"))?)?;
    print!("{}", run.timing.to_text());
    if let Some(b) = a.baseline {
        println!("relative_time={:.6}", run.timing.relative_to(b));
    }
    Ok(Outcome::Ok)
}

fn synth(a: SynthArgs) -> Result<Outcome> {
    let cfg = match &a.scene {
        Some(path) => {
            let kv = KeyValues::load(path).with_context(|| format!("reading {}", path.display()))?;
            SceneConfig::from_key_values(&kv, path.parent().unwrap_or(Path::new("")))?
        }
        None => SceneConfig::default(),
    };
    let bundles = write_dataset(&cfg, a.frames, a.image_offset, &a.out)?;
    let points: usize = bundles.iter().map(|b| b.cloud.len()).sum();
    info!("wrote {} frame(s), {} points, to {}", bundles.len(), points, a.out.display());
    Ok(Outcome::Ok)
}

fn run(a: ConfigArgs) -> Result<Outcome> {
    let cfg = pipeline_config(&a)?;
    let summary = run_pipeline(&cfg)?;
    for (frame, e) in &summary.failures {
        warn!("frame {frame}: {e}");
    }
    println!("frames={}\nfailed={}\ndrop_rate_mean={:.6}", summary.frames_total, summary.failures.len(), summary.drop_rate.mean);
    Ok(if summary.failures.is_empty() { Outcome::Ok } else { Outcome::Partial })
}
