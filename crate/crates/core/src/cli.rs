//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code: 0 success, 1 domain
//! error, 2 usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::losses::{run_gradcheck, GradcheckConfig};
use crate::metrics::{default_radius, evaluate};
use crate::model::{load_weights, CellVit, ModelConfig};
use crate::pipeline::{
    export_geojson, export_json, parse_result_json, plan_tiles, redundancy_ratio, run_wsi, DirectorySource, Mode,
    OraclePredictor, PipelineConfig, SyntheticSource, TilePredictor, TileSource, DEFAULT_MERGE_IOU,
};
use crate::postproc::{rasterize_records, HovernetParams, InstanceMap, StarParams};
use crate::sampling::{draw_epoch, sampling_weights, DatasetIndex, DEFAULT_GAMMA_S};
use crate::synth::{BundleOptions, Layout, LayoutParams};
use crate::cvtf::read_instance_map;

pub const WORKERS_ENV: &str = "CELLVIT_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "cellvit", version, about = "Nuclei segmentation and evaluation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment nuclei on a tiled slide and write result JSON.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compute oversampling weights for a dataset index.
    SampleWeights(SampleArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradArgs),
    /// Compare large-tile and small-tile throughput on a synthetic slide.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct PostArgs {
    #[arg(long, default_value = "hovernet")]
    mode: String,
    #[arg(long, default_value_t = 0.5)]
    tau_np: f32,
    #[arg(long, default_value_t = 0.4)]
    tau_e: f64,
    #[arg(long, default_value_t = 10)]
    min_marker_px: usize,
    #[arg(long, default_value_t = 10)]
    min_instance_px: usize,
    #[arg(long, default_value_t = 0.5)]
    prob_thresh: f32,
    #[arg(long, default_value_t = 0.3)]
    nms_thresh: f64,
    #[arg(long, default_value_t = DEFAULT_MERGE_IOU)]
    merge_iou: f64,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a GeoJSON FeatureCollection here.
    #[arg(long)]
    geojson: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    tile_size: usize,
    #[arg(long, default_value_t = 64)]
    overlap: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Defaults to the manifest value.
    #[arg(long)]
    mpp: Option<f64>,
    #[arg(long)]
    include_embeddings: bool,
    #[command(flatten)]
    post: PostArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground truth: CVTF instance map (.raw) or result JSON. Repeatable.
    #[arg(long, required = true)]
    gt: Vec<PathBuf>,
    /// Prediction, paired with --gt in order.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    /// Nucleus classes including background.
    #[arg(long, default_value_t = 6)]
    num_classes: u32,
    #[arg(long, default_value_t = 0.25)]
    mpp: f64,
    /// Centroid matching radius in pixels; 12 at 0.25 mpp, 6 at 0.5 mpp.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GAMMA_S)]
    gamma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also draw an epoch of this many indices (0 = one per entry).
    #[arg(long)]
    epoch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Corrupt one analytic gradient; the run must then fail.
    #[arg(long)]
    perturb_analytic: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// oracle (ideal maps of the synthetic layout) or model (random tiny network)
    #[arg(long, default_value = "oracle")]
    predictor: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nuclei per megapixel.
    #[arg(long, default_value_t = 700.0)]
    density: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return if code == 0 { 0 } else { 2 };
        }
    };
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                let _ = writeln!(err, "error: {WORKERS_ENV} must be a positive integer, got {v:?}");
                return 2;
            }
        },
        Err(_) => None,
    };
    let result = match cli.command {
        Command::Infer(a) => cmd_infer(a, workers, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::SampleWeights(a) => cmd_sample_weights(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Bench(a) => cmd_bench(a, workers, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn pipeline_config(post: &PostArgs, tile_size: usize, overlap: usize, workers: usize, mpp: f64) -> Result<PipelineConfig> {
    Ok(PipelineConfig {
        tile_size,
        overlap,
        mode: post.mode.parse::<Mode>()?,
        hovernet: HovernetParams {
            tau_np: post.tau_np,
            tau_e: post.tau_e,
            min_marker_px: post.min_marker_px,
            min_instance_px: post.min_instance_px,
            unknown_class: 0,
        },
        star: StarParams { prob_thresh: post.prob_thresh, nms_thresh: post.nms_thresh },
        merge_iou: post.merge_iou,
        workers,
        mpp,
    })
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_infer(a: InferArgs, env_workers: Option<usize>, out: &mut dyn Write) -> Result<i32> {
    if a.overlap >= a.tile_size {
        return Err(Error::OverlapTooLarge { tile_size: a.tile_size, overlap: a.overlap });
    }
    if !a.weights.is_file() {
        return Err(Error::InvalidConfig(format!("weights not found: {}", a.weights.display())));
    }
    let source = DirectorySource::open(&a.manifest)?;
    let model = CellVit::from_weights(load_weights(&a.weights)?)?;
    let workers = env_workers.unwrap_or(a.workers);
    let mpp = a.mpp.unwrap_or(source.manifest.mpp);
    let cfg = pipeline_config(&a.post, a.tile_size, a.overlap, workers, mpp)?;
    let start = Instant::now();
    let result = run_wsi(&source, &model, &cfg)?;
    export_json(&result, &a.out, a.include_embeddings)?;
    if let Some(g) = &a.geojson {
        export_geojson(&result, g)?;
    }
    let _ = writeln!(
        out,
        "tiles={} nuclei={} wall_time={:.3}s",
        result.grid.tiles.len(),
        result.records.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(0)
}

/// Instance map from a CVTF file, or from a result JSON painted on a canvas
/// of at least `min_size`.
fn load_instances(path: &Path, min_size: (usize, usize)) -> Result<InstanceMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"CVTF") {
        return read_instance_map(path);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::InvalidConfig(format!("{} is neither CVTF nor JSON", path.display())))?;
    let doc = parse_result_json(&text)?;
    let (h, w) = canvas_for(&doc.records, min_size);
    Ok(rasterize_records(&doc.records, h, w))
}

fn canvas_for(records: &[crate::postproc::NucleusRecord], min_size: (usize, usize)) -> (usize, usize) {
    let h = records.iter().map(|r| r.bbox[2] + 1).max().unwrap_or(1).max(min_size.0).max(1);
    let w = records.iter().map(|r| r.bbox[3] + 1).max().unwrap_or(1).max(min_size.1).max(1);
    (h, w)
}

fn json_extent(path: &Path) -> (usize, usize) {
    let Ok(text) = std::fs::read_to_string(path) else {
        return (0, 0);
    };
    match parse_result_json(&text) {
        Ok(doc) => canvas_for(&doc.records, (0, 0)),
        Err(_) => (0, 0),
    }
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    if a.gt.len() != a.pred.len() {
        return Err(Error::InvalidConfig(format!("{} --gt files but {} --pred files", a.gt.len(), a.pred.len())));
    }
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for (g, p) in a.gt.iter().zip(&a.pred) {
        // JSON inputs share one canvas so both sides line up
        let (gh, gw) = json_extent(g);
        let (ph, pw) = json_extent(p);
        let size = (gh.max(ph), gw.max(pw));
        let gm = load_instances(g, size)?;
        let pm = load_instances(p, (gm.height, gm.width))?;
        let gm = if (gm.height, gm.width) != (pm.height, pm.width) { load_instances(g, (pm.height, pm.width))? } else { gm };
        gts.push(gm);
        preds.push(pm);
    }
    let radius = a.radius.unwrap_or_else(|| default_radius(a.mpp));
    let report = evaluate(&gts, &preds, a.num_classes, radius)?;
    let mut text = report.to_json()?;
    text.push('\n');
    write_or_print(a.out.as_deref(), &text, out)?;
    Ok(0)
}

fn cmd_sample_weights(a: SampleArgs, out: &mut dyn Write) -> Result<i32> {
    let index = DatasetIndex::load(&a.index)?;
    let weights = sampling_weights(&index, a.gamma)?;
    let entries: Vec<serde_json::Value> = index
        .entries
        .iter()
        .zip(&weights)
        .map(|(e, p)| serde_json::json!({ "id": e.id, "p": p }))
        .collect();
    let mut doc = serde_json::json!({ "gamma_s": a.gamma, "weights": entries });
    if let Some(n) = a.epoch {
        let n = if n == 0 { index.n_train() } else { n };
        doc["epoch"] = serde_json::json!(draw_epoch(&weights, n, a.seed)?);
        doc["seed"] = serde_json::json!(a.seed);
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_or_print(a.out.as_deref(), &text, out)?;
    Ok(0)
}

fn cmd_gradcheck(a: GradArgs, out: &mut dyn Write) -> Result<i32> {
    let report = run_gradcheck(&GradcheckConfig {
        seed: a.seed,
        trials: a.trials,
        perturb_analytic: a.perturb_analytic,
        ..Default::default()
    });
    let _ = write!(out, "{}", report.render());
    Ok(if report.pass() { 0 } else { 1 })
}

/// Timings of one tiling in [`bench`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRun {
    pub tile_size: usize,
    pub overlap: usize,
    pub tiles: usize,
    pub pixels: usize,
    pub nuclei: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub size: usize,
    pub workers: usize,
    pub predictor: String,
    pub large: BenchRun,
    pub small: BenchRun,
    /// small-tile pixels / large-tile pixels on this slide
    pub pixel_ratio: f64,
    /// the same ratio for a slide that is a whole number of strides
    pub closed_form_ratio: f64,
    /// small-tile wall time / large-tile wall time
    pub speedup: f64,
}

/// Runs the 1024/64 and 256/64 tilings on one synthetic slide.
pub const BENCH_REPEATS: usize = 3;

pub fn bench(size: usize, workers: usize, predictor: &str, seed: u64, density: f64) -> Result<BenchReport> {
    let count = (density * (size * size) as f64 / 1e6).round() as usize;
    let layout = Layout::random(size, size, count, &LayoutParams::default(), seed);
    let source = SyntheticSource { layout: layout.clone(), seed };
    let pred: Box<dyn TilePredictor> = match predictor {
        "oracle" => Box::new(OraclePredictor::new(layout, BundleOptions::default())),
        "model" => Box::new(CellVit::random(ModelConfig::tiny(), seed)?),
        other => return Err(Error::InvalidConfig(format!("unknown predictor {other:?}"))),
    };
    let time = |tile: usize, overlap: usize| -> Result<BenchRun> {
        let cfg = PipelineConfig { tile_size: tile, overlap, workers, ..Default::default() };
        let start = Instant::now();
        let r = run_wsi(&source as &dyn TileSource, pred.as_ref(), &cfg)?;
        Ok(BenchRun {
            tile_size: tile,
            overlap,
            tiles: r.grid.tiles.len(),
            pixels: r.grid.processed_pixels(),
            nuclei: r.records.len(),
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    // interleaved repeats, fastest kept, so warm-up is not charged to one side
    let (mut large, mut small) = (time(1024, 64)?, time(256, 64)?);
    for _ in 1..BENCH_REPEATS {
        let l = time(1024, 64)?;
        if l.seconds < large.seconds {
            large = l;
        }
        let s = time(256, 64)?;
        if s.seconds < small.seconds {
            small = s;
        }
    }
    Ok(BenchReport {
        size,
        workers,
        predictor: predictor.to_string(),
        pixel_ratio: small.pixels as f64 / large.pixels as f64,
        closed_form_ratio: redundancy_ratio(1024, 64, 256, 64),
        speedup: small.seconds / large.seconds,
        large,
        small,
    })
}

fn cmd_bench(a: BenchArgs, env_workers: Option<usize>, out: &mut dyn Write) -> Result<i32> {
    let workers = env_workers.unwrap_or(a.workers);
    plan_tiles(a.size, a.size, 1024, 64)?;
    let r = bench(a.size, workers, &a.predictor, a.seed, a.density)?;
    for run in [&r.large, &r.small] {
        let _ = writeln!(
            out,
            "tile={}/{} tiles={} pixels={} nuclei={} wall_time={:.3}s",
            run.tile_size, run.overlap, run.tiles, run.pixels, run.nuclei, run.seconds
        );
    }
    let _ = writeln!(
        out,
        "pixel_ratio={:.4} closed_form_ratio={:.4} speedup={:.3}",
        r.pixel_ratio, r.closed_form_ratio, r.speedup
    );
    if let Some(p) = &a.out {
        let text = serde_json::to_string_pretty(&serde_json::to_value(&r)?)?;
        std::fs::write(p, text + "\n").map_err(|e| Error::io(p, e))?;
    }
    Ok(0)
}
