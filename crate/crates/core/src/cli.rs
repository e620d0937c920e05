//! Command-line frontend. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::color::{self, ColorSpace, ShuntNorm};
use crate::engine::{self, TrainConfig};
use crate::episodes::{DataSource, Dataset, EpisodeSpec, Layout, SynthParams};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricRecord};
use crate::model::ModelConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const LOSS_PLOT: &str = "loss.svg";
pub const ACCURACY_PLOT: &str = "accuracy.svg";

#[derive(Debug, Parser)]
#[command(name = "colorsense", version, about = "Color-aware few-shot learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh episodes.
    Eval(EvalArgs),
    /// Train an attention-free student against a frozen teacher.
    Distill(DistillArgs),
    /// Draw loss and accuracy curves from metrics logs.
    Plot(PlotArgs),
    /// Check color conversion anchors and round trips, optionally on an image.
    ConvertCheck(ConvertArgs),
}

#[derive(Debug, Args, Clone, Default)]
struct DataArgs {
    /// Class-folder dataset root.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Use the synthetic color-separable task instead of a dataset.
    #[arg(long, conflicts_with = "dataset")]
    synthetic: bool,
    /// Minimum distance between synthetic class colors.
    #[arg(long)]
    separation: Option<f64>,
    /// Pixel noise of synthetic images.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
struct TaskArgs {
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// Square image side after resizing.
    #[arg(long, value_name = "PIXELS")]
    image_size: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
struct TrainingArgs {
    /// TOML config file, or a manifest.json from an earlier run.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Episodes per optimizer step.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    run: TrainingArgs,
    /// Number of pattern generations.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_parser = parse_space)]
    color_space: Option<ColorSpace>,
    /// Disable the channel attention block.
    #[arg(long)]
    no_attention: bool,
    /// Embedding width.
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the manifest and report.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[arg(long, value_name = "FILE")]
    teacher: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    run: TrainingArgs,
    /// Student pattern generations.
    #[arg(long)]
    depth: Option<usize>,
    /// Weight of the distillation term.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Metrics logs, one curve each.
    #[arg(required = true, value_name = "METRICS")]
    metrics: Vec<PathBuf>,
    /// Legend labels, in the same order as the logs.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Image to convert and summarize.
    #[arg(long, value_name = "FILE")]
    image: Option<PathBuf>,
    #[arg(long, value_parser = parse_space, default_value = "cielab")]
    space: ColorSpace,
    /// Largest accepted round-trip error, in 8-bit levels.
    #[arg(long, default_value_t = 1.0)]
    tolerance: f64,
}

fn parse_space(s: &str) -> std::result::Result<ColorSpace, String> {
    ColorSpace::ALL
        .into_iter()
        .find(|c| c.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown color space `{s}`"))
}

/// Where episodes come from, as configured.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synthetic: bool,
    pub dataset: Option<PathBuf>,
    pub synth: SynthParams,
}

impl DataConfig {
    fn source(&self) -> Result<DataSource> {
        match (&self.dataset, self.synthetic) {
            (Some(_), true) => Err(Error::Config("choose either a dataset or --synthetic".into())),
            (Some(root), false) => Ok(DataSource::Folder(Arc::new(Dataset::load(root, Layout::ClassFolders)?))),
            (None, true) => Ok(DataSource::Synthetic(self.synth)),
            (None, false) => Err(Error::Config("a dataset path or --synthetic is required".into())),
        }
    }
}

/// Fully resolved settings of a run. Also the layout of the TOML config file;
/// every section and field is optional there.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: EpisodeSpec,
    pub data: DataConfig,
}

/// Written once at the start of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Evaluation episode count, for `eval` runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_episodes: Option<usize>,
}

impl RunManifest {
    fn new(command: &str, config: RunConfig, inputs: Vec<PathBuf>, output_dir: &Path, seed: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            inputs,
            output_dir: output_dir.to_path_buf(),
            seed,
            eval_episodes: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// Loads a TOML config, or the resolved config inside a run manifest.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        Ok(manifest.config)
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(&self, data: &mut DataConfig) {
        if let Some(root) = &self.dataset {
            data.dataset = Some(root.clone());
            data.synthetic = false;
        }
        if self.synthetic {
            data.synthetic = true;
            data.dataset = None;
        }
        set(&mut data.synth.palette_separation, self.separation);
        set(&mut data.synth.noise, self.noise);
    }
}

impl TaskArgs {
    fn apply(&self, task: &mut EpisodeSpec) {
        set(&mut task.ways, self.ways);
        set(&mut task.shots, self.shots);
        set(&mut task.queries, self.queries);
        set(&mut task.image_size, self.image_size.map(|s| (s, s)));
    }
}

impl TrainingArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.train;
        set(&mut t.iterations, self.iters);
        set(&mut t.learning_rate, self.lr);
        set(&mut t.seed, self.seed);
        set(&mut t.batch_episodes, self.batch);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.eval_episodes, self.eval_episodes);
        Ok(cfg)
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.run.resolve()?;
    args.data.apply(&mut cfg.data);
    args.task.apply(&mut cfg.task);
    set(&mut cfg.model.pattern_depth, args.depth);
    set(&mut cfg.model.color_space, args.color_space);
    set(&mut cfg.model.echelon.embed_dim, args.embed_dim);
    if args.no_attention {
        cfg.model.echelon.attention_enabled = false;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.task.validate()?;
    let source = cfg.data.source()?;

    let out = &args.run.out;
    let inputs = cfg.data.dataset.iter().cloned().collect();
    RunManifest::new("train", cfg.clone(), inputs, out, cfg.train.seed).write(out)?;
    let run = engine::train(cfg.model.clone(), &source, &cfg.task, &cfg.train)?;
    finish_run(out, &run)
}

fn finish_run(out: &Path, run: &engine::RunOutput) -> Result<()> {
    run.checkpoint.save(out.join(CHECKPOINT_FILE))?;
    metrics::write(out.join(METRICS_FILE), &run.metrics)?;
    if let Some(MetricRecord::Train(last)) = run.metrics.iter().rev().find(|m| matches!(m, MetricRecord::Train(_))) {
        println!("iteration {} loss {:.4}", last.iteration, last.total);
    }
    if let Some(MetricRecord::Eval(e)) = run.metrics.iter().rev().find(|m| matches!(m, MetricRecord::Eval(_))) {
        println!("iteration {} accuracy {:.2} ± {:.2}", e.iteration, 100.0 * e.accuracy, 100.0 * e.ci95);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = RunConfig {
        model: ckpt.model.config.clone(),
        task: ckpt.task,
        ..RunConfig::default()
    };
    args.data.apply(&mut cfg.data);
    args.task.apply(&mut cfg.task);
    cfg.task.validate()?;
    if args.episodes == 0 {
        return Err(Error::Config("--episodes must be positive".into()));
    }
    let source = cfg.data.source()?;
    if let Some(out) = &args.out {
        let mut inputs = vec![args.checkpoint.clone()];
        inputs.extend(cfg.data.dataset.iter().cloned());
        let mut manifest = RunManifest::new("eval", cfg.clone(), inputs, out, args.seed);
        manifest.eval_episodes = Some(args.episodes);
        manifest.write(out)?;
    }
    let report = engine::evaluate(&ckpt.model, &source, &cfg.task, args.episodes, args.seed)?;
    println!("{}", report.summary());
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(out.join(EVAL_FILE), text)?;
    }
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    let teacher = Checkpoint::load(&args.teacher)?;
    let mut cfg = args.run.resolve()?;
    if args.run.config.is_none() {
        cfg.task = teacher.task;
        cfg.model = teacher.model.config.clone();
        cfg.model.echelon.attention_enabled = false;
    }
    args.data.apply(&mut cfg.data);
    args.task.apply(&mut cfg.task);
    set(&mut cfg.model.pattern_depth, args.depth);
    set(&mut cfg.train.loss.gamma, args.gamma);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let source = cfg.data.source()?;

    let out = &args.run.out;
    let mut inputs = vec![args.teacher.clone()];
    inputs.extend(cfg.data.dataset.iter().cloned());
    RunManifest::new("distill", cfg.clone(), inputs, out, cfg.train.seed).write(out)?;
    let run = engine::distill(&teacher, cfg.model.clone(), &source, &cfg.task, &cfg.train)?;
    finish_run(out, &run)
}

struct Curve {
    label: String,
    loss: Vec<(f64, f64)>,
    accuracy: Vec<(f64, f64)>,
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn draw(path: &Path, title: &str, y_label: &str, series: &[(&str, &[(f64, f64)])]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0_f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(plot_error)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc(y_label)
        .draw()
        .map_err(plot_error)?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let style = Palette99::pick(i).stroke_width(2);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), style))
            .map_err(plot_error)?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], Palette99::pick(i).stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_error)?;
    root.present().map_err(plot_error)?;
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.metrics.len() {
        return Err(Error::Config(format!(
            "{} labels given for {} metrics files",
            args.labels.len(),
            args.metrics.len()
        )));
    }
    let mut curves = Vec::new();
    for (i, path) in args.metrics.iter().enumerate() {
        let records = metrics::read(path)?;
        if records.is_empty() {
            return Err(Error::Contract(format!("{} has no metric records", path.display())));
        }
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run {}", i + 1))
        });
        let mut curve = Curve {
            label,
            loss: Vec::new(),
            accuracy: Vec::new(),
        };
        for r in records {
            match r {
                MetricRecord::Train(t) => curve.loss.push((t.iteration as f64, t.total)),
                MetricRecord::Eval(e) => curve.accuracy.push((e.iteration as f64, 100.0 * e.accuracy)),
            }
        }
        curves.push(curve);
    }
    fs::create_dir_all(&args.out)?;
    let loss: Vec<_> = curves.iter().map(|c| (c.label.as_str(), c.loss.as_slice())).collect();
    draw(&args.out.join(LOSS_PLOT), "Training loss", "loss", &loss)?;
    let acc: Vec<_> = curves.iter().map(|c| (c.label.as_str(), c.accuracy.as_slice())).collect();
    draw(&args.out.join(ACCURACY_PLOT), "Evaluation accuracy", "accuracy (%)", &acc)?;
    println!("wrote {} and {}", LOSS_PLOT, ACCURACY_PLOT);
    Ok(())
}

fn cmd_convert_check(args: ConvertArgs) -> Result<()> {
    let white = color::rgb_to_lab([255, 255, 255]);
    let black = color::rgb_to_lab([0, 0, 0]);
    println!("white -> L*a*b* {:.6} {:.6} {:.6}", white[0], white[1], white[2]);
    println!("black -> L*a*b* {:.6} {:.6} {:.6}", black[0], black[1], black[2]);
    let mut worst: f64 = 0.0;
    for r in (0..=255u16).step_by(17) {
        for g in (0..=255u16).step_by(17) {
            for b in (0..=255u16).step_by(17) {
                let px = [r as u8, g as u8, b as u8];
                let back = color::lab_to_rgb(color::rgb_to_lab(px));
                for k in 0..3 {
                    worst = worst.max((back[k] - px[k] as f64).abs());
                }
            }
        }
    }
    println!("sRGB -> L*a*b* -> sRGB max error {worst:.3e} levels");
    if let Some(path) = &args.image {
        let img = image::open(path)
            .map_err(|e| Error::Ingest {
                path: path.clone(),
                detail: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let arr = ndarray::Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
            .map_err(|e| Error::shape(e.to_string()))?;
        let converted = color::convert(arr.view(), args.space)?;
        let group = color::shunt(converted.view(), &ShuntNorm::for_space(args.space))?;
        println!("{} {}×{} in {}", path.display(), w, h, args.space.name());
        for (k, plane) in group.planes.iter().enumerate() {
            let min = plane.iter().copied().fold(f64::INFINITY, f64::min);
            let max = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = plane.mean().unwrap_or(0.0);
            println!("plane {k}: min {min:.4} max {max:.4} mean {mean:.4}");
        }
    }
    let anchors = white == [100.0, 0.0, 0.0] && black == [0.0, 0.0, 0.0];
    if !anchors || worst > args.tolerance {
        return Err(Error::Numeric {
            location: "convert-check".into(),
            detail: format!("anchors exact: {anchors}, round-trip error {worst:.3e}"),
        });
    }
    println!("ok");
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Plot(a) => cmd_plot(a),
        Command::ConvertCheck(a) => cmd_convert_check(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\niterations = 7\nseed = 3\n[task]\nways = 3\n").unwrap();
        let args = TrainingArgs {
            config: Some(path),
            seed: Some(9),
            out: dir.path().into(),
            ..TrainingArgs::default()
        };
        let mut cfg = args.resolve().unwrap();
        TaskArgs {
            shots: Some(2),
            ..TaskArgs::default()
        }
        .apply(&mut cfg.task);
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.task.ways, 3);
        assert_eq!(cfg.task.shots, 2);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn manifest_round_trips_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.seed = 11;
        cfg.data.synthetic = true;
        RunManifest::new("train", cfg.clone(), vec![], dir.path(), 11)
            .write(dir.path())
            .unwrap();
        assert_eq!(load_config(&dir.path().join(MANIFEST_FILE)).unwrap(), cfg);
    }

    #[test]
    fn data_source_needs_exactly_one_origin() {
        assert!(matches!(DataConfig::default().source(), Err(Error::Config(_))));
        let both = DataConfig {
            synthetic: true,
            dataset: Some("x".into()),
            ..DataConfig::default()
        };
        assert!(matches!(both.source(), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[train]\niterations = \"many\"\n").unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config(_))));
    }

    #[test]
    fn help_exits_zero_and_bad_flags_exit_two() {
        assert_eq!(run(["colorsense", "train", "--help"]), EXIT_OK);
        assert_eq!(run(["colorsense", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["colorsense"]), EXIT_USAGE);
    }

    #[test]
    fn space_names_parse() {
        assert_eq!(parse_space("HSV").unwrap(), ColorSpace::Hsv);
        assert!(parse_space("cmyk").is_err());
    }
}
