//! `panbev` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panbev::commands;
use panbev::config::{parse_override, PipelineConfig, Preset};
use panbev::synth::SceneSpec;
use panbev::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "panbev", version, about = "BEV panoptic label generation, weighting, fusion and evaluation")]
struct Cli {
    /// TOML config file; its values override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Seed for randomized commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for frame-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override `key.path=value`; wins over file and preset.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Kitti360,
    Nuscenes,
    Custom,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Kitti360 => Preset::Kitti360,
            PresetArg::Nuscenes => Preset::Nuscenes,
            PresetArg::Custom => Preset::Custom,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate BEV panoptic labels from point clouds, poses and boxes.
    Labelgen(LabelgenArgs),
    /// Write sensitivity and class weight maps.
    Weights(WeightsArgs),
    /// Fuse semantic logits and instance masks into panoptic maps.
    Fuse(FuseArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic scene in the pipeline input formats.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct LabelgenArgs {
    /// Directory with `clouds/`, `poses.json` and optional `boxes.json`.
    input: PathBuf,
    #[arg(long)]
    window: Option<u32>,
    #[arg(long)]
    no_occlusion: bool,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    radius: Option<u32>,
    /// Also compute class weights from label maps.
    #[arg(long)]
    class: bool,
    /// Directory of label PNGs for class weighting.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Directory of semantic logit headers `<stem>.json`.
    #[arg(long)]
    semantic: PathBuf,
    /// Directory of instance documents `<stem>.json`.
    #[arg(long)]
    instances: PathBuf,
    /// Ground-truth label directory; enables the loss.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Weight map header (`.json`) applied to the loss.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    nms_threshold: Option<f64>,
    #[arg(long)]
    min_segment_px: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Second prediction directory for improvement/error maps.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene spec TOML; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Gaussian noise on every return, meters.
    #[arg(long)]
    noise: Option<f64>,
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn overrides(cli: &Cli) -> Result<Vec<(String, panbev::config::OverrideValue)>> {
    let mut out: Vec<String> = cli.set.clone();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push(format!("{k}={v}"));
        }
    };
    match &cli.command {
        Some(Command::Labelgen(a)) => {
            push("accumulation.window", a.window.map(|v| v.to_string()));
            push("occlusion.enabled", a.no_occlusion.then(|| "false".to_string()));
        }
        Some(Command::Weights(a)) => {
            push("weighting.lambda_s", a.lambda_s.map(float));
            push("weighting.radius", a.radius.map(|v| v.to_string()));
        }
        Some(Command::Fuse(a)) => {
            push("fusion.score_threshold", a.score_threshold.map(float));
            push("fusion.nms_threshold", a.nms_threshold.map(float));
            push("fusion.min_segment_px", a.min_segment_px.map(|v| v.to_string()));
        }
        _ => {}
    }
    out.iter().map(|s| parse_override(s)).collect()
}

/// Float literal that TOML reads back as a float.
fn float(v: f64) -> String {
    format!("{v:?}")
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    PipelineConfig::resolve(cli.preset.map(Preset::from), cli.config.as_deref(), &overrides(cli)?)
}

fn write_effective(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    panbev::io::write_atomic(&out.join("effective_config.toml"), cfg.to_toml().as_bytes())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Error::Invariant(e.to_string()))?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if cli.print_config {
        print!("{}", resolve_config(cli)?.to_toml());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::InvalidInput("no subcommand given (see --help)".into()));
    };
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let out = &cli.out;
    match command {
        Command::Labelgen(a) => {
            let cfg = resolve_config(cli)?;
            let m = commands::labelgen(&cfg, &a.input, out, workers, &progress)?;
            write_effective(&cfg, out)?;
            println!("{} frames, config {}", m.frames.len(), m.config_hash);
        }
        Command::Weights(a) => {
            let cfg = resolve_config(cli)?;
            let r = commands::weights(&cfg, a.labels.as_deref(), a.class, out, &progress)?;
            write_effective(&cfg, out)?;
            print_json(&r)?;
        }
        Command::Fuse(a) => {
            let cfg = resolve_config(cli)?;
            let r = commands::fuse(
                &cfg,
                &a.semantic,
                &a.instances,
                a.gt.as_deref(),
                a.weights.as_deref(),
                out,
                &progress,
            )?;
            write_effective(&cfg, out)?;
            print_json(&r)?;
        }
        Command::Eval(a) => {
            let r = commands::eval(&a.pred, &a.gt, a.baseline.as_deref(), out, &progress)?;
            print!("{}", panbev::io::read_text(&out.join("scores.txt"))?);
            eprintln!("PQ {:.2} SQ {:.2} RQ {:.2} mIoU {:.2}", r.pq, r.sq, r.rq, r.miou);
        }
        Command::Synth(a) => {
            let seed = cli
                .seed
                .ok_or_else(|| Error::MissingInput("synth needs an explicit --seed".into()))?;
            let mut spec = match &a.spec {
                Some(p) => commands::load_scene_spec(p)?,
                None => SceneSpec::default(),
            };
            spec.seed = seed;
            if let Some(n) = a.noise {
                spec.lidar.noise_sigma = n;
            }
            let m = commands::synth(&spec, out, &progress)?;
            let hash = panbev::io::sha256_hex(&panbev::io::read_bytes(&out.join("manifest.json"))?);
            println!("{} files, manifest {hash}", m.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&cli)))
        .unwrap_or_else(|_| Err(Error::Invariant("internal panic".into())));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
