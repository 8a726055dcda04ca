use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use framegen_core::denoiser::{load_bundle, save_bundle, ModelBundle32, ModelConfig};
use framegen_core::engine::EngineOptions;
use framegen_core::metrics::{
    evaluate_sequence, plot_curves, run_ablation, write_drift_csv, write_json, AblationConfig, Series,
};
use framegen_core::scene::{build_environment, export_dataset, load_dataset, sample_trajectory, write_plane, Dataset, PaletteFamily};
use framegen_core::trainer::{write_loss_csv, IrradianceMode, Preset, StageConfig, TrainManifest, TrainState, Variant};

use crate::server::{serve, ServerOptions, SessionFactory};
use crate::session::{NeuralEngine, Session, StubEngine};

#[derive(Debug, Parser)]
#[command(name = "framegen", version, about = "G-buffer conditioned autoregressive frame generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic G-buffer dataset with ground-truth frames.
    GenData(GenData),
    /// Train one stage, or all four in order.
    Train(Train),
    /// Score a rollout against ground truth.
    Eval(Eval),
    /// Paired autoregressive rollouts of several checkpoints.
    Ablate(Ablate),
    /// Write generated frames, metrics and drift plots.
    Render(Render),
    /// Serve the `/stream` WebSocket endpoint.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value = "warm")]
    pub family: PaletteFamily,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Camera path seed; defaults to `--seed`. Vary it for held-out data.
    #[arg(long)]
    pub trajectory_seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Square frame size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    One(u8),
    All,
}

impl std::str::FromStr for StageArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(StageArg::All),
            "0" | "1" | "2" | "3" => Ok(StageArg::One(s.parse().expect("digit"))),
            _ => Err(format!("expected 0, 1, 2, 3 or all, got `{s}`")),
        }
    }
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub stage: StageArg,
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint of the previous stage; required for stages 1 to 3.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides the preset's step count for every trained stage.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Base channel width of a new model.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub lora_rank: usize,
    #[arg(long, default_value = "full")]
    pub variant: Variant,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Save a resumable checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue the unfinished stage saved in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Teacher,
    Auto,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Frames to generate after the initial one (default: all).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = framegen_core::denoiser::DEFAULT_SAMPLER_STEPS)]
    pub sampler_steps: usize,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub rollout: RolloutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    pub mode: Mode,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    #[command(flatten)]
    pub rollout: RolloutArgs,
    /// `label=dir`, first is the reference.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<String>,
    /// Output directory for ablation.json, ablation.csv and drift plots.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct Render {
    #[command(flatten)]
    pub rollout: RolloutArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Serve {
    /// `label=dir` or `dir`; the first is active on connect.
    #[arg(long, env = "FRAMEGEN_CHECKPOINT", value_delimiter = ',')]
    pub checkpoint: Vec<String>,
    /// Serve basecolor frames of this square size instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub stub: Option<usize>,
    #[arg(long, default_value = "warm")]
    pub family: PaletteFamily,
    #[arg(long, default_value_t = 0)]
    pub scene_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "FRAMEGEN_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub max_fps: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Render(a) => render(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    if a.frames < 2 || a.size == 0 {
        bail!("need at least 2 frames and a positive size");
    }
    let scene = build_environment(a.family, a.seed);
    let trajectory = sample_trajectory(&scene, a.frames, a.trajectory_seed.unwrap_or(a.seed));
    let manifest = export_dataset(&scene, &trajectory, a.size, a.size, &a.out)?;
    println!("wrote {} frames ({}x{}) to {}", manifest.frames.len(), a.size, a.size, a.out.display());
    Ok(())
}

fn stage_config(stage: u8, a: &Train) -> Result<StageConfig> {
    let mut cfg = StageConfig::preset(stage, a.preset)?.for_variant(a.variant);
    if let Some(steps) = a.steps {
        cfg = cfg.with_steps(steps);
    }
    if let Some(lr) = a.lr {
        cfg = cfg.with_lr(lr);
    }
    Ok(cfg)
}

fn train_stage(bundle: ModelBundle32, cfg: StageConfig, ds: &Dataset, seed: u64, out: &Path, every: u64) -> Result<ModelBundle32> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    tracing::info!(stage = cfg.stage, steps = cfg.steps, lr = cfg.lr, "training");
    let mut state = TrainState::begin(bundle, cfg, seed)?;
    state.run_with_checkpoints(ds, out, every)?;
    finish_stage(&state, out)?;
    Ok(state.into_bundle())
}

fn finish_stage(state: &TrainState, out: &Path) -> Result<()> {
    write_loss_csv(&out.join("loss.csv"), &state.history)?;
    let last = state.history.last().map_or(f64::NAN, |r| r.loss);
    println!("stage {} done: {} steps, final loss {last:.4}, saved to {}", state.stage(), state.step, out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    if a.resume {
        let mut state = TrainState::load(&a.out)?;
        state.run_with_checkpoints(&ds, &a.out, a.checkpoint_every)?;
        return finish_stage(&state, &a.out);
    }
    let fresh = || -> Result<ModelBundle32> {
        let config = ModelConfig::new(ds.height(), ds.width(), a.width).with_lora_rank(a.lora_rank);
        Ok(ModelBundle32::new(config, a.seed)?)
    };
    let from_init = || -> Result<ModelBundle32> {
        let dir = a.init.as_ref().context("--init is required for stages 1 to 3")?;
        Ok(load_bundle(dir)?)
    };
    match a.stage {
        StageArg::One(stage) => {
            let bundle = if stage == 0 && a.init.is_none() { fresh()? } else { from_init()? };
            train_stage(bundle, stage_config(stage, &a)?, &ds, a.seed, &a.out, a.checkpoint_every)?;
        }
        StageArg::All => {
            let mut bundle = match &a.init {
                Some(dir) => load_bundle(dir)?,
                None => fresh()?,
            };
            let first = bundle.completed_stage.map_or(0, |s| s + 1);
            for stage in first..=3 {
                let out = a.out.join(format!("stage{stage}"));
                bundle = train_stage(bundle, stage_config(stage, &a)?, &ds, a.seed, &out, a.checkpoint_every)?;
            }
            save_bundle(&bundle, &a.out)?;
        }
    }
    Ok(())
}

/// Whether a checkpoint was trained with computed irradiance. Checkpoints
/// without training metadata are assumed to be.
pub fn checkpoint_irradiance(dir: &Path) -> Result<bool> {
    let path = dir.join("train.json");
    if !path.exists() {
        return Ok(true);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: TrainManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(m.config.irradiance == IrradianceMode::Computed)
}

fn rollout_len(r: &RolloutArgs, ds: &Dataset) -> Result<usize> {
    let available = ds.len().saturating_sub(1);
    let n = r.frames.unwrap_or(available);
    if n == 0 || n > available {
        bail!("dataset has {} frames, cannot roll out {n}", ds.len());
    }
    Ok(n)
}

fn options(r: &RolloutArgs, irradiance: bool, mode: Mode) -> EngineOptions {
    EngineOptions {
        master_seed: r.seed,
        irradiance,
        teacher_forced: mode == Mode::Teacher,
        sampler_steps: r.sampler_steps,
    }
}

fn eval(a: Eval) -> Result<()> {
    let ds = load_dataset(&a.rollout.data)?;
    let n = rollout_len(&a.rollout, &ds)?;
    let bundle = Arc::new(load_bundle(&a.checkpoint)?);
    let opts = options(&a.rollout, checkpoint_irradiance(&a.checkpoint)?, a.mode);
    let result = evaluate_sequence(bundle, &ds.frames, n, opts)?;
    println!("frames {n}  psnr {:.3}  ssim {:.4}", result.report.mean_psnr, result.report.mean_ssim);
    match &a.report {
        Some(path) => write_json(path, &result)?,
        None => println!("{}", serde_json::to_string_pretty(&result.report)?),
    }
    Ok(())
}

fn parse_labeled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, dir)) => (label.to_string(), PathBuf::from(dir)),
        None => {
            let dir = PathBuf::from(spec);
            let label = dir.file_name().map_or_else(|| spec.to_string(), |n| n.to_string_lossy().into_owned());
            (label, dir)
        }
    }
}

const COLORS: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

fn ablate(a: Ablate) -> Result<()> {
    let ds = load_dataset(&a.rollout.data)?;
    let n = rollout_len(&a.rollout, &ds)?;
    let mut configs = Vec::new();
    for spec in &a.checkpoints {
        let (label, dir) = parse_labeled(spec);
        configs.push(AblationConfig {
            irradiance: checkpoint_irradiance(&dir)?,
            bundle: Arc::new(load_bundle(&dir).with_context(|| format!("loading `{label}`"))?),
            label,
        });
    }
    let result = run_ablation(&configs, &ds.frames, n, a.rollout.seed)?;
    fs::create_dir_all(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    result.write_json(&a.report.join("ablation.json"))?;
    result.write_csv(&a.report.join("ablation.csv"))?;
    let psnr: Vec<_> = result
        .entries
        .iter()
        .zip(COLORS.iter().cycle())
        .map(|(e, &color)| Series { values: &e.drift.psnr_smoothed, color })
        .collect();
    plot_curves(&psnr, &a.report.join("drift_psnr.png"))?;
    for e in &result.entries {
        println!(
            "{:<16} psnr {:.3} ({:+.3})  ssim {:.4} ({:+.4})",
            e.label, e.report.mean_psnr, e.delta_psnr, e.report.mean_ssim, e.delta_ssim
        );
    }
    Ok(())
}

fn render(a: Render) -> Result<()> {
    let ds = load_dataset(&a.rollout.data)?;
    let n = rollout_len(&a.rollout, &ds)?;
    let bundle = Arc::new(load_bundle(&a.checkpoint)?);
    let opts = options(&a.rollout, checkpoint_irradiance(&a.checkpoint)?, a.mode);
    let mut engine = framegen_core::engine::Engine::new(bundle, opts);
    engine.init(&ds.frames[0].rgb, &ds.frames[0].basecolor)?;
    let out = engine.rollout(&ds.frames[1..=n], true)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, f) in out.frames.iter().enumerate() {
        write_plane(&a.out.join(format!("frame_{:04}.f32", i + 1)), f)?;
    }
    let report = framegen_core::metrics::MetricReport::from_series(out.psnr, out.ssim);
    let drift = framegen_core::metrics::DriftCurve::from_report(&report, framegen_core::metrics::DRIFT_WINDOW);
    write_json(&a.out.join("report.json"), &report)?;
    write_drift_csv(&a.out.join("drift.csv"), &drift)?;
    plot_curves(
        &[Series { values: &drift.psnr, color: [170, 200, 230] }, Series { values: &drift.psnr_smoothed, color: COLORS[0] }],
        &a.out.join("psnr.png"),
    )?;
    plot_curves(
        &[Series { values: &drift.ssim, color: [170, 200, 230] }, Series { values: &drift.ssim_smoothed, color: COLORS[0] }],
        &a.out.join("ssim.png"),
    )?;
    println!("wrote {n} frames to {}  psnr {:.3}  ssim {:.4}", a.out.display(), report.mean_psnr, report.mean_ssim);
    Ok(())
}

/// Session factory for `serve`: neural checkpoints, or the stub engine.
pub fn session_factory(a: &Serve) -> Result<SessionFactory> {
    let scene = Arc::new(build_environment(a.family, a.scene_seed));
    if let Some(size) = a.stub {
        if size == 0 {
            bail!("stub size must be positive");
        }
        return Ok(Arc::new(move || Ok(Session::new(scene.clone(), Box::new(StubEngine::new(size, size)), "stub"))));
    }
    if a.checkpoint.is_empty() {
        bail!("no checkpoint given (use --checkpoint or FRAMEGEN_CHECKPOINT)");
    }
    let mut bundles = BTreeMap::new();
    let mut irradiance = BTreeMap::new();
    let mut default = None;
    for spec in &a.checkpoint {
        let (label, dir) = parse_labeled(spec);
        let bundle = load_bundle(&dir).with_context(|| format!("loading checkpoint `{label}`"))?;
        irradiance.insert(label.clone(), checkpoint_irradiance(&dir)?);
        bundles.insert(label.clone(), Arc::new(bundle));
        default.get_or_insert(label);
    }
    let default = default.expect("at least one checkpoint");
    let bundles = Arc::new(bundles);
    let opts = EngineOptions { master_seed: a.seed, irradiance: irradiance[&default], ..EngineOptions::default() };
    NeuralEngine::new(bundles.clone(), &default, opts)?;
    Ok(Arc::new(move || {
        let engine = NeuralEngine::new(bundles.clone(), &default, opts)?;
        Ok(Session::new(scene.clone(), Box::new(engine), default.clone()))
    }))
}

fn serve_cmd(a: Serve) -> Result<()> {
    let factory = session_factory(&a)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().with_context(|| format!("bad address {}:{}", a.host, a.port))?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on ws://{}/stream", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        };
        serve(listener, factory, ServerOptions { max_fps: a.max_fps }, shutdown).await?;
        Ok(())
    })
}
