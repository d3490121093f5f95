//! Command-line surface: `train`, `generate`, `evaluate`, `ablate`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use unictrl_core::denoiser::Denoiser;
use unictrl_core::diffusion::SamplerConfig;
use unictrl_core::metrics::{evaluate, EmbedderKind, MetricReport, MetricSettings};
use unictrl_core::pipeline::{AblationMode, InjectionWindow, KvMode, QueryScope, Sampler, UniCtrlConfig};
use unictrl_core::train::{train, TrainConfig};

use crate::checkpoint::{file_digest, load_checkpoint, save_checkpoint, TrainingMeta};
use crate::config::{load_generate_file, load_train_config};
use crate::error::{Error, Result};
use crate::manifest::{read_json, write_json, CheckpointRef, RunManifest, Timing, TrainManifest, TOOL, VERSION};
use crate::report::emit_report;
use crate::video_io::{emit_frames, load_frames};

/// `println!` that stops quietly when stdout has been closed (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let mut out = std::io::stdout().lock();
        if let Err(e) = writeln!(out, $($arg)*) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(Error::io("<stdout>", e));
            }
        }
    }};
}

#[derive(Debug, Parser)]
#[command(name = "unictrl", version, about = "Cross-frame attention control for a desk-scale video diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on moving-sprite videos.
    Train(TrainArgs),
    /// Sample one video, with or without attention control.
    Generate(GenerateArgs),
    /// Score a directory of frames.
    Evaluate(EvaluateArgs),
    /// Sweep ablation modes over seeds and tabulate scores.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "model.uctl")]
    pub out: PathBuf,
    /// Log the loss every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Record wall-clock time in the manifest.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    All,
    Cross,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WindowArg {
    Early,
    Late,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EmbedderArg {
    Pixel,
    Backbone,
}

impl From<EmbedderArg> for EmbedderKind {
    fn from(e: EmbedderArg) -> Self {
        match e {
            EmbedderArg::Pixel => EmbedderKind::Pixel,
            EmbedderArg::Backbone => EmbedderKind::Backbone,
        }
    }
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, required_unless_present = "from_manifest")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, required_unless_present = "from_manifest")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Enable attention control (implied by any control flag below).
    #[arg(long)]
    pub unictrl: bool,
    /// Motion injection degree in [0, 1].
    #[arg(long = "c")]
    pub motion_degree: Option<f64>,
    #[arg(long, conflicts_with_all = ["no_mi", "no_ss"])]
    pub no_sac: bool,
    #[arg(long, conflicts_with = "no_ss")]
    pub no_mi: bool,
    #[arg(long)]
    pub no_ss: bool,
    #[arg(long)]
    pub kv_mismatch: bool,
    #[arg(long, value_enum)]
    pub q_scope: Option<ScopeArg>,
    /// Injection window reading (debugging aid).
    #[arg(long, value_enum, hide = true)]
    pub window: Option<WindowArg>,
    /// JSON generation settings; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replay the run recorded in a manifest.json.
    #[arg(long, conflicts_with = "config")]
    pub from_manifest: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long, value_enum, default_value = "pixel")]
    pub embedder: EmbedderArg,
    #[arg(long, default_value_t = 4)]
    pub block: usize,
    #[arg(long, default_value_t = 4)]
    pub radius: usize,
    /// Checkpoint for the backbone embedder.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Comma-separated modes, e.g. `baseline,full,only-sac,c-sweep=0/0.5/1`.
    #[arg(long)]
    pub modes: String,
    /// Comma-separated seeds or ranges, e.g. `1-8` or `3,5,9`.
    #[arg(long)]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, value_enum, default_value = "pixel")]
    pub embedder: EmbedderArg,
    #[arg(long, default_value_t = 4)]
    pub block: usize,
    #[arg(long, default_value_t = 4)]
    pub radius: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = write!(std::io::stdout(), "{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            return Err(Error::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match threads {
        None => f(),
        Some(0) => Err(Error::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.steps = s;
    }
    let manifest = train_to(&config, &a.out, a.log_every, a.timing)?;
    say!(
        "trained {} steps, loss {:.4} -> {:.4}; wrote {}",
        config.steps,
        manifest.first_window_loss,
        manifest.last_window_loss,
        a.out.display()
    );
    Ok(())
}

/// Trains, writes the checkpoint to `out` and its manifest next to it
/// (`out` with a `.json` extension).
pub fn train_to(config: &TrainConfig, out: &Path, log_every: usize, timing: bool) -> Result<TrainManifest> {
    let start = Instant::now();
    let steps = config.steps;
    let outcome = train(config, |step, loss| {
        if log_every > 0 && ((step + 1) % log_every == 0 || step + 1 == steps) {
            eprintln!("step {:>5}/{steps}  loss {loss:.5}", step + 1);
            let _ = std::io::stderr().flush();
        }
    })?;
    let meta = TrainingMeta {
        steps,
        seed: config.seed,
        final_loss: Some(outcome.final_loss()),
    };
    save_checkpoint(&outcome.model, &meta, out)?;
    let (first, last) = outcome.loss_window_means(100);
    let manifest = TrainManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: "train".into(),
        config: config.clone(),
        checkpoint: out.display().to_string(),
        final_loss: outcome.final_loss(),
        first_window_loss: first,
        last_window_loss: last,
        losses: outcome.losses,
        timing: timing.then(|| Timing {
            elapsed_ms: start.elapsed().as_millis() as u64,
        }),
    };
    write_json(&manifest, &out.with_extension("json"))?;
    Ok(manifest)
}

/// Everything that determines one generated video.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateRequest {
    pub ckpt: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub control: Option<UniCtrlConfig>,
    pub mode: Option<String>,
}

fn resolve_generate(a: &GenerateArgs) -> Result<GenerateRequest> {
    let mut req = if let Some(path) = &a.from_manifest {
        let m: RunManifest = read_json(path)?;
        GenerateRequest {
            ckpt: PathBuf::from(m.checkpoint.path),
            prompt: m.prompt,
            seed: m.seed,
            sampler: m.sampler,
            control: m.control,
            mode: m.mode,
        }
    } else {
        let file = match &a.config {
            Some(p) => load_generate_file(p)?,
            None => Default::default(),
        };
        GenerateRequest {
            ckpt: PathBuf::new(),
            prompt: file.prompt.unwrap_or_default(),
            seed: file.seed.unwrap_or(0),
            sampler: file.sampler,
            control: file.control,
            mode: None,
        }
    };
    if let Some(c) = &a.ckpt {
        req.ckpt = c.clone();
    }
    if let Some(p) = &a.prompt {
        req.prompt = p.clone();
    }
    if let Some(s) = a.seed {
        req.seed = s;
    }
    apply_sampling(&mut req.sampler, &a.sampling);
    let wants_control = a.unictrl
        || a.motion_degree.is_some()
        || a.no_sac
        || a.no_mi
        || a.no_ss
        || a.kv_mismatch
        || a.q_scope.is_some()
        || a.window.is_some();
    if wants_control {
        let mut c = req.control.take().unwrap_or_default();
        if let Some(v) = a.motion_degree {
            c.motion_degree = v;
        }
        if a.no_sac {
            c.enable_sac = false;
        }
        if a.no_mi {
            c.enable_mi = false;
        }
        if a.no_ss {
            c.enable_ss = false;
        }
        if a.kv_mismatch {
            c.kv_mode = KvMode::ValueOnlyMismatch;
        }
        match a.q_scope {
            Some(ScopeArg::All) => c.q_scope = QueryScope::AllAttention,
            Some(ScopeArg::Cross) => c.q_scope = QueryScope::CrossOnly,
            None => {}
        }
        match a.window {
            Some(WindowArg::Early) => c.window = InjectionWindow::EarlySteps,
            Some(WindowArg::Late) => c.window = InjectionWindow::LateSteps,
            None => {}
        }
        c.validate()?;
        req.control = Some(c);
    }
    Ok(req)
}

fn apply_sampling(s: &mut SamplerConfig, a: &SamplingArgs) {
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.guidance {
        s.guidance = v;
    }
    if let Some(v) = a.eta {
        s.eta = v;
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let req = resolve_generate(a)?;
    let (model, _) = load_checkpoint(&req.ckpt)?;
    let digest = file_digest(&req.ckpt).map_err(|e| Error::io(&req.ckpt, e))?;
    let manifest = with_threads(a.sampling.threads, || {
        generate_into(&model, &digest, &req, &a.out, a.sampling.timing).map(|(m, _)| m)
    })?;
    say!(
        "wrote {} ({} frames, injected steps {:?})",
        a.out.display(),
        model.config().frames,
        manifest.injected_steps()
    );
    Ok(())
}

/// Samples the requested video and writes frames, grid, GIF and
/// `manifest.json` into `dir`.
pub fn generate_into(
    model: &Denoiser,
    ckpt_sha256: &str,
    req: &GenerateRequest,
    dir: &Path,
    timing: bool,
) -> Result<(RunManifest, unictrl_core::pipeline::GeneratedVideo)> {
    let start = Instant::now();
    let video = Sampler::new(model, &req.prompt, &req.sampler, req.control.as_ref())?.run(req.seed, false)?;
    let mut artifacts = emit_frames(&video.frames, dir)?;
    artifacts.push("manifest.json".into());
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: "generate".into(),
        checkpoint: CheckpointRef {
            path: req.ckpt.display().to_string(),
            sha256: ckpt_sha256.into(),
        },
        model: model.config().clone(),
        prompt: req.prompt.clone(),
        seed: req.seed,
        sampler: req.sampler.clone(),
        control: req.control.clone(),
        mode: req.mode.clone(),
        injection_log: video.steps.clone(),
        artifacts,
        timing: timing.then(|| Timing {
            elapsed_ms: start.elapsed().as_millis() as u64,
        }),
    };
    write_json(&manifest, &dir.join("manifest.json"))?;
    Ok((manifest, video))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let frames = load_frames(&a.video)?;
    let model = match &a.ckpt {
        Some(p) => Some(load_checkpoint(p)?.0),
        None => None,
    };
    let settings = MetricSettings {
        embedder: a.embedder.into(),
        block: a.block,
        radius: a.radius,
    };
    let mut report = evaluate(&frames, &settings, model.as_ref())?;
    let manifest_path = a.video.join("manifest.json");
    if manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        report.mode = m.mode.clone().unwrap_or_else(|| mode_label(m.control.as_ref()));
        report.seed = Some(m.seed);
        report.prompt = Some(m.prompt);
        report.config = m.control;
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::format(&a.video, e))?;
    say!("{text}");
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    Ok(())
}

fn mode_label(control: Option<&UniCtrlConfig>) -> String {
    match control {
        None => "baseline".into(),
        Some(_) => "unictrl".into(),
    }
}

/// `"1-3,7"` → `[1, 2, 3, 7]`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Usage(format!("invalid seed list '{s}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi): (u64, u64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
                if lo > hi {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let modes = AblationMode::parse_list(&a.modes)?;
    let seeds = parse_seeds(&a.seeds)?;
    let mut sampler = match &a.config {
        Some(p) => load_generate_file(p)?.sampler,
        None => SamplerConfig::default(),
    };
    apply_sampling(&mut sampler, &a.sampling);
    let metrics = MetricSettings {
        embedder: a.embedder.into(),
        block: a.block,
        radius: a.radius,
    };
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let digest = file_digest(&a.ckpt).map_err(|e| Error::io(&a.ckpt, e))?;
    let reports = with_threads(a.sampling.threads, || {
        ablate_into(&model, &digest, &a.ckpt, &a.prompt, &modes, &seeds, &sampler, &metrics, &a.out, a.sampling.timing)
    })?;
    let doc = emit_report(&reports, &a.out.join("report.json"))?;
    say!("{:<14} {:>4} {:>18} {:>18}", "mode", "runs", "consistency", "motion");
    for s in &doc.summary {
        say!(
            "{:<14} {:>4} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}",
            s.mode, s.runs, s.consistency_mean, s.consistency_std, s.motion_mean, s.motion_std
        );
    }
    say!("wrote {}", a.out.join("report.json").display());
    Ok(())
}

/// Runs every (mode, seed) pair in parallel, writing each video under
/// `out/<mode>/seed_<n>/`. Reports come back in mode-major order.
#[allow(clippy::too_many_arguments)]
pub fn ablate_into(
    model: &Denoiser,
    ckpt_sha256: &str,
    ckpt: &Path,
    prompt: &str,
    modes: &[AblationMode],
    seeds: &[u64],
    sampler: &SamplerConfig,
    metrics: &MetricSettings,
    out: &Path,
    timing: bool,
) -> Result<Vec<MetricReport>> {
    let jobs: Vec<(AblationMode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    jobs.par_iter()
        .map(|&(mode, seed)| {
            let req = GenerateRequest {
                ckpt: ckpt.to_path_buf(),
                prompt: prompt.to_string(),
                seed,
                sampler: sampler.clone(),
                control: mode.config(),
                mode: Some(mode.to_string()),
            };
            let dir = out.join(mode.to_string()).join(format!("seed_{seed}"));
            let (_, video) = generate_into(model, ckpt_sha256, &req, &dir, timing)?;
            let mut report = evaluate(&video.frames, metrics, Some(model))?;
            report.mode = mode.to_string();
            report.seed = Some(seed);
            report.prompt = Some(prompt.to_string());
            report.config = req.control;
            report.expectation = mode.expectation().map(Into::into);
            Ok(report)
        })
        .collect()
}
