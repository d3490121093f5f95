//! Baseline and two-branch controlled sampling, plus ablation modes.
//!
//! A controlled step `n` at timestep `τ_n` runs:
//!
//! 1. with synchronization on, `z_motion := z_out`;
//! 2. the motion branch (vanilla hooks, both guidance passes), capturing
//!    its queries `Q_m` per pass;
//! 3. the output branch with first-frame key/value sharing and, while the
//!    injection window is open, the motion queries substituted;
//! 4. a DDIM update of the output branch, and of the motion branch only when
//!    synchronization is off (otherwise it would be overwritten anyway).
//!
//! The motion branch is skipped entirely when nothing downstream can use it,
//! and every step is logged in a [`StepRecord`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::attention::{ControlHook, SiteKind};
use crate::denoiser::{CapturedQueries, Denoiser, TextCondition};
use crate::diffusion::{cfg_combine, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::video::{decode_latent, Frame};

/// Which attention sites receive the motion queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum QueryScope {
    #[default]
    AllAttention,
    CrossOnly,
}

/// Key/value treatment under first-frame sharing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum KvMode {
    #[default]
    Matched,
    /// Only values come from frame 0; keys stay per frame.
    ValueOnlyMismatch,
}

/// When motion injection is open for a given degree `c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum InjectionWindow {
    /// `τ_n ≥ (1−c)·T`: the early, high-noise steps. `c = 1` injects
    /// throughout, `c = 0` only at `τ = T`.
    #[default]
    EarlySteps,
    /// `τ_n ≤ (1−c)·T`: the literal reading of the conditional in the
    /// pseudo-code listing. Debug use only.
    LateSteps,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct UniCtrlConfig {
    pub enable_sac: bool,
    /// Motion injection degree `c ∈ [0, 1]`.
    pub motion_degree: f64,
    pub enable_ss: bool,
    pub enable_mi: bool,
    pub q_scope: QueryScope,
    pub kv_mode: KvMode,
    pub window: InjectionWindow,
}

impl Default for UniCtrlConfig {
    fn default() -> Self {
        Self {
            enable_sac: true,
            motion_degree: 1.0,
            enable_ss: true,
            enable_mi: true,
            q_scope: QueryScope::AllAttention,
            kv_mode: KvMode::Matched,
            window: InjectionWindow::EarlySteps,
        }
    }
}

impl UniCtrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.motion_degree) {
            return Err(Error::Config(alloc::format!(
                "motion degree c = {} outside [0, 1]",
                self.motion_degree
            )));
        }
        if self.kv_mode == KvMode::ValueOnlyMismatch && !self.enable_sac {
            return Err(Error::Config("value-only key/value mismatch requires SAC".into()));
        }
        Ok(())
    }

    /// Whether query injection happens at timestep `tau`.
    pub fn injects_at(&self, tau: usize, total: usize) -> bool {
        self.enable_mi
            && match self.window {
                InjectionWindow::EarlySteps => motion_injection_active(tau, self.motion_degree, total),
                InjectionWindow::LateSteps => {
                    (tau as f64) <= (1.0 - self.motion_degree) * total as f64 + threshold_slack(total)
                }
            }
    }

    fn self_hook(&self) -> ControlHook<'static> {
        match (self.enable_sac, self.kv_mode) {
            (false, _) => ControlHook::vanilla(),
            (true, KvMode::Matched) => ControlHook::sac(),
            (true, KvMode::ValueOnlyMismatch) => ControlHook::sac_value_only(),
        }
    }
}

// Decimal degrees such as 0.7 are not exact in binary; the slack lets
// `(1 − c)·T` land on the integer boundary it denotes.
fn threshold_slack(total: usize) -> f64 {
    1e-9 * total.max(1) as f64
}

/// `τ_n ≥ (1 − c)·T`, inclusive at equality.
pub fn motion_injection_active(tau: usize, c: f64, total: usize) -> bool {
    tau as f64 >= (1.0 - c) * total as f64 - threshold_slack(total)
}

/// Latents of both branches between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub z_out: Tensor,
    pub z_motion: Tensor,
    /// Index of the next step to run.
    pub step: usize,
    pub noise: RngStream,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub index: usize,
    pub tau: usize,
    pub tau_prev: usize,
    pub injected: bool,
    /// Motion branch denoiser passes ran this step.
    pub motion_evaluated: bool,
    /// Motion branch latent received its own DDIM update.
    pub motion_advanced: bool,
    /// `z_motion` was overwritten with `z_out` at the top of the step.
    pub synced: bool,
    /// On injected steps, `max|Q_out − Q_m| / max|Q_m|` at each
    /// self-attention site of the conditional pass, where `Q_out` is the
    /// query the output branch computed before it was replaced.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Vec::is_empty"))]
    pub query_divergence: Vec<f64>,
}

/// Decoded output of one sampling run.
#[derive(Clone, Debug)]
pub struct GeneratedVideo {
    pub prompt: String,
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub latent: Tensor,
    /// `z_out` after every step, when requested.
    pub trajectory: Option<Vec<Tensor>>,
    pub steps: Vec<StepRecord>,
}

impl GeneratedVideo {
    pub fn injected_steps(&self) -> Vec<usize> {
        self.steps.iter().filter(|s| s.injected).map(|s| s.index).collect()
    }
}

/// Pixel upsampling factor from latent to decoded frames.
pub const DECODE_SCALE: usize = 4;

/// Stepwise sampler for one prompt; `ctrl = None` is the baseline.
pub struct Sampler<'m> {
    model: &'m Denoiser,
    schedule: NoiseSchedule,
    settings: SamplerConfig,
    ctrl: Option<UniCtrlConfig>,
    plan: Vec<usize>,
    cond: TextCondition,
    null: TextCondition,
}

struct Guided {
    eps: Tensor,
    queries: Option<[CapturedQueries; 2]>,
}

impl<'m> Sampler<'m> {
    pub fn new(model: &'m Denoiser, prompt: &str, settings: &SamplerConfig, ctrl: Option<&UniCtrlConfig>) -> Result<Self> {
        let cfg = model.config();
        if let Some(c) = ctrl {
            c.validate()?;
        }
        let plan = settings.timesteps(cfg.timesteps)?;
        Ok(Self {
            model,
            schedule: NoiseSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)?,
            settings: settings.clone(),
            ctrl: ctrl.cloned(),
            plan,
            cond: model.embed_text(prompt),
            null: model.null_condition(),
        })
    }

    /// `τ_0 > … > τ_N`.
    pub fn plan(&self) -> &[usize] {
        &self.plan
    }

    pub fn steps(&self) -> usize {
        self.plan.len() - 1
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Initial latent `z_T ~ N(0, I)` from `(seed, 0)`; the same stream then
    /// supplies per-step noise.
    pub fn init(&self, seed: u64) -> BranchState {
        let mut noise = RngStream::new(seed, 0);
        let z = noise.gaussian(&self.model.config().latent_shape());
        BranchState {
            z_motion: z.clone(),
            z_out: z,
            step: 0,
            noise,
        }
    }

    /// Top-of-step synchronization; a no-op unless SS is on.
    pub fn synchronize(&self, state: &mut BranchState) -> bool {
        match &self.ctrl {
            Some(c) if c.enable_ss => {
                state.z_motion = state.z_out.clone();
                true
            }
            _ => false,
        }
    }

    fn guided(&self, z: &Tensor, tau: usize, hooks: [&[ControlHook<'_>]; 2], capture: bool) -> Result<Guided> {
        let (c, qc) = self.model.denoise(z, &self.cond, tau, hooks[0], capture)?;
        let (u, qu) = self.model.denoise(z, &self.null, tau, hooks[1], capture)?;
        let eps = cfg_combine(&c, &u, self.settings.guidance)?;
        Ok(Guided {
            eps,
            queries: qc.zip(qu).map(|(a, b)| [a, b]),
        })
    }

    /// Whether the motion branch must be evaluated at step `n`.
    fn motion_needed(&self, ctrl: &UniCtrlConfig, n: usize) -> bool {
        let total = self.model.config().timesteps;
        if ctrl.enable_ss {
            ctrl.injects_at(self.plan[n], total)
        } else {
            // the branch evolves on its own; keep it going while any later
            // step can still consume its queries
            (n..self.steps()).any(|m| ctrl.injects_at(self.plan[m], total))
        }
    }

    /// Runs the rest of step `state.step` after synchronization.
    pub fn advance(&self, state: &mut BranchState, synced: bool) -> Result<StepRecord> {
        let n = state.step;
        if n >= self.steps() {
            return Err(Error::range("step", alloc::format!("{n} past the last of {} steps", self.steps())));
        }
        let (tau, tau_prev) = (self.plan[n], self.plan[n + 1]);
        let sigma = self.schedule.sigma(tau, tau_prev, self.settings.eta);
        let mut record = StepRecord {
            index: n,
            tau,
            tau_prev,
            injected: false,
            motion_evaluated: false,
            motion_advanced: false,
            synced,
            query_divergence: Vec::new(),
        };
        let vanilla = self.model.vanilla_hooks();

        let (eps_out, eps_motion) = match &self.ctrl {
            None => (self.guided(&state.z_out, tau, [&vanilla, &vanilla], false)?.eps, None),
            Some(ctrl) => {
                let total = self.model.config().timesteps;
                let inject = ctrl.injects_at(tau, total);
                let motion = if self.motion_needed(ctrl, n) {
                    record.motion_evaluated = true;
                    Some(self.guided(&state.z_motion, tau, [&vanilla, &vanilla], inject)?)
                } else {
                    None
                };
                let base = ctrl.self_hook();
                let build = |pass: usize| -> Vec<ControlHook<'_>> {
                    self.model
                        .config()
                        .sites()
                        .iter()
                        .enumerate()
                        .map(|(i, site)| {
                            let mut hook = match site.kind {
                                SiteKind::SelfAttention => base,
                                SiteKind::CrossAttention => ControlHook::vanilla(),
                            };
                            let scoped = site.kind == SiteKind::CrossAttention || ctrl.q_scope == QueryScope::AllAttention;
                            if let (true, true, Some(m)) = (inject, scoped, motion.as_ref()) {
                                let q = m.queries.as_ref().and_then(|qs| qs[pass].get(i));
                                if let Some(q) = q {
                                    hook = hook.with_query(q);
                                }
                            }
                            hook
                        })
                        .collect()
                };
                let (hc, hu) = (build(0), build(1));
                record.injected = inject && motion.is_some();
                let out = self.guided(&state.z_out, tau, [&hc, &hu], record.injected)?;
                if let (Some(own), Some(m)) = (&out.queries, motion.as_ref().and_then(|m| m.queries.as_ref())) {
                    record.query_divergence = self_query_divergence(&own[0], &m[0]);
                }
                let out = out.eps;
                let motion_eps = if ctrl.enable_ss { None } else { motion.map(|m| m.eps) };
                (out, motion_eps)
            }
        };

        let noise = if sigma > 0.0 {
            Some(state.noise.gaussian(state.z_out.shape()))
        } else {
            None
        };
        state.z_out = self.schedule.ddim_step_with_sigma(&state.z_out, &eps_out, tau, tau_prev, sigma, noise.as_ref())?;
        if let Some(eps_m) = eps_motion {
            state.z_motion =
                self.schedule
                    .ddim_step_with_sigma(&state.z_motion, &eps_m, tau, tau_prev, sigma, noise.as_ref())?;
            record.motion_advanced = true;
        }
        state.step += 1;
        Ok(record)
    }

    /// Synchronize then advance.
    pub fn step(&self, state: &mut BranchState) -> Result<StepRecord> {
        let synced = self.synchronize(state);
        self.advance(state, synced)
    }

    pub fn run(&self, seed: u64, keep_trajectory: bool) -> Result<GeneratedVideo> {
        let mut state = self.init(seed);
        let mut steps = Vec::with_capacity(self.steps());
        let mut trajectory = keep_trajectory.then(Vec::new);
        while state.step < self.steps() {
            steps.push(self.step(&mut state)?);
            if let Some(t) = trajectory.as_mut() {
                t.push(state.z_out.clone());
            }
        }
        Ok(GeneratedVideo {
            prompt: self.cond.prompt.clone(),
            seed,
            frames: decode_latent(&state.z_out, DECODE_SCALE)?,
            latent: state.z_out,
            trajectory,
            steps,
        })
    }
}

fn self_query_divergence(own: &CapturedQueries, motion: &CapturedQueries) -> Vec<f64> {
    own.entries
        .iter()
        .zip(&motion.entries)
        .filter(|((site, _), _)| site.kind == SiteKind::SelfAttention)
        .map(|((_, a), (_, b))| {
            let scale = b.data().iter().fold(0.0f64, |m, &v| m.max(libm::fabs(v as f64)));
            let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (&x, &y)| m.max(libm::fabs(x as f64 - y as f64)));
            if scale == 0.0 { diff } else { diff / scale }
        })
        .collect()
}

/// Guided DDIM with all-vanilla hooks.
pub fn sample_baseline(model: &Denoiser, prompt: &str, seed: u64, sampler: &SamplerConfig) -> Result<GeneratedVideo> {
    Sampler::new(model, prompt, sampler, None)?.run(seed, false)
}

pub fn sample_unictrl(
    model: &Denoiser,
    prompt: &str,
    seed: u64,
    sampler: &SamplerConfig,
    ctrl: &UniCtrlConfig,
) -> Result<GeneratedVideo> {
    Sampler::new(model, prompt, sampler, Some(ctrl))?.run(seed, false)
}

/// Named ablation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationMode {
    Baseline,
    Full,
    NoSac,
    NoMi,
    NoSs,
    OnlySac,
    OnlyMi,
    OnlySs,
    KvMismatch,
    /// Full control at a specific motion degree.
    Degree(f64),
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "baseline" => Self::Baseline,
            "full" => Self::Full,
            "no-sac" => Self::NoSac,
            "no-mi" => Self::NoMi,
            "no-ss" => Self::NoSs,
            "only-sac" => Self::OnlySac,
            "only-mi" => Self::OnlyMi,
            "only-ss" => Self::OnlySs,
            "kv-mismatch" => Self::KvMismatch,
            _ => {
                let v = s
                    .strip_prefix("c=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(alloc::format!("unknown ablation mode '{s}'")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(alloc::format!("motion degree {v} outside [0, 1]")));
                }
                Self::Degree(v)
            }
        })
    }

    /// Comma-separated modes; `c-sweep=a/b/c` expands to one `c=` mode each.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            if let Some(vals) = item.strip_prefix("c-sweep=") {
                for v in vals.split('/') {
                    out.push(Self::parse(&alloc::format!("c={v}"))?);
                }
            } else {
                out.push(Self::parse(item)?);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no ablation modes given".into()));
        }
        Ok(out)
    }

    /// Controlled configuration, or `None` for the baseline sampler.
    pub fn config(&self) -> Option<UniCtrlConfig> {
        let full = UniCtrlConfig::default();
        let set = |sac, mi, ss| UniCtrlConfig {
            enable_sac: sac,
            enable_mi: mi,
            enable_ss: ss,
            ..full.clone()
        };
        Some(match *self {
            Self::Baseline => return None,
            Self::Full => full,
            Self::NoSac => set(false, true, true),
            Self::NoMi => set(true, false, true),
            Self::NoSs => set(true, true, false),
            Self::OnlySac => set(true, false, false),
            Self::OnlyMi => set(false, true, false),
            Self::OnlySs => set(false, false, true),
            Self::KvMismatch => UniCtrlConfig {
                kv_mode: KvMode::ValueOnlyMismatch,
                ..full
            },
            Self::Degree(c) => UniCtrlConfig {
                motion_degree: c,
                ..full
            },
        })
    }

    /// The qualitative outcome this mode is expected to show.
    pub fn expectation(&self) -> Option<&'static str> {
        match self {
            Self::OnlyMi | Self::OnlySs => Some("expected: identical to baseline"),
            Self::OnlySac | Self::NoMi => Some("expected: max consistency, min motion"),
            Self::KvMismatch => Some("expected: degraded consistency vs matched key/value"),
            _ => None,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Baseline => "baseline",
            Self::Full => "full",
            Self::NoSac => "no-sac",
            Self::NoMi => "no-mi",
            Self::NoSs => "no-ss",
            Self::OnlySac => "only-sac",
            Self::OnlyMi => "only-mi",
            Self::OnlySs => "only-ss",
            Self::KvMismatch => "kv-mismatch",
            Self::Degree(c) => return write!(f, "c={c}"),
        };
        f.write_str(s)
    }
}

/// Samples one video per mode from the same seed and scores each one.
pub fn ablation_run(
    model: &Denoiser,
    prompt: &str,
    seed: u64,
    sampler: &SamplerConfig,
    modes: &[AblationMode],
    metrics: &crate::metrics::MetricSettings,
) -> Result<Vec<(GeneratedVideo, crate::metrics::MetricReport)>> {
    modes
        .iter()
        .map(|mode| {
            let ctrl = mode.config();
            let video = Sampler::new(model, prompt, sampler, ctrl.as_ref())?.run(seed, false)?;
            let mut report = crate::metrics::evaluate(&video.frames, metrics, Some(model))?;
            report.mode = mode.to_string();
            report.seed = Some(seed);
            report.prompt = Some(prompt.to_string());
            report.config = ctrl;
            report.expectation = mode.expectation().map(Into::into);
            Ok((video, report))
        })
        .collect()
}
