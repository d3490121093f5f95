//! Tiny patch-transformer video denoiser `ε_θ(z_t, c, t)`.
//!
//! Each frame of the latent is cut into `patch × patch` tiles, embedded to
//! `model_dim`, and offset by fixed spatial/frame positional encodings plus a
//! projected sinusoidal timestep encoding. Every block then applies
//!
//! ```text
//! h += SelfAttn(LN(h))      per frame, hookable
//! h += CrossAttn(LN(h), c)  per frame, hookable
//! h += TemporalAttn(LN(h))  per spatial token across frames
//! h += FFN(LN(h))
//! ```
//!
//! and a final norm and linear head map tokens back to latent patches.
//! Hooked sites run in the order block 0 self, block 0 cross, block 1 self,
//! and so on.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttentionObserver, AttentionVars, ControlHook, SiteId, SiteKind, SiteProbe};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DenoiserConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub cond_dim: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
    /// Training horizon `T` of the noise schedule.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 4,
            patch: 2,
            model_dim: 64,
            heads: 4,
            blocks: 4,
            cond_dim: 64,
            vocab_size: 256,
            ffn_mult: 4,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.frames == 0 || self.channels == 0 || self.patch == 0 {
            return bad("frames, channels and patch must be positive");
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad("latent height and width must be positive multiples of the patch size");
        }
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of head count");
        }
        if !(self.model_dim / self.heads).is_multiple_of(2) || !self.model_dim.is_multiple_of(4) {
            return bad("model_dim must be divisible by 4 and head_dim must be even");
        }
        if self.blocks == 0 || self.cond_dim == 0 || !self.cond_dim.is_multiple_of(2) || self.vocab_size == 0 || self.ffn_mult == 0 {
            return bad("blocks, vocab_size, ffn_mult and (even) cond_dim must be positive");
        }
        if self.timesteps == 0 {
            return bad("timesteps must be positive");
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("beta range must satisfy 0 < start <= end < 1");
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Shape of a video latent, `[F, C, H, W]`.
    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    /// Number of hookable attention sites.
    pub fn site_count(&self) -> usize {
        2 * self.blocks
    }

    pub fn sites(&self) -> Vec<SiteId> {
        (0..self.blocks)
            .flat_map(|block| {
                [SiteKind::SelfAttention, SiteKind::CrossAttention]
                    .into_iter()
                    .map(move |kind| SiteId { block, kind })
            })
            .collect()
    }
}

/// A text condition: hashed prompt tokens and their embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition {
    pub prompt: String,
    pub tokens: Vec<usize>,
    /// `[tokens, cond_dim]`; a single all-zeros row for the null condition.
    pub embedding: Tensor,
    pub is_null: bool,
}

/// Queries computed at each hooked site during one denoiser call, in
/// execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CapturedQueries {
    pub entries: Vec<(SiteId, Tensor)>,
}

impl CapturedQueries {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.entries.get(index).map(|(_, t)| t)
    }
}

impl AttentionObserver for CapturedQueries {
    fn observe(&mut self, probe: &SiteProbe<'_>) {
        self.entries.push((probe.site, probe.query.clone()));
    }
}

/// FNV-1a, 64 bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased whitespace tokens hashed into `vocab` buckets.
pub fn tokenize(prompt: &str, vocab: usize) -> Vec<usize> {
    prompt
        .split_whitespace()
        .map(|w| {
            let lower: String = w.chars().flat_map(char::to_lowercase).collect();
            (fnv1a(lower.as_bytes()) % vocab as u64) as usize
        })
        .collect()
}

/// Standard sinusoidal encoding of a scalar position into `dim` features.
fn sinusoid(pos: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out[i] = libm::sin(pos * freq) as f32;
        out[half + i] = libm::cos(pos * freq) as f32;
    }
    out
}

/// `[F, P, D]` fixed encodings: 2-D spatial position plus frame index.
fn positional_table(cfg: &DenoiserConfig) -> Tensor {
    let (hp, wp, d) = (cfg.height / cfg.patch, cfg.width / cfg.patch, cfg.model_dim);
    let mut data = Vec::with_capacity(cfg.frames * hp * wp * d);
    for f in 0..cfg.frames {
        let fe = sinusoid(f as f64, d);
        for r in 0..hp {
            let re = sinusoid(r as f64, d / 2);
            for c in 0..wp {
                let ce = sinusoid(c as f64, d / 2);
                for j in 0..d {
                    let spatial = if j < d / 2 { re[j] } else { ce[j - d / 2] };
                    data.push(spatial + fe[j]);
                }
            }
        }
    }
    Tensor::from_parts(vec![cfg.frames, hp * wp, d], data)
}

fn patchify(z: &Tensor, cfg: &DenoiserConfig) -> Result<Tensor> {
    let (f, c, p) = (cfg.frames, cfg.channels, cfg.patch);
    let (hp, wp) = (cfg.height / p, cfg.width / p);
    z.reshape(&[f, c, hp, p, wp, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[f, hp * wp, c * p * p])
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockIds {
    norms: [(usize, usize); 4],
    self_attn: AttnIds,
    cross_attn: AttnIds,
    temporal_attn: AttnIds,
    ffn: (usize, usize, usize, usize),
}

#[derive(Clone, Debug)]
struct Layout {
    patch: (usize, usize),
    time: (usize, usize),
    token_table: usize,
    blocks: Vec<BlockIds>,
    final_norm: (usize, usize),
    head: (usize, usize),
}

fn layout(cfg: &DenoiserConfig) -> (Layout, Vec<Spec>) {
    let mut specs: Vec<Spec> = Vec::new();
    let mut add = |name: String, shape: &[usize], init: Init| {
        specs.push(Spec {
            name,
            shape: shape.to_vec(),
            init,
        });
        specs.len() - 1
    };
    let d = cfg.model_dim;
    let lin = |fan_in: usize| Init::Normal(1.0 / libm::sqrtf(fan_in as f32));
    let patch = (
        add("patch_embed.weight".into(), &[cfg.patch_dim(), d], lin(cfg.patch_dim())),
        add("patch_embed.bias".into(), &[d], Init::Zeros),
    );
    let time = (
        add("time_embed.weight".into(), &[d, d], lin(d)),
        add("time_embed.bias".into(), &[d], Init::Zeros),
    );
    let token_table = add("text.token_table".into(), &[cfg.vocab_size, cfg.cond_dim], Init::Normal(1.0));
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let mut norm = |i: usize| {
            (
                add(alloc::format!("blocks.{b}.norm{i}.gain"), &[d], Init::Ones),
                add(alloc::format!("blocks.{b}.norm{i}.bias"), &[d], Init::Zeros),
            )
        };
        let norms = [norm(1), norm(2), norm(3), norm(4)];
        let mut attn = |kind: &str, kv_in: usize| AttnIds {
            q: add(alloc::format!("blocks.{b}.{kind}.to_q"), &[d, d], lin(d)),
            k: add(alloc::format!("blocks.{b}.{kind}.to_k"), &[kv_in, d], lin(kv_in)),
            v: add(alloc::format!("blocks.{b}.{kind}.to_v"), &[kv_in, d], lin(kv_in)),
            o: add(alloc::format!("blocks.{b}.{kind}.to_out"), &[d, d], lin(d)),
        };
        let self_attn = attn("self_attn", d);
        let cross_attn = attn("cross_attn", cfg.cond_dim);
        let temporal_attn = attn("temporal_attn", d);
        let hidden = d * cfg.ffn_mult;
        let ffn = (
            add(alloc::format!("blocks.{b}.ffn.w1"), &[d, hidden], lin(d)),
            add(alloc::format!("blocks.{b}.ffn.b1"), &[hidden], Init::Zeros),
            add(alloc::format!("blocks.{b}.ffn.w2"), &[hidden, d], lin(hidden)),
            add(alloc::format!("blocks.{b}.ffn.b2"), &[d], Init::Zeros),
        );
        blocks.push(BlockIds {
            norms,
            self_attn,
            cross_attn,
            temporal_attn,
            ffn,
        });
    }
    let final_norm = (
        add("final_norm.gain".into(), &[d], Init::Ones),
        add("final_norm.bias".into(), &[d], Init::Zeros),
    );
    let head = (
        add("head.weight".into(), &[d, cfg.patch_dim()], Init::Normal(0.1 / libm::sqrtf(d as f32))),
        add("head.bias".into(), &[cfg.patch_dim()], Init::Zeros),
    );
    (
        Layout {
            patch,
            time,
            token_table,
            blocks,
            final_norm,
            head,
        },
        specs,
    )
}

/// The denoiser network: configuration, parameters, fixed encodings.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    positional: Tensor,
}

impl Denoiser {
    /// Fresh parameters drawn from a seeded stream.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut stream = RngStream::new(seed, 0);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.init {
                Init::Normal(std) => stream.gaussian(&spec.shape).scale(std)?,
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
            };
            names.push(spec.name);
            params.push(t);
        }
        let positional = positional_table(&config);
        Ok(Self {
            config,
            names,
            params,
            layout,
            positional,
        })
    }

    /// Rebuilds a model from named parameters, which must match the layout
    /// implied by `config` exactly (names, order and shapes).
    pub fn from_parameters(config: DenoiserConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        if named.len() != specs.len() {
            return Err(Error::Config(alloc::format!(
                "expected {} parameters, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Config(alloc::format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            names.push(name);
            params.push(t);
        }
        let positional = positional_table(&config);
        Ok(Self {
            config,
            names,
            params,
            layout,
            positional,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, index: usize) -> &Tensor {
        &self.params[index]
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index]
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn vanilla_hooks(&self) -> Vec<ControlHook<'static>> {
        vec![ControlHook::VANILLA; self.config.site_count()]
    }

    /// Plain gradient-descent update `θ ← θ − lr·g`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f32) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id];
            if p.shape() != g.shape() {
                return Err(Error::shape("apply_gradients", p.shape(), g.shape()));
            }
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
            crate::tensor::ensure_finite("apply_gradients", p.data())?;
        }
        Ok(())
    }

    /// Deterministic text condition; the empty prompt is the null condition.
    pub fn embed_text(&self, prompt: &str) -> TextCondition {
        let tokens = tokenize(prompt, self.config.vocab_size);
        if tokens.is_empty() {
            return self.null_condition();
        }
        let table = &self.params[self.layout.token_table];
        let dc = self.config.cond_dim;
        let mut data = Vec::with_capacity(tokens.len() * dc);
        for (pos, &tok) in tokens.iter().enumerate() {
            let pe = sinusoid(pos as f64, dc);
            let row = &table.data()[tok * dc..(tok + 1) * dc];
            data.extend(row.iter().zip(&pe).map(|(a, b)| a + b));
        }
        TextCondition {
            prompt: prompt.into(),
            embedding: Tensor::from_parts(vec![tokens.len(), dc], data),
            tokens,
            is_null: false,
        }
    }

    pub fn null_condition(&self) -> TextCondition {
        TextCondition {
            prompt: String::new(),
            tokens: Vec::new(),
            embedding: Tensor::zeros(&[1, self.config.cond_dim]),
            is_null: true,
        }
    }

    /// Projected sinusoidal encoding of timestep `t ∈ [0, T]`, shape `[D]`.
    pub fn embed_timestep(&self, t: usize) -> Result<Tensor> {
        let mut tape = GradTape::inference();
        let v = self.timestep_var(&mut tape, t, None)?;
        Ok(tape.value(v).clone())
    }

    fn timestep_var<'a>(&'a self, tape: &mut GradTape<'a>, t: usize, vars: Option<&[Var]>) -> Result<Var> {
        if t > self.config.timesteps {
            return Err(Error::range(
                "timestep",
                alloc::format!("{t} not in 0..={}", self.config.timesteps),
            ));
        }
        let d = self.config.model_dim;
        let (wi, bi) = self.layout.time;
        let (w, b) = match vars {
            Some(v) => (v[wi], v[bi]),
            None => (tape.constant_ref(&self.params[wi]), tape.constant_ref(&self.params[bi])),
        };
        let s = tape.constant(Tensor::from_parts(vec![1, d], sinusoid(t as f64, d)));
        let e = tape.matmul(s, w)?;
        let e = tape.add_row(e, b)?;
        tape.reshape(e, &[d])
    }

    fn check_inputs(&self, z: &Tensor, hooks: &[ControlHook<'_>]) -> Result<()> {
        let shape = self.config.latent_shape();
        if z.shape() != shape {
            return Err(Error::shape("denoise", z.shape(), &shape));
        }
        if hooks.len() != self.config.site_count() {
            return Err(Error::Hook(alloc::format!(
                "{} hooks given for {} sites",
                hooks.len(),
                self.config.site_count()
            )));
        }
        Ok(())
    }

    /// Builds the forward pass on `tape` and returns the noise prediction.
    fn forward<'a>(
        &'a self,
        tape: &mut GradTape<'a>,
        z: &'a Tensor,
        cond: &'a TextCondition,
        t: usize,
        hooks: &[ControlHook<'a>],
        mut observer: Option<&mut (dyn AttentionObserver + '_)>,
    ) -> Result<Var> {
        self.check_inputs(z, hooks)?;
        let cfg = &self.config;
        let f = cfg.frames;
        let vars: Vec<Var> = self.params.iter().enumerate().map(|(i, w)| tape.param(i, w)).collect();
        let lay = &self.layout;

        // conditioning tokens
        let cond_var = if cond.is_null {
            tape.constant_ref(&cond.embedding)
        } else {
            let rows = tape.gather_rows(vars[lay.token_table], &cond.tokens)?;
            let pe: Vec<f32> = (0..cond.tokens.len())
                .flat_map(|pos| sinusoid(pos as f64, cfg.cond_dim))
                .collect();
            let pe = tape.constant(Tensor::from_parts(vec![cond.tokens.len(), cfg.cond_dim], pe));
            tape.add(rows, pe)?
        };

        // embedding
        let patches = tape.constant(patchify(z, cfg)?);
        let x = tape.matmul(patches, vars[lay.patch.0])?;
        let x = tape.add_row(x, vars[lay.patch.1])?;
        let pos = tape.constant_ref(&self.positional);
        let x = tape.add(x, pos)?;
        let temb = self.timestep_var(tape, t, Some(&vars))?;
        let mut h = tape.add_row(x, temb)?;

        let attn_vars = |ids: AttnIds| AttentionVars {
            q: vars[ids.q],
            k: vars[ids.k],
            v: vars[ids.v],
            o: vars[ids.o],
            heads: cfg.heads,
        };
        for (b, blk) in lay.blocks.iter().enumerate() {
            let norm = |tape: &mut GradTape<'a>, h: Var, i: usize| {
                let (g, bias) = blk.norms[i];
                tape.layer_norm(h, vars[g], vars[bias])
            };
            let site = |kind| SiteId { block: b, kind };

            let n = norm(tape, h, 0)?;
            let a = attention::self_attention(
                tape,
                n,
                &attn_vars(blk.self_attn),
                &hooks[2 * b],
                site(SiteKind::SelfAttention),
                observer.as_deref_mut(),
            )?;
            h = tape.add(h, a)?;

            let n = norm(tape, h, 1)?;
            let a = attention::cross_attention(
                tape,
                n,
                cond_var,
                &attn_vars(blk.cross_attn),
                &hooks[2 * b + 1],
                site(SiteKind::CrossAttention),
                observer.as_deref_mut(),
            )?;
            h = tape.add(h, a)?;

            let n = norm(tape, h, 2)?;
            let a = attention::temporal_attention(tape, n, &attn_vars(blk.temporal_attn))?;
            h = tape.add(h, a)?;

            let n = norm(tape, h, 3)?;
            let (w1, b1, w2, b2) = blk.ffn;
            let u = tape.matmul(n, vars[w1])?;
            let u = tape.add_row(u, vars[b1])?;
            let u = tape.silu(u)?;
            let u = tape.matmul(u, vars[w2])?;
            let u = tape.add_row(u, vars[b2])?;
            h = tape.add(h, u)?;
        }

        let n = tape.layer_norm(h, vars[lay.final_norm.0], vars[lay.final_norm.1])?;
        let out = tape.matmul(n, vars[lay.head.0])?;
        let out = tape.add_row(out, vars[lay.head.1])?;
        // unpatchify: [F, P, C·p·p] → [F, C, H, W]
        let (c, pp) = (cfg.channels, cfg.patch);
        let (hp, wp) = (cfg.height / pp, cfg.width / pp);
        let out = tape.reshape(out, &[f, hp, wp, c, pp, pp])?;
        let out = tape.permute(out, &[0, 3, 1, 4, 2, 5])?;
        tape.reshape(out, &[f, c, cfg.height, cfg.width])
    }

    /// Noise prediction with optional query capture.
    pub fn denoise(
        &self,
        z: &Tensor,
        cond: &TextCondition,
        t: usize,
        hooks: &[ControlHook<'_>],
        capture: bool,
    ) -> Result<(Tensor, Option<CapturedQueries>)> {
        if capture {
            let mut cap = CapturedQueries::default();
            let eps = self.denoise_observed(z, cond, t, hooks, Some(&mut cap))?;
            Ok((eps, Some(cap)))
        } else {
            Ok((self.denoise_observed(z, cond, t, hooks, None)?, None))
        }
    }

    /// Noise prediction reporting every hooked site to `observer`.
    pub fn denoise_observed(
        &self,
        z: &Tensor,
        cond: &TextCondition,
        t: usize,
        hooks: &[ControlHook<'_>],
        observer: Option<&mut (dyn AttentionObserver + '_)>,
    ) -> Result<Tensor> {
        let mut tape = GradTape::inference();
        let out = self.forward(&mut tape, z, cond, t, hooks, observer)?;
        Ok(tape.value(out).clone())
    }

    /// Mean squared error between `eps` and the all-vanilla prediction at
    /// `(z_t, cond, t)`, with gradients for every parameter.
    pub fn loss_and_gradients(
        &self,
        z_t: &Tensor,
        cond: &TextCondition,
        t: usize,
        eps: &Tensor,
    ) -> Result<(f32, Gradients)> {
        let hooks = self.vanilla_hooks();
        let mut tape = GradTape::recording();
        let pred = self.forward(&mut tape, z_t, cond, t, &hooks, None)?;
        let target = tape.constant_ref(eps);
        let diff = tape.sub(pred, target)?;
        let loss = tape.mean_square(diff)?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }

    /// Loss only, through the same forward path.
    pub fn loss(&self, z_t: &Tensor, cond: &TextCondition, t: usize, eps: &Tensor) -> Result<f32> {
        let hooks = self.vanilla_hooks();
        let mut tape = GradTape::inference();
        let pred = self.forward(&mut tape, z_t, cond, t, &hooks, None)?;
        let target = tape.constant_ref(eps);
        let diff = tape.sub(pred, target)?;
        let loss = tape.mean_square(diff)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Patch-embedding features of one latent frame `[C, H, W]`, flattened.
    pub fn patch_features(&self, frame: &Tensor) -> Result<Vec<f32>> {
        let cfg = &self.config;
        let one = DenoiserConfig {
            frames: 1,
            ..cfg.clone()
        };
        let shaped = frame.reshape(&[1, cfg.channels, cfg.height, cfg.width])?;
        let patches = patchify(&shaped, &one)?;
        let x = patches.matmul(&self.params[self.layout.patch.0])?;
        Ok(x.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> DenoiserConfig {
        DenoiserConfig {
            frames: 3,
            height: 4,
            width: 4,
            channels: 2,
            patch: 2,
            model_dim: 8,
            heads: 2,
            blocks: 2,
            cond_dim: 8,
            vocab_size: 16,
            ffn_mult: 2,
            timesteps: 100,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let bad = DenoiserConfig {
            height: 15,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DenoiserConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn text_embedding_contract() {
        let m = Denoiser::new(micro(), 1).unwrap();
        let null = m.embed_text("");
        assert!(null.is_null);
        assert!(null.embedding.data().iter().all(|&v| v == 0.0));
        assert!(m.embed_text("   ").is_null);
        let a = m.embed_text("moving square");
        assert_eq!(a, m.embed_text("moving square"));
        assert_ne!(a.embedding, m.embed_text("moving circle").embedding);
        assert_eq!(m.embed_text("Red SQUARE").tokens, m.embed_text("red square").tokens);
    }

    #[test]
    fn timestep_embedding_contract() {
        let m = Denoiser::new(DenoiserConfig::default(), 1).unwrap();
        let t = m.config().timesteps;
        let e0 = m.embed_timestep(0).unwrap();
        let et = m.embed_timestep(t).unwrap();
        assert!(!e0.bit_eq(&et));
        for s in (0..=t).step_by(37) {
            let n = m.embed_timestep(s).unwrap().data().iter().map(|x| x * x).sum::<f32>();
            assert!(n.is_finite() && n > 0.0);
        }
        let cos = |a: &Tensor, b: &Tensor| {
            let dot: f32 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let na: f32 = a.data().iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.data().iter().map(|x| x * x).sum::<f32>().sqrt();
            dot / (na * nb)
        };
        let (e10, e11, e500) = (
            m.embed_timestep(10).unwrap(),
            m.embed_timestep(11).unwrap(),
            m.embed_timestep(500).unwrap(),
        );
        assert!(cos(&e10, &e11) > cos(&e10, &e500));
        assert!(m.embed_timestep(t + 1).is_err());
    }

    #[test]
    fn denoise_shape_determinism_and_capture() {
        let m = Denoiser::new(micro(), 2).unwrap();
        let z = RngStream::new(3, 0).gaussian(&m.config().latent_shape());
        let cond = m.embed_text("red square moving right");
        let hooks = m.vanilla_hooks();
        let (a, cap) = m.denoise(&z, &cond, 50, &hooks, true).unwrap();
        let (b, _) = m.denoise(&z, &cond, 50, &hooks, false).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), z.shape());
        let cap = cap.unwrap();
        assert_eq!(cap.len(), m.config().site_count());
        assert_eq!(cap.entries.iter().map(|e| e.0).collect::<Vec<_>>(), m.config().sites());
        // null condition path stays finite
        let (n, _) = m.denoise(&z, &m.null_condition(), 50, &hooks, false).unwrap();
        assert!(n.data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn denoise_rejects_bad_inputs() {
        let m = Denoiser::new(micro(), 2).unwrap();
        let cond = m.null_condition();
        let z = Tensor::zeros(&[3, 2, 4, 2]);
        assert!(matches!(m.denoise(&z, &cond, 1, &m.vanilla_hooks(), false), Err(Error::Shape { .. })));
        let z = Tensor::zeros(&m.config().latent_shape());
        assert!(matches!(m.denoise(&z, &cond, 1, &[], false), Err(Error::Hook(_))));
        assert!(m.denoise(&z, &cond, 101, &m.vanilla_hooks(), false).is_err());
    }

    #[test]
    fn single_frame_sac_equals_vanilla() {
        let cfg = DenoiserConfig { frames: 1, ..micro() };
        let m = Denoiser::new(cfg, 4).unwrap();
        let z = RngStream::new(5, 0).gaussian(&m.config().latent_shape());
        let cond = m.embed_text("blue circle");
        let sac: Vec<ControlHook> = m
            .config()
            .sites()
            .iter()
            .map(|s| match s.kind {
                SiteKind::SelfAttention => ControlHook::sac(),
                SiteKind::CrossAttention => ControlHook::vanilla(),
            })
            .collect();
        let (a, _) = m.denoise(&z, &cond, 30, &m.vanilla_hooks(), false).unwrap();
        let (b, _) = m.denoise(&z, &cond, 30, &sac, false).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn self_injection_is_a_no_op() {
        let m = Denoiser::new(micro(), 6).unwrap();
        let z = RngStream::new(7, 0).gaussian(&m.config().latent_shape());
        let cond = m.embed_text("green square moving up");
        let (a, cap) = m.denoise(&z, &cond, 70, &m.vanilla_hooks(), true).unwrap();
        let cap = cap.unwrap();
        let hooks: Vec<ControlHook> = cap.entries.iter().map(|(_, q)| ControlHook::q_inject(q)).collect();
        let (b, _) = m.denoise(&z, &cond, 70, &hooks, false).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn parameters_round_trip_through_from_parameters() {
        let m = Denoiser::new(micro(), 8).unwrap();
        let named: Vec<(String, Tensor)> = m.parameters().map(|(n, t)| (n.into(), t.clone())).collect();
        let back = Denoiser::from_parameters(micro(), named.clone()).unwrap();
        assert!(back.parameters().zip(m.parameters()).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(b.1)));
        let mut wrong = named;
        wrong.swap(0, 1);
        assert!(Denoiser::from_parameters(micro(), wrong).is_err());
    }
}
