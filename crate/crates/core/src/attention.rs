//! Multi-head attention sublayers and the control hooks that steer them.
//!
//! Hidden states are `[frames, tokens, model_dim]`. Spatial self-attention
//! and text cross-attention run per frame and accept a [`ControlHook`];
//! temporal attention runs along the frame axis per spatial token and never
//! takes a hook.
//!
//! Hook semantics at a self-attention site:
//!
//! * keys/values come from each frame's own hidden state ([`KvSource::PerFrame`]),
//!   from frame 0 for every frame ([`KvSource::FirstFrame`]), or only the
//!   values come from frame 0 ([`KvSource::FirstFrameValueOnly`], the
//!   key/value mismatch ablation);
//! * an injected query replaces the computed one after the computed query
//!   has been reported to the observer.
//!
//! Cross-attention sites take keys/values from the text condition, so only
//! query injection applies there.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum KvSource {
    #[default]
    PerFrame,
    FirstFrame,
    FirstFrameValueOnly,
}

/// Per-site attention control.
#[derive(Clone, Copy, Debug, Default)]
pub struct ControlHook<'c> {
    pub kv: KvSource,
    pub query: Option<&'c Tensor>,
}

impl<'c> ControlHook<'c> {
    pub const VANILLA: ControlHook<'static> = ControlHook {
        kv: KvSource::PerFrame,
        query: None,
    };

    pub fn vanilla() -> Self {
        Self::default()
    }

    pub fn sac() -> Self {
        Self {
            kv: KvSource::FirstFrame,
            query: None,
        }
    }

    pub fn sac_value_only() -> Self {
        Self {
            kv: KvSource::FirstFrameValueOnly,
            query: None,
        }
    }

    pub fn q_inject(query: &'c Tensor) -> Self {
        Self {
            kv: KvSource::PerFrame,
            query: Some(query),
        }
    }

    pub fn with_query(self, query: &'c Tensor) -> Self {
        Self {
            query: Some(query),
            ..self
        }
    }

    pub fn is_vanilla(&self) -> bool {
        self.kv == KvSource::PerFrame && self.query.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SiteKind {
    SelfAttention,
    CrossAttention,
}

/// A hookable attention site: the block index and which attention it is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SiteId {
    pub block: usize,
    pub kind: SiteKind,
}

/// What one hooked site saw during a forward pass.
pub struct SiteProbe<'t> {
    pub site: SiteId,
    /// The (normalized) hidden state `[F, P, D]` entering the site.
    pub input: &'t Tensor,
    /// The query computed from the site's own input, before any injection.
    pub query: &'t Tensor,
    /// Keys actually consumed.
    pub key: &'t Tensor,
    /// Values actually consumed.
    pub value: &'t Tensor,
    pub query_injected: bool,
}

/// Receives a [`SiteProbe`] from every hooked site, in execution order.
pub trait AttentionObserver {
    fn observe(&mut self, probe: &SiteProbe<'_>);
}

/// Projection weights of one attention sublayer, stored input-major so a
/// projection is `x × W`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub to_q: Tensor,
    pub to_k: Tensor,
    pub to_v: Tensor,
    pub to_out: Tensor,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn new(to_q: Tensor, to_k: Tensor, to_v: Tensor, to_out: Tensor, heads: usize) -> Result<Self> {
        let w = Self {
            to_q,
            to_k,
            to_v,
            to_out,
            heads,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn model_dim(&self) -> usize {
        self.to_q.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let d = self.to_q.shape()[1];
        let square = |t: &Tensor| t.rank() == 2 && t.shape() == [d, d];
        if !square(&self.to_q) || !square(&self.to_out) {
            return Err(Error::shape("attention_weights", self.to_q.shape(), self.to_out.shape()));
        }
        // Keys and values may read a differently sized context (text tokens).
        if self.to_k.rank() != 2 || self.to_k.shape() != self.to_v.shape() || self.to_k.shape()[1] != d {
            return Err(Error::shape("attention_weights", self.to_k.shape(), self.to_v.shape()));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(alloc::format!("{} heads do not divide model_dim {d}", self.heads)));
        }
        Ok(())
    }

    pub(crate) fn bind<'a>(&'a self, tape: &mut GradTape<'a>) -> AttentionVars {
        AttentionVars {
            q: tape.constant_ref(&self.to_q),
            k: tape.constant_ref(&self.to_k),
            v: tape.constant_ref(&self.to_v),
            o: tape.constant_ref(&self.to_out),
            heads: self.heads,
        }
    }
}

/// Attention weights as tape values.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub heads: usize,
}

/// `[B, T, D] → [B·h, T, D/h]`
fn split_heads(tape: &mut GradTape<'_>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, t, heads, d / heads])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b * heads, t, d / heads])
}

fn merge_heads(tape: &mut GradTape<'_>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let r = tape.reshape(x, &[batch, heads, t, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch, t, heads * dh])
}

/// Scaled dot-product attention with `heads` heads, before the output
/// projection. `q: [B, Tq, D]`, `k, v: [B, Tk, D]`.
pub(crate) fn multi_head(tape: &mut GradTape<'_>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[2] != ks[2] || qs[0] != ks[0] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if ks[..2] != vs[..2] || vs[2] != qs[2] {
        return Err(Error::shape("attention", &ks, &vs));
    }
    if heads == 0 || qs[2] % heads != 0 {
        return Err(Error::Config(alloc::format!("{heads} heads do not divide {}", qs[2])));
    }
    let head_dim = qs[2] / heads;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let scores = tape.matmul_t(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrtf(head_dim as f32))?;
    let weights = tape.softmax(scores)?;
    let out = tape.matmul(weights, vh)?;
    merge_heads(tape, out, qs[0], heads)
}

fn check_injected(site: SiteId, injected: &Tensor, computed: &Tensor) -> Result<()> {
    if injected.shape() != computed.shape() {
        return Err(Error::Hook(alloc::format!(
            "{site:?}: injected query shape {:?} differs from computed {:?}",
            injected.shape(),
            computed.shape()
        )));
    }
    Ok(())
}

/// Spatial self-attention over the tokens of each frame. `x` is the
/// (normalized) hidden state `[F, P, D]`; returns the output-projected
/// attention result.
pub(crate) fn self_attention<'a>(
    tape: &mut GradTape<'a>,
    x: Var,
    w: &AttentionVars,
    hook: &ControlHook<'a>,
    site: SiteId,
    observer: Option<&mut (dyn AttentionObserver + '_)>,
) -> Result<Var> {
    let frames = tape.shape(x)[0];
    let q = tape.matmul(x, w.q)?;
    let first_frame = |tape: &mut GradTape<'a>, proj: Var| -> Result<Var> {
        let x0 = tape.narrow(x, 0, 1)?;
        let p0 = tape.matmul(x0, proj)?;
        tape.repeat_leading(p0, frames)
    };
    let (k, v) = match hook.kv {
        KvSource::PerFrame => (tape.matmul(x, w.k)?, tape.matmul(x, w.v)?),
        KvSource::FirstFrame => (first_frame(tape, w.k)?, first_frame(tape, w.v)?),
        KvSource::FirstFrameValueOnly => (tape.matmul(x, w.k)?, first_frame(tape, w.v)?),
    };
    finish_site(tape, x, q, k, v, w, hook, site, observer)
}

/// Text cross-attention. `cond` is `[Tc, Dc]` and is shared by all frames.
pub(crate) fn cross_attention<'a>(
    tape: &mut GradTape<'a>,
    x: Var,
    cond: Var,
    w: &AttentionVars,
    hook: &ControlHook<'a>,
    site: SiteId,
    observer: Option<&mut (dyn AttentionObserver + '_)>,
) -> Result<Var> {
    if hook.kv != KvSource::PerFrame {
        return Err(Error::Hook(alloc::format!(
            "{site:?}: key/value control applies to self-attention only"
        )));
    }
    let cs = tape.shape(cond).to_vec();
    if cs.len() != 2 {
        return Err(Error::shape("cross_attention", &cs, &[0, 0]));
    }
    let frames = tape.shape(x)[0];
    let q = tape.matmul(x, w.q)?;
    let k = tape.matmul(cond, w.k)?;
    let v = tape.matmul(cond, w.v)?;
    let d = tape.shape(k)[1];
    let k = tape.reshape(k, &[1, cs[0], d])?;
    let k = tape.repeat_leading(k, frames)?;
    let v = tape.reshape(v, &[1, cs[0], d])?;
    let v = tape.repeat_leading(v, frames)?;
    finish_site(tape, x, q, k, v, w, hook, site, observer)
}

#[allow(clippy::too_many_arguments)]
fn finish_site<'a>(
    tape: &mut GradTape<'a>,
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionVars,
    hook: &ControlHook<'a>,
    site: SiteId,
    observer: Option<&mut (dyn AttentionObserver + '_)>,
) -> Result<Var> {
    if let Some(inj) = hook.query {
        check_injected(site, inj, tape.value(q))?;
    }
    if let Some(obs) = observer {
        obs.observe(&SiteProbe {
            site,
            input: tape.value(x),
            query: tape.value(q),
            key: tape.value(k),
            value: tape.value(v),
            query_injected: hook.query.is_some(),
        });
    }
    let q_used = match hook.query {
        Some(inj) => tape.constant_ref(inj),
        None => q,
    };
    let attn = multi_head(tape, q_used, k, v, w.heads)?;
    tape.matmul(attn, w.o)
}

/// Attention along the frame axis, independently for every spatial token.
pub(crate) fn temporal_attention(tape: &mut GradTape<'_>, x: Var, w: &AttentionVars) -> Result<Var> {
    let xt = tape.permute(x, &[1, 0, 2])?;
    let q = tape.matmul(xt, w.q)?;
    let k = tape.matmul(xt, w.k)?;
    let v = tape.matmul(xt, w.v)?;
    let attn = multi_head(tape, q, k, v, w.heads)?;
    let out = tape.matmul(attn, w.o)?;
    tape.permute(out, &[1, 0, 2])
}

fn hidden_state_check(z: &Tensor) -> Result<()> {
    if z.rank() != 3 {
        return Err(Error::shape("hidden_state", z.shape(), &[0, 0, 0]));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention on plain tensors (no output
/// projection). `q: [B, Tq, D]`, `k, v: [B, Tk, D]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let mut tape = GradTape::inference();
    let (qv, kv, vv) = (tape.constant_ref(q), tape.constant_ref(k), tape.constant_ref(v));
    let out = multi_head(&mut tape, qv, kv, vv, heads)?;
    Ok(tape.value(out).clone())
}

/// Spatial self-attention sublayer on `z: [F, P, D]`.
pub fn self_attention_block(
    z: &Tensor,
    w: &AttentionWeights,
    hook: &ControlHook<'_>,
    observer: Option<&mut (dyn AttentionObserver + '_)>,
) -> Result<Tensor> {
    hidden_state_check(z)?;
    let mut tape = GradTape::inference();
    let vars = w.bind(&mut tape);
    let x = tape.constant_ref(z);
    let site = SiteId {
        block: 0,
        kind: SiteKind::SelfAttention,
    };
    let out = self_attention(&mut tape, x, &vars, hook, site, observer)?;
    Ok(tape.value(out).clone())
}

/// Text cross-attention sublayer on `z: [F, P, D]` against `cond: [Tc, Dc]`.
pub fn cross_attention_block(
    z: &Tensor,
    cond: &Tensor,
    w: &AttentionWeights,
    hook: &ControlHook<'_>,
    observer: Option<&mut (dyn AttentionObserver + '_)>,
) -> Result<Tensor> {
    hidden_state_check(z)?;
    let mut tape = GradTape::inference();
    let vars = w.bind(&mut tape);
    let x = tape.constant_ref(z);
    let c = tape.constant_ref(cond);
    let site = SiteId {
        block: 0,
        kind: SiteKind::CrossAttention,
    };
    let out = cross_attention(&mut tape, x, c, &vars, hook, site, observer)?;
    Ok(tape.value(out).clone())
}

/// Temporal attention sublayer on `z: [F, P, D]`.
pub fn temporal_attention_block(z: &Tensor, w: &AttentionWeights) -> Result<Tensor> {
    hidden_state_check(z)?;
    let mut tape = GradTape::inference();
    let vars = w.bind(&mut tape);
    let x = tape.constant_ref(z);
    let out = temporal_attention(&mut tape, x, &vars)?;
    Ok(tape.value(out).clone())
}

/// Records every probe it receives, cloning the tensors.
#[derive(Clone, Debug, Default)]
pub struct ProbeRecorder {
    pub sites: Vec<SiteId>,
    pub inputs: Vec<Tensor>,
    pub queries: Vec<Tensor>,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub injected: Vec<bool>,
}

impl AttentionObserver for ProbeRecorder {
    fn observe(&mut self, probe: &SiteProbe<'_>) {
        self.sites.push(probe.site);
        self.inputs.push(probe.input.clone());
        self.queries.push(probe.query.clone());
        self.keys.push(probe.key.clone());
        self.values.push(probe.value.clone());
        self.injected.push(probe.query_injected);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use alloc::vec;

    /// Per-head, per-pair loops in f64.
    fn oracle(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
        let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let tk = k.shape()[1];
        let dh = d / heads;
        let at = |t: &Tensor, bi: usize, ti: usize, j: usize, len: usize| t.data()[(bi * len + ti) * d + j] as f64;
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..tq {
                    let mut scores = vec![0.0; tk];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += at(q, bi, i, h * dh + c, tq) * at(k, bi, j, h * dh + c, tk);
                        }
                        *s = dot / (dh as f64).sqrt();
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..tk {
                            acc += e[j] / z * at(v, bi, j, h * dh + c, tk);
                        }
                        out[(bi * tq + i) * d + h * dh + c] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_diff(t: &Tensor, o: &[f64]) -> f64 {
        t.data().iter().zip(o).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max)
    }

    fn weights(s: &mut RngStream, d: usize, heads: usize) -> AttentionWeights {
        let sc = 1.0 / (d as f32).sqrt();
        let mut m = || s.gaussian(&[d, d]).scale(sc).unwrap();
        AttentionWeights::new(m(), m(), m(), m(), heads).unwrap()
    }

    #[test]
    fn singleton_key_returns_value() {
        let mut s = RngStream::new(1, 0);
        let q = s.gaussian(&[1, 3, 4]);
        let k = s.gaussian(&[1, 1, 4]);
        let v = s.gaussian(&[1, 1, 4]);
        let out = attention(&q, &k, &v, 2).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, v.data());
        }
    }

    #[test]
    fn random_instance_matches_pairwise_oracle() {
        let mut s = RngStream::new(2, 0);
        let q = s.gaussian(&[1, 4, 8]);
        let k = s.gaussian(&[1, 4, 8]);
        let v = s.gaussian(&[1, 4, 8]);
        let out = attention(&q, &k, &v, 2).unwrap();
        assert!(max_diff(&out, &oracle(&q, &k, &v, 2)) < 1e-5);
    }

    #[test]
    fn sharpened_self_match_selects_value_row() {
        let mut s = RngStream::new(3, 0);
        // one-hot rows scaled up: each query matches only its own key
        let mut qd = vec![0.0f32; 4 * 8];
        for i in 0..4 {
            qd[i * 8 + i] = 40.0;
            qd[i * 8 + 4 + i] = 40.0;
        }
        let q = Tensor::new(&[1, 4, 8], qd).unwrap();
        let v = s.gaussian(&[1, 4, 8]);
        let out = attention(&q, &q, &v, 2).unwrap();
        assert!(max_diff(&out, &oracle(&q, &q, &v, 2)) < 1e-5);
        assert!(out.max_abs_diff(&v).unwrap() < 1e-5);
    }

    #[test]
    fn head_dim_mismatch_is_an_error() {
        let q = Tensor::zeros(&[1, 2, 8]);
        let k = Tensor::zeros(&[1, 2, 6]);
        assert!(attention(&q, &k, &k, 2).is_err());
        let v = Tensor::zeros(&[1, 3, 8]);
        assert!(attention(&q, &q, &v, 2).is_err());
    }

    #[test]
    fn sac_is_vanilla_for_a_single_frame() {
        let mut s = RngStream::new(4, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[1, 5, 8]);
        let a = self_attention_block(&z, &w, &ControlHook::vanilla(), None).unwrap();
        let b = self_attention_block(&z, &w, &ControlHook::sac(), None).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn sac_matches_vanilla_on_identical_frames() {
        let mut s = RngStream::new(5, 0);
        let w = weights(&mut s, 8, 2);
        let frame = s.gaussian(&[1, 5, 8]);
        let z = frame.repeat_leading(3);
        let a = self_attention_block(&z, &w, &ControlHook::vanilla(), None).unwrap();
        let b = self_attention_block(&z, &w, &ControlHook::sac(), None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn sac_consumes_first_frame_projections() {
        let mut s = RngStream::new(6, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[3, 5, 8]);
        let mut rec = ProbeRecorder::default();
        self_attention_block(&z, &w, &ControlHook::sac(), Some(&mut rec)).unwrap();
        let z0 = z.narrow(0, 1).unwrap();
        let k0 = z0.matmul(&w.to_k).unwrap();
        let v0 = z0.matmul(&w.to_v).unwrap();
        for f in 0..3 {
            assert!(rec.keys[0].narrow(f, 1).unwrap().bit_eq(&k0));
            assert!(rec.values[0].narrow(f, 1).unwrap().bit_eq(&v0));
        }
        // the reported query is the frame's own projection
        assert!(rec.queries[0].bit_eq(&z.matmul(&w.to_q).unwrap()));
    }

    #[test]
    fn value_only_mismatch_keeps_per_frame_keys() {
        let mut s = RngStream::new(7, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[3, 5, 8]);
        let mut rec = ProbeRecorder::default();
        self_attention_block(&z, &w, &ControlHook::sac_value_only(), Some(&mut rec)).unwrap();
        assert!(rec.keys[0].bit_eq(&z.matmul(&w.to_k).unwrap()));
        let v0 = z.narrow(0, 1).unwrap().matmul(&w.to_v).unwrap();
        assert!(rec.values[0].narrow(2, 1).unwrap().bit_eq(&v0));
    }

    #[test]
    fn query_injection_contract() {
        let mut s = RngStream::new(8, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[2, 5, 8]);
        let mut rec = ProbeRecorder::default();
        let vanilla = self_attention_block(&z, &w, &ControlHook::vanilla(), Some(&mut rec)).unwrap();
        let q = rec.queries[0].clone();
        let same = self_attention_block(&z, &w, &ControlHook::q_inject(&q), None).unwrap();
        assert!(same.bit_eq(&vanilla));
        let other = s.gaussian(&[2, 5, 8]);
        let a = self_attention_block(&z, &w, &ControlHook::q_inject(&other), None).unwrap();
        let b = self_attention_block(&z, &w, &ControlHook::q_inject(&other), None).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&vanilla));
        let wrong = Tensor::zeros(&[2, 4, 8]);
        assert!(matches!(
            self_attention_block(&z, &w, &ControlHook::q_inject(&wrong), None),
            Err(Error::Hook(_))
        ));
    }

    #[test]
    fn cross_attention_single_token_and_semantics() {
        let mut s = RngStream::new(9, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[2, 5, 8]);
        let cond = s.gaussian(&[1, 8]);
        let out = cross_attention_block(&z, &cond, &w, &ControlHook::vanilla(), None).unwrap();
        let expect = cond.matmul(&w.to_v).unwrap().matmul(&w.to_out).unwrap();
        for row in out.data().chunks(8) {
            for (a, b) in row.iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let c1 = s.gaussian(&[3, 8]);
        let c2 = s.gaussian(&[3, 8]);
        let o1 = cross_attention_block(&z, &c1, &w, &ControlHook::vanilla(), None).unwrap();
        let o2 = cross_attention_block(&z, &c2, &w, &ControlHook::vanilla(), None).unwrap();
        assert!(!o1.bit_eq(&o2));
        let mut rec = ProbeRecorder::default();
        cross_attention_block(&z, &c1, &w, &ControlHook::vanilla(), Some(&mut rec)).unwrap();
        let inj = cross_attention_block(&z, &c1, &w, &ControlHook::q_inject(&rec.queries[0]), None).unwrap();
        assert!(inj.bit_eq(&o1));
        assert!(cross_attention_block(&z, &c1, &w, &ControlHook::sac(), None).is_err());
    }

    #[test]
    fn temporal_single_frame_is_value_path() {
        let mut s = RngStream::new(10, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[1, 5, 8]);
        let out = temporal_attention_block(&z, &w).unwrap();
        let expect = z.matmul(&w.to_v).unwrap().matmul(&w.to_out).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn temporal_identical_frames_give_identical_outputs() {
        let mut s = RngStream::new(11, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[1, 5, 8]).repeat_leading(4);
        let out = temporal_attention_block(&z, &w).unwrap();
        let f0 = out.narrow(0, 1).unwrap();
        for f in 1..4 {
            assert!(out.narrow(f, 1).unwrap().max_abs_diff(&f0).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn temporal_matches_per_token_oracle() {
        let mut s = RngStream::new(12, 0);
        let w = weights(&mut s, 8, 2);
        let z = s.gaussian(&[4, 3, 8]);
        let out = temporal_attention_block(&z, &w).unwrap();
        let zt = z.permute(&[1, 0, 2]).unwrap();
        let q = zt.matmul(&w.to_q).unwrap();
        let k = zt.matmul(&w.to_k).unwrap();
        let v = zt.matmul(&w.to_v).unwrap();
        let o = oracle(&q, &k, &v, 2);
        let attn = Tensor::new(&[3, 4, 8], o.iter().map(|&x| x as f32).collect()).unwrap();
        let expect = attn.matmul(&w.to_out).unwrap().permute(&[1, 0, 2]).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-5);
    }
}
