//! Straight-line f64 re-implementation of the denoiser forward pass and its
//! training loss, written from the architecture description with explicit
//! loops. Used as an oracle for the tape-based f32 implementation.

#![allow(dead_code)]

use std::collections::BTreeMap;

use unictrl_core::denoiser::{tokenize, Denoiser, DenoiserConfig};
use unictrl_core::Tensor;

pub struct Reference {
    pub cfg: DenoiserConfig,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// `x [n, a] · w [a, b]`
fn linear(x: &[f64], n: usize, w: &[f64], a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * b];
    for i in 0..n {
        for k in 0..a {
            let xv = x[i * a + k];
            for j in 0..b {
                out[i * b + j] += xv * w[k * b + j];
            }
        }
    }
    out
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            dst[j] = (row[j] - mean) * r * gain[j] + bias[j];
        }
    }
    out
}

/// Multi-head attention of `q [tq, d]` over `k, v [tk, d]`, per-pair loops.
fn attend(q: &[f64], k: &[f64], v: &[f64], tq: usize, tk: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let scores: Vec<f64> = (0..tk)
                .map(|j| (0..dh).map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e]).sum::<f64>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..tk {
                for e in 0..dh {
                    out[i * d + h * dh + e] += ex[j] / z * v[j * d + h * dh + e];
                }
            }
        }
    }
    out
}

impl Reference {
    pub fn new(model: &Denoiser) -> Self {
        let params = model
            .parameters()
            .map(|(n, t)| (n.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())))
            .collect();
        Self { cfg: model.config().clone(), params }
    }

    pub fn p(&self, name: &str) -> &[f64] {
        &self.params[name].1
    }

    pub fn set(&mut self, name: &str, index: usize, value: f64) {
        self.params.get_mut(name).unwrap().1[index] = value;
    }

    /// Noise prediction `[F, C, H, W]` flattened; `prompt = None` is the
    /// null condition.
    pub fn forward(&self, z: &Tensor, prompt: Option<&str>, t: usize) -> Vec<f64> {
        let c = &self.cfg;
        let (f, ch, hh, ww, p, d) = (c.frames, c.channels, c.height, c.width, c.patch, c.model_dim);
        let (hp, wp) = (hh / p, ww / p);
        let np = hp * wp;
        let pd = ch * p * p;
        let zd = z.data();

        // condition tokens
        let dc = c.cond_dim;
        let (cond, tc) = match prompt.map(|s| tokenize(s, c.vocab_size)).filter(|t| !t.is_empty()) {
            None => (vec![0.0; dc], 1),
            Some(tokens) => {
                let table = self.p("text.token_table");
                let mut v = Vec::new();
                for (pos, &tok) in tokens.iter().enumerate() {
                    let pe = sinusoid(pos as f64, dc);
                    v.extend((0..dc).map(|j| table[tok * dc + j] + pe[j]));
                }
                (v, tokens.len())
            }
        };

        // patch embedding + positions + time
        let mut patches = vec![0.0; f * np * pd];
        for fi in 0..f {
            for r in 0..hp {
                for col in 0..wp {
                    for cc in 0..ch {
                        for i in 0..p {
                            for j in 0..p {
                                let src = ((fi * ch + cc) * hh + r * p + i) * ww + col * p + j;
                                let dst = (fi * np + r * wp + col) * pd + (cc * p + i) * p + j;
                                patches[dst] = zd[src] as f64;
                            }
                        }
                    }
                }
            }
        }
        let mut x = linear(&patches, f * np, self.p("patch_embed.weight"), pd, d);
        let tb = linear(&sinusoid(t as f64, d), 1, self.p("time_embed.weight"), d, d);
        let (pb, tbias) = (self.p("patch_embed.bias"), self.p("time_embed.bias"));
        for fi in 0..f {
            let fe = sinusoid(fi as f64, d);
            for r in 0..hp {
                let re = sinusoid(r as f64, d / 2);
                for col in 0..wp {
                    let ce = sinusoid(col as f64, d / 2);
                    let row = &mut x[(fi * np + r * wp + col) * d..][..d];
                    for j in 0..d {
                        let spatial = if j < d / 2 { re[j] } else { ce[j - d / 2] };
                        // positions are stored in f32 by the model
                        let pos = ((spatial as f32) + (fe[j] as f32)) as f64;
                        row[j] += pb[j] + pos + tb[j] + tbias[j];
                    }
                }
            }
        }

        let heads = c.heads;
        for b in 0..c.blocks {
            let name = |s: &str| format!("blocks.{b}.{s}");
            let ln = |x: &[f64], i: usize| layer_norm(x, d, self.p(&name(&format!("norm{i}.gain"))), self.p(&name(&format!("norm{i}.bias"))));

            // spatial self-attention within each frame
            let n = ln(&x, 1);
            let (q, k, v) = (
                linear(&n, f * np, self.p(&name("self_attn.to_q")), d, d),
                linear(&n, f * np, self.p(&name("self_attn.to_k")), d, d),
                linear(&n, f * np, self.p(&name("self_attn.to_v")), d, d),
            );
            let mut a = Vec::with_capacity(f * np * d);
            for fi in 0..f {
                let s = fi * np * d..(fi + 1) * np * d;
                a.extend(attend(&q[s.clone()], &k[s.clone()], &v[s], np, np, d, heads));
            }
            let a = linear(&a, f * np, self.p(&name("self_attn.to_out")), d, d);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

            // cross-attention to the text tokens
            let n = ln(&x, 2);
            let q = linear(&n, f * np, self.p(&name("cross_attn.to_q")), d, d);
            let k = linear(&cond, tc, self.p(&name("cross_attn.to_k")), dc, d);
            let v = linear(&cond, tc, self.p(&name("cross_attn.to_v")), dc, d);
            let a = attend(&q, &k, &v, f * np, tc, d, heads);
            let a = linear(&a, f * np, self.p(&name("cross_attn.to_out")), d, d);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

            // temporal attention per spatial token
            let n = ln(&x, 3);
            let (q, k, v) = (
                linear(&n, f * np, self.p(&name("temporal_attn.to_q")), d, d),
                linear(&n, f * np, self.p(&name("temporal_attn.to_k")), d, d),
                linear(&n, f * np, self.p(&name("temporal_attn.to_v")), d, d),
            );
            let gather = |m: &[f64], tok: usize| -> Vec<f64> { (0..f).flat_map(|fi| m[(fi * np + tok) * d..][..d].to_vec()).collect() };
            let mut a = vec![0.0; f * np * d];
            for tok in 0..np {
                let o = attend(&gather(&q, tok), &gather(&k, tok), &gather(&v, tok), f, f, d, heads);
                for fi in 0..f {
                    a[(fi * np + tok) * d..][..d].copy_from_slice(&o[fi * d..][..d]);
                }
            }
            let a = linear(&a, f * np, self.p(&name("temporal_attn.to_out")), d, d);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);

            // SiLU feed-forward
            let n = ln(&x, 4);
            let hidden = d * c.ffn_mult;
            let mut u = linear(&n, f * np, self.p(&name("ffn.w1")), d, hidden);
            let b1 = self.p(&name("ffn.b1"));
            for (i, u) in u.iter_mut().enumerate() {
                let s = *u + b1[i % hidden];
                *u = s / (1.0 + (-s).exp());
            }
            let u = linear(&u, f * np, self.p(&name("ffn.w2")), hidden, d);
            let b2 = self.p(&name("ffn.b2"));
            for (i, x) in x.iter_mut().enumerate() {
                *x += u[i] + b2[i % d];
            }
        }

        let n = layer_norm(&x, d, self.p("final_norm.gain"), self.p("final_norm.bias"));
        let out = linear(&n, f * np, self.p("head.weight"), d, pd);
        let hb = self.p("head.bias");
        let mut eps = vec![0.0; f * ch * hh * ww];
        for fi in 0..f {
            for r in 0..hp {
                for col in 0..wp {
                    for cc in 0..ch {
                        for i in 0..p {
                            for j in 0..p {
                                let feat = (cc * p + i) * p + j;
                                let src = (fi * np + r * wp + col) * pd + feat;
                                eps[((fi * ch + cc) * hh + r * p + i) * ww + col * p + j] = out[src] + hb[feat];
                            }
                        }
                    }
                }
            }
        }
        eps
    }

    pub fn loss(&self, z_t: &Tensor, prompt: Option<&str>, t: usize, eps: &Tensor) -> f64 {
        let pred = self.forward(z_t, prompt, t);
        pred.iter().zip(eps.data()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / pred.len() as f64
    }
}

/// Outcome of a finite-difference comparison at one parameter coordinate.
#[derive(Debug)]
pub struct FdCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central differences of the f64 reference loss against the tape's
/// gradients at `count` uniformly drawn parameter coordinates.
pub fn finite_difference_check(
    model: &Denoiser,
    z_t: &Tensor,
    prompt: &str,
    t: usize,
    eps: &Tensor,
    count: usize,
    rng: &mut unictrl_core::RngStream,
) -> Vec<FdCheck> {
    let cond = model.embed_text(prompt);
    let (_, grads) = model.loss_and_gradients(z_t, &cond, t, eps).unwrap();
    let mut reference = Reference::new(model);
    let total = model.scalar_count();
    let names: Vec<(String, usize)> = model.parameters().map(|(n, t)| (n.to_string(), t.len())).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut idx = rng.below(total as u64) as usize;
        let mut pi = 0;
        while idx >= names[pi].1 {
            idx -= names[pi].1;
            pi += 1;
        }
        let name = &names[pi].0;
        let analytic = grads.get(pi).map_or(0.0, |g| g.data()[idx] as f64);
        let base = reference.p(name)[idx];
        let h = 1e-5 * base.abs().max(1.0);
        reference.set(name, idx, base + h);
        let up = reference.loss(z_t, Some(prompt), t, eps);
        reference.set(name, idx, base - h);
        let down = reference.loss(z_t, Some(prompt), t, eps);
        reference.set(name, idx, base);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let rel_err = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        out.push(FdCheck { name: name.clone(), index: idx, analytic, numeric, rel_err });
    }
    out
}
