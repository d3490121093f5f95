//! Frame-consistency and motion-magnitude scores.
//!
//! Consistency is the mean cosine similarity between the embedding of frame
//! 0 and each later frame. Motion is the mean block-matching flow magnitude
//! over consecutive frame pairs, using exhaustive SAD search and ignoring
//! blocks whose search window would leave the frame.

use alloc::string::String;
use alloc::vec::Vec;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::video::{encode_frames, Frame};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum EmbedderKind {
    /// Box filter to `grid × grid × 3`, flattened and mean-subtracted.
    #[default]
    Pixel,
    /// The denoiser's patch-embedding features of the re-encoded frame.
    Backbone,
}

/// Maps a frame to a feature vector.
#[derive(Clone, Copy, Debug)]
pub enum FrameEmbedder<'m> {
    PixelDownsample { grid: usize },
    BackbonePatch(&'m Denoiser),
}

impl<'m> FrameEmbedder<'m> {
    pub fn pixel() -> Self {
        Self::PixelDownsample { grid: 8 }
    }

    pub fn from_kind(kind: EmbedderKind, model: Option<&'m Denoiser>) -> Result<Self> {
        match (kind, model) {
            (EmbedderKind::Pixel, _) => Ok(Self::pixel()),
            (EmbedderKind::Backbone, Some(m)) => Ok(Self::BackbonePatch(m)),
            (EmbedderKind::Backbone, None) => Err(Error::Config("backbone embedder needs a model checkpoint".into())),
        }
    }

    pub fn kind(&self) -> EmbedderKind {
        match self {
            Self::PixelDownsample { .. } => EmbedderKind::Pixel,
            Self::BackbonePatch(_) => EmbedderKind::Backbone,
        }
    }

    pub fn embed(&self, frame: &Frame) -> Result<Vec<f64>> {
        let mut v = match *self {
            Self::PixelDownsample { grid } => area_downsample(frame, grid)?,
            Self::BackbonePatch(model) => {
                let cfg = model.config();
                if !frame.width.is_multiple_of(cfg.width) || frame.width / cfg.width != frame.height / cfg.height.max(1) {
                    return Err(Error::shape("embed", &[frame.height, frame.width], &[cfg.height, cfg.width]));
                }
                let z = encode_frames(core::slice::from_ref(frame), frame.width / cfg.width)?;
                let z = z.reshape(&z.shape()[1..])?;
                model.patch_features(&z)?.into_iter().map(f64::from).collect()
            }
        };
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        Ok(v)
    }
}

fn area_downsample(frame: &Frame, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 || !frame.width.is_multiple_of(grid) || !frame.height.is_multiple_of(grid) {
        return Err(Error::range(
            "embedder grid",
            alloc::format!("{grid} does not divide {}x{}", frame.width, frame.height),
        ));
    }
    let (fx, fy) = (frame.width / grid, frame.height / grid);
    let norm = 1.0 / (fx * fy) as f64;
    let mut out = Vec::with_capacity(grid * grid * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            let mut acc = [0.0f64; 3];
            for y in gy * fy..(gy + 1) * fy {
                for x in gx * fx..(gx + 1) * fx {
                    let p = frame.pixel(x, y);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            out.extend(acc.iter().map(|a| a * norm));
        }
    }
    Ok(out)
}

/// Cosine similarity in `[-1, 1]`; two zero vectors are treated as equal
/// (1.0), one zero vector as orthogonal (0.0).
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / libm::sqrt(na * nb)).clamp(-1.0, 1.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyScores {
    /// Mean of `per_frame`.
    pub score: f64,
    /// `cos(e_0, e_i)` for `i = 1..F`.
    pub per_frame: Vec<f64>,
    /// Mean of `cos(e_{i−1}, e_i)`, the consecutive-pair reading.
    pub consecutive: f64,
}

fn need_two(frames: &[Frame], what: &'static str) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::range(what, alloc::format!("needs at least 2 frames, got {}", frames.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn consistency_score(frames: &[Frame], embedder: &FrameEmbedder<'_>) -> Result<ConsistencyScores> {
    need_two(frames, "consistency_score")?;
    let emb = frames.iter().map(|f| embedder.embed(f)).collect::<Result<Vec<_>>>()?;
    let per_frame: Vec<f64> = emb[1..].iter().map(|e| cosine(&emb[0], e)).collect();
    let consecutive: Vec<f64> = emb.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
    Ok(ConsistencyScores {
        score: mean(&per_frame),
        per_frame,
        consecutive: mean(&consecutive),
    })
}

/// Per-block displacements from frame `a` to frame `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub cols: usize,
    pub rows: usize,
    pub block: usize,
    pub radius: usize,
    /// Row-major `(dx, dy)`; `None` for border blocks.
    pub vectors: Vec<Option<(i32, i32)>>,
    /// Block content differs between the frames at zero displacement.
    pub changed: Vec<bool>,
}

impl FlowField {
    pub fn interior(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        self.vectors.iter().flatten().copied()
    }

    fn magnitudes(&self, changed_only: bool) -> Vec<f64> {
        self.vectors
            .iter()
            .zip(&self.changed)
            .filter(|(_, &c)| c || !changed_only)
            .filter_map(|(v, _)| v.map(|(dx, dy)| libm::sqrt((dx * dx + dy * dy) as f64)))
            .collect()
    }

    /// Mean displacement magnitude over interior blocks.
    pub fn mean_magnitude(&self) -> f64 {
        let m = self.magnitudes(false);
        if m.is_empty() { 0.0 } else { mean(&m) }
    }

    /// Mean magnitude over interior blocks whose content changed; 0 if none.
    pub fn mean_magnitude_changed(&self) -> f64 {
        let m = self.magnitudes(true);
        if m.is_empty() { 0.0 } else { mean(&m) }
    }
}

fn sad(a: &Frame, b: &Frame, ax: usize, ay: usize, bx: usize, by: usize, block: usize) -> f64 {
    let mut s = 0.0f64;
    for y in 0..block {
        let ra = ((ay + y) * a.width + ax) * 3;
        let rb = ((by + y) * b.width + bx) * 3;
        for (p, q) in a.rgb[ra..ra + block * 3].iter().zip(&b.rgb[rb..rb + block * 3]) {
            s += (p - q).abs() as f64;
        }
    }
    s
}

/// Exhaustive SAD block matching within `±radius`.
///
/// Ties go to the smallest `dx² + dy²`, then lexicographically smallest
/// `(dy, dx)`.
pub fn block_matching_flow(a: &Frame, b: &Frame, block: usize, radius: usize) -> Result<FlowField> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape("block_matching_flow", &[a.height, a.width], &[b.height, b.width]));
    }
    if block == 0 || !a.width.is_multiple_of(block) || !a.height.is_multiple_of(block) {
        return Err(Error::range(
            "block size",
            alloc::format!("{block} does not divide {}x{}", a.width, a.height),
        ));
    }
    if radius >= a.width || radius >= a.height {
        return Err(Error::range(
            "search radius",
            alloc::format!("{radius} not below frame extent {}x{}", a.width, a.height),
        ));
    }
    let (cols, rows) = (a.width / block, a.height / block);
    let r = radius as i64;
    let mut vectors = Vec::with_capacity(cols * rows);
    let mut changed = Vec::with_capacity(cols * rows);
    for by in 0..rows {
        for bx in 0..cols {
            let (x0, y0) = ((bx * block) as i64, (by * block) as i64);
            let zero = sad(a, b, x0 as usize, y0 as usize, x0 as usize, y0 as usize, block);
            changed.push(zero > 0.0);
            let inside = x0 - r >= 0
                && y0 - r >= 0
                && x0 + block as i64 + r <= a.width as i64
                && y0 + block as i64 + r <= a.height as i64;
            if !inside {
                vectors.push(None);
                continue;
            }
            let mut best = (zero, 0i64, 0i64, 0i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    let s = sad(a, b, x0 as usize, y0 as usize, (x0 + dx) as usize, (y0 + dy) as usize, block);
                    let cand = (s, dx * dx + dy * dy, dy, dx);
                    if cand.partial_cmp(&best) == Some(core::cmp::Ordering::Less) {
                        best = cand;
                    }
                }
            }
            vectors.push(Some((best.3 as i32, best.2 as i32)));
        }
    }
    Ok(FlowField {
        cols,
        rows,
        block,
        radius,
        vectors,
        changed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionScores {
    pub score: f64,
    pub per_pair: Vec<f64>,
}

pub fn motion_score(frames: &[Frame], block: usize, radius: usize) -> Result<MotionScores> {
    need_two(frames, "motion_score")?;
    let per_pair = frames
        .windows(2)
        .map(|w| {
            let field = block_matching_flow(&w[0], &w[1], block, radius)?;
            if field.vectors.iter().all(Option::is_none) {
                return Err(Error::range("motion_score", "no interior blocks for this block size and radius"));
            }
            Ok(field.mean_magnitude())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MotionScores {
        score: mean(&per_pair),
        per_pair,
    })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct MetricSettings {
    pub embedder: EmbedderKind,
    pub block: usize,
    pub radius: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            embedder: EmbedderKind::Pixel,
            block: 4,
            radius: 4,
        }
    }
}

/// Scores for one video plus what produced it.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub mode: String,
    pub seed: Option<u64>,
    pub prompt: Option<String>,
    pub config: Option<crate::pipeline::UniCtrlConfig>,
    pub expectation: Option<String>,
    pub metrics: MetricSettings,
    pub consistency_score: f64,
    pub consecutive_consistency: f64,
    pub motion_score: f64,
    pub per_frame_consistency: Vec<f64>,
    pub per_pair_motion: Vec<f64>,
}

/// Computes both scores; `model` is only needed for the backbone embedder.
pub fn evaluate(frames: &[Frame], settings: &MetricSettings, model: Option<&Denoiser>) -> Result<MetricReport> {
    let embedder = FrameEmbedder::from_kind(settings.embedder, model)?;
    let c = consistency_score(frames, &embedder)?;
    let m = motion_score(frames, settings.block, settings.radius)?;
    Ok(MetricReport {
        mode: String::new(),
        seed: None,
        prompt: None,
        config: None,
        expectation: None,
        metrics: settings.clone(),
        consistency_score: c.score,
        consecutive_consistency: c.consecutive,
        motion_score: m.score,
        per_frame_consistency: c.per_frame,
        per_pair_motion: m.per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use alloc::vec;
    use proptest::prelude::*;

    fn noise_frame(w: usize, h: usize, seed: u64) -> Frame {
        let mut s = RngStream::new(seed, 0);
        Frame::new(w, h, (0..w * h * 3).map(|_| s.uniform() as f32).collect()).unwrap()
    }

    fn shifted(f: &Frame, dx: i64, dy: i64, seed: u64) -> Frame {
        // content moves by (dx, dy); uncovered pixels get fresh noise
        let fill = noise_frame(f.width, f.height, seed);
        let mut out = fill.clone();
        for y in 0..f.height as i64 {
            for x in 0..f.width as i64 {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < f.width as i64 && sy < f.height as i64 {
                    out.set_pixel(x as usize, y as usize, f.pixel(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    #[test]
    fn identical_frames() {
        let f = noise_frame(32, 32, 1);
        let v = [f.clone(), f.clone(), f.clone()];
        let c = consistency_score(&v, &FrameEmbedder::pixel()).unwrap();
        assert_eq!(c.score, 1.0);
        assert_eq!(motion_score(&v, 4, 4).unwrap().score, 0.0);
        let flow = block_matching_flow(&f, &f, 4, 4).unwrap();
        assert!(flow.interior().all(|d| d == (0, 0)));
    }

    #[test]
    fn antipodal_frames() {
        // pixel values 0.5 ± δ give zero-mean embeddings after subtraction
        let a = noise_frame(16, 16, 2);
        let b = Frame::new(16, 16, a.rgb.iter().map(|v| 1.0 - v).collect()).unwrap();
        let c = consistency_score(&[a, b], &FrameEmbedder::pixel()).unwrap();
        assert!((c.per_frame[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn consistency_matches_loop_oracle() {
        let frames: Vec<Frame> = (0..4).map(|i| noise_frame(16, 16, 10 + i)).collect();
        let e = FrameEmbedder::pixel();
        let got = consistency_score(&frames, &e).unwrap();
        let emb: Vec<Vec<f64>> = frames.iter().map(|f| e.embed(f).unwrap()).collect();
        let mut total = 0.0;
        for i in 1..4 {
            let (mut d, mut a, mut b) = (0.0, 0.0, 0.0);
            for k in 0..emb[0].len() {
                d += emb[0][k] * emb[i][k];
                a += emb[0][k] * emb[0][k];
                b += emb[i][k] * emb[i][k];
            }
            total += d / (a.sqrt() * b.sqrt());
        }
        assert!((got.score - total / 3.0).abs() < 1e-6);
    }

    #[test]
    fn detects_known_shifts() {
        let a = noise_frame(32, 32, 3);
        for (dx, dy) in [(3, 0), (-2, 1), (0, -4), (1, 1)] {
            let b = shifted(&a, dx, dy, 99);
            let flow = block_matching_flow(&a, &b, 4, 4).unwrap();
            // blocks whose shifted footprint stays inside carry the true shift
            for by in 1..flow.rows - 1 {
                for bx in 1..flow.cols - 1 {
                    assert_eq!(flow.vectors[by * flow.cols + bx], Some((dx as i32, dy as i32)));
                }
            }
        }
    }

    #[test]
    fn shift_video_scores() {
        let mut frames = vec![noise_frame(32, 32, 4)];
        for i in 0..3 {
            let next = shifted(frames.last().unwrap(), 3, 0, 50 + i);
            frames.push(next);
        }
        assert!((motion_score(&frames, 4, 4).unwrap().score - 3.0).abs() < 1e-6);

        let mut diag = vec![noise_frame(32, 32, 5)];
        for i in 0..3 {
            let next = shifted(diag.last().unwrap(), 1, 1, 60 + i);
            diag.push(next);
        }
        assert!((motion_score(&diag, 4, 4).unwrap().score - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn uniform_frames_tie_to_zero() {
        let f = Frame::filled(16, 16, [0.3, 0.3, 0.3]);
        let flow = block_matching_flow(&f, &f.clone(), 4, 3).unwrap();
        assert!(flow.interior().all(|d| d == (0, 0)));
        assert!(flow.changed.iter().all(|c| !c));
    }

    #[test]
    fn flow_errors() {
        let f = noise_frame(16, 16, 6);
        assert!(block_matching_flow(&f, &f, 4, 16).is_err());
        assert!(block_matching_flow(&f, &f, 5, 2).is_err());
        assert!(block_matching_flow(&f, &noise_frame(8, 16, 1), 4, 2).is_err());
        assert!(motion_score(core::slice::from_ref(&f), 4, 2).is_err());
        assert!(consistency_score(&[f], &FrameEmbedder::pixel()).is_err());
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
    }

    fn dyadic_frame(vals: &[u8], w: usize) -> Frame {
        Frame::new(w, w, vals.iter().map(|&v| v as f32 / 512.0).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..32), s in 0.01f64..100.0) {
            let w: Vec<f64> = v.iter().rev().copied().collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
            let scaled_w: Vec<f64> = w.iter().map(|x| x * s).collect();
            prop_assert!((cosine(&v, &w) - cosine(&scaled, &scaled_w)).abs() < 1e-12);
        }

        #[test]
        fn brightness_offset_keeps_flow(
            a in prop::collection::vec(0u8..=255, 16 * 16 * 3),
            b in prop::collection::vec(0u8..=255, 16 * 16 * 3),
            offset in 0u8..=255,
        ) {
            // multiples of 1/512 below 1 add exactly in f32
            let fa = dyadic_frame(&a, 16);
            let fb = dyadic_frame(&b, 16);
            let lift = |f: &Frame| Frame::new(16, 16, f.rgb.iter().map(|v| v + offset as f32 / 512.0).collect()).unwrap();
            let plain = block_matching_flow(&fa, &fb, 4, 3).unwrap();
            let lifted = block_matching_flow(&lift(&fa), &lift(&fb), 4, 3).unwrap();
            prop_assert_eq!(plain.vectors, lifted.vectors);
        }

        #[test]
        fn flow_within_radius(seed in 0u64..1000, r in 1usize..4) {
            let a = noise_frame(16, 16, seed);
            let b = noise_frame(16, 16, seed + 1);
            let flow = block_matching_flow(&a, &b, 4, r).unwrap();
            for (dx, dy) in flow.interior() {
                prop_assert!(dx.unsigned_abs() as usize <= r && dy.unsigned_abs() as usize <= r);
            }
        }
    }
}
