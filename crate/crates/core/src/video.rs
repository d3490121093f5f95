//! Pixel frames and the fixed latent↔pixel codec.
//!
//! Latents have four channels. Decoding is the affine map
//! `rgb_k = 0.5 + 0.5·(z_k + z_3)` for `k ∈ {0, 1, 2}` followed by
//! nearest-neighbour upsampling and clamping to `[0, 1]`, so `z = 0` decodes
//! to mid-gray. Encoding box-filters pixels down to the latent grid and
//! applies the minimum-norm inverse of that map:
//! `z_k = 2·(v_k − S/4)`, `z_3 = S/2` with `v = rgb − 0.5`, `S = Σ v_k`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;

/// An RGB image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::shape("frame", &[height, width, 3], &[rgb.len()]));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&color);
        }
        Self { width, height, rgb }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Quantizes to 8-bit RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb
            .iter()
            .map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Average over `factor × factor` tiles.
    pub fn box_downsample(&self, factor: usize) -> Result<Frame> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::range(
                "downsample",
                alloc::format!("factor {factor} for {}x{}", self.width, self.height),
            ));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut rgb = Vec::with_capacity(w * h * 3);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = [0.0f64; 3];
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        let p = self.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                rgb.extend(acc.iter().map(|&a| (a * norm) as f32));
            }
        }
        Ok(Frame { width: w, height: h, rgb })
    }
}

/// Decodes `[F, 4, H, W]` latents into `F` frames of `(W·scale) × (H·scale)`.
pub fn decode_latent(z: &Tensor, scale: usize) -> Result<Vec<Frame>> {
    let s = z.shape();
    if s.len() != 4 || s[1] != LATENT_CHANNELS || scale == 0 {
        return Err(Error::shape("decode_latent", s, &[0, LATENT_CHANNELS, 0, 0]));
    }
    let (f, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let mut frames = Vec::with_capacity(f);
    for fi in 0..f {
        let base = fi * LATENT_CHANNELS * plane;
        let ch = |c: usize, i: usize| z.data()[base + c * plane + i];
        let mut frame = Frame::filled(w * scale, h * scale, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let shared = ch(3, i);
                let color = [0, 1, 2].map(|k| (0.5 + 0.5 * (ch(k, i) + shared)).clamp(0.0, 1.0));
                for py in y * scale..(y + 1) * scale {
                    for px in x * scale..(x + 1) * scale {
                        frame.set_pixel(px, py, color);
                    }
                }
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Encodes frames to a `[F, 4, H/scale, W/scale]` latent.
pub fn encode_frames(frames: &[Frame], scale: usize) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::range("encode_frames", "no frames"))?;
    let (w, h) = (first.width / scale.max(1), first.height / scale.max(1));
    let plane = w * h;
    let mut data = alloc::vec![0.0f32; frames.len() * LATENT_CHANNELS * plane];
    for (fi, frame) in frames.iter().enumerate() {
        if frame.width != first.width || frame.height != first.height {
            return Err(Error::shape(
                "encode_frames",
                &[first.height, first.width],
                &[frame.height, frame.width],
            ));
        }
        let small = frame.box_downsample(scale)?;
        let base = fi * LATENT_CHANNELS * plane;
        for i in 0..plane {
            let v = [0, 1, 2].map(|k| small.rgb[i * 3 + k] as f64 - 0.5);
            let sum = v[0] + v[1] + v[2];
            for k in 0..3 {
                data[base + k * plane + i] = (2.0 * (v[k] - sum / 4.0)) as f32;
            }
            data[base + 3 * plane + i] = (sum / 2.0) as f32;
        }
    }
    Tensor::new(&[frames.len(), LATENT_CHANNELS, h, w], data)
}
