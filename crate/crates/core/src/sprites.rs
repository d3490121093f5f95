//! Moving-sprite videos: a single square or disc gliding over a black
//! canvas, bouncing off the borders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::video::{encode_frames, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSpec {
    pub shape: Shape,
    /// Side length (square) or diameter (circle) in pixels.
    pub size: usize,
    pub color: Color,
    /// Pixels per frame.
    pub velocity: (i32, i32),
    /// Top-left corner at frame 0.
    pub start: (i32, i32),
}

fn direction(v: i32, neg: &'static str, pos: &'static str) -> Option<&'static str> {
    match v.signum() {
        -1 => Some(neg),
        1 => Some(pos),
        _ => None,
    }
}

/// Reflects `x` into `[0, span]`.
fn bounce(x: i32, span: i32) -> i32 {
    if span == 0 {
        return 0;
    }
    let period = 2 * span;
    let m = x.rem_euclid(period);
    if m > span { period - m } else { m }
}

impl SpriteSpec {
    /// e.g. `"red square moving right"`, `"blue circle moving up left"`,
    /// `"white square standing still"`.
    pub fn prompt(&self) -> String {
        let shape = match self.shape {
            Shape::Square => "square",
            Shape::Circle => "circle",
        };
        let parts: Vec<&str> = [
            direction(self.velocity.1, "up", "down"),
            direction(self.velocity.0, "left", "right"),
        ]
        .into_iter()
        .flatten()
        .collect();
        if parts.is_empty() {
            format!("{} {shape} standing still", self.color.name())
        } else {
            format!("{} {shape} moving {}", self.color.name(), parts.join(" "))
        }
    }

    pub fn validate(&self, canvas: usize) -> Result<()> {
        if self.size == 0 || self.size > canvas {
            return Err(Error::range("sprite size", format!("{} on a {canvas}px canvas", self.size)));
        }
        Ok(())
    }

    /// Top-left corner at frame `f`, reflected at the borders.
    pub fn position(&self, f: usize, canvas: usize) -> (i32, i32) {
        let span = (canvas - self.size) as i32;
        let at = |p: i32, v: i32| bounce(p + v * f as i32, span);
        (at(self.start.0, self.velocity.0), at(self.start.1, self.velocity.1))
    }

    pub fn render(&self, f: usize, canvas: usize) -> Frame {
        let mut frame = Frame::filled(canvas, canvas, [0.0; 3]);
        let (x0, y0) = self.position(f, canvas);
        let (x0, y0, s) = (x0 as usize, y0 as usize, self.size);
        let r = s as f32 / 2.0;
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                let inside = match self.shape {
                    Shape::Square => true,
                    Shape::Circle => {
                        let (dx, dy) = ((x - x0) as f32 + 0.5 - r, (y - y0) as f32 + 0.5 - r);
                        dx * dx + dy * dy <= r * r
                    }
                };
                if inside {
                    frame.set_pixel(x, y, self.color.rgb());
                }
            }
        }
        frame
    }

    /// A random axis-aligned or diagonal mover with speed 1–3 px/frame and a
    /// size between 3/16 and 5/16 of the canvas.
    pub fn random(stream: &mut RngStream, canvas: usize) -> Self {
        let shape = if stream.below(2) == 0 { Shape::Square } else { Shape::Circle };
        let color = Color::ALL[stream.below(Color::ALL.len() as u64) as usize];
        // 12–20 px on the default 64 px canvas
        let lo = (canvas * 3 / 16).max(1);
        let hi = (canvas * 5 / 16).max(lo);
        let size = lo + stream.below((hi - lo + 1) as u64) as usize;
        let dirs = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];
        let (dx, dy) = dirs[stream.below(dirs.len() as u64) as usize];
        let speed = 1 + stream.below(3) as i32;
        let span = (canvas - size) as u64 + 1;
        let start = (stream.below(span) as i32, stream.below(span) as i32);
        Self {
            shape,
            size,
            color,
            velocity: (dx * speed, dy * speed),
            start,
        }
    }
}

/// Rendered frames, their latent and the prompt.
#[derive(Clone, Debug)]
pub struct SpriteVideo {
    pub frames: Vec<Frame>,
    pub latent: Tensor,
    pub prompt: String,
}

/// Renders `frames` frames on a `canvas²` image and encodes them with a
/// `scale×` box downsample.
pub fn generate_sprite_video(spec: &SpriteSpec, frames: usize, canvas: usize, scale: usize) -> Result<SpriteVideo> {
    spec.validate(canvas)?;
    let rendered: Vec<Frame> = (0..frames).map(|f| spec.render(f, canvas)).collect();
    let latent = encode_frames(&rendered, scale)?;
    Ok(SpriteVideo {
        frames: rendered,
        latent,
        prompt: spec.prompt(),
    })
}

/// Prompts used for evaluation sweeps.
pub const DEFAULT_PROMPTS: [&str; 4] = [
    "red square moving right",
    "blue circle moving left",
    "green square moving down",
    "yellow circle moving up",
];
