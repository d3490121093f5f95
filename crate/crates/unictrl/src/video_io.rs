//! PNG frames, frame grids and animated GIFs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use unictrl_core::video::Frame;

use crate::error::{Error, Result};

/// GIF delays in centiseconds; alternating 12 and 13 averages 8 frames/s.
const GIF_DELAYS: [u16; 2] = [12, 13];

pub fn encode_png(frame: &Frame) -> std::result::Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&frame.to_rgb8())?;
        w.finish()?;
    }
    Ok(out)
}

pub fn write_png(frame: &Frame, path: &Path) -> Result<()> {
    let bytes = encode_png(frame).map_err(|e| Error::format(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Frame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf[..w * h * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    Ok(Frame::from_rgb8(w, h, &rgb)?)
}

/// Frames side by side, left to right.
pub fn grid(frames: &[Frame]) -> Frame {
    let (w, h) = (frames[0].width, frames[0].height);
    let mut out = Frame::filled(w * frames.len(), h, [0.0; 3]);
    for (i, f) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(i * w + x, y, f.pixel(x, y));
            }
        }
    }
    out
}

/// Uniform 6×6×6 color cube index of an 8-bit RGB pixel.
fn cube_index(p: &[u8]) -> u8 {
    let q = |v: u8| ((v as u16 * 5 + 127) / 255) as u8;
    q(p[0]) * 36 + q(p[1]) * 6 + q(p[2])
}

fn cube_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(216 * 3);
    for r in 0..6u8 {
        for g in 0..6u8 {
            for b in 0..6u8 {
                pal.extend_from_slice(&[r * 51, g * 51, b * 51]);
            }
        }
    }
    pal
}

/// Looping animated GIF with a fixed palette, so output is deterministic.
pub fn write_gif(frames: &[Frame], path: &Path) -> Result<()> {
    let (w, h) = (frames[0].width, frames[0].height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = BufWriter::new(file);
    {
        let mut enc = gif::Encoder::new(&mut sink, w as u16, h as u16, &cube_palette()).map_err(|e| Error::format(path, e))?;
        enc.set_repeat(gif::Repeat::Infinite).map_err(|e| Error::format(path, e))?;
        for (i, f) in frames.iter().enumerate() {
            let idx: Vec<u8> = f.to_rgb8().chunks_exact(3).map(cube_index).collect();
            let mut frame = gif::Frame::from_indexed_pixels(w as u16, h as u16, idx, None);
            frame.delay = GIF_DELAYS[i % 2];
            enc.write_frame(&frame).map_err(|e| Error::format(path, e))?;
        }
    }
    sink.flush().map_err(|e| Error::io(path, e))
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:03}.png")
}

/// Writes `frame_000.png …`, `grid.png` and `video.gif` into `dir`; returns
/// the file names written.
pub fn emit_frames(frames: &[Frame], dir: &Path) -> Result<Vec<String>> {
    if frames.is_empty() {
        return Err(Error::Usage("no frames to write".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // encode in parallel, write in order
    let encoded: Vec<(String, Vec<u8>)> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let name = frame_name(i);
            encode_png(f).map(|b| (name.clone(), b)).map_err(|e| Error::format(dir.join(&name), e))
        })
        .collect::<Result<_>>()?;
    let mut names = Vec::with_capacity(frames.len() + 2);
    for (name, bytes) in encoded {
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    write_png(&grid(frames), &dir.join("grid.png"))?;
    names.push("grid.png".into());
    write_gif(frames, &dir.join("video.gif"))?;
    names.push("video.gif".into());
    Ok(names)
}

/// Reads `frame_*.png` from `dir` in index order.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no frame_*.png files"));
    }
    paths.iter().map(|p| read_png(p)).collect()
}
