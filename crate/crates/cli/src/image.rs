//! 8-bit PGM/PPM and CSV output for `[C, H, W]` images with values in `[-1, 1]`.

use std::fs;
use std::path::Path;

use lmlp_core::Result;

pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

pub fn extension(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

/// Three channels become an RGB `P6`; any other count is written as a `P5`
/// with the channel planes stacked vertically.
pub fn encode(data: &[f32], channels: usize, h: usize, w: usize) -> Vec<u8> {
    let plane = h * w;
    if channels == 3 {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        for i in 0..plane {
            for c in 0..3 {
                out.push(to_byte(data[c * plane + i]));
            }
        }
        out
    } else {
        let mut out = format!("P5\n{w} {}\n255\n", h * channels).into_bytes();
        out.extend(data[..channels * plane].iter().map(|&v| to_byte(v)));
        out
    }
}

pub fn write_image(path: &Path, data: &[f32], channels: usize, h: usize, w: usize) -> Result<()> {
    fs::write(path, encode(data, channels, h, w))?;
    Ok(())
}

/// One row per image row, channel planes one after another.
pub fn write_csv(path: &Path, data: &[f32], w: usize) -> Result<()> {
    let mut out = String::new();
    for row in data.chunks(w) {
        let cells: Vec<String> = row.iter().map(f32::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
