//! ASCII "P2" graymaps with maximum value 255.

use std::fs;
use std::path::Path;

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Maps `[-1, 1]` to `0..=255` by affine rounding; values outside are clipped.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

/// Text of a P2 image. `levels` are row-major, `width` per row.
pub fn encode(width: usize, height: usize, levels: &[u8]) -> String {
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in levels.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Parses a P2 image into `(width, height, levels scaled to 0..=255)`.
pub fn decode(text: &str) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err("not an ASCII P2 graymap".into());
    }
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = tokens.next().ok_or_else(|| format!("missing {name}"))?;
        *slot = tok.parse().map_err(|_| format!("bad {name} {tok:?}"))?;
    }
    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported header {w}x{h} max {maxval}"));
    }
    let mut levels = Vec::with_capacity(w * h);
    for tok in tokens {
        let v: usize = tok.parse().map_err(|_| format!("bad sample {tok:?}"))?;
        if v > maxval {
            return Err(format!("sample {v} exceeds maxval {maxval}"));
        }
        levels.push(((v * 255 + maxval / 2) / maxval) as u8);
    }
    if levels.len() != w * h {
        return Err(format!("expected {} samples, found {}", w * h, levels.len()));
    }
    Ok((w, h, levels))
}

/// Writes a `[.., H, W]` tensor with values in `[-1, 1]`.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = extent(img)?;
    let levels: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    fs::write(path, encode(w, h, &levels)).map_err(|e| Error::io(path, e))
}

/// Writes a binary `{0, 1}` mask as `{0, 255}`.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = extent(mask)?;
    let levels: Vec<u8> = mask.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    fs::write(path, encode(w, h, &levels)).map_err(|e| Error::io(path, e))
}

fn read_levels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text).map_err(|m| Error::load(path, m))
}

/// Reads an image as a `[1, H, W]` tensor in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let (w, h, levels) = read_levels(path)?;
    Tensor::new(vec![1, h, w], levels.into_iter().map(dequantize).collect())
}

/// Reads a mask binarized at 128 as a `[1, H, W]` tensor.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let (w, h, levels) = read_levels(path)?;
    Tensor::new(
        vec![1, h, w],
        levels.into_iter().map(|v| if v >= 128 { 1.0 } else { 0.0 }).collect(),
    )
}

fn extent(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
        return Err(Error::Contract(format!("cannot write shape {s:?} as a single graymap")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}
