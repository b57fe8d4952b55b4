//! Binary NetPBM export of image grids.
//!
//! Tiles are laid out row-major in a grid of `ceil(sqrt(N))` columns with a
//! 1-pixel black separator between neighbours. Pixels are clamped to `[0, 1]`
//! and mapped to `floor(255·v + 0.5)`; NaN maps to 0.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes `[N, C, H, W]` images (`C` = 1 → P5, `C` = 3 → P6).
pub fn encode_image_grid(images: &Tensor, columns: Option<usize>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Config(format!("image grid needs a nonempty [N, C, H, W] tensor, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Config(format!("image grid supports 1 or 3 channels, got {c}"))),
    };
    let cols = columns.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).clamp(1, n);
    let rows = n.div_ceil(cols);
    let width = cols * w + cols - 1;
    let height = rows * h + rows - 1;
    let mut pixels = vec![0u8; width * height * c];
    let data = images.data();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = data[((i * c + ch) * h + y) * w + x];
                    pixels[((oy + y) * width + ox + x) * c + ch] = to_byte(v);
                }
            }
        }
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_image_grid(images: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image_grid(images, None)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
