//! Seeded class-conditional image generator.
//!
//! Every class owns a smooth template: uniform values on a coarse lattice,
//! bilinearly upsampled per channel. An example of class `k` is
//! `clamp(0.7·T_k + 0.3·F + ε)` where `F` is a fresh smooth field and
//! `ε ~ N(0, 0.05²)` per pixel. Examples are emitted in a seeded random order.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::seed::{standard_normal, SeedRng, SeedStream};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::fedavg::ClientDataset;

const TEMPLATE_WEIGHT: f64 = 0.7;
const FIELD_WEIGHT: f64 = 0.3;
const PIXEL_NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<ClientDataset> {
        generate_synthetic(&vec![self.per_class; self.classes], self.shape, self.seed)
    }
}

/// Generates `counts[k]` examples of each class `k`.
pub fn generate_synthetic(counts: &[usize], shape: [usize; 3], seed: u64) -> Result<ClientDataset> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || total == 0 || shape.contains(&0) {
        return Err(Error::Config(format!("synthetic data needs examples and a nonempty shape, got {counts:?} / {shape:?}")));
    }
    let root = SeedStream::new(seed).derive("synthetic");
    let templates: Vec<Vec<f64>> = (0..counts.len())
        .map(|k| smooth_field(shape, &mut root.derive(&format!("template={k}")).rng()))
        .collect();

    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
    labels.shuffle(&mut root.derive("order").rng());

    let mut rng = root.derive("examples").rng();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(total * per);
    for &k in &labels {
        let field = smooth_field(shape, &mut rng);
        for (t, f) in templates[k].iter().zip(field) {
            let v = TEMPLATE_WEIGHT * t + FIELD_WEIGHT * f + PIXEL_NOISE * standard_normal(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let inputs = Tensor::new(vec![total, shape[0], shape[1], shape[2]], data)?;
    ClientDataset::new(inputs, labels, counts.len())
}

/// Uniform lattice values (spacing about 4 pixels) bilinearly upsampled.
fn smooth_field([c, h, w]: [usize; 3], rng: &mut SeedRng) -> Vec<f64> {
    let (gh, gw) = (h.div_ceil(4) + 1, w.div_ceil(4) + 1);
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = coord(y, h, gh);
            for x in 0..w {
                let fx = coord(x, w, gw);
                out.push(bilinear(&lattice, gw, fy, fx));
            }
        }
    }
    out
}

fn coord(i: usize, n: usize, g: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        i as f64 * (g - 1) as f64 / (n - 1) as f64
    }
}

fn bilinear(lattice: &[f64], gw: usize, fy: f64, fx: f64) -> f64 {
    let gh = lattice.len() / gw;
    let (y0, x0) = ((fy.floor() as usize).min(gh - 1), (fx.floor() as usize).min(gw - 1));
    let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let at = |y: usize, x: usize| lattice[y * gw + x];
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
    let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Zero-pads single-channel images symmetrically to `target`×`target` and
/// replicates them into three channels.
pub fn gray_to_rgb(images: &Tensor, target: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] > target || s[3] > target {
        return Err(Error::Config(format!("expected [N, 1, H, W] with H, W <= {target}, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let (top, left) = ((target - h) / 2, (target - w) / 2);
    let mut out = vec![0.0; n * 3 * target * target];
    for i in 0..n {
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[((i * 3 + ch) * target + top + y) * target + left + x] = images.data()[(i * h + y) * w + x];
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, 3, target, target], out)?)
}
