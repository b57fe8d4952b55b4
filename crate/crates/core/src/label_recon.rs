//! Label-count recovery from the final-layer weight update.
//!
//! For batch-mean cross-entropy the per-class row sums of the final weight
//! gradient are `ΔW_k = (1/N) Σ_i (p_ik − y_ik)·O_i`, where `O_i` is the sum of
//! the penultimate activations of example `i`. Replacing `p_ik` and `O_i` by
//! batch-independent estimates `p̃_k`, `Õ` and solving for the label counts
//! gives
//!
//! ```text
//! λ̃_k = N·p̃_k − N·ΔW_k / Õ
//! ```
//!
//! which is exact whenever every example shares the same `p_i` and `O_i`.
//!
//! For multi-step updates the statistics are interpolated between the server
//! and client parameters across the `U` local steps, the formula is applied
//! once per step with that step's batch size, and the sum is divided by `E`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::fedavg::{averaged_update, ObservedUpdate};
use crate::io::seed::SeedStream;
use crate::model::{self, Architecture, Parameters};

use rand::Rng;

/// Smallest `|Õ|` accepted by the count formula.
pub const MIN_ACTIVATION: f64 = 1e-12;

/// Number of uniform dummy examples used when none are supplied.
pub const DUMMY_EXAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Server,
    Client,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkStats {
    /// Mean softmax probability per class.
    pub probs: Vec<f64>,
    /// Mean over examples of the summed penultimate activations.
    pub activation: f64,
    pub at: Endpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelCountEstimate {
    pub raw: Vec<f64>,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl LabelCountEstimate {
    pub fn from_raw(raw: Vec<f64>, total: usize) -> Self {
        let counts = integerize(&raw, total);
        LabelCountEstimate { raw, counts, total }
    }

    /// Known counts, with `raw` equal to the counts.
    pub fn exact(counts: Vec<usize>) -> Self {
        let total = counts.iter().sum();
        LabelCountEstimate { raw: counts.iter().map(|&c| c as f64).collect(), counts, total }
    }

    /// `|λ̃ − λ|₁` against true counts.
    pub fn l1_error(&self, truth: &[usize]) -> usize {
        self.counts.iter().zip(truth).map(|(&a, &b)| a.abs_diff(b)).sum()
    }
}

/// Which endpoint the interpolation weight `i/U` multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// `p̃_i = (i/U)·p̃ˢ + ((U−i)/U)·p̃ᶜ`.
    #[default]
    ServerWeighted,
    /// `p̃_i = ((U−i)/U)·p̃ˢ + (i/U)·p̃ᶜ`.
    ClientWeighted,
}

/// `count` inputs of the architecture's shape, uniform in `[0, 1]`.
pub fn dummy_inputs(arch: &Architecture, count: usize, seed: u64) -> Tensor {
    let [c, h, w] = arch.input_shape();
    let mut rng = SeedStream::new(seed).derive("dummy").rng();
    let data = (0..count * c * h * w).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![count, c, h, w], data).expect("dummy shape")
}

pub fn estimate_stats(arch: &Architecture, params: &Parameters, dummy: &Tensor, at: Endpoint) -> Result<NetworkStats> {
    let n = dummy.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Config("dummy data must be nonempty".into()));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let x = g.leaf(dummy.clone());
    let (logits, pen) = model::logits(&mut g, arch, &vars, x)?;
    let probs = g.softmax(logits)?;
    let k = arch.classes();
    let mut mean = vec![0.0; k];
    for row in g.value(probs)?.data().chunks(k) {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let activation = g.value(pen)?.data().iter().sum::<f64>() / n as f64;
    if !activation.is_finite() || mean.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite network statistics".into()));
    }
    Ok(NetworkStats { probs: mean, activation, at })
}

/// Raw counts `N·p̃_k − N·ΔW_k / Õ`.
pub fn fedsgd_label_counts(delta_w: &[f64], stats: &NetworkStats, n: f64) -> Result<Vec<f64>> {
    counts_formula(delta_w, &stats.probs, stats.activation, n)
}

fn counts_formula(delta_w: &[f64], probs: &[f64], activation: f64, n: f64) -> Result<Vec<f64>> {
    if activation.abs() < MIN_ACTIVATION || !activation.is_finite() {
        return Err(Error::Numeric(format!("degenerate penultimate activation sum {activation}")));
    }
    Ok(probs.iter().zip(delta_w).map(|(p, d)| n * p - n * d / activation).collect())
}

/// Interpolated estimate for a multi-step update.
pub fn fedavg_label_counts(obs: &ObservedUpdate, dummy: &Tensor, direction: Interpolation) -> Result<LabelCountEstimate> {
    let s = estimate_stats(&obs.arch, &obs.server, dummy, Endpoint::Server)?;
    let c = estimate_stats(&obs.arch, &obs.client, dummy, Endpoint::Client)?;
    let delta_w = model::last_layer_sums_from_flat(&obs.arch, &averaged_update(obs)?);
    let u = obs.total_steps();
    let sizes = obs.batch_sizes();
    let mut acc = vec![0.0; delta_w.len()];
    for i in 1..=u {
        let a = i as f64 / u as f64;
        let b = (u - i) as f64 / u as f64;
        let (ws, wc) = match direction {
            Interpolation::ServerWeighted => (a, b),
            Interpolation::ClientWeighted => (b, a),
        };
        let probs: Vec<f64> = s.probs.iter().zip(&c.probs).map(|(ps, pc)| ws * ps + wc * pc).collect();
        let activation = ws * s.activation + wc * c.activation;
        let n = sizes[(i - 1) % sizes.len()] as f64;
        for (a, v) in acc.iter_mut().zip(counts_formula(&delta_w, &probs, activation, n)?) {
            *a += v;
        }
    }
    let raw = acc.into_iter().map(|v| v / obs.epochs as f64).collect();
    Ok(LabelCountEstimate::from_raw(raw, obs.num_examples))
}

/// Single-step formula with statistics at one endpoint.
pub fn geng_baseline(obs: &ObservedUpdate, dummy: &Tensor, at: Endpoint) -> Result<LabelCountEstimate> {
    let params = match at {
        Endpoint::Server => &obs.server,
        Endpoint::Client => &obs.client,
    };
    let stats = estimate_stats(&obs.arch, params, dummy, at)?;
    let delta_w = model::last_layer_sums_from_flat(&obs.arch, &averaged_update(obs)?);
    let raw = fedsgd_label_counts(&delta_w, &stats, obs.num_examples as f64)?;
    Ok(LabelCountEstimate::from_raw(raw, obs.num_examples))
}

/// Nonnegative integers summing to `n`: clamp at zero, floor, then hand the
/// deficit to the largest fractional remainders (lower class id on ties).
/// Any excess is taken one at a time from the smallest positive count
/// (lower class id on ties).
pub fn integerize(raw: &[f64], n: usize) -> Vec<usize> {
    if raw.is_empty() {
        return Vec::new();
    }
    let clamped: Vec<f64> = raw
        .iter()
        .map(|&v| if v.is_finite() { v.max(0.0) } else if v > 0.0 { n as f64 } else { 0.0 })
        .collect();
    let mut counts: Vec<usize> = clamped.iter().map(|v| v.floor().min(n as f64) as usize).collect();
    let total: usize = counts.iter().sum();
    if total < n {
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (clamped[a] - clamped[a].floor(), clamped[b] - clamped[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let deficit = n - total;
        for j in 0..deficit {
            counts[order[j % order.len()]] += 1;
        }
    } else {
        for _ in n..total {
            let k = (0..counts.len())
                .filter(|&k| counts[k] > 0)
                .min_by_key(|&k| (counts[k], k))
                .expect("total exceeds n, so some count is positive");
            counts[k] -= 1;
        }
    }
    counts
}
