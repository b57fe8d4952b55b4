//! Terms of the reconstruction objective.

use std::sync::Arc;

use rand::Rng;

use super::{AttackMode, ClipPenalty, Distance, PriorKind};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::fedavg::sgd_step;
use crate::io::seed::SeedStream;
use crate::model::{self, Architecture};

/// One simulated local step: which variable feeds it and with which labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SimStep {
    pub var: usize,
    pub labels: Vec<usize>,
}

/// Replays local training from the server parameters, feeding `vars`
/// according to `plan`. Returns the simulated client parameters.
pub fn sim_update(
    g: &mut Graph,
    arch: &Architecture,
    server: &[Var],
    vars: &[Var],
    plan: &[SimStep],
    lr: f64,
) -> Result<Vec<Var>> {
    let mut params = server.to_vec();
    for step in plan {
        params = sgd_step(g, arch, &params, vars[step.var], &step.labels, lr)?;
    }
    Ok(params)
}

/// `θˢ − θ̃ᶜ` for [`sim_update`], or `∇θ CE` at `θˢ` for the FedSGD mode.
/// Either is proportional to the simulated averaged update, which is all the
/// cosine loss needs.
pub fn simulated_direction(
    g: &mut Graph,
    arch: &Architecture,
    server: &[Var],
    vars: &[Var],
    plan: &[SimStep],
    lr: f64,
    mode: AttackMode,
) -> Result<Var> {
    if mode == AttackMode::Fedsgd {
        let step = &plan[0];
        let trace = model::forward(g, arch, server, vars[step.var], &step.labels)?;
        let grads = g.grad(trace.loss, server)?;
        return Ok(g.flatten_all(&grads)?);
    }
    let client = sim_update(g, arch, server, vars, plan, lr)?;
    let deltas = server
        .iter()
        .zip(&client)
        .map(|(&s, &c)| g.sub(s, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(g.flatten_all(&deltas)?)
}

/// `1 − cos(target, simulated)`; exactly 1 (with zero gradient) when either
/// vector has zero norm.
pub fn loss_sim(g: &mut Graph, target: Var, simulated: Var) -> Result<Var> {
    let zero = |g: &Graph, v: Var| -> Result<bool> { Ok(g.value(v)?.data().iter().all(|&x| x == 0.0)) };
    if zero(g, target)? || zero(g, simulated)? {
        return Ok(g.scalar(1.0));
    }
    let cos = g.cosine_similarity(target, simulated)?;
    let neg = g.neg(cos)?;
    Ok(g.shift(neg, 1.0)?)
}

/// Frozen random convolution used by the convolutional set priors.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomConvPrior {
    pub weight: Tensor,
}

impl RandomConvPrior {
    pub const CHANNELS: usize = 96;
    pub const KERNEL: usize = 3;
    pub const PADDING: usize = 1;

    /// Weights uniform in `±1/sqrt(C·9)`.
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).derive("conv_prior").rng();
        let fan_in = in_channels * Self::KERNEL * Self::KERNEL;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..Self::CHANNELS * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = Tensor::new(vec![Self::CHANNELS, in_channels, Self::KERNEL, Self::KERNEL], data)
            .expect("conv prior shape");
        RandomConvPrior { weight }
    }
}

/// Order-invariant aggregate of one epoch's images `[N, C, H, W]`.
///
/// The mean sums each pixel's values in sorted order so that it is bitwise
/// independent of the image order.
pub fn set_aggregate(g: &mut Graph, set: Var, kind: PriorKind, conv: Option<Var>) -> Result<Var> {
    let features = match (kind, conv) {
        (PriorKind::ConvMean | PriorKind::ConvMax, Some(w)) => g.conv2d(set, w, None, 1, RandomConvPrior::PADDING)?,
        (PriorKind::ConvMean | PriorKind::ConvMax, None) => {
            return Err(crate::Error::Config("convolutional prior needs its kernel bank".into()));
        }
        _ => set,
    };
    Ok(match kind {
        PriorKind::Mean | PriorKind::ConvMean => {
            let sorted = g.sort_leading(features)?;
            g.mean_axis(sorted, 0, false)?
        }
        PriorKind::Max | PriorKind::ConvMax => g.max_axis(features, 0)?,
    })
}

/// `(1/E²) Σ_{e1,e2} D(agg_e1, agg_e2)` over the per-epoch image sets.
pub fn loss_inv(g: &mut Graph, epoch_sets: &[Var], kind: PriorKind, dist: Distance, conv: Option<Var>) -> Result<Var> {
    let e = epoch_sets.len();
    let aggs = epoch_sets
        .iter()
        .map(|&s| set_aggregate(g, s, kind, conv))
        .collect::<Result<Vec<_>>>()?;
    let mut total = g.scalar(0.0);
    for a in 0..e {
        for b in 0..e {
            if a == b {
                continue;
            }
            let d = g.sub(aggs[a], aggs[b])?;
            let d = match dist {
                Distance::L1 => g.abs(d)?,
                Distance::L2 => g.square(d)?,
            };
            let d = g.mean(d)?;
            total = g.add(total, d)?;
        }
    }
    Ok(g.scale(total, 1.0 / (e * e) as f64)?)
}

/// Sum over images of the anisotropic total variation of `x` (`[N, C, H, W]`).
pub fn total_variation_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x)?.to_vec();
    let mut total = g.scalar(0.0);
    for axis in [2, 3] {
        let len = shape[axis];
        if len < 2 {
            continue;
        }
        let hi = g.narrow(x, axis, 1, len - 1)?;
        let lo = g.narrow(x, axis, 0, len - 1)?;
        let d = g.sub(hi, lo)?;
        let d = g.abs(d)?;
        let s = g.sum(d)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Sum over pixels of the range penalty outside `[0, 1]`.
pub fn clip_penalty_sum(g: &mut Graph, x: Var, kind: ClipPenalty) -> Result<Var> {
    let over = g.shift(x, -1.0)?;
    let over = g.relu(over)?;
    let neg = g.neg(x)?;
    let under = g.relu(neg)?;
    let (over, under) = match kind {
        ClipPenalty::Squared => (g.square(over)?, g.square(under)?),
        ClipPenalty::Linear => (over, under),
    };
    let both = g.add(over, under)?;
    Ok(g.sum(both)?)
}

/// `(TV, clip)`: TV averaged over every image of every variable, the clip
/// penalty averaged over every pixel.
pub fn regularizers(g: &mut Graph, vars: &[Var], clip: ClipPenalty) -> Result<(Var, Var)> {
    let mut tv = g.scalar(0.0);
    let mut cp = g.scalar(0.0);
    let (mut images, mut pixels) = (0usize, 0usize);
    for &v in vars {
        let shape = g.shape(v)?.to_vec();
        images += shape[0];
        pixels += shape.iter().product::<usize>();
        let t = total_variation_sum(g, v)?;
        tv = g.add(tv, t)?;
        let c = clip_penalty_sum(g, v, clip)?;
        cp = g.add(cp, c)?;
    }
    let tv = g.scale(tv, 1.0 / images.max(1) as f64)?;
    let cp = g.scale(cp, 1.0 / pixels.max(1) as f64)?;
    Ok((tv, cp))
}

/// Permutation of the leading axis as a graph op (used by tests and tools).
pub fn permute_rows(g: &mut Graph, x: Var, order: &[usize]) -> Result<Var> {
    let shape = g.shape(x)?.to_vec();
    let inner: usize = shape[1..].iter().product();
    let perm: Vec<usize> = order.iter().flat_map(|&r| (r * inner)..(r * inner + inner)).collect();
    Ok(g.gather(x, Arc::new(perm))?)
}
