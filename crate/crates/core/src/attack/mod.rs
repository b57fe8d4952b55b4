//! Input reconstruction from an observed client update.
//!
//! The attack optimizes dummy inputs so that replaying the client's local
//! training on them reproduces the direction of the observed update. The
//! objective is
//!
//! ```text
//! ℓ = (1 − cos(Δθ, Δθ̃)) + λ_inv·L_inv + λ_TV·TV + λ_clip·R_clip
//! ```
//!
//! minimized with Adam. Labels are fixed up front: the label counts are
//! expanded, shuffled once and cut into batches, and that split is reused in
//! every epoch.
//!
//! Variable layouts per [`AttackMode`]:
//!
//! | mode            | variables            | simulated steps            |
//! |-----------------|----------------------|----------------------------|
//! | `ours_*`        | one per (epoch, batch) | every (epoch, batch)     |
//! | `shared`        | one per batch        | every (epoch, batch)       |
//! | `fedsgd_epoch`  | one per epoch (all N) | one full-set step per epoch |
//! | `fedsgd`        | one (all N)          | none; gradient at `θˢ`     |

mod adam;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{decayed_lr, Adam, AdamConfig};
pub use loss::{
    clip_penalty_sum, loss_inv, loss_sim, permute_rows, regularizers, set_aggregate, sim_update,
    simulated_direction, total_variation_sum, RandomConvPrior, SimStep,
};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::fedavg::{ClientDataset, ObservedUpdate};
use crate::io::seed::{standard_normal, SeedStream};
use crate::label_recon::LabelCountEstimate;
use crate::matching::match_epoch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    OursPrior,
    OursNoPrior,
    Shared,
    FedsgdEpoch,
    Fedsgd,
}

impl AttackMode {
    pub const ALL: [AttackMode; 5] = [
        AttackMode::OursPrior,
        AttackMode::OursNoPrior,
        AttackMode::Shared,
        AttackMode::FedsgdEpoch,
        AttackMode::Fedsgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::OursPrior => "ours_prior",
            AttackMode::OursNoPrior => "ours_no_prior",
            AttackMode::Shared => "shared",
            AttackMode::FedsgdEpoch => "fedsgd_epoch",
            AttackMode::Fedsgd => "fedsgd",
        }
    }

    /// Whether the epoch prior contributes to the loss.
    pub fn uses_prior(self) -> bool {
        self == AttackMode::OursPrior
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack mode `{s}`")))
    }
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " `{}`"), s))),
                }
            }
        }
    };
}

/// Order-invariant epoch aggregate `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Mean,
    Max,
    ConvMean,
    ConvMax,
}
str_enum!(PriorKind { Mean => "mean", Max => "max", ConvMean => "conv_mean", ConvMax => "conv_max" });

/// Distance between epoch aggregates: mean absolute or mean squared difference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    L1,
    L2,
}
str_enum!(Distance { L1 => "l1", L2 => "l2" });

/// Penalty on pixels outside `[0, 1]`: squared or linear hinge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipPenalty {
    Squared,
    Linear,
}

/// Distribution of the initial variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Uniform in `[0, 1]`.
    Uniform,
    /// `N(0.5, 0.1²)` clamped to `[0, 1]`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub steps: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub lambda_inv: f64,
    pub lambda_tv: f64,
    pub lambda_clip: f64,
    pub prior: PriorKind,
    pub distance: Distance,
    pub clip: ClipPenalty,
    pub init: InitKind,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::femnist()
    }
}

impl AttackConfig {
    /// Grayscale handwriting profile.
    pub fn femnist() -> Self {
        AttackConfig {
            mode: AttackMode::OursPrior,
            steps: 200,
            lr: 0.4,
            decay: 0.995,
            decay_every: 10,
            lambda_inv: 1000.0,
            lambda_tv: 0.001,
            lambda_clip: 2.0,
            prior: PriorKind::Mean,
            distance: Distance::L2,
            clip: ClipPenalty::Squared,
            init: InitKind::Uniform,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }

    /// Natural color image profile.
    pub fn cifar() -> Self {
        AttackConfig {
            lr: 0.1,
            decay: 0.997,
            decay_every: 20,
            lambda_inv: 6.075,
            lambda_tv: 0.0002,
            lambda_clip: 10.0,
            prior: PriorKind::ConvMax,
            ..AttackConfig::femnist()
        }
    }

    /// Small MLPs on 8×8 synthetic images. The update there is nearly
    /// invariant to per-image brightness, so the search starts at mid-gray
    /// and moves slowly.
    pub fn desk() -> Self {
        AttackConfig {
            steps: 1000,
            lr: 0.002,
            lambda_inv: 1.0,
            init: InitKind::Gaussian,
            ..AttackConfig::femnist()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "femnist" => Ok(Self::femnist()),
            "desk" => Ok(Self::desk()),
            "cifar" | "cifar100" => Ok(Self::cifar()),
            other => Err(Error::Config(format!("unknown attack profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_inv, self.lambda_tv, self.lambda_clip];
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("regularizer weights must be nonnegative, got {lambdas:?}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        Ok(())
    }
}

/// Expands counts into labels, shuffles once and cuts batches of size `m`.
pub fn rand_order(counts: &[usize], m: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    labels.shuffle(&mut SeedStream::new(seed).derive("rand_order").rng());
    labels.chunks(m.max(1)).map(<[usize]>::to_vec).collect()
}

/// Labels of every (epoch, batch) step, `[E][B]`.
pub type LabelPlan = Vec<Vec<Vec<usize>>>;

/// The same batch split in each of `epochs` epochs.
pub fn repeat_split(split: &[Vec<usize>], epochs: usize) -> LabelPlan {
    vec![split.to_vec(); epochs]
}

/// Variable shapes for a mode: the leading extent of each tensor.
pub fn variable_sizes(mode: AttackMode, batch_sizes: &[usize], epochs: usize) -> Vec<usize> {
    let n: usize = batch_sizes.iter().sum();
    match mode {
        AttackMode::OursPrior | AttackMode::OursNoPrior => batch_sizes.repeat(epochs),
        AttackMode::Shared => batch_sizes.to_vec(),
        AttackMode::FedsgdEpoch => vec![n; epochs],
        AttackMode::Fedsgd => vec![n],
    }
}

/// Initial variables, seeded.
pub fn rand_init(sizes: &[usize], shape: [usize; 3], init: InitKind, seed: u64) -> Vec<Tensor> {
    let mut rng = SeedStream::new(seed).derive("init").rng();
    let [c, h, w] = shape;
    sizes
        .iter()
        .map(|&n| {
            let data = (0..n * c * h * w)
                .map(|_| match init {
                    InitKind::Uniform => rng.random::<f64>(),
                    InitKind::Gaussian => (0.5 + 0.1 * standard_normal(&mut rng)).clamp(0.0, 1.0),
                })
                .collect();
            Tensor::new(vec![n, c, h, w], data).expect("variable shape")
        })
        .collect()
}

/// Simulated steps for a mode given per-(epoch, batch) labels.
pub fn sim_plan(mode: AttackMode, labels: &LabelPlan) -> Vec<SimStep> {
    let b = labels.first().map_or(0, Vec::len);
    let flat = |e: usize| labels[e].concat();
    match mode {
        AttackMode::OursPrior | AttackMode::OursNoPrior => labels
            .iter()
            .enumerate()
            .flat_map(|(e, batches)| {
                batches.iter().enumerate().map(move |(j, l)| SimStep { var: e * b + j, labels: l.clone() })
            })
            .collect(),
        AttackMode::Shared => labels
            .iter()
            .flat_map(|batches| batches.iter().enumerate().map(|(j, l)| SimStep { var: j, labels: l.clone() }))
            .collect(),
        AttackMode::FedsgdEpoch => (0..labels.len()).map(|e| SimStep { var: e, labels: flat(e) }).collect(),
        AttackMode::Fedsgd => vec![SimStep { var: 0, labels: flat(0) }],
    }
}

/// Per-epoch image sets as groups of variable indices (concatenated in order).
pub fn epoch_groups(mode: AttackMode, batches: usize, epochs: usize) -> Vec<Vec<usize>> {
    match mode {
        AttackMode::OursPrior | AttackMode::OursNoPrior => {
            (0..epochs).map(|e| (e * batches..(e + 1) * batches).collect()).collect()
        }
        AttackMode::Shared => vec![(0..batches).collect()],
        AttackMode::FedsgdEpoch => (0..epochs).map(|e| vec![e]).collect(),
        AttackMode::Fedsgd => vec![vec![0]],
    }
}

/// Optimization state of one attack run.
#[derive(Clone, Debug)]
pub struct AttackState {
    pub mode: AttackMode,
    pub variables: Vec<Tensor>,
    pub labels: LabelPlan,
    pub plan: Vec<SimStep>,
    pub groups: Vec<Vec<usize>>,
}

impl AttackState {
    /// Fresh state: counts split by [`rand_order`] and random variables.
    pub fn new(obs: &ObservedUpdate, counts: &LabelCountEstimate, cfg: &AttackConfig) -> Result<Self> {
        if counts.total != obs.num_examples || counts.counts.iter().sum::<usize>() != obs.num_examples {
            return Err(Error::Config(format!(
                "label counts sum to {} but the client holds {} examples",
                counts.counts.iter().sum::<usize>(),
                obs.num_examples
            )));
        }
        if counts.counts.len() != obs.arch.classes() {
            return Err(Error::Config("label counts do not match the class count".into()));
        }
        let split = rand_order(&counts.counts, obs.batch_size, cfg.seed);
        Self::with_labels(obs, repeat_split(&split, obs.epochs), cfg)
    }

    /// State with explicit per-(epoch, batch) labels and random variables.
    pub fn with_labels(obs: &ObservedUpdate, labels: LabelPlan, cfg: &AttackConfig) -> Result<Self> {
        let sizes: Vec<usize> = obs.batch_sizes();
        let consistent = labels.len() == obs.epochs
            && labels.iter().all(|ep| ep.len() == sizes.len() && ep.iter().zip(&sizes).all(|(l, &s)| l.len() == s));
        if !consistent {
            return Err(Error::Config("label plan does not match the update's epochs and batches".into()));
        }
        let shape = obs.arch.input_shape();
        let variables = rand_init(&variable_sizes(cfg.mode, &sizes, obs.epochs), shape, cfg.init, cfg.seed);
        Ok(AttackState {
            mode: cfg.mode,
            plan: sim_plan(cfg.mode, &labels),
            groups: epoch_groups(cfg.mode, sizes.len(), obs.epochs),
            variables,
            labels,
        })
    }

    /// State holding the client's true inputs and labels, wired as the client
    /// consumed them in `partitions` (`[E][B]` example indices).
    pub fn from_truth(data: &ClientDataset, partitions: &[Vec<Vec<usize>>], mode: AttackMode) -> Result<Self> {
        let labels: LabelPlan = partitions
            .iter()
            .map(|ep| ep.iter().map(|idx| idx.iter().map(|&i| data.labels()[i]).collect()).collect())
            .collect();
        let images = |idx: &[usize]| data.batch(idx).0;
        let variables = match mode {
            AttackMode::OursPrior | AttackMode::OursNoPrior => partitions.iter().flatten().map(|b| images(b)).collect(),
            AttackMode::Shared => partitions[0].iter().map(|b| images(b)).collect(),
            AttackMode::FedsgdEpoch => partitions.iter().map(|ep| images(&ep.concat())).collect(),
            AttackMode::Fedsgd => vec![images(&partitions[0].concat())],
        };
        let batches = partitions.first().map_or(0, Vec::len);
        Ok(AttackState {
            mode,
            plan: sim_plan(mode, &labels),
            groups: epoch_groups(mode, batches, partitions.len()),
            variables,
            labels,
        })
    }

    /// Per-epoch image sets `[N, C, H, W]`, in the layout of `labels`.
    pub fn epoch_images(&self) -> Vec<Tensor> {
        self.groups
            .iter()
            .map(|group| {
                let parts: Vec<Tensor> = group.iter().map(|&v| self.variables[v].clone()).collect();
                Tensor::cat_rows(&parts).expect("variables share image shape")
            })
            .collect()
    }

    /// Labels in the order of each epoch image set's rows (epoch 1 layout).
    pub fn final_labels(&self) -> Vec<usize> {
        self.labels[0].concat()
    }
}

/// Values of the objective's parts at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub sim: f64,
    pub inv: f64,
    pub tv: f64,
    pub clip: f64,
    pub total: f64,
    pub lr: f64,
}

pub const TRACE_HEADER: &str = "step,L_sim,L_inv,TV,clip,total,lr";

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            r.step, r.sim, r.inv, r.tv, r.clip, r.total, r.lr
        ));
    }
    out
}

/// Fixed inputs of the objective.
pub struct Objective<'a> {
    pub obs: &'a ObservedUpdate,
    pub cfg: &'a AttackConfig,
    target: Tensor,
    server: Vec<Tensor>,
    conv: Option<Tensor>,
}

impl<'a> Objective<'a> {
    pub fn new(obs: &'a ObservedUpdate, cfg: &'a AttackConfig) -> Result<Self> {
        let delta = obs.delta();
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("observed update is not finite".into()));
        }
        let conv = matches!(cfg.prior, PriorKind::ConvMean | PriorKind::ConvMax)
            .then(|| RandomConvPrior::new(obs.arch.input_shape()[0], cfg.seed).weight);
        Ok(Objective {
            obs,
            cfg,
            target: Tensor::from_vec(delta),
            server: obs.server.tensors().to_vec(),
            conv,
        })
    }

    /// Loss parts at `state`, and the gradient of the total with respect to
    /// every variable when `with_grad`.
    pub fn evaluate(&self, state: &AttackState, step: usize, with_grad: bool) -> Result<(TraceRow, Option<Vec<Tensor>>)> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let server: Vec<_> = self.server.iter().map(|t| g.leaf(t.clone())).collect();
        let vars: Vec<_> = state.variables.iter().map(|t| g.leaf(t.clone())).collect();
        let target = g.leaf(self.target.clone());

        let sim_dir = simulated_direction(&mut g, &self.obs.arch, &server, &vars, &state.plan, self.obs.lr, state.mode)?;
        let sim = loss_sim(&mut g, target, sim_dir)?;
        let inv = if state.mode.uses_prior() && cfg.lambda_inv > 0.0 {
            let conv = self.conv.as_ref().map(|w| g.leaf(w.clone()));
            let sets = state
                .groups
                .iter()
                .map(|group| {
                    let parts: Vec<_> = group.iter().map(|&v| vars[v]).collect();
                    g.concat(&parts, 0)
                })
                .collect::<Result<Vec<_>, _>>()?;
            loss_inv(&mut g, &sets, cfg.prior, cfg.distance, conv)?
        } else {
            g.scalar(0.0)
        };
        let (tv, clip) = regularizers(&mut g, &vars, cfg.clip)?;

        let mut total = sim;
        for (term, weight) in [(inv, cfg.lambda_inv), (tv, cfg.lambda_tv), (clip, cfg.lambda_clip)] {
            if weight != 0.0 {
                let t = g.scale(term, weight)?;
                total = g.add(total, t)?;
            }
        }
        let row = TraceRow {
            step,
            sim: g.item(sim)?,
            inv: g.item(inv)?,
            tv: g.item(tv)?,
            clip: g.item(clip)?,
            total: g.item(total)?,
            lr: decayed_lr(cfg.lr, cfg.decay, cfg.decay_every, step),
        };
        if !row.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite attack loss at step {step}: L_sim={} L_inv={} TV={} clip={}",
                row.sim, row.inv, row.tv, row.clip
            )));
        }
        if !with_grad {
            return Ok((row, None));
        }
        let grads = g.grad(total, &vars)?;
        let grads = grads.iter().map(|&d| g.value(d).cloned()).collect::<Result<Vec<_>, _>>()?;
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite attack gradient at step {step}")));
        }
        Ok((row, Some(grads)))
    }
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub mode: AttackMode,
    /// Per-epoch reconstructions `[N, C, H, W]` before matching.
    pub per_epoch: Vec<Tensor>,
    /// Matched, averaged and clamped reconstructions.
    pub images: Tensor,
    /// Label of each row of `images`.
    pub labels: Vec<usize>,
    pub label_plan: LabelPlan,
    pub trace: Vec<TraceRow>,
}

/// Runs the configured number of Adam steps from `state`.
pub fn run_attack(obs: &ObservedUpdate, mut state: AttackState, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let objective = Objective::new(obs, cfg)?;
    let mut adam = Adam::new(cfg.adam, &state.variables);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (row, grads) = objective.evaluate(&state, step, true)?;
        adam.step(&mut state.variables, &grads.expect("requested"), row.lr);
        trace.push(row);
    }
    let (last, _) = objective.evaluate(&state, cfg.steps, false)?;
    trace.push(last);

    let per_epoch = state.epoch_images();
    let images = match_epoch(&per_epoch)?.map(|v| v.clamp(0.0, 1.0));
    Ok(AttackResult {
        mode: state.mode,
        labels: state.final_labels(),
        per_epoch,
        images,
        label_plan: state.labels,
        trace,
    })
}

/// Full attack from label counts.
pub fn attack(obs: &ObservedUpdate, counts: &LabelCountEstimate, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let state = AttackState::new(obs, counts, cfg)?;
    run_attack(obs, state, cfg)
}
