//! Local client training (`ClientUpdate`) and the server's view of its result.
//!
//! A client runs `E` epochs of minibatch SGD on batch-mean cross-entropy. Each
//! epoch shuffles its examples with a seed derived from
//! `(partition seed, "partition", "epoch=e")` and cuts the permutation into
//! `ceil(N / m)` consecutive batches; the last batch keeps its natural size.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::seed::SeedStream;
use crate::model::{self, Architecture, Parameters};

/// Private client data: inputs `[N, C, H, W]` and one label per example.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl ClientDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = inputs.shape();
        if shape.len() != 4 {
            return Err(Error::Config(format!("inputs must be [N, C, H, W], got {shape:?}")));
        }
        if shape[0] == 0 || shape[0] != labels.len() {
            return Err(Error::Config(format!("{} inputs with {} labels", shape[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Config(format!("label {bad} outside {classes} classes")));
        }
        Ok(ClientDataset { inputs, labels, classes })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    /// Stacks the selected examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let [c, h, w] = self.image_shape();
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Examples per class.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub partition_seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClientOptions {
    /// Reuse the first epoch's partition in every epoch.
    pub consistent_batches: bool,
    /// Keep the parameters after every step.
    pub record_steps: bool,
}

/// `ceil(n / m)`.
pub fn num_batches(n: usize, m: usize) -> usize {
    n.div_ceil(m)
}

/// Random permutation of `0..n` cut into chunks of `m`.
pub fn partition_data(n: usize, m: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).rng());
    order.chunks(m.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seed of the partition used in `epoch` (zero-based).
pub fn epoch_partition_seed(partition_seed: u64, epoch: usize) -> u64 {
    SeedStream::new(partition_seed)
        .derive("partition")
        .derive(&format!("epoch={epoch}"))
        .seed()
}

/// Batches of every epoch, as the client draws them.
pub fn epoch_partitions(n: usize, cfg: &FedAvgConfig, consistent: bool) -> Vec<Vec<Vec<usize>>> {
    let first = partition_data(n, cfg.batch_size, epoch_partition_seed(cfg.partition_seed, 0));
    (0..cfg.epochs)
        .map(|e| {
            if consistent || e == 0 {
                first.clone()
            } else {
                partition_data(n, cfg.batch_size, epoch_partition_seed(cfg.partition_seed, e))
            }
        })
        .collect()
}

/// One SGD step `θ - lr·∇θ CE(f(batch, θ), labels)` expressed in `g`, so the
/// result stays differentiable in both `params` and `batch`.
pub fn sgd_step(g: &mut Graph, arch: &Architecture, params: &[Var], batch: Var, labels: &[usize], lr: f64) -> Result<Vec<Var>> {
    let trace = model::forward(g, arch, params, batch, labels)?;
    let grads = g.grad(trace.loss, params)?;
    params
        .iter()
        .zip(grads)
        .map(|(&p, d)| {
            let step = g.scale(d, lr)?;
            Ok(g.sub(p, step)?)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub indices: Vec<usize>,
    pub params: Option<Parameters>,
}

#[derive(Clone, Debug)]
pub struct ClientRun {
    pub params: Parameters,
    pub steps: Vec<StepRecord>,
    pub partitions: Vec<Vec<Vec<usize>>>,
}

pub fn client_update(
    data: &ClientDataset,
    arch: &Architecture,
    server: &Parameters,
    cfg: &FedAvgConfig,
    opts: ClientOptions,
) -> Result<ClientRun> {
    validate(cfg)?;
    let partitions = epoch_partitions(data.len(), cfg, opts.consistent_batches);
    let mut params = server.clone();
    let mut steps = Vec::new();
    for (epoch, batches) in partitions.iter().enumerate() {
        for (b, indices) in batches.iter().enumerate() {
            let (x, y) = data.batch(indices);
            let mut g = Graph::new();
            let vars = params.register(&mut g);
            let xv = g.leaf(x);
            let next = sgd_step(&mut g, arch, &vars, xv, &y, cfg.lr)?;
            let tensors = next.iter().map(|&v| g.value(v).cloned()).collect::<Result<Vec<_>, _>>()?;
            if tensors.iter().any(|t| !t.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch} batch {b}")));
            }
            params = Parameters::from_tensors(arch, tensors)?;
            steps.push(StepRecord {
                epoch,
                batch: b,
                indices: indices.clone(),
                params: opts.record_steps.then(|| params.clone()),
            });
        }
    }
    Ok(ClientRun { params, steps, partitions })
}

fn validate(cfg: &FedAvgConfig) -> Result<()> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    Ok(())
}

/// Everything the server sees from one client round.
#[derive(Clone, Debug)]
pub struct ObservedUpdate {
    pub arch: Architecture,
    pub server: Parameters,
    pub client: Parameters,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub num_examples: usize,
}

impl ObservedUpdate {
    pub fn batches_per_epoch(&self) -> usize {
        num_batches(self.num_examples, self.batch_size)
    }

    /// `U = E·ceil(N/m)`.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }

    /// Sizes of the batches in one epoch.
    pub fn batch_sizes(&self) -> Vec<usize> {
        let m = self.batch_size;
        (0..self.batches_per_epoch())
            .map(|b| m.min(self.num_examples - b * m))
            .collect()
    }

    /// `θˢ − θᶜ`.
    pub fn delta(&self) -> Vec<f64> {
        self.server.flatten().iter().zip(self.client.flatten()).map(|(s, c)| s - c).collect()
    }
}

/// Runs [`client_update`] and packages the server's view.
pub fn observe(
    data: &ClientDataset,
    arch: &Architecture,
    server: &Parameters,
    cfg: &FedAvgConfig,
    opts: ClientOptions,
) -> Result<(ObservedUpdate, ClientRun)> {
    let run = client_update(data, arch, server, cfg, opts)?;
    let obs = ObservedUpdate {
        arch: arch.clone(),
        server: server.clone(),
        client: run.params.clone(),
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        num_examples: data.len(),
    };
    Ok((obs, run))
}

/// `(θˢ − θᶜ) / (η·U)` in flattened parameter order.
pub fn averaged_update(obs: &ObservedUpdate) -> Result<Vec<f64>> {
    if !(obs.lr > 0.0) {
        return Err(Error::Config(format!("averaged update needs a positive learning rate, got {}", obs.lr)));
    }
    let denom = obs.lr * obs.total_steps() as f64;
    Ok(obs.delta().into_iter().map(|d| d / denom).collect())
}

/// One FedAvg round: every client trains from `server`, and the new global
/// model is the example-weighted mean of their results.
pub fn fedavg_round(
    clients: &[ClientDataset],
    arch: &Architecture,
    server: &Parameters,
    cfg: &FedAvgConfig,
) -> Result<Parameters> {
    if clients.is_empty() {
        return Err(Error::Config("a round needs at least one client".into()));
    }
    let total: usize = clients.iter().map(ClientDataset::len).sum();
    let mut acc = vec![0.0; arch.param_count()];
    for (i, data) in clients.iter().enumerate() {
        let client_cfg = FedAvgConfig {
            partition_seed: SeedStream::new(cfg.partition_seed).derive(&format!("client={i}")).seed(),
            ..*cfg
        };
        let run = client_update(data, arch, server, &client_cfg, ClientOptions::default())?;
        let w = data.len() as f64 / total as f64;
        for (a, v) in acc.iter_mut().zip(run.params.flatten()) {
            *a += w * v;
        }
    }
    Parameters::unflatten(arch, &acc)
}
