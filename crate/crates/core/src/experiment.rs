//! Grid runner: every (client, seed, E, m) cell trains one client update,
//! optionally defends it, recovers label counts and runs each attack mode.
//!
//! All randomness of a cell derives from its seed and client id, so results do
//! not depend on the order or parallelism in which cells run.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attack::{run_attack, AttackConfig, AttackMode, AttackState};
use crate::autodiff::Tensor;
use crate::defenses::{defend_update, DefenseConfig};
use crate::error::{Error, Result};
use crate::fedavg::{observe, ClientDataset, ClientOptions, FedAvgConfig};
use crate::io::{export_image_grid, load_dataset, SeedStream, SyntheticSpec};
use crate::label_recon::{dummy_inputs, fedavg_label_counts, Interpolation, LabelCountEstimate, DUMMY_EXAMPLES};
use crate::metrics::{default_threshold, evaluate, label_error, mean_std, rows_to_csv, ReportRow};
use crate::model::{init_params, Architecture};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// One synthetic client per seed, generated from the generator seed and the
    /// run seed.
    Synthetic(SyntheticSpec),
    /// A dataset directory, or a directory whose subdirectories are datasets
    /// (one client each).
    Path(PathBuf),
}

/// `femnist`, `cifar100`, `mlp:<C>x<H>x<W>:<hidden>:<classes>` or an inline layer list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSource {
    Name(String),
    Inline(Architecture),
}

impl ArchSource {
    pub fn resolve(&self) -> Result<Architecture> {
        match self {
            ArchSource::Name(n) => Architecture::by_name(n),
            ArchSource::Inline(a) => Ok(a.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The attacker is given the true label counts.
    #[default]
    Known,
    /// Counts recovered from the update.
    Reconstruct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub epochs: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub modes: Vec<AttackMode>,
}

/// Attack hyperparameters: a named profile plus field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(flatten)]
    pub overrides: Map<String, Value>,
}

fn default_profile() -> String {
    "femnist".into()
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection { profile: default_profile(), overrides: Map::new() }
    }
}

impl AttackSection {
    pub fn resolve(&self) -> Result<AttackConfig> {
        let base = AttackConfig::profile(&self.profile)?;
        let mut value = serde_json::to_value(base).expect("attack config serializes");
        let obj = value.as_object_mut().expect("attack config is an object");
        for (k, v) in &self.overrides {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: AttackConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("attack section: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_client_lr() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub arch: ArchSource,
    /// Client learning rate η.
    #[serde(default = "default_client_lr")]
    pub client_lr: f64,
    #[serde(default)]
    pub consistent_batches: bool,
    pub grid: Grid,
    #[serde(default)]
    pub labels: LabelSource,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default = "no_defense")]
    pub defense: DefenseConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// PSNR success threshold; by default 20 for one channel, 19 otherwise.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "yes")]
    pub save_images: bool,
}

fn no_defense() -> DefenseConfig {
    DefenseConfig::NONE
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.epochs.is_empty() || g.batch_sizes.is_empty() || g.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid axes and seeds must be nonempty".into()));
        }
        if g.epochs.contains(&0) || g.batch_sizes.contains(&0) {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.client_lr > 0.0 && self.client_lr.is_finite()) {
            return Err(Error::Config(format!("client learning rate must be positive, got {}", self.client_lr)));
        }
        self.defense.validate()?;
        self.attack.resolve()?;
        Ok(())
    }
}

/// One named client dataset of the experiment.
#[derive(Clone, Debug)]
pub struct Client {
    pub id: String,
    pub data: ClientDataset,
}

/// Clients for one seed.
pub fn load_clients(source: &DatasetSource, arch: &Architecture, seed: u64) -> Result<Vec<Client>> {
    match source {
        DatasetSource::Synthetic(spec) => {
            let spec = SyntheticSpec {
                seed: SeedStream::new(spec.seed).derive(&format!("seed={seed}")).seed(),
                ..spec.clone()
            };
            Ok(vec![Client { id: "synthetic".into(), data: spec.generate()? }])
        }
        DatasetSource::Path(dir) => {
            if dir.join("inputs.flt").is_file() {
                let id = dir.file_name().map_or("client".into(), |n| n.to_string_lossy().into_owned());
                return Ok(vec![Client { id, data: load_dataset(dir, arch.classes())? }]);
            }
            let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            let mut subdirs = Vec::new();
            for entry in entries {
                let path = entry.map_err(|e| Error::io(dir, e))?.path();
                if path.join("inputs.flt").is_file() {
                    subdirs.push(path);
                }
            }
            subdirs.sort();
            if subdirs.is_empty() {
                return Err(Error::format(dir, "no dataset (inputs.flt) here or in any subdirectory"));
            }
            subdirs
                .into_iter()
                .map(|p| {
                    let id = p.file_name().expect("entry has a name").to_string_lossy().into_owned();
                    Ok(Client { id, data: load_dataset(&p, arch.classes())? })
                })
                .collect()
        }
    }
}

/// Seeds of one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSeeds {
    pub server: u64,
    pub partition: u64,
    pub defense: u64,
    pub dummy: u64,
    pub attack: u64,
}

impl CellSeeds {
    pub fn new(seed: u64, client: &str, epochs: usize, batch_size: usize) -> Self {
        let root = SeedStream::new(seed).derive(&format!("client={client}"));
        let cell = root.derive(&format!("E={epochs}/m={batch_size}"));
        CellSeeds {
            // Every cell of a client starts from the same global model.
            server: root.derive("server").seed(),
            partition: cell.derive("partition").seed(),
            defense: cell.derive("defense").seed(),
            dummy: cell.derive("dummy").seed(),
            attack: cell.derive("attack").seed(),
        }
    }
}

/// Outcome of one attack in one cell.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub row: ReportRow,
    pub images: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    client: &Client,
    arch: &Architecture,
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    seed: u64,
    epochs: usize,
    batch_size: usize,
) -> Result<Vec<RunOutcome>> {
    let seeds = CellSeeds::new(seed, &client.id, epochs, batch_size);
    let server = init_params(arch, seeds.server);
    let fed = FedAvgConfig { lr: cfg.client_lr, batch_size, epochs, partition_seed: seeds.partition };
    let opts = ClientOptions { consistent_batches: cfg.consistent_batches, record_steps: false };
    let (obs, _) = observe(&client.data, arch, &server, &fed, opts)?;
    let obs = defend_update(&obs, &DefenseConfig { seed: seeds.defense, ..cfg.defense })?;

    let truth = client.data.label_counts();
    let counts = match cfg.labels {
        LabelSource::Known => LabelCountEstimate::exact(truth.clone()),
        LabelSource::Reconstruct => {
            let dummy = dummy_inputs(arch, DUMMY_EXAMPLES, seeds.dummy);
            fedavg_label_counts(&obs, &dummy, Interpolation::default())?
        }
    };
    let label_err = label_error(&counts.counts, &truth);
    let threshold = cfg.threshold.unwrap_or_else(|| default_threshold(arch.input_shape()[0]));

    cfg.grid
        .modes
        .iter()
        .map(|&mode| {
            let acfg = AttackConfig { mode, seed: seeds.attack, ..attack.clone() };
            let state = AttackState::new(&obs, &counts, &acfg)?;
            let result = run_attack(&obs, state, &acfg)?;
            let report = evaluate(&result.images, client.data.inputs(), threshold)?;
            Ok(RunOutcome {
                row: ReportRow {
                    client_id: client.id.clone(),
                    mode: mode.name().into(),
                    epochs,
                    batch_size,
                    examples: obs.num_examples,
                    steps: obs.total_steps(),
                    rec_percent: report.rec_percent,
                    mean_psnr: report.mean_psnr,
                    label_err,
                    seed,
                },
                images: result.images,
            })
        })
        .collect()
}

/// Per-mode aggregate over every row of that mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    pub rec_mean: f64,
    pub rec_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub label_err_mean: f64,
}

pub const SUMMARY_HEADER: &str = "mode,runs,rec_mean,rec_std,psnr_mean,psnr_std,label_err_mean";

pub fn summarize(rows: &[ReportRow], modes: &[AttackMode]) -> Vec<ModeSummary> {
    let mut seen = Vec::new();
    modes
        .iter()
        .filter(|m| {
            let fresh = !seen.contains(*m);
            seen.push(**m);
            fresh
        })
        .map(|m| {
            let of: Vec<&ReportRow> = rows.iter().filter(|r| r.mode == m.name()).collect();
            let (rec_mean, rec_std) = mean_std(&of.iter().map(|r| r.rec_percent).collect::<Vec<_>>());
            let (psnr_mean, psnr_std) = mean_std(&of.iter().map(|r| r.mean_psnr).collect::<Vec<_>>());
            let (label_err_mean, _) = mean_std(&of.iter().map(|r| r.label_err).collect::<Vec<_>>());
            ModeSummary {
                mode: m.name().into(),
                runs: of.len(),
                rec_mean,
                rec_std,
                psnr_mean,
                psnr_std,
                label_err_mean,
            }
        })
        .collect()
}

pub fn summary_to_csv(summary: &[ModeSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in summary {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.2}\n",
            s.mode, s.runs, s.rec_mean, s.rec_std, s.psnr_mean, s.psnr_std, s.label_err_mean
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<ModeSummary>,
}

fn mode_rank(name: &str) -> usize {
    AttackMode::ALL.iter().position(|m| m.name() == name).unwrap_or(usize::MAX)
}

/// Sort key of a row: client, seed, E, m, then mode in canonical order.
pub fn row_key(r: &ReportRow) -> (&str, u64, usize, usize, usize) {
    (&r.client_id, r.seed, r.epochs, r.batch_size, mode_rank(&r.mode))
}

pub fn image_file_name(row: &ReportRow, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    format!("{}_seed{}_E{}_m{}_{}.{ext}", row.client_id, row.seed, row.epochs, row.batch_size, row.mode)
}

/// Runs the whole grid and writes `results.csv`, `summary.csv` and, if
/// enabled, one image grid per row under `images/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let arch = cfg.arch.resolve()?;
    let attack = cfg.attack.resolve()?;

    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for client in load_clients(&cfg.dataset, &arch, seed)? {
            if client.data.image_shape() != arch.input_shape() {
                return Err(Error::Config(format!(
                    "client {} has images {:?} but the architecture expects {:?}",
                    client.id,
                    client.data.image_shape(),
                    arch.input_shape()
                )));
            }
            for &e in &cfg.grid.epochs {
                for &m in &cfg.grid.batch_sizes {
                    cells.push((client.clone(), seed, e, m));
                }
            }
        }
    }

    let work = |(client, seed, e, m): &(Client, u64, usize, usize)| run_cell(client, &arch, cfg, &attack, *seed, *e, *m);
    let results: Vec<Result<Vec<RunOutcome>>> = if cfg.parallel {
        cells.par_iter().map(work).collect()
    } else {
        cells.iter().map(work).collect()
    };
    let mut outcomes = Vec::new();
    for r in results {
        outcomes.extend(r?);
    }
    outcomes.sort_by(|a, b| row_key(&a.row).cmp(&row_key(&b.row)));

    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if cfg.save_images {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for o in &outcomes {
            export_image_grid(&o.images, images.join(image_file_name(&o.row, arch.input_shape()[0])))?;
        }
    }
    let rows: Vec<ReportRow> = outcomes.into_iter().map(|o| o.row).collect();
    let summary = summarize(&rows, &cfg.grid.modes);
    write(dir.join("results.csv"), &rows_to_csv(&rows))?;
    write(dir.join("summary.csv"), &summary_to_csv(&summary))?;
    Ok(ExperimentOutput { rows, summary })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
