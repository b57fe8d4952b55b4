use std::fs;
use std::path::Path;

use fedleak::attack::{run_attack, trace_to_csv, AttackConfig, AttackMode, AttackState, LabelPlan};
use fedleak::autodiff::Tensor;
use fedleak::defenses::{defend_update, DefenseConfig};
use fedleak::experiment::{run_experiment, summary_to_csv, ExperimentConfig};
use fedleak::fedavg::{observe, ClientOptions, FedAvgConfig};
use fedleak::io::{
    export_image_grid, load_dataset, load_labels, load_params, load_tensor, load_update, save_dataset, save_labels,
    save_tensor, save_update, SeedStream, SyntheticSpec,
};
use fedleak::label_recon::{dummy_inputs, fedavg_label_counts, Interpolation, LabelCountEstimate, DUMMY_EXAMPLES};
use fedleak::metrics::{default_threshold, evaluate as score};
use fedleak::model::{init_params, Architecture};
use fedleak::{Error, Result};

use crate::{AttackArgs, ClientUpdateArgs, EvaluateArgs, ExperimentArgs, GenDataArgs};

/// Client-side record of the batches drawn in each epoch, `[E][B][indices]`.
const PARTITIONS_FILE: &str = "partitions.json";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|_| Error::Config(format!("bad shape `{s}`, expected CxHxW"))))
        .collect::<Result<_>>()?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Config(format!("bad shape `{s}`, expected CxHxW"))),
    }
}

/// A known name, or else a JSON file holding an inline architecture.
fn resolve_arch(spec: &str) -> Result<Architecture> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = read(path)?;
        return serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), detail: e.to_string() });
    }
    Architecture::by_name(spec)
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec { classes: a.k, per_class: a.per_class, shape: parse_shape(&a.shape)?, seed: a.seed };
    let data = spec.generate()?;
    save_dataset(&a.out, &data)?;
    println!("wrote {} examples of {} classes to {}", data.len(), a.k, a.out.display());
    Ok(())
}

pub fn client_update(a: &ClientUpdateArgs) -> Result<()> {
    let arch = resolve_arch(&a.arch_config)?;
    let data = load_dataset(&a.data, arch.classes())?;
    if data.image_shape() != arch.input_shape() {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the architecture expects {:?}",
            data.image_shape(),
            arch.input_shape()
        )));
    }
    if a.batch_size == 0 || a.epochs == 0 || !(a.eta > 0.0) {
        return Err(Error::Config("batch size, epochs and eta must be positive".into()));
    }
    let root = SeedStream::new(a.seed);
    let server = match &a.server {
        Some(p) => load_params(p, &arch)?,
        None => init_params(&arch, root.derive("server").seed()),
    };
    let cfg = FedAvgConfig {
        lr: a.eta,
        batch_size: a.batch_size,
        epochs: a.epochs,
        partition_seed: root.derive("partition").seed(),
    };
    let opts = ClientOptions { consistent_batches: a.consistent_batches, record_steps: false };
    let (obs, run) = observe(&data, &arch, &server, &cfg, opts)?;
    let defense = DefenseConfig { seed: root.derive("defense").seed(), ..a.defense };
    let obs = defend_update(&obs, &defense)?;
    save_update(&a.out, &obs, &defense)?;
    let partitions = serde_json::to_string(&run.partitions).expect("partitions serialize");
    write(&a.out.join(PARTITIONS_FILE), &(partitions + "\n"))?;
    println!(
        "client trained {} steps on {} examples; update written to {}",
        obs.total_steps(),
        obs.num_examples,
        a.out.display()
    );
    Ok(())
}

fn attack_config(a: &AttackArgs) -> Result<AttackConfig> {
    let mut cfg = AttackConfig::profile(&a.profile)?;
    if let Some(path) = &a.config {
        let mut value = serde_json::to_value(&cfg).expect("attack config serializes");
        let text = read(path)?;
        let overrides: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
        value.as_object_mut().expect("attack config is an object").extend(overrides);
        cfg = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    cfg.mode = a.mode;
    if a.mode != AttackMode::OursPrior && (a.g.is_some() || a.dinv.is_some()) {
        eprintln!("warning: --g and --dinv only affect ours_prior; ignored for {}", a.mode);
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),+) => { $(if let Some(v) = a.$flag { cfg.$field = v; })+ };
    }
    set!(g => prior, dinv => distance, lambda_inv => lambda_inv, lambda_tv => lambda_tv,
         lambda_clip => lambda_clip, eta_rec => lr, decay => decay, decay_every => decay_every,
         steps => steps, seed => seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn attack(a: &AttackArgs) -> Result<()> {
    let cfg = attack_config(a)?;
    let (obs, _) = load_update(&a.update)?;
    let state = match a.labels.as_str() {
        "reconstruct" => {
            let dummy = dummy_inputs(&obs.arch, DUMMY_EXAMPLES, SeedStream::new(cfg.seed).derive("labels").seed());
            let counts = fedavg_label_counts(&obs, &dummy, Interpolation::default())?;
            AttackState::new(&obs, &counts, &cfg)?
        }
        "oracle-per-epoch" => {
            let data_dir = a
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("--labels oracle-per-epoch needs --data".into()))?;
            let labels = load_labels(data_dir.join("labels.txt"))?;
            let path = a.update.join(PARTITIONS_FILE);
            let partitions: Vec<Vec<Vec<usize>>> = serde_json::from_str(&read(&path)?)
                .map_err(|e| Error::Format { path: path.clone(), detail: e.to_string() })?;
            let lookup = |i: usize| {
                labels.get(i).copied().ok_or_else(|| Error::Config(format!("partition index {i} outside the dataset")))
            };
            let plan: LabelPlan = partitions
                .iter()
                .map(|ep| ep.iter().map(|b| b.iter().map(|&i| lookup(i)).collect()).collect())
                .collect::<Result<_>>()?;
            AttackState::with_labels(&obs, plan, &cfg)?
        }
        other => match other.strip_prefix("oracle:") {
            Some(path) => {
                let labels = load_labels(path)?;
                let mut counts = vec![0; obs.arch.classes()];
                for &l in &labels {
                    *counts
                        .get_mut(l)
                        .ok_or_else(|| Error::Config(format!("label {l} outside {} classes", obs.arch.classes())))? += 1;
                }
                AttackState::new(&obs, &LabelCountEstimate::exact(counts), &cfg)?
            }
            None => return Err(Error::Config(format!("unknown label source `{other}`"))),
        },
    };
    let result = run_attack(&obs, state, &cfg)?;

    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    for (e, t) in result.per_epoch.iter().enumerate() {
        save_tensor(dir.join(format!("epoch_{}.flt", e + 1)), t)?;
    }
    save_tensor(dir.join("images.flt"), &result.images)?;
    save_labels(dir.join("labels.txt"), &result.labels)?;
    let mut counts = vec![0usize; obs.arch.classes()];
    result.labels.iter().for_each(|&l| counts[l] += 1);
    save_labels(dir.join("counts.txt"), &counts)?;
    write(&dir.join("trace.csv"), &trace_to_csv(&result.trace))?;
    let ext = if obs.arch.input_shape()[0] == 1 { "pgm" } else { "ppm" };
    export_image_grid(&result.images, dir.join(format!("reconstruction.{ext}")))?;
    let last = result.trace.last().expect("trace has a final row");
    println!(
        "{}: {} steps, final L_sim {:.4e}, total {:.4e}; outputs in {}",
        cfg.mode,
        cfg.steps,
        last.sim,
        last.total,
        dir.display()
    );
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let recon: Tensor = load_tensor(a.recon_dir.join("images.flt"))?;
    let truth_inputs = load_tensor(a.truth.join("inputs.flt"))?;
    if recon.shape() != truth_inputs.shape() {
        return Err(Error::Config(format!(
            "reconstruction shape {:?} differs from ground truth {:?}",
            recon.shape(),
            truth_inputs.shape()
        )));
    }
    let channels = truth_inputs.shape()[1];
    let threshold = a.threshold.unwrap_or_else(|| default_threshold(channels));
    let report = score(&recon, &truth_inputs, threshold)?;
    let mut csv = String::from("image,matched,psnr,success\n");
    for (i, (&j, &p)) in report.matched.iter().zip(&report.psnr).enumerate() {
        csv.push_str(&format!("{i},{j},{p:.4},{}\n", u8::from(p > threshold)));
    }
    write(&a.out_csv, &csv)?;
    println!(
        "rec_percent {:.4} mean_psnr {:.4} (threshold {threshold})",
        report.rec_percent, report.mean_psnr
    );
    Ok(())
}

pub fn experiment(a: &ExperimentArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    cfg.parallel |= a.parallel;
    if let Some(dir) = &a.output_dir {
        cfg.output_dir = dir.clone();
    }
    let out = run_experiment(&cfg)?;
    print!("{}", summary_to_csv(&out.summary));
    println!("{} rows written to {}", out.rows.len(), cfg.output_dir.join("results.csv").display());
    Ok(())
}
