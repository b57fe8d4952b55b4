//! Acceptance suite: one PASS/FAIL line per criterion and a final tally.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use fedleak::attack::{
    loss_inv, permute_rows, rand_init, sim_update, AttackConfig, AttackMode, AttackState, Distance, InitKind,
    Objective, PriorKind, RandomConvPrior,
};
use fedleak::autodiff::{finite_difference, Graph, Tensor};
use fedleak::experiment::{run_experiment, ExperimentConfig};
use fedleak::fedavg::{averaged_update, observe, ClientDataset, ClientOptions, FedAvgConfig};
use fedleak::io::{generate_synthetic, SeedStream};
use fedleak::label_recon::{
    dummy_inputs, estimate_stats, fedavg_label_counts, fedsgd_label_counts, geng_baseline, Endpoint, Interpolation,
    DUMMY_EXAMPLES,
};
use fedleak::matching::linear_sum_assignment;
use fedleak::metrics::{evaluate, ReportRow, PSNR_CAP};
use fedleak::model::{self, init_params, Architecture, Layer, Parameters};
use rand::seq::SliceRandom;
use rand::Rng;

/// Hidden width of the desk-scale MLP.
const DESK_HIDDEN: usize = 512;
/// Client learning rate of the desk-scale experiments.
const DESK_ETA: f64 = 0.02;
const DESK_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Small random networks, alternating MLPs and CNNs.
fn random_network(seed: u64) -> Architecture {
    if seed % 2 == 0 {
        Architecture::mlp([1, 4, 4], 6 + (seed as usize % 5), 3).unwrap()
    } else {
        Architecture::new(
            [2, 4, 4],
            3,
            vec![
                Layer::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                Layer::Relu,
                Layer::AvgPool2d { kernel: 2, stride: 2 },
                Layer::Flatten,
                Layer::Linear { in_features: 12, out_features: 3 },
            ],
        )
        .unwrap()
    }
}

fn ce(arch: &Architecture, params: &[Tensor], x: &Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let p: Vec<_> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let xv = g.leaf(x.clone());
    let trace = model::forward(&mut g, arch, &p, xv, labels).unwrap();
    g.item(trace.loss).unwrap()
}

fn criterion_1() -> Outcome {
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for seed in 0..20u64 {
        let arch = random_network(seed);
        assert!(arch.param_count() <= 1000);
        let mut rng = SeedStream::new(seed).derive("c1").rng();
        let params = init_params(&arch, seed).tensors().to_vec();
        let [c, h, w] = arch.input_shape();
        let x = random_tensor(&[3, c, h, w], &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..arch.classes())).collect();

        let mut g = Graph::new();
        let p: Vec<_> = params.iter().map(|t| g.leaf(t.clone())).collect();
        let xv = g.leaf(x.clone());
        let trace = model::forward(&mut g, &arch, &p, xv, &labels).unwrap();
        let mut wrt = p.clone();
        wrt.push(xv);
        let grads = g.grad(trace.loss, &wrt).unwrap();

        for (slot, &gv) in grads.iter().enumerate() {
            let analytic = g.value(gv).unwrap().clone();
            let numeric = if slot == params.len() {
                finite_difference(|t| ce(&arch, &params, t, &labels), &x, 1e-5)
            } else {
                finite_difference(
                    |t| {
                        let mut q = params.clone();
                        q[slot] = t.clone();
                        ce(&arch, &q, &x, &labels)
                    },
                    &params[slot],
                    1e-5,
                )
            };
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                if a.abs() > 1e-6 {
                    checked += 1;
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
                }
            }
        }
    }
    outcome(worst <= 1e-4, format!("{checked} components over 20 networks, worst relative error {worst:.2e}"))
}

fn grad_norm_sq(arch: &Architecture, params: &[Tensor], x: &Tensor, labels: &[usize]) -> (Graph, fedleak::autodiff::Var, fedleak::autodiff::Var) {
    let mut g = Graph::new();
    let p: Vec<_> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let xv = g.leaf(x.clone());
    let trace = model::forward(&mut g, arch, &p, xv, labels).unwrap();
    let gp = g.grad(trace.loss, &p).unwrap();
    let flat = g.flatten_all(&gp).unwrap();
    let sq = g.square(flat).unwrap();
    let total = g.sum(sq).unwrap();
    (g, xv, total)
}

fn criterion_2() -> Outcome {
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for seed in 0..10u64 {
        let arch = random_network(seed + 100);
        let mut rng = SeedStream::new(seed).derive("c2").rng();
        let params = init_params(&arch, seed + 100).tensors().to_vec();
        let [c, h, w] = arch.input_shape();
        let x = random_tensor(&[2, c, h, w], &mut rng);
        let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..arch.classes())).collect();
        let (mut g, xv, total) = grad_norm_sq(&arch, &params, &x, &labels);
        let dx = g.grad(total, &[xv]).unwrap()[0];
        let analytic = g.value(dx).unwrap().clone();
        let numeric = finite_difference(
            |t| {
                let (g, _, total) = grad_norm_sq(&arch, &params, t, &labels);
                g.item(total).unwrap()
            },
            &x,
            1e-5,
        );
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            if a.abs() > 1e-6 {
                checked += 1;
                worst = worst.max((a - n).abs() / a.abs().max(n.abs()));
            }
        }
    }
    outcome(worst <= 1e-3, format!("{checked} input components over 10 cases, worst relative error {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let configs = [(1, 1), (1, 2), (1, 4), (2, 1), (2, 2), (2, 4), (3, 1), (3, 2), (3, 4), (3, 2)];
    let (mut exact, mut worst_sim) = (0usize, 0.0f64);
    for (i, &(epochs, m)) in configs.iter().enumerate() {
        let seed = 300 + i as u64;
        let arch = Architecture::mlp([1, 4, 4], 8, 3).unwrap();
        let data = generate_synthetic(&[3, 2, 2], [1, 4, 4], seed).unwrap();
        let cfg = FedAvgConfig { lr: 0.2, batch_size: m, epochs, partition_seed: seed };
        let (obs, run) = observe(&data, &arch, &init_params(&arch, seed), &cfg, ClientOptions::default()).unwrap();
        let state = AttackState::from_truth(&data, &run.partitions, AttackMode::OursPrior).unwrap();

        let mut g = Graph::new();
        let server = obs.server.register(&mut g);
        let vars: Vec<_> = state.variables.iter().map(|t| g.leaf(t.clone())).collect();
        let sim = sim_update(&mut g, &arch, &server, &vars, &state.plan, obs.lr).unwrap();
        let sim: Vec<f64> = sim.iter().flat_map(|&v| g.value(v).unwrap().data().to_vec()).collect();
        if sim.iter().zip(obs.client.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
        let acfg = AttackConfig::femnist();
        let (row, _) = Objective::new(&obs, &acfg).unwrap().evaluate(&state, 0, false).unwrap();
        worst_sim = worst_sim.max(row.sim);
    }
    outcome(
        exact == configs.len() && worst_sim < 1e-9,
        format!("{exact}/{} bit-exact replays, largest ground-truth L_sim {worst_sim:.1e}", configs.len()),
    )
}

fn criterion_4() -> Outcome {
    // Exact recovery holds when every example of the batch shares the same
    // penultimate activation sum and softmax output, i.e. identical inputs
    // (any labels) or a single example.
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let n = 1 + (seed as usize % 8);
        let arch = Architecture::mlp([1, 4, 4], 10, 4).unwrap();
        let mut rng = SeedStream::new(seed).derive("c4").rng();
        let image: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let inputs = Tensor::new(vec![n, 1, 4, 4], image.repeat(n)).unwrap();
        let data = ClientDataset::new(inputs.clone(), labels, 4).unwrap();
        let cfg = FedAvgConfig { lr: 0.1, batch_size: n, epochs: 1, partition_seed: seed };
        let (obs, _) = observe(&data, &arch, &init_params(&arch, seed), &cfg, ClientOptions::default()).unwrap();
        let grad = averaged_update(&obs).unwrap();
        let delta_w = model::last_layer_sums_from_flat(&arch, &grad);
        let stats = estimate_stats(&arch, &obs.server, &inputs, Endpoint::Server).unwrap();
        let raw = fedsgd_label_counts(&delta_w, &stats, n as f64).unwrap();
        for (r, t) in raw.iter().zip(data.label_counts()) {
            worst = worst.max((r - t as f64).abs());
        }
    }
    outcome(worst <= 1e-6, format!("20 batches, largest pre-integer count error {worst:.1e}"))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn criterion_5() -> Outcome {
    let perms = permutations(6);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = SeedStream::new(seed).derive("c5").rng();
        let m: Vec<Vec<f64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let best = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| m[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let got = linear_sum_assignment(&m, false).unwrap().objective;
        worst = worst.max((got - best).abs());
    }
    outcome(worst <= 1e-9, format!("100 matrices, largest gap to exhaustive optimum {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let sets = rand_init(&[6, 6, 6], [3, 4, 4], InitKind::Uniform, 61);
    let conv = RandomConvPrior::new(3, 62).weight;
    let mut failures = Vec::new();
    for kind in [PriorKind::Mean, PriorKind::Max, PriorKind::ConvMean, PriorKind::ConvMax] {
        for dist in [Distance::L1, Distance::L2] {
            let mut g = Graph::new();
            let w = Some(g.leaf(conv.clone()));
            let same: Vec<_> = (0..3).map(|_| g.leaf(sets[1].clone())).collect();
            let zero = loss_inv(&mut g, &same, kind, dist, w).unwrap();
            let vars: Vec<_> = sets.iter().map(|t| g.leaf(t.clone())).collect();
            let base = loss_inv(&mut g, &vars, kind, dist, w).unwrap();
            let mut invariant = true;
            for trial in 0..5u64 {
                let mut rng = SeedStream::new(trial).derive("c6").rng();
                let moved: Vec<_> = vars
                    .iter()
                    .map(|&v| {
                        let mut order: Vec<usize> = (0..6).collect();
                        order.shuffle(&mut rng);
                        permute_rows(&mut g, v, &order).unwrap()
                    })
                    .collect();
                let l = loss_inv(&mut g, &moved, kind, dist, w).unwrap();
                invariant &= g.item(l).unwrap().to_bits() == g.item(base).unwrap().to_bits();
            }
            if g.item(zero).unwrap().abs() > 1e-12 || !invariant {
                failures.push(format!("{kind:?}/{dist:?}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() { "8 aggregate/distance pairs".to_string() } else { format!("failed: {}", failures.join(", ")) },
    )
}

fn desk_config(out: &Path, epochs: usize, modes: &[&str], defense: &str, seeds: &[u64], steps: usize) -> ExperimentConfig {
    let modes: Vec<String> = modes.iter().map(|m| format!("{m:?}")).collect();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    ExperimentConfig::from_json(&format!(
        r#"{{
            "dataset": {{"synthetic": {{"classes": 4, "per_class": 2, "shape": [1, 8, 8], "seed": 7}}}},
            "arch": "mlp:1x8x8:{DESK_HIDDEN}:4",
            "client_lr": {DESK_ETA},
            "grid": {{"epochs": [{epochs}], "batch_sizes": [2], "modes": [{}]}},
            "labels": "known",
            "attack": {{"profile": "desk", "steps": {steps}}},
            "defense": {defense},
            "seeds": [{}],
            "output_dir": {:?}
        }}"#,
        modes.join(", "),
        seeds.join(", "),
        out
    ))
    .unwrap()
}

const NO_DEFENSE: &str = r#"{"kind": "none"}"#;

fn mean_rec(rows: &[ReportRow], mode: &str) -> f64 {
    let of: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.rec_percent).collect();
    of.iter().sum::<f64>() / of.len() as f64
}

/// Ground-truth initialization sanity for the desk setup: the replay is
/// exact and the true images score the PSNR cap.
fn desk_calibration() -> (f64, f64) {
    let arch = Architecture::mlp([1, 8, 8], DESK_HIDDEN, 4).unwrap();
    let data = generate_synthetic(&[2; 4], [1, 8, 8], 7).unwrap();
    let cfg = FedAvgConfig { lr: DESK_ETA, batch_size: 2, epochs: 3, partition_seed: 1 };
    let (obs, run) = observe(&data, &arch, &init_params(&arch, 2), &cfg, ClientOptions::default()).unwrap();
    let state = AttackState::from_truth(&data, &run.partitions, AttackMode::OursPrior).unwrap();
    let (row, _) = Objective::new(&obs, &AttackConfig::desk()).unwrap().evaluate(&state, 0, false).unwrap();
    let images = fedleak::matching::match_epoch(&state.epoch_images()).unwrap();
    let report = evaluate(&images, data.inputs(), 20.0).unwrap();
    (row.sim, report.mean_psnr)
}

fn criterion_7(out: &Path) -> (Outcome, Vec<ReportRow>) {
    let (sim, psnr) = desk_calibration();
    let calibrated = sim < 1e-9 && psnr == PSNR_CAP;
    let cfg = desk_config(out, 3, &["ours_prior"], NO_DEFENSE, &DESK_SEEDS, 1000);
    let rows = run_experiment(&cfg).unwrap().rows;
    let good = rows.iter().filter(|r| r.rec_percent >= 75.0).count();
    let per_seed: Vec<String> = rows.iter().map(|r| format!("{}", (r.rec_percent * 8.0 / 100.0).round())).collect();
    (
        outcome(
            calibrated && good >= 7,
            format!(
                "ground-truth start L_sim {sim:.1e}, PSNR {psnr}; seeds with >= 6/8 above 20 dB: {good}/10 (per seed: {})",
                per_seed.join(" ")
            ),
        ),
        rows,
    )
}

fn criterion_8(out: &Path) -> Outcome {
    let cfg = desk_config(out, 5, &["ours_prior", "ours_no_prior", "fedsgd"], NO_DEFENSE, &DESK_SEEDS, 1000);
    let rows = run_experiment(&cfg).unwrap().rows;
    let (prior, no_prior, fedsgd) = (mean_rec(&rows, "ours_prior"), mean_rec(&rows, "ours_no_prior"), mean_rec(&rows, "fedsgd"));
    outcome(
        prior >= no_prior && prior - fedsgd >= 10.0,
        format!("mean reconstructed %: ours_prior {prior:.2}, ours_no_prior {no_prior:.2}, fedsgd {fedsgd:.2}"),
    )
}

/// Mean L1 errors (interpolated, server baseline, client baseline) over 20
/// seeds of one grid cell.
fn label_errors(epochs: usize, m: usize, balanced: bool) -> [f64; 3] {
    let arch = Architecture::mlp([1, 8, 8], DESK_HIDDEN, 4).unwrap();
    let mut err = [0.0; 3];
    for seed in 0..20u64 {
        let root = SeedStream::new(seed).derive("c9");
        let mut per_class = [2usize; 4];
        if !balanced {
            let mut rng = root.derive("counts").rng();
            per_class = [0; 4];
            (0..8).for_each(|_| per_class[rng.random_range(0..4)] += 1);
        }
        let data = generate_synthetic(&per_class, [1, 8, 8], root.derive("data").seed()).unwrap();
        let cfg = FedAvgConfig { lr: DESK_ETA, batch_size: m, epochs, partition_seed: root.derive("partition").seed() };
        let params: Parameters = init_params(&arch, root.derive("server").seed());
        let (obs, _) = observe(&data, &arch, &params, &cfg, ClientOptions::default()).unwrap();
        let dummy = dummy_inputs(&arch, DUMMY_EXAMPLES, root.derive("dummy").seed());
        let truth = data.label_counts();
        err[0] += fedavg_label_counts(&obs, &dummy, Interpolation::default()).unwrap().l1_error(&truth) as f64;
        err[1] += geng_baseline(&obs, &dummy, Endpoint::Server).unwrap().l1_error(&truth) as f64;
        err[2] += geng_baseline(&obs, &dummy, Endpoint::Client).unwrap().l1_error(&truth) as f64;
    }
    err.map(|e| e / 20.0)
}

/// Clients draw their 8 labels uniformly at random. An exactly balanced
/// client is reported alongside but not scored: near initialization every
/// estimator predicts close to uniform counts, which round to the truth.
fn criterion_9() -> Outcome {
    let mut cells = Vec::new();
    let mut balanced = Vec::new();
    let mut pass = true;
    for epochs in [1, 3] {
        for m in [1, 2] {
            let [ours, server, client] = label_errors(epochs, m, false);
            pass &= ours <= 1.25 * server.min(client);
            cells.push(format!("E={epochs} m={m}: {ours:.2} vs {server:.2}/{client:.2}"));
            let [ours, server, client] = label_errors(epochs, m, true);
            balanced.push(format!("{ours:.2} vs {server:.2}/{client:.2}"));
        }
    }
    outcome(
        pass,
        format!(
            "mean |err|_1 interpolated vs server/client baselines: {}; balanced clients, unscored: {}",
            cells.join("; "),
            balanced.join("; ")
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn criterion_10(root: &Path) -> Outcome {
    let (a, b) = (root.join("run_a"), root.join("run_b"));
    for dir in [&a, &b] {
        let cfg = desk_config(dir, 2, &["ours_prior", "shared", "fedsgd"], r#"{"kind": "gaussian", "strength": 0.05, "relative": true}"#, &[3, 4], 100);
        run_experiment(&cfg).unwrap();
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    let images = ta.iter().filter(|(n, _)| n.ends_with(".pgm")).count();
    outcome(ta == tb && images == 6, format!("{} files compared ({images} image grids)", ta.len()))
}

fn criterion_11(out: &Path, clean: &[ReportRow]) -> Outcome {
    let cfg = desk_config(out, 3, &["ours_prior"], r#"{"kind": "gaussian", "strength": 0.1, "relative": true}"#, &DESK_SEEDS, 1000);
    let rows = run_experiment(&cfg).unwrap().rows;
    let (before, after) = (mean_rec(clean, "ours_prior"), mean_rec(&rows, "ours_prior"));
    outcome(after < before, format!("mean reconstructed %: no defense {before:.2}, noise at 10% RMS {after:.2}"))
}

fn report(n: usize, budget: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = run();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = o.pass && in_time;
    let timing = if in_time { String::new() } else { format!(", over the {}s budget", budget.as_secs()) };
    println!(
        "criterion {n:>2}: {} ({}) [{:.1}s{timing}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let min = |m: u64| Duration::from_secs(60 * m);
    let mut results = vec![
        report(1, min(1), criterion_1),
        report(2, min(1), criterion_2),
        report(3, min(1), criterion_3),
        report(4, min(1), criterion_4),
        report(5, Duration::from_secs(10), criterion_5),
        report(6, Duration::from_secs(10), criterion_6),
    ];
    let mut clean = Vec::new();
    results.push(report(7, min(10), || {
        let (o, rows) = criterion_7(&root.join("c7"));
        clean = rows;
        o
    }));
    results.push(report(8, min(30), || criterion_8(&root.join("c8"))));
    results.push(report(9, min(15), criterion_9));
    results.push(report(10, min(20), || criterion_10(&root.join("c10"))));
    results.push(report(11, min(20), || criterion_11(&root.join("c11"), &clean)));
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    // A report by default; set ACCEPTANCE_STRICT=1 to turn FAIL lines into a
    // failing exit status.
    if passed != results.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
