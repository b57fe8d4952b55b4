use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedleak(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedleak"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fedleak(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    fedleak(dir, args).status.code().expect("exited normally")
}

fn prepare(dir: &Path) {
    ok(dir, &["gen-data", "--k", "3", "--per-class", "2", "--shape", "1x4x4", "--seed", "2", "--out", "data"]);
    ok(
        dir,
        &[
            "client-update", "--data", "data", "--arch-config", "mlp:1x4x4:16:3", "--batch-size", "2",
            "--epochs", "2", "--seed", "7", "--out", "upd",
        ],
    );
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    for f in ["data/inputs.flt", "data/labels.txt", "upd/server.flt", "upd/client.flt", "upd/update.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    ok(dir, &["attack", "--update", "upd", "--profile", "desk", "--steps", "20", "--out-dir", "rec"]);
    for f in ["epoch_1.flt", "epoch_2.flt", "images.flt", "labels.txt", "counts.txt", "trace.csv", "reconstruction.pgm"] {
        assert!(dir.join("rec").join(f).is_file(), "{f}");
    }
    let trace = fs::read_to_string(dir.join("rec/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,L_sim,L_inv,TV,clip,total,lr"));
    assert_eq!(trace.lines().count(), 1 + 21);
    let counts: usize = fs::read_to_string(dir.join("rec/counts.txt"))
        .unwrap()
        .lines()
        .map(|l| l.parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, 6);

    let stdout = ok(dir, &["evaluate", "--recon-dir", "rec", "--truth", "data", "--out-csv", "eval.csv"]);
    assert!(stdout.contains("rec_percent"));
    let csv = fs::read_to_string(dir.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn label_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let base = ["attack", "--update", "upd", "--steps", "3"];
    ok(dir, &[&base[..], &["--labels", "oracle:data/labels.txt", "--out-dir", "a"]].concat());
    ok(dir, &[&base[..], &["--labels", "oracle-per-epoch", "--data", "data", "--out-dir", "b"]].concat());
    let mut truth: Vec<String> = fs::read_to_string(dir.join("data/labels.txt")).unwrap().lines().map(String::from).collect();
    let mut got: Vec<String> = fs::read_to_string(dir.join("a/labels.txt")).unwrap().lines().map(String::from).collect();
    truth.sort();
    got.sort();
    assert_eq!(got, truth);
    assert_eq!(code(dir, &[&base[..], &["--labels", "oracle-per-epoch", "--out-dir", "c"]].concat()), 2);
    assert_eq!(code(dir, &[&base[..], &["--labels", "psychic", "--out-dir", "c"]].concat()), 2);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    // Bad flag values are configuration errors.
    assert_eq!(code(dir, &["attack", "--update", "upd", "--mode", "dlg", "--out-dir", "x"]), 2);
    assert_eq!(code(dir, &["attack", "--update", "upd", "--steps", "0", "--out-dir", "x"]), 2);
    assert_eq!(code(dir, &["gen-data", "--k", "2", "--per-class", "1", "--shape", "1x0x4", "--out", "d"]), 2);
    assert_eq!(
        code(dir, &["client-update", "--data", "data", "--arch-config", "mlp:1x8x8:4:3", "--batch-size", "2", "--epochs", "1", "--out", "u"]),
        2
    );
    // Missing or corrupt files are I/O errors.
    assert_eq!(code(dir, &["attack", "--update", "missing", "--out-dir", "x"]), 4);
    fs::write(dir.join("upd/client.flt"), b"FLT1").unwrap();
    assert_eq!(code(dir, &["attack", "--update", "upd", "--out-dir", "x"]), 4);
}

#[test]
fn non_finite_values_are_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let train = [
        "client-update", "--data", "data", "--arch-config", "mlp:1x4x4:16:3", "--batch-size", "2",
        "--epochs", "2", "--eta", "1e308", "--out", "huge",
    ];
    assert_eq!(code(dir, &train), 3);
    let client = fedleak::io::load_tensor(dir.join("upd/client.flt")).unwrap();
    let poisoned = client.map(|v| if v > 0.0 { f64::INFINITY } else { v });
    fedleak::io::save_tensor(dir.join("upd/client.flt"), &poisoned).unwrap();
    assert_eq!(code(dir, &["attack", "--update", "upd", "--steps", "2", "--out-dir", "x"]), 3);
}

#[test]
fn fedsgd_mode_warns_about_prior_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let out = fedleak(dir, &["attack", "--update", "upd", "--mode", "fedsgd", "--g", "max", "--steps", "2", "--out-dir", "x"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignored"));
    assert!(dir.join("x/epoch_1.flt").is_file());
    assert!(!dir.join("x/epoch_2.flt").exists());
}

#[test]
fn experiment_is_deterministic_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let config = r#"{
        "dataset": {"synthetic": {"classes": 2, "per_class": 2, "shape": [1, 4, 4], "seed": 1}},
        "arch": "mlp:1x4x4:8:2",
        "grid": {"epochs": [1, 2], "batch_sizes": [2], "modes": ["ours_prior", "fedsgd"]},
        "attack": {"profile": "desk", "steps": 4},
        "defense": {"kind": "gaussian", "strength": 0.1, "relative": true},
        "seeds": [0, 1],
        "output_dir": "from_config"
    }"#;
    fs::write(dir.join("exp.json"), config).unwrap();
    ok(dir, &["experiment", "--config", "exp.json", "--output-dir", "one"]);
    ok(dir, &["experiment", "--config", "exp.json", "--output-dir", "two", "--parallel"]);
    assert!(!dir.join("from_config").exists());
    let csv = fs::read_to_string(dir.join("one/results.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("client_id,mode,E,m,N,U,rec_percent,mean_psnr,label_err,seed"));
    assert_eq!(csv.lines().count(), 1 + 8);
    let mut names: Vec<_> = fs::read_dir(dir.join("one/images")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for f in ["results.csv", "summary.csv"] {
        assert_eq!(fs::read(dir.join("one").join(f)).unwrap(), fs::read(dir.join("two").join(f)).unwrap());
    }
    for n in names {
        let p = Path::new("images").join(n);
        assert_eq!(fs::read(dir.join("one").join(&p)).unwrap(), fs::read(dir.join("two").join(&p)).unwrap());
    }
    fs::write(dir.join("bad.json"), r#"{"dataset": 3}"#).unwrap();
    assert_eq!(code(dir, &["experiment", "--config", "bad.json"]), 2);
}
