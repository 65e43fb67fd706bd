use std::path::Path;
use std::process::{Command, Output};

use msgcn::container::sha256_hex;

fn msgcn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msgcn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MSGCN_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL_DATA: &[&str] = &[
    "gen-data",
    "--sequences",
    "6",
    "--subjects",
    "3",
    "--min-len",
    "40",
    "--max-len",
    "60",
    "--min-segment",
    "8",
    "--max-segment",
    "15",
    "--out",
    "ds",
];

const SMALL_MODEL: &[&str] = &["--filters", "6", "--layers", "2", "--refinement-stages", "1", "--epochs", "2"];

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--data", "ds", "--split", "loso.toml", "--out", out];
    v.extend_from_slice(SMALL_MODEL);
    v.extend_from_slice(extra);
    v
}

#[test]
fn generate_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&msgcn(SMALL_DATA, d));
    assert!(d.join("ds/layout.toml").exists());
    assert!(d.join("ds/manifest.json").exists());
    std::fs::write(d.join("loso.toml"), "mode = \"loso\"\n").unwrap();

    let stdout = ok(&msgcn(&train_args("run1", &["--plot"]), d));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("loso-")).count(), 3);
    for f in ["manifest.json", "metrics.csv", "losses.csv", "loso-s0/model.ckpt", "loso-s0/timeline.svg"] {
        assert!(d.join("run1").join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["folds"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["model"]["filters"], 6);

    // same seed, folds run in parallel: identical checkpoints and tables
    ok(&msgcn(&train_args("run2", &["--folds-parallel", "3"]), d));
    for f in ["loso-s0/model.ckpt", "loso-s1/model.ckpt", "loso-s2/model.ckpt", "metrics.csv"] {
        let a = std::fs::read(d.join("run1").join(f)).unwrap();
        let b = std::fs::read(d.join("run2").join(f)).unwrap();
        assert_eq!(sha256_hex(&a), sha256_hex(&b), "{f} differs");
    }
    ok(&msgcn(&train_args("run3", &["--seed", "1"]), d));
    assert_ne!(
        std::fs::read(d.join("run1/loso-s0/model.ckpt")).unwrap(),
        std::fs::read(d.join("run3/loso-s0/model.ckpt")).unwrap()
    );

    let stdout = ok(&msgcn(
        &[
            "eval",
            "--checkpoint",
            "run1/loso-s1/model.ckpt",
            "--data",
            "ds",
            "--split",
            "loso.toml",
            "--fold",
            "loso-s1",
            "--plot",
            "ev.svg",
            "--out",
            "ev",
        ],
        d,
    ));
    assert!(stdout.starts_with("trial,tau,tp,fp,fn,precision,recall,f1,accuracy"));
    // the eval table for a fold reproduces the rows written during training
    let train_rows = std::fs::read_to_string(d.join("run1/metrics.csv")).unwrap();
    let eval_rows = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    for row in eval_rows.lines().skip(1) {
        assert!(train_rows.contains(row), "{row}");
    }
    assert!(std::fs::read_to_string(d.join("ev.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn ablate_writes_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&msgcn(SMALL_DATA, d));
    std::fs::write(d.join("fixed.toml"), "mode = \"fixed\"\ntest_subjects = [\"s2\"]\n").unwrap();
    let mut args = vec!["ablate", "--axis", "causal", "--data", "ds", "--split", "fixed.toml", "--out", "ab"];
    args.extend_from_slice(SMALL_MODEL);
    let stdout = ok(&msgcn(&args, d));
    assert!(stdout.contains("acausal") && stdout.contains("causal"));
    assert!(d.join("ab/ablation.csv").exists() && d.join("ab/ablation.json").exists());
    assert!(d.join("ab/manifest.json").exists());
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("y.txt"), "0\n0\n1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_msgcn"))
        .args(["metrics", "y.txt", "y.txt"])
        .current_dir(d)
        .env("MSGCN_OUT_DIR", d.join("from-env"))
        .output()
        .unwrap();
    ok(&out);
    assert!(d.join("from-env/metrics.csv").exists());

    // without either, results land in ./msgcn-out
    ok(&msgcn(&["metrics", "y.txt", "y.txt"], d));
    assert!(d.join("msgcn-out/manifest.json").exists());
}

#[test]
fn exit_codes_separate_usage_from_contract_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(msgcn(&["train"], d).status.code(), Some(2));
    assert_eq!(msgcn(&["train", "--data", "x", "--model", "resnet"], d).status.code(), Some(2));
    assert_eq!(msgcn(&["gradcheck", "--layer", "nope"], d).status.code(), Some(2));
    assert_eq!(msgcn(&["--help"], d).status.code(), Some(0));

    let missing = msgcn(&["train", "--data", "no-such-dir", "--out", "o"], d);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no-such-dir"));

    std::fs::write(d.join("a.txt"), "0\n1\n").unwrap();
    std::fs::write(d.join("b.txt"), "0\n1\n1\n").unwrap();
    assert_eq!(msgcn(&["metrics", "a.txt", "b.txt", "--out", "o"], d).status.code(), Some(1));

    let even = msgcn(&["train", "--data", "synthetic", "--kernel", "4", "--epochs", "1", "--out", "o"], d);
    assert_eq!(even.status.code(), Some(1));
}

#[test]
fn gradcheck_reports_each_layer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(&msgcn(
        &["gradcheck", "--layer", "conv1x1", "--layer", "batch_norm", "--instances", "2", "--out", "g"],
        d,
    ));
    assert_eq!(stdout.lines().filter(|l| l.ends_with("pass")).count(), 2);
    let table = std::fs::read_to_string(d.join("g/gradcheck.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn import_then_train_on_imported_data() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut nodes = Vec::new();
    for n in 0..9 {
        nodes.push(format!("[\"n{n}x\", \"n{n}y\", \"n{n}z\"]"));
    }
    let recipe = format!(
        "layout = \"fog-gait\"\nsample_rate = 100.0\ntarget_rate = 50.0\nkind = \"positions\"\n\
         label_column = \"activity\"\nclasses = [\"walk\", \"turn\"]\nsubject_column = \"subject\"\n\
         trial_column = \"trial\"\nnodes = [{}]\n",
        nodes.join(", ")
    );
    std::fs::write(d.join("recipe.toml"), recipe).unwrap();
    let mut csv = String::from("subject,trial,activity");
    for n in 0..9 {
        csv += &format!(",n{n}x,n{n}y,n{n}z");
    }
    csv.push('\n');
    for subject in ["p1", "p2"] {
        for r in 0..80 {
            let label = if (r / 20) % 2 == 0 { "walk" } else { "turn" };
            csv += &format!("{subject},t1,{label}");
            for k in 0..27 {
                csv += &format!(",{}", ((r * 27 + k) as f64 * 0.01).sin());
            }
            csv.push('\n');
        }
    }
    std::fs::write(d.join("export.csv"), csv).unwrap();
    ok(&msgcn(&["import", "--csv", "export.csv", "--recipe", "recipe.toml", "--out", "imp"], d));
    let ds = msgcn::data::load_dataset(&d.join("imp")).unwrap();
    assert_eq!(ds.trials.len(), 2);
    assert_eq!(ds.trials[0].sequence.values.shape(), &[40, 9, 6]);

    let mut args = vec!["train", "--data", "imp", "--model", "tcn", "--out", "tr"];
    args.extend_from_slice(SMALL_MODEL);
    ok(&msgcn(&args, d));
    assert!(d.join("tr/all/model.ckpt").exists());
}
