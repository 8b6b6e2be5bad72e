use std::path::Path;
use std::process::{Command, Output};

fn pgbn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgbn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn pgbn")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = pgbn(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn rows(text: &str) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn rf_audit_lists_the_family() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["rf-audit"], dir.path());
    assert!(out.starts_with("variant,rf,total_stride,grid_shape,probe_pass\n"));
    let r = rows(&out);
    let rfs: Vec<&str> = r.iter().map(|x| x[1].as_str()).collect();
    assert_eq!(rfs, ["9", "17", "25", "41", "57"]);
    assert!(r.iter().all(|x| x[2] == "16" && x[3] == "4x4x4" && x[4].is_empty()));

    let probed = rows(&ok(&["rf-audit", "--variant", "17", "--probe"], dir.path()));
    assert_eq!(probed, vec![vec!["17", "17", "16", "4x4x4", "true"]]);
}

#[test]
fn gradcheck_engine_passes() {
    let dir = tempfile::tempdir().unwrap();
    let r = rows(&ok(&["gradcheck", "--module", "engine"], dir.path()));
    assert!(r.len() >= 10);
    assert!(r.iter().all(|x| x[0] == "engine" && x[6] == "true"));
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(!pgbn(&["eval", "--model", "missing.ckpt", "--manifest", "m.csv"], p).status.success());
    assert!(!pgbn(&["rf-audit", "--variant", "13"], p).status.success());
    assert!(!pgbn(&["gradcheck", "--module", "ops"], p).status.success());
    std::fs::write(p.join("bad.toml"), "variant = \"pg\"\n").unwrap();
    assert!(!pgbn(&["train", "--config", "bad.toml"], p).status.success());
    std::fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = pgbn(&["mask-curve", "--model", "junk.ckpt", "--out", "c.csv"], p);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

const SPEC: &str = r#"
canonical = 40
crop = 32
n_per_class = 10
spheres = [{ center = [16.0, 16.0, 20.0], radius = 4.0 }]
tasks = ["easy"]
seed = 5
"#;

const TRAIN: &str = r#"
variant = "pg"
patch_size = 9
widths = "desk"
lambda = 0.01
epochs = 2
patience = 5
batch = 4
peak_lr = 1e-3
warmup_epochs = 1
crop = 32
seed = 1
precision = "f32"
dataset_manifest = "data/easy.csv"
out_dir = "run"
"#;

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("spec.toml"), SPEC).unwrap();
    std::fs::write(p.join("train.toml"), TRAIN).unwrap();
    ok(&["synth-gen", "--spec", "spec.toml", "--out", "data"], p);
    assert!(p.join("data/lesion_mask.vol").exists());

    let r = rows(&ok(&["train", "--config", "train.toml"], p));
    assert_eq!(r.len(), 2);
    assert_eq!(r[1][0], "test");
    let history = std::fs::read_to_string(p.join("run/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,val_acc,val_auroc,lr\n"));
    assert_eq!(history.lines().count(), 3);

    let ev = rows(&ok(&["eval", "--model", "run/model.ckpt", "--manifest", "data/easy.csv", "--crop", "32"], p));
    assert_eq!(ev[0][0], "20");

    // p = 0 must reproduce plain evaluation.
    let mc = rows(&ok(
        &["mc-dropout", "--model", "run/model.ckpt", "--manifest", "data/easy.csv", "--scheme", "zero", "--trials", "3", "--crop", "32"],
        p,
    ));
    assert_eq!(mc[0][3..], ev[0][..]);
    assert!(!pgbn(&["mc-dropout", "--model", "run/model.ckpt", "--manifest", "data/easy.csv", "--scheme", "p=1"], p).status.success());

    ok(
        &["mask-curve", "--model", "run/model.ckpt", "--thresholds", "0:1:0.1", "--out", "curve.csv", "--canonical", "40", "--crop", "32"],
        p,
    );
    let curve = rows(&std::fs::read_to_string(p.join("curve.csv")).unwrap());
    assert_eq!(curve.len(), 11);
    let props: Vec<f64> = curve.iter().map(|x| x[1].parse().unwrap()).collect();
    assert_eq!(props[0], 1.0);
    assert_eq!(props[10], 0.0);
    assert!(props.windows(2).all(|w| w[1] <= w[0]));

    ok(&["evidence", "--model", "run/model.ckpt", "--volume", "data/easy/sub-0003.vol", "--out", "ev", "--crop", "32"], p);
    let patches = rows(&std::fs::read_to_string(p.join("ev/patches.csv")).unwrap());
    assert_eq!(patches.len(), 8);
    let (mut num, mut mass) = (0.0f64, 0.0f64);
    for row in &patches {
        let x: f64 = row[3].parse().unwrap();
        let g: f64 = row[4].parse().unwrap();
        let e: f64 = row[5].parse().unwrap();
        assert!((g * x - e).abs() < 1e-5);
        num += g * x;
        mass += g;
    }
    let summary = rows(&std::fs::read_to_string(p.join("ev/summary.csv")).unwrap());
    let z: f64 = summary[0][5].parse().unwrap();
    assert!((num / (mass + 1e-8) - z).abs() < 1e-5, "{} vs {z}", num / (mass + 1e-8));
    for f in ["gate.vol", "gate_grid.vol", "evidence.vol", "positive.vol", "positive_grid.vol", "evidence_grid.vol"] {
        assert!(p.join("ev").join(f).exists(), "{f}");
    }

    let out = ok(&["crossval", "--config", "train.toml", "--folds", "0,1"], p);
    assert!(out.starts_with("metric,mean,std\n"));
    assert!(p.join("run/fold1/model.ckpt").exists());
    let folds = rows(&std::fs::read_to_string(p.join("run/folds.csv")).unwrap());
    assert_eq!(folds.len(), 2);
    let scores = rows(&std::fs::read_to_string(p.join("run/scores.csv")).unwrap());
    assert_eq!(scores.len(), 8);

    // Transfer from the folds just trained.
    std::fs::write(p.join("transfer.toml"), TRAIN.replace("out_dir = \"run\"", "out_dir = \"transfer\"")).unwrap();
    ok(&["crossval", "--config", "transfer.toml", "--init-from", "run", "--folds", "1"], p);
    assert!(p.join("transfer/fold1/history.csv").exists());
    assert!(!pgbn(&["crossval", "--config", "transfer.toml", "--init-from", "run", "--folds", "3"], p).status.success());
}
