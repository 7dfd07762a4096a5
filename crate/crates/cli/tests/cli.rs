use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use align3d::config::{DataConfig, RunConfig};
use align3d::pointenc::ShapeKind;
use align3d::trainer::StagePlan;
use align3d::StackConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_align3d"));
    c.env_remove("ALIGN3D_OUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = RunConfig {
        data: DataConfig {
            classes: ShapeKind::ALL[..4].to_vec(),
            per_class: 6,
            points: 32,
            seed: 0,
        },
        model: StackConfig::tiny(),
        stage1: StagePlan {
            steps: 4,
            batch: 2,
            ..StagePlan::stage1()
        },
        stage2: StagePlan {
            steps: 3,
            batch: 2,
            ..StagePlan::stage2()
        },
        ..RunConfig::default()
    };
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn train_stage1(dir: &Path, cfg: &Path) -> PathBuf {
    let out = dir.join("s1");
    let o = run(&["train", "--config", s(cfg), "--stage", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("ckpt")
}

fn records(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["gen-data", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 200);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
    for entry in fs::read_dir(a.join("points")).unwrap() {
        let p = entry.unwrap().path();
        let other = b.join("points").join(p.file_name().unwrap());
        assert_eq!(fs::read(&p).unwrap(), fs::read(other).unwrap());
    }
}

#[test]
fn gen_data_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--per-class", "1", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    let file = dir.path().join("file");
    fs::write(&file, "").unwrap();
    let o = run(&["gen-data", "--per-class", "2", "--out", s(&file.join("sub"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["gen-data", "--classes", "sphere,blob", "--out", s(&dir.path().join("y"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn output_root_override_applies_to_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["gen-data", "--per-class", "2", "--points", "32", "--out", "data"])
        .env("ALIGN3D_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("data/manifest.jsonl").is_file());
}

#[test]
fn train_stage2_needs_checkpoint_and_valid_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    let o = run(&["train", "--config", s(&cfg), "--stage", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--ckpt"));
    let o = run(&["train", "--config", s(&cfg), "--stage", "1", "--lambda", "0.1", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["train", "--stage", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["train", "--config", s(&cfg), "--stage", "2", "--ckpt", s(&dir.path().join("none")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_both_stages_with_lambda_zero_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = train_stage1(dir.path(), &cfg);
    assert!(dir.path().join("s1/config.toml").is_file());

    let s2 = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", s(&cfg), "--stage", "2", "--ckpt", s(&ckpt), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = s2("a", &["--lambda", "0.1", "--layer", "4", "--loss", "cosine"]);
    let b = s2("b", &["--lambda", "0.1", "--layer", "4", "--loss", "cosine"]);
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("ckpt/params.bin")).unwrap(), fs::read(b.join("ckpt/params.bin")).unwrap());
    let recs = records(&a.join("metrics.jsonl"));
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0]["stage"], 2);
    assert_eq!(recs[0]["layer"], 4);
    assert_eq!(recs[0]["metric"], "cosine");

    let z = s2("z", &["--lambda", "0", "--layers", "2,3", "--loss", "l2", "--target", "projector_mid", "--proj-depth", "2"]);
    for r in records(&z.join("metrics.jsonl")) {
        assert_eq!(r["l_total"], r["l_ntp"]);
        assert_eq!(r["layer"], serde_json::json!([2, 3]));
    }
    let snapshot = fs::read_to_string(z.join("config.toml")).unwrap();
    let parsed = RunConfig::from_toml(&snapshot).unwrap();
    assert_eq!(parsed.align.layers_multi, Some(vec![2, 3]));
    assert_eq!(parsed.projector.depth, 2);

    let o = run(&["train", "--config", s(&cfg), "--stage", "2", "--ckpt", s(&ckpt), "--layer", "9", "--out", s(&dir.path().join("bad"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = run(&[
        "train", "--config", s(&cfg), "--stage", "1", "--lr-start", "1e38", "--lr-end", "1e38", "--steps", "6",
        "--out", s(&dir.path().join("d")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn probe_sections_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = train_stage1(dir.path(), &cfg);
    let probe = |out: &Path, extra: &[&str]| {
        let mut args = vec!["probe", "--config", s(&cfg), "--ckpt", s(&ckpt), "--out", s(out)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let k = dir.path().join("k");
    probe(&k, &["--mode", "knn", "--layers", "1,2,3,4", "--k", "1,10"]);
    let knn = fs::read_to_string(k.join("knn.csv")).unwrap();
    assert_eq!(knn.lines().count(), 1 + 8);
    assert!(!k.join("classify.csv").exists());

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    probe(&a, &["--mode", "all"]);
    probe(&b, &["--mode", "all"]);
    for f in ["knn.csv", "classify.csv", "caption.csv", "eval.json", "knn.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let o = run(&["probe", "--ckpt", s(&dir.path().join("missing")), "--out", s(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = train_stage1(dir.path(), &cfg);
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "[[sweep]]\nname = \"lambda\"\nlambda = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9]\n").unwrap();
    let out = dir.path().join("abl");
    let o = run(&[
        "ablate", "--config", s(&cfg), "--grid", s(&grid), "--ckpt", s(&ckpt), "--seeds", "0", "--steps", "2",
        "--no-checkpoints", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 6);
    assert!(results.starts_with("run,sweep,arm,fraction,loss,layer,lambda,proj_depth,target,seed,mn_I,mn_C,"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[[sweep]]\nname = \"x\"\nlambdas = [0.1]\n").unwrap();
    let o = run(&["ablate", "--config", s(&cfg), "--grid", s(&bad), "--ckpt", s(&ckpt), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lambdas"), "{}", stderr(&o));

    // Report over three of the runs.
    let subset = dir.path().join("subset");
    fs::create_dir(&subset).unwrap();
    let runs: Vec<PathBuf> = {
        let mut v: Vec<PathBuf> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    for r in &runs[..3] {
        let dst = subset.join(r.file_name().unwrap());
        fs::create_dir(&dst).unwrap();
        for f in fs::read_dir(r).unwrap() {
            let f = f.unwrap().path();
            if f.is_file() {
                fs::copy(&f, dst.join(f.file_name().unwrap())).unwrap();
            }
        }
    }
    let rep = dir.path().join("rep");
    let o = run(&["report", "--runs", s(&subset), "--out", s(&rep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let configs: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(rep.join("configs.json")).unwrap()).unwrap();
    assert_eq!(configs.len(), 3);
    assert_eq!(fs::read_to_string(rep.join("results.csv")).unwrap().lines().count(), 4);
    assert!(rep.join("knn_by_layer.svg").is_file());

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run(&["report", "--runs", s(&empty), "--out", s(&rep)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn fraction_grid_runs_both_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ckpt = train_stage1(dir.path(), &cfg);
    let grid = dir.path().join("grid.toml");
    fs::write(&grid, "seeds = [0, 1]\nfractions = [0.1, 1.0]\n").unwrap();
    let out = dir.path().join("frac");
    let o = run(&[
        "ablate", "--config", s(&cfg), "--grid", s(&grid), "--ckpt", s(&ckpt), "--steps", "2", "--no-checkpoints",
        "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 2);
    let rep = dir.path().join("rep");
    let o = run(&["report", "--runs", s(&out), "--out", s(&rep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(rep.join("fraction.svg").is_file());
}
