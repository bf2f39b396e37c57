use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tkknn::engine::RunConfig;

fn tkknn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkknn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn small_data(dir: &Path) -> String {
    let data = dir.join("data");
    let out = tkknn(&[
        "synth", "--per-class", "20", "--classes", "4", "--hard-classes", "2", "--seed", "1",
        "--out", data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.display().to_string()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            out.extend(read_dir_bytes(&path));
        } else {
            out.push((path.display().to_string(), fs::read(&path).unwrap()));
        }
    }
    out
}

#[test]
fn help_exits_zero_everywhere() {
    assert_eq!(code(&tkknn(&["--help"])), 0);
    for sub in ["synth", "split", "train", "selftrain", "sweep", "report"] {
        let out = tkknn(&[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().join("o");
    let o = o.to_str().unwrap();
    assert_eq!(code(&tkknn(&["selftrain", "--data", "x", "--beta", "1.5", "--out", o])), 2);
    assert_eq!(code(&tkknn(&["selftrain", "--data", "x", "--strategy", "magic", "--out", o])), 2);
    assert_eq!(code(&tkknn(&["sweep", "--param", "k", "--values", "", "--data", "x", "--out", o])), 2);
    assert_eq!(code(&tkknn(&["sweep", "--param", "gamma", "--values", "1", "--out", o])), 2);
    assert_eq!(code(&tkknn(&["selftrain", "--out", o])), 2);
    assert_eq!(code(&tkknn(&["bogus"])), 2);
    // nothing was created for a rejected command
    assert!(!Path::new(o).exists());
}

#[test]
fn runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = tkknn(&[
        "selftrain", "--data", missing.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = tkknn(&["synth", "--classes", "8", "--seed", "1", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
    }
    let (fa, fb) = (read_dir_bytes(&a), read_dir_bytes(&b));
    assert_eq!(fa.len(), fb.len());
    for ((_, x), (_, y)) in fa.iter().zip(&fb) {
        assert_eq!(x, y);
    }
}

#[test]
fn split_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out = tkknn(&["split", "--data", &data, "--label-fraction", "0.01", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&data).join("split_seed3.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    // 56 training rows at 1% is a single label
    assert_eq!(manifest["labeled_ids"].as_array().unwrap().len(), 1);
}

#[test]
fn selftrain_is_deterministic_and_snapshots_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let config = tmp.path().join("run.json");
    fs::write(&config, r#"{"cycles": 9, "k": 2, "max_epochs": 30}"#).unwrap();
    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|name| {
            let out_dir = tmp.path().join(name);
            let out = tkknn(&[
                "selftrain", "--config", config.to_str().unwrap(), "--data", &data, "--cycles", "2",
                "--seeds", "2", "--label-fraction", "0.1", "--jobs", "2", "--out", out_dir.to_str().unwrap(),
            ]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
            out_dir
        })
        .collect();
    let traces = |d: &Path| read_dir_bytes(&d.join("traces"));
    let (a, b) = (traces(&runs[0]), traces(&runs[1]));
    assert_eq!(a.len(), 2);
    for ((_, x), (_, y)) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }

    let resolved = RunConfig::load(&runs[0].join("config.json")).unwrap();
    assert_eq!(resolved.cycles, 2, "flag beats config file");
    assert_eq!(resolved.k, 2, "config file beats default");
    assert_eq!(resolved.max_epochs, 30);
    assert_eq!(resolved.beta, 0.75);
    assert_eq!(resolved.data.as_deref(), Some(data.as_str()));

    // the snapshot alone reproduces the run
    let again = tmp.path().join("r3");
    let out = tkknn(&[
        "selftrain", "--config", runs[0].join("config.json").to_str().unwrap(), "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(traces(&again), traces(&runs[0]).into_iter().map(|(p, b)| (p.replace("/r1/", "/r3/"), b)).collect::<Vec<_>>());
}

#[test]
fn report_rebuilds_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    let out = tkknn(&[
        "selftrain", "--data", &data, "--strategy", "pl-t", "--cycles", "2", "--seeds", "2",
        "--label-fraction", "0.1", "--out", run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let rep = tmp.path().join("rep");
    let out = tkknn(&["report", "--traces", run.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(rep.join("summary.json")).unwrap(),
        fs::read_to_string(run.join("summary.json")).unwrap()
    );
    assert_eq!(
        fs::read(rep.join("convergence.csv")).unwrap(),
        fs::read(run.join("convergence.csv")).unwrap()
    );
}

#[test]
fn sweep_holds_the_other_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out_dir = tmp.path().join("sweep");
    let out = tkknn(&[
        "sweep", "--param", "beta", "--values", "0,1.0", "--data", &data, "--cycles", "1", "--seeds", "1",
        "--label-fraction", "0.1", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut rows = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(&r[2], "6");
    }
    assert!(out_dir.join("convergence_beta_0.csv").exists());
    assert!(out_dir.join("convergence_beta_1.csv").exists());

    let out_dir = tmp.path().join("ksweep");
    let out = tkknn(&[
        "sweep", "--param", "k", "--values", "4,6,8", "--data", &data, "--cycles", "1", "--seeds", "1",
        "--label-fraction", "0.1", "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let mut rows = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    let betas: Vec<String> = rows.records().map(|r| r.unwrap()[3].to_string()).collect();
    assert_eq!(betas, vec!["0.75"; 3]);
}

#[test]
fn train_saves_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let out_dir = tmp.path().join("train");
    let out = tkknn(&["train", "--data", &data, "--label-fraction", "0.5", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = tkknn::model::Checkpoint::load(&out_dir.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.model.config.num_classes, 4);
    assert!(out_dir.join("metrics.json").exists());
}
