use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use clare_core::harness::{DatasetKind, Mode, ResultsReport};

fn clare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clare"))
        .args(args)
        .env_remove("CLARE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn toy_run_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.toml");
    let csv = dir.path().join("acc.csv");
    let t = Instant::now();
    let o = clare(&[
        "--dataset",
        "toy",
        "--g",
        "1",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t.elapsed() < Duration::from_secs(60));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("accuracy (%) after each increment"), "{table}");

    let report = ResultsReport::load(&out).unwrap();
    assert_eq!(report.config.dataset, DatasetKind::Toy);
    assert_eq!(report.config.mode, Mode::Clare);
    assert_eq!(report.runs[0].seed, 7);
    assert_eq!(report.runs[0].records.len(), 2);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("seed,increment,class,accuracy,samples"));
    assert_eq!(rows.lines().count(), 1 + 1 + 1 + 2 + 1);
}

#[test]
fn same_seed_gives_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        let o = clare(&["--dataset", "toy", "--toy-classes", "3", "--epochs", "3", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        ResultsReport::load(&p).unwrap()
    };
    let (a, b) = (run("a.toml"), run("b.toml"));
    let strip = |r: &ResultsReport| {
        let mut r = r.without_timings();
        r.config.out = None;
        r
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn multi_seed_run_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.toml");
    let o = clare(&["--dataset", "toy", "--epochs", "2", "--seeds", "1,2,3", "--out", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = ResultsReport::load(&p).unwrap();
    assert_eq!(r.runs.len(), 3);
    assert_eq!(r.aggregate.as_ref().unwrap().seeds, vec![1, 2, 3]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("mean±sd"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "dataset = \"toy\"\nmode = \"joint\"\nepochs = 1\n[toy]\nn_classes = 3\n").unwrap();
    let out = dir.path().join("r.toml");
    let o = clare(&["--config", cfg.to_str().unwrap(), "--epochs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = ResultsReport::load(&out).unwrap();
    assert_eq!(r.config.mode, Mode::Joint);
    assert_eq!(r.config.epochs, 2);
    assert_eq!(r.runs[0].records.len(), 1);
    assert_eq!(r.runs[0].records[0].classes_seen, vec![0, 1, 2]);
}

#[test]
fn replay_off_warns_and_still_runs() {
    let o = clare(&["--dataset", "toy", "--epochs", "2", "--replay", "off"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: replay is off"));
}

#[test]
fn replay_dump_writes_idx_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = clare(&["--dataset", "toy", "--epochs", "2", "--dump-replay", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let inc = dir.path().join("seed-0/increment-1");
    let (images, labels) = (inc.join("replay-images-idx3-ubyte"), inc.join("replay-labels-idx1-ubyte"));
    let data = clare_core::dataio::load_idx_pair(&images, &labels).unwrap();
    assert_eq!(data.class_counts().into_iter().collect::<Vec<_>>(), vec![(0, 500)]);
}

#[test]
fn usage_errors_exit_with_2() {
    let missing = clare(&["--data-dir", "/definitely/not/here"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("/definitely/not/here"));

    assert_eq!(clare(&[]).status.code(), Some(2), "no data dir at all");
    assert_eq!(clare(&["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(clare(&["--dataset", "toy", "--g", "0"]).status.code(), Some(2));
    assert_eq!(clare(&["--dataset", "toy", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(clare(&["--dataset", "toy", "--lr=-1"]).status.code(), Some(2));
    assert_eq!(clare(&["--config", "/no/such/config.toml"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epoch = 3\n").unwrap();
    let o = clare(&["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn empty_data_dir_names_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = clare(&["--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train-images-idx3-ubyte"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let o = clare(&["--dataset", "toy", "--epochs", "1", "--out", "/no/such/dir/r.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(Path::new("/no/such/dir").metadata().is_err());
}
