use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chartflow::data::{generate_synthetic, write_cloud, ShapeKind, SyntheticSpec};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chartflow"));
    c.env_remove("CHARTFLOW_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn chartflow")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "width_factor=0.05",
    "--set", "flow_blocks=1",
    "--set", "points=400",
    "--set", "batch_size=32",
    "--set", "log_every=1",
    "--quiet",
];

/// Train a tiny single-cloud model on `shape` and return its checkpoint.
fn tiny_model(dir: &Path, shape: &str, charts: usize, seed: u64) -> PathBuf {
    let ckpt = dir.join(format!("{shape}-{charts}-{seed}.ckpt"));
    let charts = format!("charts={charts}");
    let shape = format!("shape={shape}");
    let seed = seed.to_string();
    let mut args = vec!["train", "--set", &shape, "--set", &charts, "--iterations", "5", "--seed", &seed];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--checkpoint", s(&ckpt)]);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    ckpt
}

#[test]
fn train_writes_checkpoint_and_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "circle", 4, 0);
    assert!(ckpt.exists());
    let trace = std::fs::read_to_string(ckpt.with_extension("loss.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,loss,lr"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn unknown_key_exits_2_with_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "shape = circle\nlamda = 1.1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("lamda") && e.contains("did you mean `lambda`"), "{e}");
}

#[test]
fn missing_dataset_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--dataset", s(&dir.path().join("absent.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`dataset`"), "{}", stderr(&o));
    let o = run(&["train", "--set", "tau=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`dataset`"));
}

#[test]
fn config_comes_from_the_environment_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.cfg");
    let ckpt = dir.path().join("env.ckpt");
    std::fs::write(
        &cfg,
        format!(
            "shape = circle\niterations = 50\nwidth_factor = 0.05\nflow_blocks = 1\npoints = 200\ncheckpoint = {}\n",
            ckpt.display()
        ),
    )
    .unwrap();
    let o = bin()
        .env("CHARTFLOW_CONFIG", &cfg)
        .args(["train", "--iterations", "2", "--quiet"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(ckpt.with_extension("loss.csv")).unwrap();
    // log_every defaults to 10, so 2 iterations log the first and last.
    assert_eq!(trace.lines().count(), 3);
}

#[test]
fn file_dataset_trains_a_single_cloud_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("moon.csv");
    write_cloud(&data, &generate_synthetic(&SyntheticSpec::new(ShapeKind::DoubleMoon, 300, 1)).unwrap()).unwrap();
    let ckpt = dir.path().join("moon.ckpt");
    let mut args = vec!["train", "--dataset", s(&data), "--iterations", "3", "--checkpoint", s(&ckpt)];
    args.extend_from_slice(TINY);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    // A directory is a family and does not fit a single-cloud model.
    let o = run(&["train", "--dataset", s(dir.path()), "--quiet"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_count_zero_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "circle", 2, 0);
    let out = dir.path().join("gen");
    let o = run(&["generate", "--checkpoint", s(&ckpt), "--count", "0", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn generate_is_deterministic_and_plots_match_their_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "four-circle", 8, 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["generate", "--checkpoint", s(&ckpt), "-m", "300", "--count", "2", "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["cloud_0000.csv", "cloud_0001.csv", "cloud_0000.svg", "manifest.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(a.join("cloud_0001.csv")).unwrap();
    assert!(csv.starts_with("x,y,chart\n"));
    assert_eq!(csv.lines().count(), 301);

    let replot = dir.path().join("replot.svg");
    let o = run(&["plot", "--input", s(&a.join("cloud_0001.csv")), "--out", s(&replot)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&replot).unwrap(), std::fs::read(a.join("cloud_0001.svg")).unwrap());

    let o = run(&["generate", "--checkpoint", s(&ckpt), "-m", "300", "--seed", "8", "--out", s(&dir.path().join("c"))]);
    assert!(o.status.success());
    assert_ne!(
        std::fs::read(a.join("cloud_0000.csv")).unwrap(),
        std::fs::read(dir.path().join("c/cloud_0000.csv")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let o = run(&["generate", "--checkpoint", s(&bad), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
    let o = run(&["generate", "--checkpoint", s(&dir.path().join("none.ckpt")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_set(dir: &Path, seed: u64, count: usize) {
    let clouds: Vec<_> = (0..count)
        .map(|i| generate_synthetic(&SyntheticSpec::new(ShapeKind::Circle, 64, seed * 100 + i as u64)).unwrap())
        .collect();
    chartflow::data::write_dataset(dir, &clouds).unwrap();
}

fn report(o: &Output) -> Vec<(String, String, f64, String)> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].parse().unwrap(), f[3].to_string())
        })
        .collect()
}

#[test]
fn evaluate_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    write_set(&set, 1, 6);
    let o = run(&["evaluate", "--generated", s(&set), "--reference", s(&set), "--metrics", "mmd,cov,jsd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("metric,distance,value,exact\n"));
    let rows = report(&o);
    assert_eq!(rows.len(), 5);
    for (m, d, v, exact) in rows {
        match m.as_str() {
            "MMD" | "JSD" => assert_eq!(v, 0.0, "{m} {d}"),
            "COV" => assert_eq!(v, 100.0),
            other => panic!("unexpected row {other}"),
        }
        assert_eq!(exact, "true");
    }
}

#[test]
fn evaluate_one_nna_is_a_percentage_and_checks_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    write_set(&a, 1, 8);
    write_set(&b, 2, 8);
    write_set(&c, 3, 5);
    let out = dir.path().join("r/report.csv");
    let o = run(&["evaluate", "--generated", s(&a), "--reference", s(&b), "--metrics", "1nna", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    for l in text.lines().skip(1) {
        let v: f64 = l.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    let o = run(&["evaluate", "--generated", s(&a), "--reference", s(&c), "--metrics", "1nna", "--distances", "cd"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("1-NNA-CD"), "{}", stderr(&o));
}

#[test]
fn evaluate_missing_reference_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_set(&dir.path().join("a"), 1, 2);
    let o = run(&["evaluate", "--generated", s(&dir.path().join("a")), "--reference", s(&dir.path().join("nope"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["evaluate", "--generated", s(&dir.path().join("a")), "--reference", s(&dir.path().join("a")), "--metrics", "fid"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn one_chart_model_segments_everything_into_chart_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "double-moon", 1, 0);
    let data = dir.path().join("moon.csv");
    write_cloud(&data, &generate_synthetic(&SyntheticSpec::new(ShapeKind::DoubleMoon, 200, 4)).unwrap()).unwrap();
    let out = dir.path().join("seg.csv");
    let o = run(&["segment", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labeled = chartflow::data::read_cloud(&out, Some(2)).unwrap();
    assert!(labeled.labels.unwrap().iter().all(|&l| l == 0));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(stdout.contains("NMI,0.0\n"), "{stdout}");
}

#[test]
fn segment_without_truth_writes_labels_only() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "circle", 3, 0);
    let data = dir.path().join("plain.csv");
    std::fs::write(&data, "x,y\n0.5,0.5\n-0.5,0.25\n1.0,0.0\n").unwrap();
    let out = dir.path().join("seg.csv");
    let o = run(&["segment", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let labeled = chartflow::data::read_cloud(&out, Some(2)).unwrap();
    assert!(labeled.labels.unwrap().iter().all(|&l| l < 3));
}

#[test]
fn segment_rejects_a_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "circle", 2, 0);
    let data = dir.path().join("pts3.csv");
    std::fs::write(&data, "x,y,z\n0.5,0.5,0.1\n").unwrap();
    let o = run(&["segment", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));
}

#[test]
fn family_model_reconstructs_and_segments() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("fam.ckpt");
    let o = run(&[
        "train", "--set", "kind=full", "--set", "shape=ring-or-disk-family", "--set", "objects=6",
        "--set", "points=64", "--set", "batch_size=3", "--set", "points_per_cloud=32",
        "--set", "feature_dim=2", "--set", "width_factor=0.05", "--set", "flow_blocks=1",
        "--set", "prior_blocks=1", "--iterations", "3", "--checkpoint", s(&ckpt), "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = dir.path().join("data");
    let clouds: Vec<_> = chartflow::data::generate_family(
        &SyntheticSpec::new(ShapeKind::RingOrDiskFamily, 50, 9),
        2,
        &Default::default(),
    )
    .unwrap()
    .into_iter()
    .map(|o| o.cloud)
    .collect();
    chartflow::data::write_dataset(&data, &clouds).unwrap();
    let out = dir.path().join("recon");
    let o = run(&["reconstruct", "--checkpoint", s(&ckpt), "--input", s(&data), "-m", "40", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recon = chartflow::data::read_dataset(&out, Some(2)).unwrap();
    assert_eq!(recon.len(), 2);
    assert!(recon.iter().all(|c| c.len() == 40));
    let seg = dir.path().join("seg.csv");
    let o = run(&["segment", "--checkpoint", s(&ckpt), "--input", s(&data.join("cloud_0000.csv")), "--out", s(&seg)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn single_cloud_models_cannot_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_model(dir.path(), "circle", 2, 0);
    let data = dir.path().join("c.csv");
    std::fs::write(&data, "x,y\n0.5,0.5\n").unwrap();
    let o = run(&["reconstruct", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_projects_three_dimensional_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("p.csv");
    std::fs::write(&data, "x,y,z,chart\n0,0,1,0\n1,1,0,1\n").unwrap();
    let o = run(&["plot", "--input", s(&data), "--axes", "0,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(dir.path().join("p.svg")).unwrap().contains("<circle"));
    let o = run(&["plot", "--input", s(&data), "--axes", "0,3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["generate", "--out", "x"]).status.code(), Some(2));
}
