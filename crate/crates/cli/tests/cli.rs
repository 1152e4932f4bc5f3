use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn roa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roa"))
        .args(args)
        .env("ROA_THREADS", "2")
        .output()
        .expect("spawn roa")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Copy of a shipped run config with a smaller `N` (and optionally a moved box).
fn small_config(dir: &Path, source: &str, n: usize, shift: Option<f64>) -> PathBuf {
    let text = std::fs::read_to_string(data(source)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["sampler"]["target_stable"] = n.into();
    if let Some(s) = shift {
        for key in ["lower", "upper"] {
            let axis = v["domain"][key].as_array().unwrap().clone();
            let off = if key == "lower" { s - 0.5 } else { s + 0.5 };
            v["domain"][key] = axis.iter().map(|_| off).collect::<Vec<_>>().into();
        }
        v["sampler"]["max_total_iterations"] = 4.into();
    }
    let path = dir.join(format!("{source}.{n}.json"));
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

fn sample(dir: &Path, system: &str, config: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let o = roa(&["sample", "--system", p(&data(system)), "--config", p(config), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn smib_sample_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "smib_run.json", 5, None);
    let out = sample(dir.path(), "smib.json", &cfg, "run");

    let records = std::fs::read_to_string(out.join("records.csv")).unwrap();
    let stable = records.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("1")).count();
    assert_eq!(stable, 5);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for key in ["records", "checkpoint"] {
        assert!(Path::new(manifest["artifacts"][key].as_str().unwrap()).exists());
    }
    assert_eq!(manifest["rng_seed"], 0);
    assert_eq!(manifest["config"]["sampler"]["target_stable"], 5);
    assert!(manifest["duration_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["version"].is_string());
}

#[test]
fn same_seed_reproduces_records_and_grids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "smib_run.json", 5, None);
    let a = sample(dir.path(), "smib.json", &cfg, "a");
    let b = sample(dir.path(), "smib.json", &cfg, "b");
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "records.csv"), read(&b, "records.csv"));
    assert_eq!(read(&a, "model.json"), read(&b, "model.json"));

    for run in [&a, &b] {
        let o = roa(&[
            "region", "--checkpoint", p(&run.join("model.json")), "--records", p(&run.join("records.csv")),
            "--system", p(&data("smib.json")), "--config", p(&cfg), "--resolution", "40",
            "--out", p(&run.join("region")),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read(&a.join("region"), "grid.csv"), read(&b.join("region"), "grid.csv"));

    let c = dir.path().join("c");
    let o = roa(&[
        "sample", "--system", p(&data("smib.json")), "--config", p(&cfg), "--out", p(&c), "--seed", "11",
    ]);
    assert!(o.status.success());
    assert_ne!(read(&a, "records.csv"), read(&c, "records.csv"));
}

#[test]
fn smib_region_and_volume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "smib_run.json", 8, None);
    let run = sample(dir.path(), "smib.json", &cfg, "run");
    let ck = run.join("model.json");
    let rec = run.join("records.csv");
    let sys = data("smib.json");

    let region = run.join("region");
    let o = roa(&[
        "region", "--checkpoint", p(&ck), "--records", p(&rec), "--system", p(&sys),
        "--box=-4:4,-3:3", "--resolution", "30", "--mode", "offset", "--out", p(&region),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("c_max =") && stdout.contains("beta =") && stdout.contains("member fraction ="));
    let grid = std::fs::read_to_string(region.join("grid.csv")).unwrap();
    assert!(grid.starts_with("x,y,member,mu,sigma"));
    assert_eq!(grid.lines().count(), 1 + 30 * 30);
    assert!(region.join("grid_certified.csv").exists());
    assert!(region.join("slices.json").exists());

    let volume = |seed: &str| {
        let o = roa(&[
            "volume", "--checkpoint", p(&ck), "--records", p(&rec), "--system", p(&sys),
            "--box=-4:4,-3:3", "--samples", "5000", "--seed", seed,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let first = volume("4");
    assert_eq!(first, volume("4"));
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["kind"], "finite");
    assert!(v["ratio"].as_f64().unwrap() > 0.0);
}

#[test]
fn ieee39_region_writes_nine_slices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "ieee39_run.json", 6, None);
    let run = sample(dir.path(), "ieee39_reduced.json", &cfg, "run");
    let region = run.join("region");
    let o = roa(&[
        "region", "--checkpoint", p(&run.join("model.json")), "--records", p(&run.join("records.csv")),
        "--system", p(&data("ieee39_reduced.json")), "--config", p(&cfg), "--resolution", "12",
        "--out", p(&region),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let slices = std::fs::read_dir(&region)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().into_string().unwrap())
        .filter(|n| n.starts_with("slice_") && !n.ends_with("_certified.csv"))
        .count();
    assert_eq!(slices, 9);
    assert!(region.join("slice_psi_1_psidot_1.csv").exists());
}

#[test]
fn mismatched_records_are_a_consistency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "smib_run.json", 4, None);
    let run = sample(dir.path(), "smib.json", &cfg, "run");
    let text = std::fs::read_to_string(run.join("records.csv")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let last_stable = lines.iter().rposition(|l| l.split(',').nth(1) == Some("1")).unwrap();
    lines.remove(last_stable);
    let cut = dir.path().join("cut.csv");
    std::fs::write(&cut, lines.join("\n") + "\n").unwrap();
    let o = roa(&[
        "region", "--checkpoint", p(&run.join("model.json")), "--records", p(&cut),
        "--system", p(&data("smib.json")), "--box=-1:1", "--out", p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(16));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("ConsistencyError"));

    let o = roa(&[
        "region", "--checkpoint", p(&run.join("model.json")), "--records", p(&run.join("records.csv")),
        "--system", p(&data("smib.json")), "--box=-1:1", "--mode", "equilibrium",
        "--out", p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(16));
}

#[test]
fn missing_file_is_a_parse_error() {
    let o = roa(&["sample", "--system", "/nonexistent/system.json", "--config", p(&data("smib_run.json")), "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("ParseError"));
}

#[test]
fn divergent_box_exhausts_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "smib_run.json", 2, Some(10.0));
    let o = roa(&[
        "sample", "--system", p(&data("smib.json")), "--config", p(&cfg), "--out", p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(14));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("BudgetExhaustedError"));
}

#[test]
fn box_for_the_wrong_dimension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = roa(&[
        "sample", "--system", p(&data("ieee39_reduced.json")), "--config", p(&data("smib_run.json")),
        "--out", p(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("DimensionError"));
}
