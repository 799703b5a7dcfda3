use std::path::Path;
use std::process::{Command, Output};

fn hps(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hps"))
        .current_dir(dir)
        .env_remove("HPS_STORE_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen", "-o", name, "--dims", "1500", "--examples", "2000", "--seed", "5"];
    args.extend_from_slice(extra);
    let o = hps(dir, &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "a.txt", &["--distribution", "zipf:1.0"]);
    gen(dir.path(), "b.txt", &["--distribution", "zipf:1.0"]);
    let a = std::fs::read(dir.path().join("a.txt")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.txt")).unwrap());
    assert!(a.starts_with(b"#dims=1500\n"));
}

#[test]
fn train_writes_one_metrics_row_per_batch_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.txt", &[]);
    let args = ["train", "-d", "d.txt", "--nodes", "2", "--devices", "2", "--batch-size", "100", "--holdout", "0.2", "--deterministic", "--store-dir", "st"];
    let o = hps(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("st/metrics.csv")).unwrap();
    // 1600 training examples in batches of 100, plus the header.
    assert_eq!(csv.lines().count(), 16 + 1);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let auc = summary["final_auc"].as_f64().unwrap();
    assert!(auc > 0.5);
    let again: serde_json::Value = serde_json::from_slice(&hps(dir.path(), &args).stdout).unwrap();
    assert_eq!(again["final_auc"].as_f64().unwrap(), auc);
    assert!(dir.path().join("st/manifest.json").exists());
}

#[test]
fn verify_passes_and_reports_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.txt", &[]);
    let base = ["verify", "-d", "d.txt", "--deterministic", "--batch-size", "200", "--store-dir", "st"];
    let ok = hps(dir.path(), &base);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["params"]["bit_exact"], true);

    let mut faulty = base.to_vec();
    faulty.extend_from_slice(&["--skip-sync-at", "3"]);
    let bad = hps(dir.path(), &faulty);
    assert_eq!(code(&bad), 1);
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("not bit-identical"), "{err}");
    assert!(err.contains("dense["), "worst offenders should be listed: {err}");
}

#[test]
fn verify_of_an_empty_dataset_passes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("e.txt"), "#dims=10\n").unwrap();
    let o = hps(dir.path(), &["verify", "-d", "e.txt", "--deterministic", "--store-dir", "st"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn hash_shrinks_the_key_space() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.txt", &[]);
    let o = hps(dir.path(), &["hash", "-i", "d.txt", "-o", "h.txt", "-b", "100"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let h = hps::dataset::Dataset::load(&dir.path().join("h.txt")).unwrap();
    assert_eq!(h.dims, 200);
    assert_eq!(h.len(), 2000);
    assert!(h.examples.iter().flat_map(|e| &e.features).all(|k| k.0 < 200));
}

#[test]
fn fsck_and_stats_read_a_trained_store() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.txt", &[]);
    let o = Command::new(env!("CARGO_BIN_EXE_hps"))
        .current_dir(dir.path())
        .env("HPS_STORE_DIR", "from-env")
        .args(["train", "-d", "d.txt", "--nodes", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("from-env/node1").is_dir());

    let f = hps(dir.path(), &["fsck", "from-env"]);
    assert_eq!(code(&f), 0);
    let stats: serde_json::Value = serde_json::from_slice(&hps(dir.path(), &["stats", "from-env"]).stdout).unwrap();
    assert_eq!(stats.as_array().unwrap().len(), 2);

    // Flip a byte in a store file: fsck must flag it.
    let node = dir.path().join("from-env/node0");
    let file = std::fs::read_dir(&node).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|x| x == "bin")).unwrap();
    let mut bytes = std::fs::read(&file).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&file, bytes).unwrap();
    let f = hps(dir.path(), &["fsck", "from-env"]);
    assert_eq!(code(&f), 1);
    assert!(String::from_utf8_lossy(&f.stdout).contains("CORRUPT"));
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.txt", &[]);
    assert_eq!(code(&hps(dir.path(), &["train", "-d", "d.txt", "--nodes", "3"])), 1);
    assert_eq!(code(&hps(dir.path(), &["train", "-d", "d.txt", "--set", "bogus=1"])), 1);
    std::fs::write(dir.path().join("bad.txt"), "#dims=10\n2\t1\n").unwrap();
    assert_eq!(code(&hps(dir.path(), &["train", "-d", "bad.txt"])), 1);
    assert_eq!(code(&hps(dir.path(), &["train", "-d", "missing.txt"])), 2);
    std::fs::write(dir.path().join("blocker"), b"x").unwrap();
    assert_eq!(code(&hps(dir.path(), &["train", "-d", "d.txt", "--store-dir", "blocker"])), 2);
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let reference = hps(dir.path(), &["config"]);
    let text = String::from_utf8(reference.stdout).unwrap();
    for key in hps::config::KEYS {
        assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key} missing");
    }
    std::fs::write(dir.path().join("c.conf"), "nodes = 2\nbatch_size = 64 # small\n").unwrap();
    let o = hps(dir.path(), &["config", "--config", "c.conf", "--set", "batch_size=32", "--devices", "4"]);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("nodes = 2\n") && out.contains("batch_size = 32\n") && out.contains("devices = 4\n"), "{out}");
}
