use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "kind": "continual",
  "arch": { "family": "mlp", "width": 8, "depth": 1 },
  "policy": { "metric": "grama", "period": 5 },
  "seeds": [0, 1, 2],
  "task": { "classes": 3, "epochs_per_class": 2, "train_per_class": 16, "heldout_per_class": 8, "batch_size": 8 }
}"#;

fn plab(args: &[&str], cwd: &Path, env: &[(&str, &Path)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_plab"));
    c.args(args).current_dir(cwd).env_remove("PLAB_OUT");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn files(dir: &Path, ext: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(ext))
        .collect();
    v.sort();
    v
}

#[test]
fn run_writes_one_csv_per_seed_and_one_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = plab(
        &["run", cfg.to_str().unwrap(), "--out", "res"],
        tmp.path(),
        &[],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("res");
    assert_eq!(
        files(&dir, ".csv"),
        ["seed_0.csv", "seed_1.csv", "seed_2.csv"]
    );
    assert_eq!(files(&dir, ".json"), ["summary.json"]);
    assert_eq!(files(&dir, ".jsonl").len(), 3);
    // Nothing else appeared in the working directory.
    let mut top = files(tmp.path(), "");
    top.sort();
    assert_eq!(top, ["c.json", "res"]);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, SMALL).unwrap();
    for d in ["a", "b"] {
        let out = plab(&["run", cfg.to_str().unwrap(), "--out", d], tmp.path(), &[]);
        assert!(out.status.success());
    }
    for f in files(&tmp.path().join("a"), "") {
        let a = fs::read(tmp.path().join("a").join(&f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn seeds_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, SMALL).unwrap();
    let out = plab(
        &["run", cfg.to_str().unwrap(), "--out", "o", "--seeds", "4,9"],
        tmp.path(),
        &[],
    );
    assert!(out.status.success());
    assert_eq!(
        files(&tmp.path().join("o"), ".csv"),
        ["seed_4.csv", "seed_9.csv"]
    );
}

#[test]
fn output_directory_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(
        &cfg,
        SMALL.replace("\"seeds\": [0, 1, 2]", "\"seeds\": [0]"),
    )
    .unwrap();
    let env_dir = tmp.path().join("from_env");
    let out = plab(
        &["run", cfg.to_str().unwrap()],
        tmp.path(),
        &[("PLAB_OUT", &env_dir)],
    );
    assert!(out.status.success());
    assert!(env_dir.join("summary.json").exists());

    let out = plab(&["run", cfg.to_str().unwrap()], tmp.path(), &[]);
    assert!(out.status.success());
    assert!(tmp.path().join("plab-out/summary.json").exists());

    let with_out = SMALL.replace(
        "\"seeds\": [0, 1, 2]",
        "\"seeds\": [0], \"out\": \"from_cfg\"",
    );
    fs::write(&cfg, with_out).unwrap();
    let out = plab(
        &["run", cfg.to_str().unwrap()],
        tmp.path(),
        &[("PLAB_OUT", &env_dir)],
    );
    assert!(out.status.success());
    assert!(tmp.path().join("from_cfg/summary.json").exists());
}

#[test]
fn bad_config_and_io_failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"kind":"continual","arch":{},"policy":{"tau":-0.5}}"#,
    )
    .unwrap();
    let out = plab(
        &["run", cfg.to_str().unwrap(), "--out", "x"],
        tmp.path(),
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy.tau"));

    let out = plab(&["run", "missing.json"], tmp.path(), &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    // Output path occupied by a regular file.
    fs::write(&cfg, SMALL).unwrap();
    fs::write(tmp.path().join("blocked"), "").unwrap();
    let out = plab(
        &["run", cfg.to_str().unwrap(), "--out", "blocked"],
        tmp.path(),
        &[],
    );
    assert!(!out.status.success());
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = plab(&["verify"], tmp.path(), &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("PASS    finite-differences"));
    assert!(text.contains("SKIPPED dormant-implies-zero-gradient (leaky-relu"));

    let out = plab(&["verify", "--inject-relu-sign-fault"], tmp.path(), &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!out.status.success());
    assert!(text.contains("FAIL    finite-differences"), "{text}");
    assert!(text.contains("at site post-activation["), "{text}");
}

#[test]
fn summarize_reads_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, SMALL).unwrap();
    assert!(plab(
        &["run", cfg.to_str().unwrap(), "--out", "r"],
        tmp.path(),
        &[]
    )
    .status
    .success());
    let before = files(&tmp.path().join("r"), "");
    let out = plab(&["summarize", "r"], tmp.path(), &[]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("final_accuracy"));
    assert!(text.contains("n=3"));
    assert_eq!(files(&tmp.path().join("r"), ""), before);

    let out = plab(&["summarize", "nowhere"], tmp.path(), &[]);
    assert!(!out.status.success());
}
