use std::collections::BTreeSet;
use std::fs;

use plab::continual::ContinualRow;
use plab::exp::{run_experiment, ExperimentConfig, ExperimentKind};
use plab::rl::RlRow;
use plab::ResetEvent;

const TASK: &str = r#""classes": 3, "epochs_per_class": 2, "train_per_class": 16, "heldout_per_class": 8, "batch_size": 8"#;

fn config(kind: &str, policy: &str, extra: &str) -> ExperimentConfig {
    let policy = if policy.is_empty() {
        String::new()
    } else {
        format!(r#""policy": {policy},"#)
    };
    let text = format!(
        r#"{{"kind": "{kind}", "arch": {{"width": 8, "depth": 1}}, {policy} "seeds": [0, 1], "task": {{ {TASK}{extra} }} }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn header(path: &std::path::Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn continual_csv_and_events_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        "continual",
        r#"{"metric": "grama", "period": 3, "tau": 0.5}"#,
        "",
    );
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.summary.kind, ExperimentKind::Continual);
    let csv = dir.path().join("seed_0.csv");
    assert_eq!(
        header(&csv),
        "step,epoch,seen_classes,accuracy,inactive_ratio_grama,inactive_ratio_redo,resets_cum,seed"
    );
    let rows: Vec<ContinualRow> = csv::Reader::from_path(&csv)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), cfg.task.continual().unwrap().total_epochs());
    assert_eq!(rows.len(), 4);

    let events = fs::read_to_string(dir.path().join("events_seed_0.jsonl")).unwrap();
    assert!(!events.is_empty(), "tau 0.5 should trigger resets");
    for line in events.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            BTreeSet::from([
                "step",
                "layer",
                "unit",
                "site_kind",
                "metric",
                "value",
                "tau"
            ])
        );
        let ev: ResetEvent = serde_json::from_str(line).unwrap();
        assert!(ev.value <= ev.tau);
    }
    assert_eq!(
        rows.last().unwrap().resets_cum as usize,
        events.lines().count()
    );
}

#[test]
fn rl_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"kind": "rl", "arch": {"family": "bro", "width": 8, "depth": 1}, "seeds": [0],
        "task": {"total_steps": 400, "learning_starts": 100, "log_every": 100, "batch_size": 16}}"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let csv = dir.path().join("seed_0.csv");
    assert_eq!(
        header(&csv),
        "step,episodic_return,inactive_ratio_grama,inactive_ratio_redo,resets_cum,seed"
    );
    let rows: Vec<RlRow> = csv::Reader::from_path(&csv)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn tau_sweep_emits_a_row_per_grid_point_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("tau-sweep", "", "");
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.summary.rows.len(), 22);
    for metric in ["grama", "redo"] {
        let taus: Vec<f64> = report
            .summary
            .rows
            .iter()
            .filter(|r| r.label.starts_with(metric))
            .map(|r| r.tau.unwrap())
            .collect();
        assert_eq!(taus.len(), 11);
        assert_eq!(taus[0], 0.0);
        assert!((taus[10] - 0.1).abs() < 1e-15);
    }
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(on_disk["rows"].as_array().unwrap().len(), 22);
}

#[test]
fn prune_ratio_and_quadrant_studies() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&config("prune-study", "", ""), &dir.path().join("p")).unwrap();
    let labels: Vec<&str> = r.summary.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["standard", "pruned_grama", "pruned_redo"]);
    assert!(dir.path().join("p/pruned_grama_seed_1.csv").exists());

    let r = run_experiment(
        &config(
            "ratio-study",
            r#"{"metric": "grama"}"#,
            r#", "fractions": [0.0, 0.5]"#,
        ),
        &dir.path().join("r"),
    )
    .unwrap();
    assert_eq!(r.summary.rows.len(), 2);
    let rho = r.summary.extra["spearman_fraction_vs_median_accuracy"];
    assert!((-1.0..=1.0).contains(&rho));

    let r = run_experiment(
        &config("quadrants", "", r#", "at_epoch": 1"#),
        &dir.path().join("q"),
    )
    .unwrap();
    let stats = &r.summary.rows[0].stats;
    let total: f64 = stats.values().map(|s| s.median).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let csv = dir.path().join("q/seed_0.csv");
    assert_eq!(
        header(&csv),
        "layer,unit,site_kind,mean_activation,mean_gradient,quadrant,seed"
    );
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["continual", "prune-study", "tau-sweep"] {
        let cfg = config(kind, "", "");
        let path = dir.path().join(format!("{kind}.json"));
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let cfg =
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 6);
}
