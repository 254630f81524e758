use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::{
    capture_window, run_continual, run_controlled_ratio, run_prune_study, trace_inactive_cohort,
    ContinualTask, ContinualTrace, COHORT_TAU,
};
use crate::error::{PlabError, Result};
use crate::exp::config::{ExperimentConfig, ExperimentKind, TaskParams};
use crate::exp::stats::{median, spearman, Stat};
use crate::metrics::{quadrants, Metric, Quadrant};
use crate::net::SiteKind;
use crate::reset::{ResetEvent, ResetPolicy};
use crate::rl::run_rl;

/// Output directory used when neither the CLI nor the config names one.
pub const DEFAULT_OUT: &str = "plab-out";
pub const OUT_ENV: &str = "PLAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub stats: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    /// Cross-row quantities, e.g. a rank correlation over a grid.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: Summary,
}

/// CLI flag, then the config's `out`, then `$PLAB_OUT`, then [`DEFAULT_OUT`].
pub fn resolve_out_dir(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Quadrant membership of one site; the quadrants CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRow {
    pub layer: usize,
    pub unit: usize,
    pub site_kind: SiteKind,
    pub mean_activation: f64,
    pub mean_gradient: f64,
    pub quadrant: Quadrant,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub fraction: f64,
    pub final_accuracy: f64,
    pub seed: u64,
}

struct Sink {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Sink {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| PlabError::io(dir, e))?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        for r in rows {
            w.serialize(r).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| PlabError::io(&path, e))
    }

    fn events(&mut self, name: &str, events: &[ResetEvent]) -> Result<()> {
        let path = self.path(name);
        let mut f =
            std::io::BufWriter::new(fs::File::create(&path).map_err(|e| PlabError::io(&path, e))?);
        for ev in events {
            let line = serde_json::to_string(ev).expect("events serialize");
            writeln!(f, "{line}").map_err(|e| PlabError::io(&path, e))?;
        }
        f.flush().map_err(|e| PlabError::io(&path, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| PlabError::io(&path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> PlabError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => PlabError::io(path, io),
        other => PlabError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}_{name}")
    }
}

/// Per-seed terminal quantities, gathered into one summary row.
#[derive(Default)]
struct Collect(BTreeMap<String, Vec<f64>>);

impl Collect {
    fn push(&mut self, key: &str, v: f64) {
        self.0.entry(key.to_string()).or_default().push(v);
    }

    fn row(self, label: impl Into<String>, metric: Option<Metric>, tau: Option<f64>) -> SummaryRow {
        SummaryRow {
            label: label.into(),
            metric,
            tau,
            stats: self.0.into_iter().map(|(k, v)| (k, Stat::of(v))).collect(),
        }
    }
}

fn continual_stats(c: &mut Collect, tr: &ContinualTrace) {
    c.push("final_accuracy", tr.final_accuracy());
    c.push("initial_peak_accuracy", tr.initial_phase_peak());
    c.push(
        "final_inactive_ratio_grama",
        tr.final_inactive_ratio(Metric::Grama),
    );
    c.push(
        "final_inactive_ratio_redo",
        tr.final_inactive_ratio(Metric::Redo),
    );
    c.push("resets_total", tr.events.len() as f64);
}

fn policy_label(p: Option<&ResetPolicy>) -> String {
    p.map_or_else(|| "vanilla".to_string(), |p| p.metric.as_str().to_string())
}

/// `template` with its metric switched to `metric`; the threshold and
/// layernorm flag fall back to that metric's defaults unless the template
/// already uses it.
pub fn policy_for(template: &ResetPolicy, metric: Metric) -> ResetPolicy {
    let d = ResetPolicy::new(metric);
    let same = template.metric == metric;
    ResetPolicy {
        metric,
        tau: if same { template.tau } else { d.tau },
        include_layernorm: if same {
            template.include_layernorm
        } else {
            d.include_layernorm
        },
        ..template.clone()
    }
}

fn run_seeds_continual(
    sink: &mut Sink,
    prefix: &str,
    seeds: &[u64],
    mut one: impl FnMut(u64) -> Result<ContinualTrace>,
) -> Result<Collect> {
    let mut c = Collect::default();
    for &seed in seeds {
        let tr = one(seed)?;
        sink.csv(&prefixed(prefix, &format!("seed_{seed}.csv")), &tr.rows)?;
        sink.events(
            &prefixed(prefix, &format!("events_seed_{seed}.jsonl")),
            &tr.events,
        )?;
        continual_stats(&mut c, &tr);
        if let Some(cohort) = &tr.cohort {
            c.push("cohort_size", cohort.sites.len() as f64);
            c.push(
                "cohort_revived_fraction",
                cohort.revived_fraction(COHORT_TAU),
            );
        }
    }
    Ok(c)
}

/// Executes every seed of `cfg` and writes the artifacts into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let mut sink = Sink::create(out_dir)?;
    let seeds = &cfg.seeds;
    let arch = &cfg.arch;
    let policy = cfg.policy.as_ref();
    let template = cfg.policy.clone().unwrap_or_else(ResetPolicy::grama);
    let mut rows = Vec::new();
    let mut extra = BTreeMap::new();

    match &cfg.task {
        TaskParams::Continual(task, ex) => {
            let c = run_seeds_continual(&mut sink, "", seeds, |seed| match ex.cohort_size {
                Some(n) => trace_inactive_cohort(task, arch, n, None, seed),
                None => run_continual(task, arch, policy, seed),
            })?;
            rows.push(c.row(
                policy_label(policy),
                policy.map(|p| p.metric),
                policy.map(|p| p.tau),
            ));
        }
        TaskParams::Rl(sac) => {
            let mut c = Collect::default();
            for &seed in seeds {
                let tr = run_rl(arch, policy, None, seed, sac)?;
                sink.csv(&format!("seed_{seed}.csv"), &tr.rows)?;
                sink.events(&format!("events_seed_{seed}.jsonl"), &tr.events)?;
                c.push("terminal_return", tr.terminal_return());
                c.push(
                    "mean_inactive_ratio_grama",
                    tr.mean_inactive_ratio(Metric::Grama),
                );
                c.push(
                    "mean_inactive_ratio_redo",
                    tr.mean_inactive_ratio(Metric::Redo),
                );
                c.push("resets_total", tr.events.len() as f64);
            }
            rows.push(c.row(
                policy_label(policy),
                policy.map(|p| p.metric),
                policy.map(|p| p.tau),
            ));
        }
        TaskParams::PruneStudy(task) => {
            let c = run_seeds_continual(&mut sink, "standard", seeds, |seed| {
                run_continual(task, arch, None, seed)
            })?;
            rows.push(c.row("standard", None, None));
            for metric in [Metric::Grama, Metric::Redo] {
                let p = policy_for(&template, metric);
                let prefix = format!("pruned_{metric}");
                let mut c = run_seeds_continual(&mut sink, &prefix, seeds, |seed| {
                    run_prune_study(task, arch, &p, seed)
                })?;
                if let Some(r) = c.0.remove("resets_total") {
                    c.0.insert("pruned_total".into(), r);
                }
                rows.push(c.row(prefix, Some(metric), Some(p.tau)));
            }
        }
        TaskParams::RatioStudy(task, ex) => {
            let mut per_fraction: Vec<Collect> =
                ex.fractions.iter().map(|_| Collect::default()).collect();
            for &seed in seeds {
                let res = run_controlled_ratio(task, arch, &template, &ex.fractions, seed)?;
                let table: Vec<RatioRow> = res
                    .iter()
                    .map(|&(fraction, final_accuracy)| RatioRow {
                        fraction,
                        final_accuracy,
                        seed,
                    })
                    .collect();
                sink.csv(&format!("seed_{seed}.csv"), &table)?;
                for (c, r) in per_fraction.iter_mut().zip(&table) {
                    c.push("final_accuracy", r.final_accuracy);
                }
            }
            let medians: Vec<f64> = per_fraction
                .iter()
                .map(|c| median(&c.0["final_accuracy"]))
                .collect();
            extra.insert(
                "spearman_fraction_vs_median_accuracy".into(),
                spearman(&ex.fractions, &medians),
            );
            for (c, f) in per_fraction.into_iter().zip(&ex.fractions) {
                rows.push(c.row(
                    format!("fraction={f}"),
                    Some(template.metric),
                    Some(template.tau),
                ));
            }
        }
        TaskParams::Quadrants(task, ex) => {
            let at = ex.at_epoch.unwrap_or(task.epochs_per_class - 1);
            let mut c = Collect::default();
            for &seed in seeds {
                let tr = capture_window(task, arch, policy, at, seed)?;
                let window = tr.window.expect("window requested");
                let report = quadrants(&window)?;
                let table: Vec<QuadrantRow> = report
                    .entries
                    .iter()
                    .zip(window.mean_activation.iter().zip(&window.mean_gradient))
                    .map(|(e, (&a, &g))| QuadrantRow {
                        layer: e.site.layer,
                        unit: e.site.unit,
                        site_kind: e.site.kind,
                        mean_activation: a,
                        mean_gradient: g,
                        quadrant: e.quadrant,
                        seed,
                    })
                    .collect();
                sink.csv(&format!("seed_{seed}.csv"), &table)?;
                let n = report.entries.len() as f64;
                for q in [
                    Quadrant::HighHigh,
                    Quadrant::HighExprLowLearn,
                    Quadrant::LowExprHighLearn,
                    Quadrant::LowLow,
                ] {
                    c.push(
                        &format!("fraction_{}", quadrant_key(q)),
                        report.count(q) as f64 / n,
                    );
                }
            }
            rows.push(c.row(format!("epoch={at}"), None, None));
        }
        TaskParams::TauSweep(task, ex) => {
            for metric in [Metric::Grama, Metric::Redo] {
                for (k, &tau) in ex.grid().iter().enumerate() {
                    let p = ResetPolicy {
                        tau,
                        ..policy_for(&template, metric)
                    };
                    let prefix = format!("{metric}_tau{k:02}");
                    let c = run_seeds_continual(&mut sink, &prefix, seeds, |seed| {
                        run_continual(task, arch, Some(&p), seed)
                    })?;
                    rows.push(c.row(prefix, Some(metric), Some(tau)));
                }
            }
        }
    }

    let summary = Summary {
        kind: cfg.kind(),
        seeds: seeds.clone(),
        rows,
        extra,
    };
    sink.json("summary.json", &summary)?;
    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        files: sink.files,
        summary,
    })
}

fn quadrant_key(q: Quadrant) -> &'static str {
    match q {
        Quadrant::HighHigh => "high-high",
        Quadrant::HighExprLowLearn => "high-expr-low-learn",
        Quadrant::LowExprHighLearn => "low-expr-high-learn",
        Quadrant::LowLow => "low-low",
    }
}

/// Rebuilds summary rows from the per-seed CSVs in `dir`, one row per file
/// group (`<group>_seed_<n>.csv`). Nothing is written.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| PlabError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| PlabError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".csv") else {
            continue;
        };
        let Some(pos) = stem.rfind("seed_") else {
            continue;
        };
        if stem[pos + 5..].parse::<u64>().is_err() {
            continue;
        }
        let group = stem[..pos].trim_end_matches('_');
        let group = if group.is_empty() { "all" } else { group };
        groups.entry(group.to_string()).or_default().push(path);
    }
    if groups.is_empty() {
        return Err(PlabError::NotFound(format!(
            "no per-seed CSV files in {}",
            dir.display()
        )));
    }
    let mut rows = Vec::new();
    for (label, mut files) in groups {
        files.sort();
        let mut c = Collect::default();
        for f in &files {
            let mut r = csv::Reader::from_path(f).map_err(|e| csv_err(f, e))?;
            let header: Vec<String> = r
                .headers()
                .map_err(|e| csv_err(f, e))?
                .iter()
                .map(str::to_string)
                .collect();
            let records: Vec<csv::StringRecord> = r
                .records()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| csv_err(f, e))?;
            let col = |name: &str| header.iter().position(|h| h == name);
            let num = |rec: &csv::StringRecord, k: usize| rec[k].parse::<f64>().unwrap_or(f64::NAN);
            let Some(last) = records.last() else { continue };
            if let Some(k) = col("accuracy") {
                c.push("final_accuracy", num(last, k));
                for m in ["grama", "redo"] {
                    let k = col(&format!("inactive_ratio_{m}")).expect("continual schema");
                    c.push(&format!("final_inactive_ratio_{m}"), num(last, k));
                }
                c.push(
                    "resets_total",
                    num(last, col("resets_cum").expect("continual schema")),
                );
            } else if let Some(k) = col("episodic_return") {
                c.push("terminal_return", num(last, k));
                for m in ["grama", "redo"] {
                    let k = col(&format!("inactive_ratio_{m}")).expect("rl schema");
                    let mean =
                        records.iter().map(|r| num(r, k)).sum::<f64>() / records.len() as f64;
                    c.push(&format!("mean_inactive_ratio_{m}"), mean);
                }
                c.push(
                    "resets_total",
                    num(last, col("resets_cum").expect("rl schema")),
                );
            } else if let (Some(kf), Some(ka)) = (col("fraction"), col("final_accuracy")) {
                for rec in &records {
                    c.push(&format!("final_accuracy@{}", &rec[kf]), num(rec, ka));
                }
            } else if let Some(kq) = col("quadrant") {
                let n = records.len() as f64;
                let mut counts: BTreeMap<String, f64> = BTreeMap::new();
                for rec in &records {
                    *counts.entry(rec[kq].to_string()).or_default() += 1.0;
                }
                for (q, k) in counts {
                    c.push(&format!("fraction_{q}"), k / n);
                }
            }
        }
        rows.push(c.row(label, None, None));
    }
    Ok(rows)
}

/// Fixed-width text table of summary rows.
pub fn format_rows(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let mut head = r.label.clone();
        if let Some(t) = r.tau {
            head.push_str(&format!(" (tau={t})"));
        }
        out.push_str(&head);
        out.push('\n');
        for (k, s) in &r.stats {
            out.push_str(&format!(
                "  {k:<36} median {:>12.6}  iqr {:>12.6}  n={}\n",
                s.median,
                s.iqr,
                s.values.len()
            ));
        }
    }
    out
}

/// The continual task of a config, for callers that only need data shapes.
pub fn continual_task(cfg: &ExperimentConfig) -> Option<&ContinualTask> {
    cfg.task.continual()
}
