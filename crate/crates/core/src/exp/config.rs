//! Experiment configuration: one JSON object per run.
//!
//! `task` holds the parameters of the chosen kind. Continual-based kinds take
//! every [`ContinualTask`] field plus a few kind-specific keys; `rl` takes the
//! [`SacConfig`] fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::continual::ContinualTask;
use crate::error::{PlabError, Result};
use crate::reset::ResetPolicy;
use crate::rl::SacConfig;
use crate::zoo::ArchSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Continual,
    Rl,
    PruneStudy,
    RatioStudy,
    Quadrants,
    TauSweep,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Continual => "continual",
            ExperimentKind::Rl => "rl",
            ExperimentKind::PruneStudy => "prune-study",
            ExperimentKind::RatioStudy => "ratio-study",
            ExperimentKind::Quadrants => "quadrants",
            ExperimentKind::TauSweep => "tau-sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualExtras {
    /// Track a cohort of inactive sites (vanilla runs only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cohort_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioExtras {
    pub fractions: Vec<f64>,
}

impl Default for RatioExtras {
    fn default() -> Self {
        RatioExtras {
            fractions: vec![0.0, 0.1, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrantExtras {
    /// Epoch whose window is analysed; unset means the last epoch before the
    /// first class injection.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepExtras {
    pub grid_points: usize,
    pub tau_max: f64,
}

impl Default for SweepExtras {
    fn default() -> Self {
        SweepExtras {
            grid_points: 11,
            tau_max: 0.1,
        }
    }
}

impl SweepExtras {
    /// Evenly spaced thresholds on `[0, tau_max]`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|k| self.tau_max * k as f64 / (n - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    Continual(ContinualTask, ContinualExtras),
    Rl(SacConfig),
    PruneStudy(ContinualTask),
    RatioStudy(ContinualTask, RatioExtras),
    Quadrants(ContinualTask, QuadrantExtras),
    TauSweep(ContinualTask, SweepExtras),
}

impl TaskParams {
    pub fn kind(&self) -> ExperimentKind {
        match self {
            TaskParams::Continual(..) => ExperimentKind::Continual,
            TaskParams::Rl(_) => ExperimentKind::Rl,
            TaskParams::PruneStudy(_) => ExperimentKind::PruneStudy,
            TaskParams::RatioStudy(..) => ExperimentKind::RatioStudy,
            TaskParams::Quadrants(..) => ExperimentKind::Quadrants,
            TaskParams::TauSweep(..) => ExperimentKind::TauSweep,
        }
    }

    pub fn defaults(kind: ExperimentKind) -> Self {
        let t = ContinualTask::default();
        match kind {
            ExperimentKind::Continual => TaskParams::Continual(t, ContinualExtras::default()),
            ExperimentKind::Rl => TaskParams::Rl(SacConfig::default()),
            ExperimentKind::PruneStudy => TaskParams::PruneStudy(t),
            ExperimentKind::RatioStudy => TaskParams::RatioStudy(t, RatioExtras::default()),
            ExperimentKind::Quadrants => TaskParams::Quadrants(t, QuadrantExtras::default()),
            ExperimentKind::TauSweep => TaskParams::TauSweep(t, SweepExtras::default()),
        }
    }

    fn extra_keys(kind: ExperimentKind) -> &'static [&'static str] {
        match kind {
            ExperimentKind::Continual => &["cohort_size"],
            ExperimentKind::RatioStudy => &["fractions"],
            ExperimentKind::Quadrants => &["at_epoch"],
            ExperimentKind::TauSweep => &["grid_points", "tau_max"],
            ExperimentKind::Rl | ExperimentKind::PruneStudy => &[],
        }
    }

    fn from_value(kind: ExperimentKind, value: Value) -> Result<Self> {
        let Value::Object(mut base) = value else {
            return Err(PlabError::config("task", "expected an object"));
        };
        if kind == ExperimentKind::Rl {
            return Ok(TaskParams::Rl(parse(Value::Object(base), "task")?));
        }
        let mut extra = Map::new();
        for key in Self::extra_keys(kind) {
            if let Some(v) = base.remove(*key) {
                extra.insert((*key).to_string(), v);
            }
        }
        let task: ContinualTask = parse(Value::Object(base), "task")?;
        let extra = Value::Object(extra);
        Ok(match kind {
            ExperimentKind::Continual => TaskParams::Continual(task, parse(extra, "task")?),
            ExperimentKind::PruneStudy => TaskParams::PruneStudy(task),
            ExperimentKind::RatioStudy => TaskParams::RatioStudy(task, parse(extra, "task")?),
            ExperimentKind::Quadrants => TaskParams::Quadrants(task, parse(extra, "task")?),
            ExperimentKind::TauSweep => TaskParams::TauSweep(task, parse(extra, "task")?),
            ExperimentKind::Rl => unreachable!(),
        })
    }

    fn to_value(&self) -> Value {
        fn merge(a: Value, b: Value) -> Value {
            let (Value::Object(mut a), Value::Object(b)) = (a, b) else {
                unreachable!("both halves serialize as objects")
            };
            a.extend(b);
            Value::Object(a)
        }
        match self {
            TaskParams::Continual(t, e) => merge(json(t), json(e)),
            TaskParams::Rl(c) => json(c),
            TaskParams::PruneStudy(t) => json(t),
            TaskParams::RatioStudy(t, e) => merge(json(t), json(e)),
            TaskParams::Quadrants(t, e) => merge(json(t), json(e)),
            TaskParams::TauSweep(t, e) => merge(json(t), json(e)),
        }
    }

    /// The continual task of every continual-based kind.
    pub fn continual(&self) -> Option<&ContinualTask> {
        match self {
            TaskParams::Continual(t, _)
            | TaskParams::PruneStudy(t)
            | TaskParams::RatioStudy(t, _)
            | TaskParams::Quadrants(t, _)
            | TaskParams::TauSweep(t, _) => Some(t),
            TaskParams::Rl(_) => None,
        }
    }
}

fn json<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("config types serialize to JSON")
}

fn parse<T: serde::de::DeserializeOwned>(value: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." {
            prefix.to_string()
        } else {
            format!("{prefix}.{inner}")
        };
        PlabError::config(path, e.into_inner().to_string())
    })
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// JSON shape of a config file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    #[serde(default)]
    arch: ArchSpec,
    #[serde(default)]
    policy: Option<ResetPolicy>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[serde(default = "empty_object")]
    task: Value,
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    /// `None` runs without resets.
    pub policy: Option<ResetPolicy>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub task: TaskParams,
}

impl ExperimentConfig {
    pub fn new(task: TaskParams) -> Self {
        ExperimentConfig {
            arch: ArchSpec::default(),
            policy: None,
            seeds: default_seeds(),
            out: None,
            task,
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        self.task.kind()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| PlabError::config("<root>", format!("invalid JSON: {e}")))?;
        let raw: RawConfig = parse(value, "").map_err(|e| match e {
            PlabError::Config { path, message } => {
                let path = path.trim_start_matches('.');
                PlabError::config(if path.is_empty() { "<root>" } else { path }, message)
            }
            other => other,
        })?;
        let cfg = ExperimentConfig {
            task: TaskParams::from_value(raw.kind, raw.task)?,
            arch: raw.arch,
            policy: raw.policy,
            seeds: raw.seeds,
            out: raw.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let raw = RawConfig {
            kind: self.kind(),
            arch: self.arch.clone(),
            policy: self.policy.clone(),
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            task: self.task.to_value(),
        };
        serde_json::to_string_pretty(&raw).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PlabError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| PlabError::io(path, e))
    }

    /// Full schema check; runs before anything touches the disk.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PlabError::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(PlabError::config("seeds", "seeds must be distinct"));
        }
        self.arch.validate_shape().map_err(|e| match e {
            PlabError::InvalidArch(m) => PlabError::config("arch", m),
            other => other,
        })?;
        if let Some(p) = &self.policy {
            p.validate()?;
        }
        if let Some(t) = self.task.continual() {
            t.validate()?;
        }
        match &self.task {
            TaskParams::Rl(c) => c.validate()?,
            TaskParams::RatioStudy(_, e) => {
                if e.fractions.is_empty() {
                    return Err(PlabError::config("task.fractions", "must not be empty"));
                }
                if e.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return Err(PlabError::config(
                        "task.fractions",
                        "fractions must lie in [0, 1]",
                    ));
                }
                if e.fractions.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(PlabError::config(
                        "task.fractions",
                        "fractions must be increasing",
                    ));
                }
            }
            TaskParams::TauSweep(_, e) => {
                if e.grid_points == 0 {
                    return Err(PlabError::config("task.grid_points", "must be >= 1"));
                }
                if !(e.tau_max >= 0.0 && e.tau_max.is_finite()) {
                    return Err(PlabError::config("task.tau_max", "must be >= 0"));
                }
            }
            TaskParams::Quadrants(t, e) => {
                if let Some(at) = e.at_epoch {
                    if at >= t.total_epochs() {
                        return Err(PlabError::config(
                            "task.at_epoch",
                            format!("must be below the epoch count {}", t.total_epochs()),
                        ));
                    }
                }
            }
            TaskParams::Continual(_, e) => {
                if e.cohort_size.is_some() && self.policy.is_some() {
                    return Err(PlabError::config(
                        "task.cohort_size",
                        "cohort tracking needs a run without a policy",
                    ));
                }
            }
            TaskParams::PruneStudy(_) => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Metric;

    #[test]
    fn empty_task_gives_defaults() {
        let c = ExperimentConfig::from_json(r#"{"kind": "continual", "policy": {}, "task": {}}"#)
            .unwrap();
        let p = c.policy.unwrap();
        assert_eq!((p.metric, p.tau, p.period), (Metric::Grama, 0.01, 1000));
        assert_eq!(c.seeds, vec![0, 1, 2]);
        let r =
            ExperimentConfig::from_json(r#"{"kind": "rl", "policy": {"metric": "redo"}}"#).unwrap();
        let p = r.policy.unwrap();
        assert_eq!((p.tau, p.period, p.include_layernorm), (0.02, 1000, false));
        assert_eq!(r.task, TaskParams::Rl(SacConfig::default()));
    }

    #[test]
    fn negative_tau_names_field() {
        let e = ExperimentConfig::from_json(r#"{"kind": "continual", "policy": {"tau": -0.1}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("policy.tau"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let cases = [
            (r#"{"kind": "continual", "bogus": 1}"#, "bogus"),
            (r#"{"kind": "continual", "task": {"epochz": 3}}"#, "task"),
            (r#"{"kind": "rl", "task": {"fractions": [0.1]}}"#, "task"),
            (r#"{"kind": "continual", "arch": {"widht": 8}}"#, "arch"),
            (
                r#"{"kind": "continual", "policy": {"metirc": "redo"}}"#,
                "policy",
            ),
        ];
        for (text, path) in cases {
            let e = ExperimentConfig::from_json(text).unwrap_err();
            assert!(matches!(e, PlabError::Config { .. }));
            assert!(e.to_string().contains(path), "{e} vs {path}");
        }
    }

    #[test]
    fn wrong_type_reports_nested_path() {
        let e = ExperimentConfig::from_json(r#"{"kind": "continual", "task": {"classes": "ten"}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("task.classes"), "{e}");
    }

    #[test]
    fn round_trip_every_kind() {
        for kind in [
            ExperimentKind::Continual,
            ExperimentKind::Rl,
            ExperimentKind::PruneStudy,
            ExperimentKind::RatioStudy,
            ExperimentKind::Quadrants,
            ExperimentKind::TauSweep,
        ] {
            let mut c = ExperimentConfig::new(TaskParams::defaults(kind));
            c.policy = Some(ResetPolicy::redo());
            c.seeds = vec![4, 2];
            if let TaskParams::Quadrants(_, e) = &mut c.task {
                e.at_epoch = Some(3);
            }
            let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn kind_specific_checks() {
        let bad = [
            r#"{"kind": "ratio-study", "task": {"fractions": [0.5, 0.1]}}"#,
            r#"{"kind": "tau-sweep", "task": {"grid_points": 0}}"#,
            r#"{"kind": "quadrants", "task": {"at_epoch": 100000}}"#,
            r#"{"kind": "continual", "seeds": []}"#,
            r#"{"kind": "continual", "arch": {"width": 2}}"#,
        ];
        for text in bad {
            assert!(
                matches!(
                    ExperimentConfig::from_json(text),
                    Err(PlabError::Config { .. })
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn sweep_grid() {
        let g = SweepExtras::default().grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert!((g[10] - 0.1).abs() < 1e-15);
        assert!((g[3] - 0.03).abs() < 1e-15);
    }
}
