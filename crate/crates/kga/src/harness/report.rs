use crate::error::{Error, Result};
use crate::eval::MiaOutcome;
use crate::harness::config::ExperimentConfig;
use crate::unlearn::{BadtReport, KgaReport};
use crate::util::atomic_write;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Which model a metrics row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Original,
    Unlearned,
    Retrain,
}

impl ModelRole {
    pub fn name(&self) -> &'static str {
        match self {
            ModelRole::Original => "original",
            ModelRole::Unlearned => "unlearned",
            ModelRole::Retrain => "retrain",
        }
    }
}

/// Metric values for one model on one split. The reference for divergence
/// scores is always the retraining oracle; the probability-drop share is
/// always against the original model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub task_metric: String,
    pub task_value: f64,
    pub perplexity: Option<f64>,
    pub jsd_to_retrain: Option<f64>,
    pub lpd_to_retrain: Option<f64>,
    pub pdlp_vs_original: Option<f64>,
    pub attack_f1: Option<f64>,
    pub attack_fnr: Option<f64>,
}

impl SplitMetrics {
    pub fn set_attack(&mut self, outcome: MiaOutcome) {
        self.attack_f1 = Some(outcome.f1);
        self.attack_fnr = Some(outcome.fnr);
    }
}

/// All metric values for one model: test split and forget split.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test: SplitMetrics,
    pub forget: SplitMetrics,
}

/// One seed's outcome: either a full set of per-role reports or the error
/// that stopped the seed (other seeds keep running).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedOutcome {
    Ok {
        reports: BTreeMap<ModelRole, MetricsReport>,
        #[serde(skip_serializing_if = "Option::is_none")]
        kga: Option<KgaReport>,
        #[serde(skip_serializing_if = "Option::is_none")]
        badt: Option<BadtReport>,
    },
    Error {
        message: String,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub outcome: SeedOutcome,
    /// Stage wall times in seconds; volatile, stripped from canonical output.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
}

/// Everything one experiment produced across its seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub config: ExperimentConfig,
    pub rows: Vec<SeedRow>,
}

impl ReportBundle {
    /// Canonical JSON: wall-clock values are stripped so the bytes are a
    /// pure function of config and seeds.
    pub fn canonical_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        strip_volatile(&mut value);
        Ok(serde_json::to_string_pretty(&value)?)
    }

    /// Wall-clock table only (informative, not covered by determinism).
    pub fn timings_json(&self) -> Result<String> {
        let table: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|row| {
                serde_json::json!({
                    "seed": row.seed,
                    "timings": row.timings,
                })
            })
            .collect();
        Ok(serde_json::to_string_pretty(&table)?)
    }

    /// Flat CSV: one row per (seed, role, split); failed seeds are skipped.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "seed,method,role,split,task_metric,task_value,perplexity,jsd_to_retrain,lpd_to_retrain,pdlp_vs_original,attack_f1,attack_fnr\n",
        );
        let method = format!("{:?}", self.config.method).to_lowercase();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for row in &self.rows {
            if let SeedOutcome::Ok { reports, .. } = &row.outcome {
                for (role, report) in reports {
                    for (split, m) in [("test", &report.test), ("forget", &report.forget)] {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                            row.seed,
                            method,
                            role.name(),
                            split,
                            m.task_metric,
                            m.task_value,
                            fmt(m.perplexity),
                            fmt(m.jsd_to_retrain),
                            fmt(m.lpd_to_retrain),
                            fmt(m.pdlp_vs_original),
                            fmt(m.attack_f1),
                            fmt(m.attack_fnr),
                        ));
                    }
                }
            }
        }
        out
    }

    /// Rows in the CSV body (excluding the header).
    pub fn csv_row_count(&self) -> usize {
        self.rows
            .iter()
            .map(|row| match &row.outcome {
                SeedOutcome::Ok { reports, .. } => reports.len() * 2,
                SeedOutcome::Error { .. } => 0,
            })
            .sum()
    }

    /// Gap-trajectory plot series: `seed,step,gap` per line.
    fn gap_trajectory_csv(&self) -> String {
        let mut out = String::from("seed,step,gap\n");
        for row in &self.rows {
            if let SeedOutcome::Ok { kga: Some(report), .. } = &row.outcome {
                for (step, gap) in &report.trajectory {
                    out.push_str(&format!("{},{},{}\n", row.seed, step, gap));
                }
            }
        }
        out
    }

    /// Probability-drop table: `seed,role,split,pdlp` per line.
    fn pdlp_csv(&self) -> String {
        let mut out = String::from("seed,role,split,pdlp\n");
        for row in &self.rows {
            if let SeedOutcome::Ok { reports, .. } = &row.outcome {
                for (role, report) in reports {
                    for (split, m) in [("test", &report.test), ("forget", &report.forget)] {
                        if let Some(v) = m.pdlp_vs_original {
                            out.push_str(&format!("{},{},{},{}\n", row.seed, role.name(), split, v));
                        }
                    }
                }
            }
        }
        out
    }

    /// Wall-time bars (volatile): `seed,stage,seconds` per line.
    fn time_bars_csv(&self) -> String {
        let mut out = String::from("seed,stage,seconds\n");
        for row in &self.rows {
            for (stage, secs) in &row.timings {
                out.push_str(&format!("{},{},{}\n", row.seed, stage, secs));
            }
        }
        out
    }
}

fn strip_volatile(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("timings");
            map.remove("wall_seconds");
            for v in map.values_mut() {
                strip_volatile(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items.iter_mut() {
                strip_volatile(v);
            }
        }
        _ => {}
    }
}

/// Output formats for [`emit_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Plot,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportFormat> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "plot" => Ok(ReportFormat::Plot),
            other => Err(Error::Config(format!("unknown format {other:?} (want json|csv|plot)"))),
        }
    }
}

/// Writes the requested report files under `dir`, atomically. Re-emitting
/// the same bundle produces identical bytes.
pub fn emit_report(bundle: &ReportBundle, formats: &[ReportFormat], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Json => {
                let path = dir.join("report.json");
                atomic_write(&path, bundle.canonical_json()?.as_bytes())?;
                written.push(path);
                let path = dir.join("timings.json");
                atomic_write(&path, bundle.timings_json()?.as_bytes())?;
                written.push(path);
            }
            ReportFormat::Csv => {
                let path = dir.join("report.csv");
                atomic_write(&path, bundle.to_csv().as_bytes())?;
                written.push(path);
            }
            ReportFormat::Plot => {
                let plot = dir.join("plot");
                for (name, content) in [
                    ("gap_trajectory.csv", bundle.gap_trajectory_csv()),
                    ("pdlp.csv", bundle.pdlp_csv()),
                    ("time_bars.csv", bundle.time_bars_csv()),
                ] {
                    let path = plot.join(name);
                    atomic_write(&path, content.as_bytes())?;
                    written.push(path);
                }
            }
        }
    }
    Ok(written)
}

/// Combined sweep series across labeled bundles (one per sweep point):
/// `label,seed,role,split,task_value,pdlp,lpd` per line.
pub fn emit_sweep(labeled: &[(String, ReportBundle)], dir: &Path) -> Result<std::path::PathBuf> {
    let mut out = String::from("label,seed,role,split,task_value,pdlp,lpd\n");
    for (label, bundle) in labeled {
        for row in &bundle.rows {
            if let SeedOutcome::Ok { reports, .. } = &row.outcome {
                for (role, report) in reports {
                    for (split, m) in [("test", &report.test), ("forget", &report.forget)] {
                        out.push_str(&format!(
                            "{},{},{},{},{},{},{}\n",
                            label,
                            row.seed,
                            role.name(),
                            split,
                            m.task_value,
                            m.pdlp_vs_original.map(|v| v.to_string()).unwrap_or_default(),
                            m.lpd_to_retrain.map(|v| v.to_string()).unwrap_or_default(),
                        ));
                    }
                }
            }
        }
    }
    let path = dir.join("plot").join("sweep.csv");
    atomic_write(&path, out.as_bytes())?;
    Ok(path)
}
