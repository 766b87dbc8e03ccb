//! Evaluation reports and their aggregation into comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use soh_core::transfer::{rmse_soh, DriftDecision};
use soh_core::Backbone;

use crate::error::{invalid, Result};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    FitSource,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Fits the source estimator.
    Train,
    /// First target cycles used by the similarity check and compensation.
    Adapt,
    Test,
    /// Neither fitted nor evaluated.
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CyclePrediction {
    pub cycle_index: u32,
    pub split: Split,
    pub truth: f64,
    /// Source-model estimate before compensation.
    pub source: f64,
    pub correction: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageReport {
    pub stage_id: u32,
    pub backbone: Backbone,
    #[serde(rename = "S")]
    pub consistency_dim: usize,
    pub tau: usize,
    pub r: usize,
    /// RMSE (% of rated capacity) over train or adapt cycles.
    pub train_rmse: Option<f64>,
    pub test_rmse: f64,
    /// Test RMSE of the source estimate alone.
    pub uncompensated_rmse: f64,
    /// RMSE of always predicting the mean training capacity.
    pub baseline_rmse: Option<f64>,
    pub decision: Option<DriftDecision>,
    pub cycles: Vec<CyclePrediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryReport {
    pub battery_id: String,
    pub role: Role,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRun {
    pub seed: u64,
    pub batteries: Vec<BatteryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub run_id: String,
    pub config_hash: String,
    pub source_battery: String,
    pub rated_capacity_ah: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
}

impl EvaluationReport {
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = soh_core::read_json(path)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_SCHEMA as u64) {
            return Err(invalid(format!(
                "{}: report schema_version {:?} is not supported (expected {REPORT_SCHEMA})",
                path.display(),
                version
            )));
        }
        serde_json::from_value(value).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}

fn pairs<'a>(
    cycles: &'a [CyclePrediction],
    keep: &[Split],
) -> impl Iterator<Item = &'a CyclePrediction> + 'a {
    let keep = keep.to_vec();
    cycles.iter().filter(move |c| keep.contains(&c.split))
}

/// RMSE of `predicted` (or of `source` when `uncompensated`) over the cycles in `keep`.
pub fn rmse_of(
    cycles: &[CyclePrediction],
    keep: &[Split],
    uncompensated: bool,
    rated: f64,
) -> Result<f64> {
    let (p, t): (Vec<f64>, Vec<f64>) = pairs(cycles, keep)
        .map(|c| (if uncompensated { c.source } else { c.predicted }, c.truth))
        .unzip();
    Ok(rmse_soh(&p, &t, rated)?)
}

/// Fills the RMSE fields of a stage report from its per-cycle pairs.
pub fn finish_stage(stage: &mut StageReport, rated: f64, train_mean: Option<f64>) -> Result<()> {
    let fit = [Split::Train, Split::Adapt];
    stage.train_rmse = if pairs(&stage.cycles, &fit).next().is_some() {
        Some(rmse_of(&stage.cycles, &fit, false, rated)?)
    } else {
        None
    };
    stage.test_rmse = rmse_of(&stage.cycles, &[Split::Test], false, rated)?;
    stage.uncompensated_rmse = rmse_of(&stage.cycles, &[Split::Test], true, rated)?;
    stage.baseline_rmse = match train_mean {
        Some(m) => {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs(&stage.cycles, &[Split::Test])
                .map(|c| (m, c.truth))
                .unzip();
            Some(rmse_soh(&p, &t, rated)?)
        }
        None => None,
    };
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub kind: ReportKind,
    pub battery_id: String,
    pub stage_id: u32,
    pub runs: usize,
    pub test_rmse_mean: f64,
    pub test_rmse_std: f64,
    pub uncompensated_mean: f64,
    pub compensated_runs: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per (kind, battery, stage): mean and sample standard deviation of test
/// RMSE over every run of every report.
pub fn aggregate(reports: &[EvaluationReport]) -> Result<Vec<TableRow>> {
    if reports.is_empty() {
        return Err(invalid("evaluate needs at least one report"));
    }
    if let Some(r) = reports.iter().find(|r| r.schema_version != REPORT_SCHEMA) {
        return Err(invalid(format!(
            "report {} has schema_version {}",
            r.run_id, r.schema_version
        )));
    }
    type Key = (ReportKind, String, u32);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for report in reports {
        for run in &report.runs {
            for b in &run.batteries {
                for s in &b.stages {
                    let g = groups
                        .entry((report.kind, b.battery_id.clone(), s.stage_id))
                        .or_default();
                    g.0.push(s.test_rmse);
                    g.1.push(s.uncompensated_rmse);
                    if s.decision
                        .as_ref()
                        .is_some_and(|d| d.verdict == soh_core::transfer::Verdict::Compensate)
                    {
                        g.2 += 1;
                    }
                }
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((kind, battery_id, stage_id), (test, unc, comp))| {
            let (m, s) = mean_std(&test);
            TableRow {
                kind,
                battery_id,
                stage_id,
                runs: test.len(),
                test_rmse_mean: m,
                test_rmse_std: s,
                uncompensated_mean: mean_std(&unc).0,
                compensated_runs: comp,
            }
        })
        .collect())
}

fn kind_name(k: ReportKind) -> &'static str {
    match k {
        ReportKind::FitSource => "fit-source",
        ReportKind::Transfer => "transfer",
    }
}

pub fn render_text(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<11} {:<10} {:>5} {:>4}  {:>17}  {:>13}  {:>11}",
        "kind", "battery", "stage", "runs", "test RMSE (%)", "uncompensated", "compensated"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<11} {:<10} {:>5} {:>4}  {:>8.4} ± {:<6.4}  {:>13.4}  {:>8}/{}",
            kind_name(r.kind),
            r.battery_id,
            r.stage_id,
            r.runs,
            r.test_rmse_mean,
            r.test_rmse_std,
            r.uncompensated_mean,
            r.compensated_runs,
            r.runs
        );
    }
    out
}

pub fn render_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("kind,battery_id,stage_id,runs,test_rmse_mean,test_rmse_std,uncompensated_mean,compensated_runs\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            kind_name(r.kind),
            r.battery_id,
            r.stage_id,
            r.runs,
            r.test_rmse_mean,
            r.test_rmse_std,
            r.uncompensated_mean,
            r.compensated_runs
        );
    }
    out
}
