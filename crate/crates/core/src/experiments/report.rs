use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{read_metrics, MetricsRow};

/// A metrics column addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TrainLoss,
    TrainAccuracy,
    IdTestAccuracy,
    OodAccuracy,
    BridgeRateAmongCorrect,
    BridgeRateOverall,
    OodHop1Accuracy,
    OodHop2Accuracy,
    NewHop1Accuracy,
    NewHop2Accuracy,
    NewBothAccuracy,
    NewHop1BridgeRate,
    NewHop2BridgeRate,
    NewBothBridgeRate,
    RetainedAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 15] = [
        Metric::TrainLoss,
        Metric::TrainAccuracy,
        Metric::IdTestAccuracy,
        Metric::OodAccuracy,
        Metric::BridgeRateAmongCorrect,
        Metric::BridgeRateOverall,
        Metric::OodHop1Accuracy,
        Metric::OodHop2Accuracy,
        Metric::NewHop1Accuracy,
        Metric::NewHop2Accuracy,
        Metric::NewBothAccuracy,
        Metric::NewHop1BridgeRate,
        Metric::NewHop2BridgeRate,
        Metric::NewBothBridgeRate,
        Metric::RetainedAccuracy,
    ];

    pub fn get(self, r: &MetricsRow) -> Option<f64> {
        match self {
            Metric::TrainLoss => Some(r.train_loss),
            Metric::TrainAccuracy => Some(r.train_accuracy),
            Metric::IdTestAccuracy => r.id_test_accuracy,
            Metric::OodAccuracy => r.ood_accuracy,
            Metric::BridgeRateAmongCorrect => r.bridge_rate_among_correct,
            Metric::BridgeRateOverall => r.bridge_rate_overall,
            Metric::OodHop1Accuracy => r.ood_hop1_accuracy,
            Metric::OodHop2Accuracy => r.ood_hop2_accuracy,
            Metric::NewHop1Accuracy => r.new_hop1_accuracy,
            Metric::NewHop2Accuracy => r.new_hop2_accuracy,
            Metric::NewBothAccuracy => r.new_both_accuracy,
            Metric::NewHop1BridgeRate => r.new_hop1_bridge_rate,
            Metric::NewHop2BridgeRate => r.new_hop2_bridge_rate,
            Metric::NewBothBridgeRate => r.new_both_bridge_rate,
            Metric::RetainedAccuracy => r.retained_accuracy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::TrainLoss => "train_loss",
            Metric::TrainAccuracy => "train_accuracy",
            Metric::IdTestAccuracy => "id_test_accuracy",
            Metric::OodAccuracy => "ood_accuracy",
            Metric::BridgeRateAmongCorrect => "bridge_rate_among_correct",
            Metric::BridgeRateOverall => "bridge_rate_overall",
            Metric::OodHop1Accuracy => "ood_hop1_accuracy",
            Metric::OodHop2Accuracy => "ood_hop2_accuracy",
            Metric::NewHop1Accuracy => "new_hop1_accuracy",
            Metric::NewHop2Accuracy => "new_hop2_accuracy",
            Metric::NewBothAccuracy => "new_both_accuracy",
            Metric::NewHop1BridgeRate => "new_hop1_bridge_rate",
            Metric::NewHop2BridgeRate => "new_hop2_bridge_rate",
            Metric::NewBothBridgeRate => "new_both_bridge_rate",
            Metric::RetainedAccuracy => "retained_accuracy",
        }
    }
}

/// First row (in step order) whose `metric` is at least `threshold`.
pub fn first_crossing(rows: &[MetricsRow], metric: Metric, threshold: f64) -> Option<&MetricsRow> {
    rows.iter().find(|r| metric.get(r).is_some_and(|v| v >= threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Train accuracy that counts as saturated.
    pub saturation: f64,
    /// OOD accuracy that counts as generalized.
    pub generalization: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            saturation: 0.99,
            generalization: 0.9,
        }
    }
}

/// Stage boundaries of one run. Fields stay `None` when a threshold was
/// never reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub source: String,
    pub thresholds: Thresholds,
    pub rows: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saturation_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_crossing_step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_bridge_rate_among_correct: Option<f64>,
    /// OOD crossing step divided by saturation step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_ratio: Option<f64>,
}

pub fn summarize(source: &str, rows: &[MetricsRow], thresholds: Thresholds) -> ReportSummary {
    let saturation_step = first_crossing(rows, Metric::TrainAccuracy, thresholds.saturation).map(|r| r.step);
    let ood_crossing_step = first_crossing(rows, Metric::OodAccuracy, thresholds.generalization).map(|r| r.step);
    let gap_ratio = match (saturation_step, ood_crossing_step) {
        (Some(s), Some(o)) if s > 0 => Some(o as f64 / s as f64),
        // saturated at the initial evaluation; a ratio would be unbounded
        _ => None,
    };
    ReportSummary {
        source: source.to_string(),
        thresholds,
        rows: rows.len(),
        saturation_step,
        ood_crossing_step,
        final_bridge_rate_among_correct: rows.last().and_then(|r| r.bridge_rate_among_correct),
        gap_ratio,
    }
}

/// `(step, value)` pairs for every metric present in at least one row.
/// Rows lacking a metric are skipped, never interpolated.
pub fn series(rows: &[MetricsRow]) -> BTreeMap<&'static str, Vec<(u64, f64)>> {
    let mut out = BTreeMap::new();
    for m in Metric::ALL {
        let pts: Vec<(u64, f64)> = rows.iter().filter_map(|r| m.get(r).map(|v| (r.step, v))).collect();
        if !pts.is_empty() {
            out.insert(m.name(), pts);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub summary: ReportSummary,
    pub series: BTreeMap<&'static str, Vec<(u64, f64)>>,
}

/// Summaries and plot series for each metrics file, in argument order.
pub fn cmd_report(paths: &[&Path], thresholds: Thresholds) -> Result<Vec<RunReport>> {
    if paths.is_empty() {
        return Err(Error::EmptyInput("report needs at least one metrics file".into()));
    }
    paths
        .iter()
        .map(|p| {
            let rows = read_metrics(p)?;
            Ok(RunReport {
                summary: summarize(&p.display().to_string(), &rows, thresholds),
                series: series(&rows),
            })
        })
        .collect()
}
