//! Stratified folds, confusion-matrix metrics, fold aggregation and
//! between-run comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::stats::{mean, sample_std, welch_t_test};

/// Fold index of every subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Same order as the manifest.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }
}

/// Shuffles each class with a seeded stream and deals it round-robin into
/// `k` folds. Dealing continues where the previous class stopped, which
/// keeps fold sizes within one of each other as well.
pub fn stratified_k_fold(labels: &[u8], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Input(format!("need at least 2 folds, got {k}")));
    }
    let mut classes: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    if let Some((label, members)) = classes.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::Input(format!(
            "class {label} has {} subjects, fewer than {k} folds",
            members.len()
        )));
    }
    let mut assignments = vec![0; labels.len()];
    let mut next = 0;
    for (label, mut members) in classes {
        members.shuffle(&mut stream(seed, "fold", u64::from(label)));
        for i in members {
            assignments[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

/// Counts with MDD (label 1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, label: u8, predicted: u8) {
        match (label == 1, predicted == 1) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (l, p) in pairs {
            cm.record(l, p);
        }
        cm
    }
}

/// Metrics of one fold; `None` where a ratio has a zero denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Sensitivity,
    Specificity,
    Precision,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::Sensitivity,
        Metric::Specificity,
        Metric::Precision,
        Metric::F1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Sensitivity => "sensitivity",
            Metric::Specificity => "specificity",
            Metric::Precision => "precision",
            Metric::F1 => "f1",
        }
    }

    pub fn of(self, r: &MetricRecord) -> Option<f64> {
        match self {
            Metric::Accuracy => Some(r.accuracy),
            Metric::Sensitivity => r.sensitivity,
            Metric::Specificity => r.specificity,
            Metric::Precision => r.precision,
            Metric::F1 => r.f1,
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy, sensitivity, specificity, precision and F1 of `cm`.
///
/// F1 is absent when precision or sensitivity is; when both are 0 it is 0,
/// the limit of `2tp / (2tp + fp + fn)`.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricRecord> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let sensitivity = ratio(cm.tp, cm.tp + cm.fn_);
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(MetricRecord {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        sensitivity,
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        precision,
        f1,
    })
}

/// Mean and sample std of one metric over the folds where it is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub defined_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<MetricRecord>,
    pub summary: BTreeMap<Metric, MetricSummary>,
    pub best_fold: usize,
}

impl MetricsReport {
    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.per_fold.iter().filter_map(|r| metric.of(r)).collect()
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.summary.get(&metric).and_then(|s| s.mean)
    }
}

pub fn aggregate_folds(reports: &[MetricRecord]) -> Result<MetricsReport> {
    if reports.len() < 2 {
        return Err(Error::Input(format!(
            "aggregation needs at least 2 folds, got {}",
            reports.len()
        )));
    }
    let summary = Metric::ALL
        .iter()
        .map(|&m| {
            let v: Vec<f64> = reports.iter().filter_map(|r| m.of(r)).collect();
            let s = MetricSummary {
                mean: (!v.is_empty()).then(|| mean(&v)),
                std: (v.len() >= 2).then(|| sample_std(&v)),
                defined_folds: v.len(),
            };
            (m, s)
        })
        .collect();
    let mut best_fold = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.accuracy > reports[best_fold].accuracy {
            best_fold = i;
        }
    }
    Ok(MetricsReport {
        per_fold: reports.to_vec(),
        summary,
        best_fold,
    })
}

/// One metric's Welch test between two runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub t: Option<f64>,
    pub dof: Option<f64>,
    pub p: Option<f64>,
    pub significant: bool,
    /// Why the test could not be computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Welch t-test per metric over the fold values of two runs.
pub fn compare_reports(
    a: &MetricsReport,
    b: &MetricsReport,
) -> Result<BTreeMap<Metric, MetricComparison>> {
    if a.per_fold.len() != b.per_fold.len() {
        return Err(Error::Config(format!(
            "runs have {} and {} folds",
            a.per_fold.len(),
            b.per_fold.len()
        )));
    }
    Ok(Metric::ALL
        .iter()
        .map(|&m| {
            let c = match welch_t_test(&a.values(m), &b.values(m)) {
                Ok(t) => MetricComparison {
                    t: Some(t.t),
                    dof: Some(t.dof),
                    p: Some(t.p),
                    significant: t.p < SIGNIFICANCE_LEVEL,
                    note: None,
                },
                Err(e) => MetricComparison {
                    t: None,
                    dof: None,
                    p: None,
                    significant: false,
                    note: Some(e.to_string()),
                },
            };
            (m, c)
        })
        .collect())
}

/// Mean ± std per metric, in percent.
pub fn format_summary(report: &MetricsReport) -> String {
    let mut out = String::new();
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    for m in Metric::ALL {
        let s = report.summary[&m];
        let _ = writeln!(out, "{:<12} {:>6} ± {:<6} %", m.name(), pct(s.mean), pct(s.std));
    }
    let best = &report.per_fold[report.best_fold];
    let _ = writeln!(
        out,
        "best fold    {} (accuracy {:.2} %)",
        report.best_fold,
        100.0 * best.accuracy
    );
    out
}
