//! Confusion counts, threshold metrics and multi-seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tallies one prediction; `p >= threshold` counts as positive.
    pub fn record(&mut self, p: f64, label: u8, threshold: f64) {
        match (p >= threshold, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion(probabilities: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if probabilities.len() != labels.len() {
        return Err(Error::input(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        counts.record(p, y, threshold);
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Gmean,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Gmean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Gmean => "gmean",
        }
    }
}

/// Metrics of one evaluation. A metric whose denominator is zero is reported
/// as 0 and listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gmean: f64,
    pub counts: ConfusionCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<Metric>,
}

impl MetricsReport {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Accuracy => self.accuracy,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Gmean => self.gmean,
        }
    }

    pub fn is_undefined(&self, metric: Metric) -> bool {
        self.undefined.contains(&metric)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn compute_metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    if counts.total() == 0 {
        return Err(Error::input("cannot compute metrics over zero samples"));
    }
    let tp = counts.tp as f64;
    let fp = counts.fp as f64;
    let tn = counts.tn as f64;
    let fn_ = counts.fn_ as f64;

    let accuracy = (tp + tn) / (tp + fp + tn + fn_);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => ratio(2.0 * p * r, p + r),
        _ => None,
    };
    let gmean = match (recall, specificity) {
        (Some(r), Some(s)) => Some((r * s).sqrt()),
        _ => None,
    };

    let mut undefined = Vec::new();
    let mut take = |metric, v: Option<f64>| {
        v.unwrap_or_else(|| {
            undefined.push(metric);
            0.0
        })
    };
    let precision = take(Metric::Precision, precision);
    let recall = take(Metric::Recall, recall);
    let f1 = take(Metric::F1, f1);
    let gmean = take(Metric::Gmean, gmean);

    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        gmean,
        counts,
        undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of every metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub n: usize,
    pub metrics: BTreeMap<Metric, MeanStd>,
    /// How many reports flagged each metric as undefined.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub undefined_counts: BTreeMap<Metric, usize>,
}

impl SeedAggregate {
    pub fn get(&self, metric: Metric) -> MeanStd {
        self.metrics[&metric]
    }
}

pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<SeedAggregate> {
    if reports.is_empty() {
        return Err(Error::input("no reports to aggregate"));
    }
    let metrics = Metric::ALL
        .iter()
        .map(|&m| {
            // Welford: identical inputs give exactly their value and zero spread.
            let (mut mean, mut m2) = (0.0, 0.0);
            for (k, r) in reports.iter().enumerate() {
                let x = r.get(m);
                let delta = x - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (x - mean);
            }
            let var = m2 / reports.len() as f64;
            (
                m,
                MeanStd {
                    mean,
                    std: var.max(0.0).sqrt(),
                },
            )
        })
        .collect();
    let mut undefined_counts = BTreeMap::new();
    for r in reports {
        for &m in &r.undefined {
            *undefined_counts.entry(m).or_insert(0) += 1;
        }
    }
    Ok(SeedAggregate {
        n: reports.len(),
        metrics,
        undefined_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cc(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap(),
            cc(1, 0, 1, 0)
        );
        assert_eq!(confusion(&[0.5], &[0], 0.5).unwrap(), cc(0, 1, 0, 0));
        assert_eq!(confusion(&[], &[], 0.5).unwrap(), cc(0, 0, 0, 0));
        assert!(matches!(confusion(&[0.2], &[], 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn perfect_classifier() {
        let r = compute_metrics(cc(1, 0, 1, 0)).unwrap();
        for m in Metric::ALL {
            assert_eq!(r.get(m), 1.0, "{m:?}");
        }
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn hand_case() {
        let r = compute_metrics(cc(3, 1, 5, 1)).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.precision - 0.75).abs() < 1e-12);
        assert!((r.recall - 0.75).abs() < 1e-12);
        assert!((r.f1 - 0.75).abs() < 1e-12);
        assert!((r.gmean - 0.7906).abs() < 1e-4);
    }

    #[test]
    fn no_positive_predictions_flag_precision_and_f1() {
        let r = compute_metrics(cc(0, 0, 7, 3)).unwrap();
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.f1, 0.0);
        assert!(r.is_undefined(Metric::Precision));
        assert!(r.is_undefined(Metric::F1));
        assert!(!r.is_undefined(Metric::Recall));
        assert_eq!(r.gmean, 0.0);
        assert!(!r.is_undefined(Metric::Gmean));
    }

    #[test]
    fn single_class_flags_gmean() {
        let r = compute_metrics(cc(4, 0, 0, 1)).unwrap();
        assert!(r.is_undefined(Metric::Gmean));
        assert!(!r.is_undefined(Metric::Precision));
        assert!(matches!(
            compute_metrics(cc(0, 0, 0, 0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn aggregation() {
        let a = compute_metrics(cc(3, 1, 5, 1)).unwrap();
        let one = aggregate_seeds(std::slice::from_ref(&a)).unwrap();
        for m in Metric::ALL {
            assert_eq!(one.get(m).mean, a.get(m));
            assert_eq!(one.get(m).std, 0.0);
        }

        let mut b = a.clone();
        b.accuracy = 0.9;
        let mut c = a.clone();
        c.accuracy = 0.8;
        let two = aggregate_seeds(&[c, b]).unwrap();
        assert!((two.get(Metric::Accuracy).mean - 0.85).abs() < 1e-12);
        assert!((two.get(Metric::Accuracy).std - 0.05).abs() < 1e-12);

        let ten = aggregate_seeds(&vec![a; 10]).unwrap();
        assert!(Metric::ALL.iter().all(|&m| ten.get(m).std == 0.0));
        assert!(aggregate_seeds(&[]).is_err());
    }

    #[test]
    fn undefined_flags_are_counted() {
        let flagged = compute_metrics(cc(0, 0, 7, 3)).unwrap();
        let clean = compute_metrics(cc(1, 1, 1, 1)).unwrap();
        let agg = aggregate_seeds(&[flagged.clone(), clean, flagged]).unwrap();
        assert_eq!(agg.undefined_counts[&Metric::Precision], 2);
        assert!(!agg.undefined_counts.contains_key(&Metric::Recall));
    }

    #[test]
    fn shard_merge_equals_whole() {
        let probs = [0.1, 0.7, 0.5, 0.3, 0.95, 0.2];
        let labels = [0, 1, 0, 1, 1, 0];
        let whole = confusion(&probs, &labels, 0.5).unwrap();
        let left = confusion(&probs[..3], &labels[..3], 0.5).unwrap();
        let right = confusion(&probs[3..], &labels[3..], 0.5).unwrap();
        assert_eq!(left.merge(right), whole);
    }
}
