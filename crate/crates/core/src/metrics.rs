//! Endpoint metrics: AUROC (discrimination), ECE (calibration) and MCC, the
//! mean maximum confidence change across an image series (robustness).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Label, Probability};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("AUROC needs both classes (got {positives} positives, {negatives} negatives)")]
    DegenerateClassDistribution { positives: usize, negatives: usize },
    #[error("metric input is empty")]
    EmptyInput,
    #[error("number of bins must be at least 1")]
    NoBins,
    #[error("lesion {index} has a series of {len} predictions; at least 2 are needed")]
    SeriesTooShort { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLesion {
    pub lesion_id: String,
    pub label: Label,
    pub prediction: Probability,
}

impl ScoredLesion {
    pub fn new(lesion_id: impl Into<String>, label: Label, prediction: Probability) -> Self {
        Self {
            lesion_id: lesion_id.into(),
            label,
            prediction,
        }
    }
}

/// Mann-Whitney AUROC with ties counted as one half.
pub fn auroc(items: &[ScoredLesion]) -> Result<f64, MetricError> {
    auroc_by(items.len(), |i| (items[i].label, items[i].prediction.value()))
}

/// AUROC over the items selected by `indices` (repeats allowed).
pub fn auroc_indexed(items: &[ScoredLesion], indices: &[usize]) -> Result<f64, MetricError> {
    auroc_by(indices.len(), |i| {
        let it = &items[indices[i]];
        (it.label, it.prediction.value())
    })
}

fn auroc_by(n: usize, get: impl Fn(usize) -> (Label, f64)) -> Result<f64, MetricError> {
    let mut scored: Vec<(f64, bool)> = (0..n)
        .map(|i| {
            let (label, p) = get(i);
            (p, label.is_positive())
        })
        .collect();
    let positives = scored.iter().filter(|s| s.1).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::DegenerateClassDistribution { positives, negatives });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scored[end].0 == scored[start].0 {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        let pos_in_group = scored[start..end].iter().filter(|s| s.1).count();
        rank_sum += midrank * pos_in_group as f64;
        start = end;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * nn))
}

/// Predicted-class confidence and correctness of one prediction.
fn confidence_and_hit(label: Label, p: f64) -> (f64, bool) {
    let predicted_positive = p >= 0.5;
    (p.max(1.0 - p), predicted_positive == label.is_positive())
}

/// Index of the right-closed equal-width bin holding `c`; bin 0 also holds 0.
fn bin_index(c: f64, n_bins: usize) -> usize {
    let raw = (c * n_bins as f64).ceil() as usize;
    raw.saturating_sub(1).min(n_bins - 1)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the samples in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction of correct predictions in the bin (0 when empty).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n_bins: usize,
    pub total: usize,
    pub bins: Vec<Bin>,
}

impl ReliabilityBins {
    /// `sum_b (n_b / N) |acc_b - conf_b|`.
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
            .sum()
    }
}

struct BinAccumulator {
    count: Vec<usize>,
    conf: Vec<f64>,
    hits: Vec<usize>,
}

fn accumulate(
    n: usize,
    n_bins: usize,
    get: impl Fn(usize) -> (Label, f64),
) -> Result<BinAccumulator, MetricError> {
    if n_bins == 0 {
        return Err(MetricError::NoBins);
    }
    if n == 0 {
        return Err(MetricError::EmptyInput);
    }
    let mut acc = BinAccumulator {
        count: vec![0; n_bins],
        conf: vec![0.0; n_bins],
        hits: vec![0; n_bins],
    };
    for i in 0..n {
        let (label, p) = get(i);
        let (c, hit) = confidence_and_hit(label, p);
        let b = bin_index(c, n_bins);
        acc.count[b] += 1;
        acc.conf[b] += c;
        acc.hits[b] += hit as usize;
    }
    Ok(acc)
}

fn ece_from(acc: &BinAccumulator, n: usize) -> f64 {
    // (n_b / N) |acc_b - conf_b| == |hits_b - sum of confidences_b| / N
    acc.conf
        .iter()
        .zip(&acc.hits)
        .map(|(&conf, &hits)| (hits as f64 - conf).abs())
        .sum::<f64>()
        / n as f64
}

/// Expected calibration error with `n_bins` equal-width bins over `[0, 1]`.
pub fn ece(items: &[ScoredLesion], n_bins: usize) -> Result<f64, MetricError> {
    let acc = accumulate(items.len(), n_bins, |i| (items[i].label, items[i].prediction.value()))?;
    Ok(ece_from(&acc, items.len()))
}

pub fn ece_indexed(items: &[ScoredLesion], indices: &[usize], n_bins: usize) -> Result<f64, MetricError> {
    let acc = accumulate(indices.len(), n_bins, |i| {
        let it = &items[indices[i]];
        (it.label, it.prediction.value())
    })?;
    Ok(ece_from(&acc, indices.len()))
}

pub fn reliability_bins(items: &[ScoredLesion], n_bins: usize) -> Result<ReliabilityBins, MetricError> {
    let acc = accumulate(items.len(), n_bins, |i| (items[i].label, items[i].prediction.value()))?;
    let width = 1.0 / n_bins as f64;
    let bins = (0..n_bins)
        .map(|b| {
            let count = acc.count[b];
            let (confidence, accuracy) = if count == 0 {
                (0.0, 0.0)
            } else {
                (acc.conf[b] / count as f64, acc.hits[b] as f64 / count as f64)
            };
            Bin {
                lower: b as f64 * width,
                upper: if b + 1 == n_bins { 1.0 } else { (b + 1) as f64 * width },
                count,
                confidence,
                accuracy,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        n_bins,
        total: items.len(),
        bins,
    })
}

fn series_range(series: &[Probability], index: usize) -> Result<f64, MetricError> {
    if series.len() < 2 {
        return Err(MetricError::SeriesTooShort {
            index,
            len: series.len(),
        });
    }
    let (lo, hi) = series.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.value()), hi.max(p.value()))
    });
    Ok(hi - lo)
}

/// Mean over lesions of `max - min` of each lesion's prediction series.
pub fn mcc(series: &[Vec<Probability>]) -> Result<f64, MetricError> {
    if series.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut total = 0.0;
    for (i, s) in series.iter().enumerate() {
        total += series_range(s, i)?;
    }
    Ok(total / series.len() as f64)
}

pub fn mcc_indexed(series: &[Vec<Probability>], indices: &[usize]) -> Result<f64, MetricError> {
    if indices.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut total = 0.0;
    for &i in indices {
        total += series_range(&series[i], i)?;
    }
    Ok(total / indices.len() as f64)
}
