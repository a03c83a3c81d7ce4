#![allow(dead_code)]

use multiview::metrics::ScoredLesion;
use multiview::{Label, Probability};

pub fn p(v: f64) -> Probability {
    Probability::new(v).unwrap()
}

pub fn lesion(i: usize, label: Label, v: f64) -> ScoredLesion {
    ScoredLesion {
        lesion_id: format!("L{i}"),
        label,
        prediction: p(v),
    }
}

/// AUROC by enumerating every positive/negative pair.
pub fn brute_force_auroc(items: &[ScoredLesion]) -> f64 {
    let pos: Vec<f64> = items.iter().filter(|s| s.label.is_positive()).map(|s| s.prediction.value()).collect();
    let neg: Vec<f64> = items.iter().filter(|s| !s.label.is_positive()).map(|s| s.prediction.value()).collect();
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Two-sided exact Wilcoxon p-value by enumerating all 2^n sign patterns of
/// the midranks of the nonzero differences.
pub fn enumerated_wilcoxon_p(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&a| {
            let less = abs.iter().filter(|&&b| b < a).count() as f64;
            let eq = abs.iter().filter(|&&b| b == a).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = 1u64 << n;
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0..total {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w <= observed + 1e-9 {
            le += 1;
        }
        if w >= observed - 1e-9 {
            ge += 1;
        }
    }
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}
