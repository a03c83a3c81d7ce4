//! Bootstrap estimation, percentile intervals, the paired Wilcoxon
//! signed-rank test and Bonferroni thresholds.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::metrics::MetricError;
use crate::model::Label;

/// Largest effective sample size that uses the exact null distribution.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("stratified resampling needs both classes (got {positives} positives, {negatives} negatives)")]
    DegenerateClassDistribution { positives: usize, negatives: usize },
    #[error("cannot resample an empty set")]
    EmptyPopulation,
    #[error("{labels} stratification labels for {lesions} lesions")]
    LabelCountMismatch { labels: usize, lesions: usize },
    #[error("no bootstrap samples")]
    EmptySamples,
    #[error("confidence level {0} is outside (0, 1]")]
    InvalidLevel(f64),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("bootstrap iteration {iteration}: {source}")]
    Metric {
        iteration: usize,
        #[source]
        source: MetricError,
    },
    #[error("cannot pair {metric:?} results computed on different resample plans ({a} vs {b})")]
    PlanMismatch { metric: String, a: String, b: String },
}

/// Index vectors drawn with replacement, shared by every method compared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub id: String,
    pub n_lesions: usize,
    pub stratified: bool,
    pub resamples: Vec<Vec<usize>>,
}

impl ResamplePlan {
    /// A single "resample" that is the full dataset in order.
    pub fn identity(n_lesions: usize) -> Self {
        Self {
            id: "identity".into(),
            n_lesions,
            stratified: false,
            resamples: vec![(0..n_lesions).collect()],
        }
    }

    pub fn n_iter(&self) -> usize {
        self.resamples.len()
    }
}

/// Draws `n_iter` resamples of `n_lesions` indices. With `stratify`, each
/// resample keeps the per-class counts of the original labels.
pub fn make_resample_plan<R: Rng + ?Sized>(
    id: impl Into<String>,
    n_lesions: usize,
    n_iter: usize,
    rng: &mut R,
    stratify: Option<&[Label]>,
) -> Result<ResamplePlan, StatsError> {
    if n_lesions == 0 {
        return Err(StatsError::EmptyPopulation);
    }
    let resamples = match stratify {
        None => (0..n_iter)
            .map(|_| (0..n_lesions).map(|_| rng.random_range(0..n_lesions)).collect())
            .collect(),
        Some(labels) => {
            if labels.len() != n_lesions {
                return Err(StatsError::LabelCountMismatch {
                    labels: labels.len(),
                    lesions: n_lesions,
                });
            }
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                (0..n_lesions).partition(|&i| labels[i].is_positive());
            if pos.is_empty() || neg.is_empty() {
                return Err(StatsError::DegenerateClassDistribution {
                    positives: pos.len(),
                    negatives: neg.len(),
                });
            }
            (0..n_iter)
                .map(|_| {
                    let mut v = Vec::with_capacity(n_lesions);
                    for class in [&pos, &neg] {
                        v.extend((0..class.len()).map(|_| class[rng.random_range(0..class.len())]));
                    }
                    v
                })
                .collect()
        }
    };
    Ok(ResamplePlan {
        id: id.into(),
        n_lesions,
        stratified: stratify.is_some(),
        resamples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: String,
    /// Mean of the bootstrap samples.
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: Vec<f64>,
    pub plan_id: String,
}

impl BootstrapResult {
    pub fn from_samples(metric: impl Into<String>, samples: Vec<f64>, plan_id: impl Into<String>) -> Result<Self, StatsError> {
        let (ci_low, ci_high) = percentile_ci(&samples, 0.95)?;
        let base = samples[0];
        let point = base + samples.iter().map(|v| v - base).sum::<f64>() / samples.len() as f64;
        Ok(Self {
            metric: metric.into(),
            point,
            ci_low,
            ci_high,
            samples,
            plan_id: plan_id.into(),
        })
    }
}

/// Evaluates `metric_fn` on every resample of `plan` (in parallel; results
/// keep plan order).
pub fn bootstrap_metric<F>(metric: &str, plan: &ResamplePlan, metric_fn: F) -> Result<BootstrapResult, StatsError>
where
    F: Fn(&[usize]) -> Result<f64, MetricError> + Sync,
{
    let outcomes: Vec<Result<f64, MetricError>> =
        plan.resamples.par_iter().map(|idx| metric_fn(idx)).collect();
    let samples = outcomes
        .into_iter()
        .enumerate()
        .map(|(iteration, r)| r.map_err(|source| StatsError::Metric { iteration, source }))
        .collect::<Result<Vec<f64>, _>>()?;
    BootstrapResult::from_samples(metric, samples, plan.id.clone())
}

/// Linear-interpolation quantile on sorted data at position `(n - 1) * q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Two-sided percentile interval at `level`.
pub fn percentile_ci(samples: &[f64], level: f64) -> Result<(f64, f64), StatsError> {
    if samples.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(StatsError::InvalidLevel(level));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&sorted, tail), quantile_sorted(&sorted, 1.0 - tail)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
    /// Every difference was zero; no test is possible and p is reported as 1.
    AllDifferencesZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences.
    pub w_plus: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Midranks (1-based) of `values`, which must already be sorted ascending.
fn midranks_sorted(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < values.len() {
        let mut end = start + 1;
        while end < values.len() && values[end] == values[start] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        ranks[start..end].fill(r);
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// `(rank of |d|, d > 0)` per non-zero difference, and the tie group sizes.
pub type SignedRanks = (Vec<(f64, bool)>, Vec<usize>);

/// Signed ranks of the non-zero differences `a - b`.
pub fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks_sorted(&abs);
    Ok((ranks.into_iter().zip(diffs.iter().map(|d| *d > 0.0)).collect(), ties))
}

/// Two-sided paired Wilcoxon signed-rank test of `a` against `b`.
///
/// Zero differences are dropped. Up to [`EXACT_WILCOXON_MAX_N`] remaining
/// pairs use the exact distribution of `W+` over all sign assignments of the
/// observed (mid)ranks; larger samples use the normal approximation with tie
/// and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if a.is_empty() {
        return Err(StatsError::EmptySamples);
    }
    let (signed, ties) = signed_ranks(a, b)?;
    let n = signed.len();
    let w_plus: f64 = signed.iter().filter(|s| s.1).map(|s| s.0).sum();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            n_effective: 0,
            p_value: 1.0,
            method: WilcoxonMethod::AllDifferencesZero,
        });
    }
    if n <= EXACT_WILCOXON_MAX_N {
        let ranks: Vec<f64> = signed.iter().map(|s| s.0).collect();
        return Ok(WilcoxonResult {
            w_plus,
            n_effective: n,
            p_value: exact_two_sided(&ranks, w_plus),
            method: WilcoxonMethod::Exact,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(WilcoxonResult {
        w_plus,
        n_effective: n,
        p_value,
        method: WilcoxonMethod::Normal,
    })
}

/// Exact two-sided p-value. Midranks are multiples of 1/2, so the null
/// distribution is tabulated over doubled ranks.
fn exact_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(ranks.len() as i32);
    let w = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
    let upper: f64 = counts[w..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Per-comparison significance level under Bonferroni correction.
///
/// Panics unless `0 < alpha < 1` and `m >= 1`.
pub fn bonferroni_threshold(alpha: f64, m: usize) -> f64 {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    assert!(m >= 1, "at least one comparison");
    alpha / m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    pub p_value: f64,
    pub adjusted_alpha: f64,
    pub significant: bool,
    pub test: WilcoxonMethod,
}

/// Paired test of two bootstrap results computed on the same plan.
pub fn compare(
    method_a: &str,
    a: &BootstrapResult,
    method_b: &str,
    b: &BootstrapResult,
    adjusted_alpha: f64,
) -> Result<ComparisonResult, StatsError> {
    if a.plan_id != b.plan_id {
        return Err(StatsError::PlanMismatch {
            metric: a.metric.clone(),
            a: a.plan_id.clone(),
            b: b.plan_id.clone(),
        });
    }
    let w = wilcoxon_signed_rank(&a.samples, &b.samples)?;
    Ok(ComparisonResult {
        method_a: method_a.to_string(),
        method_b: method_b.to_string(),
        metric: a.metric.clone(),
        p_value: w.p_value,
        adjusted_alpha,
        significant: w.p_value < adjusted_alpha,
        test: w.method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use Label::{Melanoma as M, Nevus as N};

    #[test]
    fn plan_shapes() {
        let mut rng = StreamKey::new(0, "plan").rng();
        let plan = make_resample_plan("p", 656, 1000, &mut rng, None).unwrap();
        assert_eq!(plan.n_iter(), 1000);
        assert!(plan.resamples.iter().all(|r| r.len() == 656 && r.iter().all(|&i| i < 656)));

        let single = make_resample_plan("p", 1, 20, &mut rng, None).unwrap();
        assert!(single.resamples.iter().all(|r| r == &[0]));

        let labels = [M, M, N];
        let strat = make_resample_plan("s", 3, 200, &mut rng, Some(&labels)).unwrap();
        for r in &strat.resamples {
            assert_eq!(r.iter().filter(|&&i| labels[i] == M).count(), 2);
            assert_eq!(r.iter().filter(|&&i| labels[i] == N).count(), 1);
        }
        assert!(matches!(
            make_resample_plan("s", 2, 5, &mut rng, Some(&[M, M])),
            Err(StatsError::DegenerateClassDistribution { .. })
        ));
    }

    #[test]
    fn plan_is_seed_deterministic() {
        let a = make_resample_plan("p", 50, 30, &mut StreamKey::new(9, "b").rng(), Some(&[M, N].repeat(25))).unwrap();
        let b = make_resample_plan("p", 50, 30, &mut StreamKey::new(9, "b").rng(), Some(&[M, N].repeat(25))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_metric_bootstrap() {
        let mut rng = StreamKey::new(1, "c").rng();
        let plan = make_resample_plan("p", 10, 100, &mut rng, None).unwrap();
        let r = bootstrap_metric("x", &plan, |_| Ok(0.9)).unwrap();
        assert_eq!((r.point, r.ci_low, r.ci_high), (0.9, 0.9, 0.9));
        assert_eq!(r.samples.len(), 100);
    }

    #[test]
    fn identity_plan_bootstrap() {
        let data = [0.1, 0.4, 0.7];
        let plan = ResamplePlan::identity(3);
        let r = bootstrap_metric("mean", &plan, |idx| Ok(idx.iter().map(|&i| data[i]).sum::<f64>() / 3.0)).unwrap();
        assert_eq!(r.samples.len(), 1);
        assert!((r.samples[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn metric_errors_carry_iteration() {
        let plan = ResamplePlan {
            id: "p".into(),
            n_lesions: 1,
            stratified: false,
            resamples: vec![vec![0], vec![0], vec![0]],
        };
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let err = bootstrap_metric("x", &plan, |_| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Err(MetricError::EmptyInput)
        })
        .unwrap_err();
        assert!(matches!(err, StatsError::Metric { iteration: 0, .. }));
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile_ci(&[0.3; 7], 0.95).unwrap(), (0.3, 0.3));
        let ramp: Vec<f64> = (0..=100).map(f64::from).collect();
        let (lo, hi) = percentile_ci(&ramp, 0.95).unwrap();
        assert!((lo - 2.5).abs() < 1e-9 && (hi - 97.5).abs() < 1e-9);
        assert_eq!(percentile_ci(&[3.0, 1.0, 2.0], 1.0).unwrap(), (1.0, 3.0));
        assert_eq!(percentile_ci(&[], 0.95), Err(StatsError::EmptySamples));
    }

    #[test]
    fn wilcoxon_examples() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert_eq!(w.method, WilcoxonMethod::Exact);
        assert_eq!(w.p_value, 0.0625);
        assert_eq!(w.w_plus, 15.0);

        let same = wilcoxon_signed_rank(&[0.2, 0.4], &[0.2, 0.4]).unwrap();
        assert_eq!(same.method, WilcoxonMethod::AllDifferencesZero);
        assert_eq!(same.p_value, 1.0);

        let sym = wilcoxon_signed_rank(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(sym.p_value, 1.0);

        assert!(matches!(
            wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]),
            Err(StatsError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn wilcoxon_normal_branch_is_two_sided_and_bounded() {
        let a: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = a.iter().map(|x| -x).collect();
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(ab.method, WilcoxonMethod::Normal);
        assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab.p_value));

        let shifted: Vec<f64> = a.iter().map(|x| x + 1.5).collect();
        assert!(wilcoxon_signed_rank(&shifted, &a).unwrap().p_value < 1e-30);
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni_threshold(0.05, 2), 0.025);
        assert_eq!(bonferroni_threshold(0.05, 1), 0.05);
        assert_eq!(bonferroni_threshold(0.01, 4), 0.0025);
    }

    #[test]
    fn comparisons_require_a_shared_plan() {
        let a = BootstrapResult::from_samples("auroc", vec![0.9, 0.8], "p1").unwrap();
        let b = BootstrapResult::from_samples("auroc", vec![0.7, 0.6], "p2").unwrap();
        assert!(matches!(compare("A", &a, "B", &b, 0.025), Err(StatsError::PlanMismatch { .. })));
        let b = BootstrapResult { plan_id: "p1".into(), ..b };
        let c = compare("A", &a, "B", &b, 0.025).unwrap();
        assert_eq!(c.p_value, 0.5);
        assert!(!c.significant);
    }
}
