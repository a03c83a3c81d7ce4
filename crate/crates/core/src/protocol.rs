//! Experiment choreography: downsampling, robustness series, method
//! evaluation on shared test sets, repeated replication and the image-count
//! sweep.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{prepare_views, score_groups, Backend, InferenceError, MethodSpec, PreparedView};
use crate::metrics::{self, ScoredLesion};
use crate::model::{Dataset, ImageRef, LesionRecord, Probability, SplitAssignment};
use crate::report::{
    Cell, CellComparison, ExperimentReport, MetricKind, MetricRow, ProtocolMetadata, RepeatTable, Summary,
    SweepReport, SweepRow,
};
use crate::rng::StreamKey;
use crate::stats::{self, BootstrapResult, ResamplePlan, StatsError};

/// Lesions scored per scorer call.
const LESIONS_PER_BATCH: usize = 32;

pub const ROBUSTNESS_RECONSTRUCTION: &str = "all images of a lesion are shuffled with a seeded stream and split \
     sequentially into L bundles of k/L images; each bundle yields one prediction";
pub const SINGLE_VIEW_SERIES: &str = "Single-View scores the first image of each bundle; MV-Real averages every \
     image of the bundle; MV-Artificial averages the first image with (bundle size - 1) generated views of it";
pub const MV_REAL_SUBSET: &str = "MV-Real uses the first n_extra set-aside images in stored order";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("lesions have differing numbers of images; a uniform series length is required")]
    NonUniformSeries,
    #[error("series length {series_length} does not divide {images} images per lesion")]
    NonDivisibleSeriesLength { images: usize, series_length: usize },
    #[error("assignment for lesion {found:?} does not match record {expected:?}")]
    AssignmentMismatch { expected: String, found: String },
    #[error("repeat {repeat}, {stage}: {source}")]
    Inference {
        repeat: usize,
        stage: String,
        #[source]
        source: InferenceError,
    },
    #[error("repeat {repeat}, {stage}: {source}")]
    Stats {
        repeat: usize,
        stage: String,
        #[source]
        source: StatsError,
    },
}

fn default_seed() -> u64 {
    20240101
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_bootstrap: usize,
    pub n_repeats: usize,
    pub alpha: f64,
    /// Minimum number of comparisons the significance level is divided by.
    pub bonferroni_m: usize,
    pub ece_bins: usize,
    /// Number of predictions per lesion in each robustness series.
    pub series_lengths: Vec<usize>,
    pub methods: Vec<MethodSpec>,
    pub sweep_n_extra: Vec<usize>,
    /// Resample within each class so both classes appear in every resample.
    pub stratified: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            n_bootstrap: 1000,
            n_repeats: 5,
            alpha: 0.05,
            bonferroni_m: 2,
            ece_bins: 10,
            series_lengths: vec![2, 3],
            methods: MethodSpec::defaults(),
            sweep_n_extra: (1..=5).collect(),
            stratified: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.n_bootstrap == 0 {
            return bad("n_bootstrap must be at least 1".into());
        }
        if self.n_repeats == 0 {
            return bad("n_repeats must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} is outside (0, 1)", self.alpha));
        }
        if self.bonferroni_m == 0 {
            return bad("bonferroni_m must be at least 1".into());
        }
        if self.ece_bins == 0 {
            return bad("ece_bins must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        if let Some(&l) = self.series_lengths.iter().find(|&&l| l < 2) {
            return bad(format!("series length {l} is too short; at least 2 predictions are needed"));
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("method labels must be unique".into());
        }
        for m in &self.methods {
            if let MethodSpec::MvArtificial { setup, .. } = m {
                setup.validate().map_err(|e| ProtocolError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// The method every other method is compared against (the first MV-Real).
    pub fn reference_method(&self) -> Option<&MethodSpec> {
        self.methods.iter().find(|m| m.is_mv_real())
    }

    pub fn comparisons(&self) -> usize {
        match self.reference_method() {
            Some(_) => self.methods.len() - 1,
            None => 0,
        }
    }

    /// Bonferroni threshold; extra methods raise the number of comparisons.
    pub fn adjusted_alpha(&self) -> f64 {
        stats::bonferroni_threshold(self.alpha, self.bonferroni_m.max(self.comparisons()))
    }
}

/// Derives every random stream of one repeat.
#[derive(Debug, Clone, Copy)]
pub struct RepeatContext {
    pub seed: u64,
    pub repeat: usize,
}

impl RepeatContext {
    pub fn new(seed: u64, repeat: usize) -> Self {
        Self { seed, repeat }
    }

    fn key(&self, purpose: &str) -> StreamKey {
        StreamKey::new(self.seed, purpose).with_index(self.repeat as u64)
    }

    pub fn downsample_key(&self, lesion_id: &str) -> StreamKey {
        self.key("downsample").with(lesion_id)
    }

    pub fn series_key(&self, series_length: usize, lesion_id: &str) -> StreamKey {
        self.key("series").with_index(series_length as u64).with(lesion_id)
    }

    pub fn bootstrap_key(&self) -> StreamKey {
        self.key("bootstrap")
    }

    pub fn views_key(&self, method: &MethodSpec, stage: &str, lesion_id: &str) -> StreamKey {
        self.key("views").with(method.label()).with(stage).with(lesion_id)
    }
}

/// Designates one image of the lesion, uniformly at random, as the original.
pub fn downsample<R: Rng + ?Sized>(record: &LesionRecord, rng: &mut R) -> SplitAssignment {
    let k = record.k();
    assert!(k >= 1, "validated records have at least one image");
    let original_index = rng.random_range(0..k);
    SplitAssignment {
        lesion_id: record.lesion_id.clone(),
        original_index,
        set_aside_indices: (0..k).filter(|&i| i != original_index).collect(),
    }
}

pub fn downsample_all(dataset: &Dataset, ctx: &RepeatContext) -> Vec<SplitAssignment> {
    dataset
        .records()
        .iter()
        .map(|r| downsample(r, &mut ctx.downsample_key(&r.lesion_id).rng()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessSeries {
    pub lesion_id: String,
    /// Disjoint image-index bundles covering every image of the lesion.
    pub bundles: Vec<Vec<usize>>,
}

/// Shuffles all images of the lesion and splits them into `series_length`
/// consecutive bundles of equal size.
pub fn build_robustness_series<R: Rng + ?Sized>(
    assignment: &SplitAssignment,
    series_length: usize,
    rng: &mut R,
) -> Result<RobustnessSeries, ProtocolError> {
    let mut all: Vec<usize> = std::iter::once(assignment.original_index)
        .chain(assignment.set_aside_indices.iter().copied())
        .collect();
    let k = all.len();
    if series_length == 0 || !k.is_multiple_of(series_length) {
        return Err(ProtocolError::NonDivisibleSeriesLength {
            images: k,
            series_length,
        });
    }
    all.shuffle(rng);
    Ok(RobustnessSeries {
        lesion_id: assignment.lesion_id.clone(),
        bundles: all.chunks(k / series_length).map(<[usize]>::to_vec).collect(),
    })
}

fn check_alignment(dataset: &Dataset, ids: impl Iterator<Item = String>) -> Result<(), ProtocolError> {
    for (record, id) in dataset.records().iter().zip(ids) {
        if record.lesion_id != id {
            return Err(ProtocolError::AssignmentMismatch {
                expected: record.lesion_id.clone(),
                found: id,
            });
        }
    }
    Ok(())
}

/// Scores `jobs` (one per lesion, each a list of prediction groups) in
/// parallel batches; the output keeps job order.
fn run_jobs<'d, J, F>(jobs: &[J], backend: &Backend<'_>, prepare: F) -> Result<Vec<Vec<Probability>>, InferenceError>
where
    J: Sync,
    F: Fn(&J) -> Result<Vec<Vec<PreparedView<'d>>>, InferenceError> + Sync,
{
    let batches: Vec<Result<Vec<Vec<Probability>>, InferenceError>> = jobs
        .par_chunks(LESIONS_PER_BATCH)
        .map(|chunk| {
            let mut groups = Vec::new();
            let mut sizes = Vec::with_capacity(chunk.len());
            for job in chunk {
                let g = prepare(job)?;
                sizes.push(g.len());
                groups.extend(g);
            }
            let scores = score_groups(&groups, backend)?;
            let mut out = Vec::with_capacity(chunk.len());
            let mut offset = 0;
            for n in sizes {
                out.push(scores[offset..offset + n].to_vec());
                offset += n;
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

fn image(record: &LesionRecord, index: usize) -> &ImageRef {
    &record.images[index]
}

/// One prediction per lesion from the designated original (and, for MV-Real,
/// its set-aside images).
pub fn evaluate_method(
    method: &MethodSpec,
    dataset: &Dataset,
    assignments: &[SplitAssignment],
    backend: &Backend<'_>,
    ctx: &RepeatContext,
) -> Result<Vec<ScoredLesion>, ProtocolError> {
    check_alignment(dataset, assignments.iter().map(|a| a.lesion_id.clone()))?;
    let jobs: Vec<(&LesionRecord, &SplitAssignment)> = dataset.records().iter().zip(assignments).collect();
    let preds = run_jobs(&jobs, backend, |&(record, a)| {
        let original = image(record, a.original_index);
        let extra: Vec<&ImageRef> = a.set_aside_indices.iter().map(|&i| image(record, i)).collect();
        let mut rng = ctx.views_key(method, "main", &record.lesion_id).rng();
        Ok(vec![prepare_views(method, original, &extra, backend, &mut rng)?])
    })
    .map_err(|source| ProtocolError::Inference {
        repeat: ctx.repeat + 1,
        stage: format!("evaluating {method}"),
        source,
    })?;
    Ok(jobs
        .iter()
        .zip(preds)
        .map(|((record, _), p)| ScoredLesion::new(&record.lesion_id, record.label.expect("validated"), p[0]))
        .collect())
}

/// The method's bundle-level counterpart: same kind, consuming `bundle_size`
/// images per prediction.
fn bundle_method(method: &MethodSpec, bundle_size: usize) -> MethodSpec {
    match method {
        MethodSpec::SingleView => MethodSpec::SingleView,
        MethodSpec::MvArtificial { setup, .. } => MethodSpec::MvArtificial {
            setup: setup.clone(),
            n_extra: bundle_size - 1,
        },
        MethodSpec::MvReal { .. } => MethodSpec::MvReal {
            n_extra: bundle_size - 1,
        },
    }
}

/// One prediction per bundle per lesion, ready for [`metrics::mcc`].
pub fn evaluate_robustness(
    method: &MethodSpec,
    dataset: &Dataset,
    series: &[RobustnessSeries],
    backend: &Backend<'_>,
    ctx: &RepeatContext,
) -> Result<Vec<Vec<Probability>>, ProtocolError> {
    check_alignment(dataset, series.iter().map(|s| s.lesion_id.clone()))?;
    let jobs: Vec<(&LesionRecord, &RobustnessSeries)> = dataset.records().iter().zip(series).collect();
    run_jobs(&jobs, backend, |&(record, s)| {
        let stage = format!("series-{}", s.bundles.len());
        let mut rng = ctx.views_key(method, &stage, &record.lesion_id).rng();
        s.bundles
            .iter()
            .map(|bundle| {
                let per_bundle = bundle_method(method, bundle.len());
                let original = image(record, bundle[0]);
                let extra: Vec<&ImageRef> = bundle[1..].iter().map(|&i| image(record, i)).collect();
                prepare_views(&per_bundle, original, &extra, backend, &mut rng)
            })
            .collect()
    })
    .map_err(|source| ProtocolError::Inference {
        repeat: ctx.repeat + 1,
        stage: format!("robustness of {method}"),
        source,
    })
}

fn check_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<usize, ProtocolError> {
    config.validate()?;
    let k = dataset.uniform_k().ok_or(ProtocolError::NonUniformSeries)?;
    for &l in &config.series_lengths {
        if k % l != 0 {
            return Err(ProtocolError::NonDivisibleSeriesLength {
                images: k,
                series_length: l,
            });
        }
    }
    for m in &config.methods {
        if m.is_mv_real() && m.n_extra() + 1 > k {
            return Err(ProtocolError::Config(format!("{m} needs {} images per lesion, have {k}", m.n_extra() + 1)));
        }
    }
    Ok(k)
}

fn make_plan(config: &ExperimentConfig, dataset: &Dataset, ctx: &RepeatContext) -> Result<ResamplePlan, ProtocolError> {
    let key = ctx.bootstrap_key();
    let id = format!("repeat{}-{}", ctx.repeat + 1, key.fingerprint());
    let labels = dataset.labels();
    stats::make_resample_plan(
        id,
        dataset.len(),
        config.n_bootstrap,
        &mut key.rng(),
        config.stratified.then_some(labels.as_slice()),
    )
    .map_err(|source| ProtocolError::Stats {
        repeat: ctx.repeat + 1,
        stage: "resample plan".into(),
        source,
    })
}

fn boot<F>(ctx: &RepeatContext, what: &str, plan: &ResamplePlan, f: F) -> Result<BootstrapResult, ProtocolError>
where
    F: Fn(&[usize]) -> Result<f64, metrics::MetricError> + Sync,
{
    stats::bootstrap_metric(what, plan, f).map_err(|source| ProtocolError::Stats {
        repeat: ctx.repeat + 1,
        stage: format!("bootstrapping {what}"),
        source,
    })
}

/// Bootstrap results of every method for one metric row.
struct RowResults {
    kind: MetricKind,
    per_method: Vec<BootstrapResult>,
}

/// Everything computed for one repeat before it is summarized.
pub struct RepeatOutcome {
    pub assignments: Vec<SplitAssignment>,
    pub predictions: Vec<Vec<ScoredLesion>>,
    pub table: RepeatTable,
}

pub fn run_repeat(
    config: &ExperimentConfig,
    dataset: &Dataset,
    backend: &Backend<'_>,
    repeat: usize,
) -> Result<RepeatOutcome, ProtocolError> {
    let k = check_dataset(config, dataset)?;
    let ctx = RepeatContext::new(config.seed, repeat);
    let assignments = downsample_all(dataset, &ctx);
    let plan = make_plan(config, dataset, &ctx)?;

    let mut predictions = Vec::with_capacity(config.methods.len());
    let mut auroc_row = Vec::new();
    let mut ece_row = Vec::new();
    for method in &config.methods {
        let scored = evaluate_method(method, dataset, &assignments, backend, &ctx)?;
        auroc_row.push(boot(&ctx, "auroc", &plan, |idx| metrics::auroc_indexed(&scored, idx))?);
        ece_row.push(boot(&ctx, "ece", &plan, |idx| metrics::ece_indexed(&scored, idx, config.ece_bins))?);
        predictions.push(scored);
    }
    let mut rows = vec![
        RowResults {
            kind: MetricKind::Auroc,
            per_method: auroc_row,
        },
        RowResults {
            kind: MetricKind::Ece,
            per_method: ece_row,
        },
    ];

    // Fewer images per prediction first, matching the published table order.
    let mut lengths = config.series_lengths.clone();
    lengths.sort_unstable_by(|a, b| b.cmp(a));
    lengths.dedup();
    for series_length in lengths {
        let series = assignments
            .iter()
            .map(|a| build_robustness_series(a, series_length, &mut ctx.series_key(series_length, &a.lesion_id).rng()))
            .collect::<Result<Vec<_>, _>>()?;
        let kind = MetricKind::Mcc {
            series_length,
            images_per_prediction: k / series_length,
        };
        let name = kind.key();
        let mut per_method = Vec::new();
        for method in &config.methods {
            let preds = evaluate_robustness(method, dataset, &series, backend, &ctx)?;
            per_method.push(boot(&ctx, &name, &plan, |idx| metrics::mcc_indexed(&preds, idx))?);
        }
        rows.push(RowResults { kind, per_method });
    }

    let adjusted_alpha = config.adjusted_alpha();
    let reference = config.methods.iter().position(MethodSpec::is_mv_real);
    let mut table_rows = Vec::with_capacity(rows.len());
    for row in rows {
        let mut cells = Vec::with_capacity(config.methods.len());
        for (i, (method, result)) in config.methods.iter().zip(&row.per_method).enumerate() {
            let comparison = match reference {
                Some(r) if r != i => {
                    let c = stats::compare(
                        &config.methods[r].label(),
                        &row.per_method[r],
                        &method.label(),
                        result,
                        adjusted_alpha,
                    )
                    .map_err(|source| ProtocolError::Stats {
                        repeat: repeat + 1,
                        stage: format!("comparing {}", row.kind.key()),
                        source,
                    })?;
                    Some(CellComparison {
                        against: c.method_a,
                        p_value: c.p_value,
                        adjusted_alpha: c.adjusted_alpha,
                        significant: c.significant,
                        test: c.test,
                    })
                }
                _ => None,
            };
            cells.push(Cell {
                method: method.label(),
                summary: Summary::from(result),
                comparison,
            });
        }
        table_rows.push(MetricRow {
            label: row.kind.label(),
            kind: row.kind,
            cells,
        });
    }

    Ok(RepeatOutcome {
        assignments,
        predictions,
        table: RepeatTable {
            repeat: repeat + 1,
            plan_id: plan.id,
            methods: config.methods.iter().map(MethodSpec::label).collect(),
            rows: table_rows,
        },
    })
}

pub fn protocol_metadata(config: &ExperimentConfig, dataset: &Dataset, backend: &Backend<'_>) -> ProtocolMetadata {
    ProtocolMetadata {
        n_lesions: dataset.len(),
        images_per_lesion: dataset.uniform_k().unwrap_or(0),
        scorer: backend.scorer.describe(),
        stratified_bootstrap: config.stratified,
        reference_method: config.reference_method().map(MethodSpec::label),
        comparisons: config.bonferroni_m.max(config.comparisons()),
        adjusted_alpha: config.adjusted_alpha(),
        robustness_reconstruction: ROBUSTNESS_RECONSTRUCTION.into(),
        robustness_series_methods: SINGLE_VIEW_SERIES.into(),
        mv_real_subset: MV_REAL_SUBSET.into(),
    }
}

/// Runs every repeat: fresh downsampling, all methods on the same originals,
/// bootstrap summaries on one shared resample plan and the paired tests.
pub fn run_experiment(
    config: &ExperimentConfig,
    dataset: &Dataset,
    backend: &Backend<'_>,
) -> Result<ExperimentReport, ProtocolError> {
    check_dataset(config, dataset)?;
    let repeats = (0..config.n_repeats)
        .map(|r| run_repeat(config, dataset, backend, r).map(|o| o.table))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentReport {
        config: config.clone(),
        metadata: protocol_metadata(config, dataset, backend),
        repeats,
    })
}

/// AUROC and ECE of MV-Real for each configured number of extra images, on
/// the first repeat's originals and resample plan.
pub fn sweep_n_images(
    config: &ExperimentConfig,
    dataset: &Dataset,
    backend: &Backend<'_>,
) -> Result<SweepReport, ProtocolError> {
    config.validate()?;
    let k = dataset.uniform_k().ok_or(ProtocolError::NonUniformSeries)?;
    if let Some(&n) = config.sweep_n_extra.iter().find(|&&n| n + 1 > k) {
        return Err(ProtocolError::Config(format!(
            "sweep value {n} needs {} images per lesion, have {k}",
            n + 1
        )));
    }
    let ctx = RepeatContext::new(config.seed, 0);
    let assignments = downsample_all(dataset, &ctx);
    let plan = make_plan(config, dataset, &ctx)?;
    let mut rows = Vec::with_capacity(config.sweep_n_extra.len());
    for &n_extra in &config.sweep_n_extra {
        let method = MethodSpec::MvReal { n_extra };
        let scored = evaluate_method(&method, dataset, &assignments, backend, &ctx)?;
        let auroc = boot(&ctx, "auroc", &plan, |idx| metrics::auroc_indexed(&scored, idx))?;
        let ece = boot(&ctx, "ece", &plan, |idx| metrics::ece_indexed(&scored, idx, config.ece_bins))?;
        rows.push(SweepRow {
            n_extra,
            images: n_extra + 1,
            auroc: Summary::from(&auroc),
            ece: Summary::from(&ece),
        });
    }
    Ok(SweepReport {
        config: config.clone(),
        metadata: protocol_metadata(config, dataset, backend),
        plan_id: plan.id,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::NoRasters;
    use crate::model::{validate_dataset, Label};
    use crate::scorer::{ScoreTable, Scorer};

    fn assignment(k: usize, original: usize) -> SplitAssignment {
        SplitAssignment {
            lesion_id: "L".into(),
            original_index: original,
            set_aside_indices: (0..k).filter(|&i| i != original).collect(),
        }
    }

    #[test]
    fn downsample_examples() {
        let record = LesionRecord::with_score_keys("L", Label::Nevus, 6);
        let a = downsample(&record, &mut StreamKey::new(1, "d").rng());
        assert_eq!(a.set_aside_indices.len(), 5);
        assert!(!a.set_aside_indices.contains(&a.original_index));

        let single = LesionRecord::with_score_keys("L", Label::Nevus, 1);
        let a = downsample(&single, &mut StreamKey::new(1, "d").rng());
        assert_eq!((a.original_index, a.set_aside_indices.len()), (0, 0));
    }

    #[test]
    fn series_partition_all_images() {
        let mut rng = StreamKey::new(4, "s").rng();
        for (l, size) in [(2, 3), (3, 2)] {
            let s = build_robustness_series(&assignment(6, 2), l, &mut rng).unwrap();
            assert_eq!(s.bundles.len(), l);
            assert!(s.bundles.iter().all(|b| b.len() == size));
            let mut all: Vec<usize> = s.bundles.concat();
            all.sort_unstable();
            assert_eq!(all, (0..6).collect::<Vec<_>>());
        }
        assert!(matches!(
            build_robustness_series(&assignment(6, 0), 4, &mut rng),
            Err(ProtocolError::NonDivisibleSeriesLength { images: 6, series_length: 4 })
        ));
    }

    fn toy() -> (Dataset, Scorer) {
        let mut table = ScoreTable::new();
        let mut records = Vec::new();
        for i in 0..8 {
            let label = if i % 2 == 0 { Label::Melanoma } else { Label::Nevus };
            let id = format!("L{i}");
            for j in 0..6 {
                let base = if label == Label::Melanoma { 0.7 } else { 0.3 };
                table.insert(&id, j, Probability::new(base + (j as f64 - 2.5) * 0.04).unwrap());
            }
            records.push(LesionRecord::with_score_keys(id, label, 6));
        }
        (validate_dataset(records).unwrap(), Scorer::Table(table))
    }

    #[test]
    fn methods_share_originals() {
        let (ds, scorer) = toy();
        let backend = Backend::new(&scorer, &NoRasters);
        let ctx = RepeatContext::new(3, 0);
        let a = downsample_all(&ds, &ctx);
        let sv = evaluate_method(&MethodSpec::SingleView, &ds, &a, &backend, &ctx).unwrap();
        let mv = evaluate_method(&MethodSpec::MvReal { n_extra: 5 }, &ds, &a, &backend, &ctx).unwrap();
        assert_eq!(sv.len(), 8);
        for ((s, m), asg) in sv.iter().zip(&mv).zip(&a) {
            assert_eq!(s.lesion_id, m.lesion_id);
            let expected = scorer_value(&scorer, &s.lesion_id, asg.original_index);
            assert_eq!(s.prediction.value(), expected);
        }
        // All six images averaged: the symmetric offsets cancel.
        assert!(mv.iter().all(|m| (m.prediction.value() - 0.5).abs() > 0.19));
        assert_eq!(downsample_all(&ds, &ctx), a);
    }

    fn scorer_value(s: &Scorer, id: &str, i: usize) -> f64 {
        match s {
            Scorer::Table(t) => t.get(id, i).unwrap().value(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn sweep_zero_extra_matches_single_view() {
        let (ds, scorer) = toy();
        let backend = Backend::new(&scorer, &NoRasters);
        let config = ExperimentConfig {
            n_bootstrap: 50,
            methods: vec![MethodSpec::SingleView, MethodSpec::MvReal { n_extra: 5 }],
            sweep_n_extra: vec![0, 5],
            ..ExperimentConfig::default()
        };
        let sweep = sweep_n_images(&config, &ds, &backend).unwrap();
        let table = run_repeat(&config, &ds, &backend, 0).unwrap().table;
        assert_eq!(sweep.rows[0].auroc, table.rows[0].cells[0].summary);
        assert_eq!(sweep.rows[0].ece, table.rows[1].cells[0].summary);
        assert_eq!(sweep.rows[1].auroc, table.rows[0].cells[1].summary);
    }

    #[test]
    fn sweep_rejects_too_many_images() {
        let (ds, scorer) = toy();
        let backend = Backend::new(&scorer, &NoRasters);
        let config = ExperimentConfig {
            sweep_n_extra: vec![6],
            ..ExperimentConfig::default()
        };
        assert!(matches!(sweep_n_images(&config, &ds, &backend), Err(ProtocolError::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.adjusted_alpha(), 0.025);
        c.series_lengths = vec![1];
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            methods: vec![MethodSpec::SingleView, MethodSpec::SingleView],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
