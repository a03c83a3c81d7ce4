//! Synthetic datasets with known ground truth.
//!
//! Each lesion has a latent melanoma probability `theta`, drawn from a
//! mixture of a nevus-leaning and a mirrored melanoma-leaning Beta. Its images are
//! independent noisy views of `theta`: `p_i = clamp(theta + N(0, sigma))`.
//! In the calibrated mode the label is drawn as `Bernoulli(theta)`, so the
//! noise-free score is perfectly calibrated. With `sigma > 0` a single view
//! is miscalibrated (regression dilution) and averaging views moves
//! predictions back towards `theta`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::InMemoryRasters;
use crate::metrics::{auroc, ScoredLesion};
use crate::model::{validate_dataset, Dataset, Label, LesionRecord, Probability};
use crate::raster::Raster;
use crate::rng::StreamKey;
use crate::scorer::{builtin_uniform_value, ScoreTable, BUILTIN_BIAS};

/// Seed of the Monte Carlo stream used for the population AUROC, so the
/// reported truth depends on the `SynthSpec` only.
const POPULATION_SEED: u64 = 0x5EED_A0C0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    ScoreOnly,
    /// Uniform rasters whose builtin score is the view probability.
    RasterBacked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibration {
    PerfectlyCalibrated,
    /// Every view scores `confidence`; a fraction `accuracy` of lesions carries
    /// the label the prediction agrees with.
    ConstantOverconfident { confidence: f64, accuracy: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_lesions: usize,
    pub images_per_lesion: usize,
    /// Mean of the nevus-leaning latent component; the melanoma-leaning one
    /// mirrors it at `1 - latent_mean`.
    pub latent_mean: f64,
    /// Beta concentration (`alpha + beta`) of each latent component.
    pub latent_concentration: f64,
    /// Share of lesions drawn from the melanoma-leaning component.
    pub melanoma_share: f64,
    /// Standard deviation of the per-view additive noise.
    pub noise_sigma: f64,
    pub mode: SynthMode,
    pub calibration: Calibration,
    /// Side length of generated rasters in `RasterBacked` mode.
    pub raster_size: usize,
    /// Lesions sampled for the Monte Carlo population AUROC.
    pub population_samples: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_lesions: 656,
            images_per_lesion: 6,
            latent_mean: 0.15,
            latent_concentration: 16.0,
            melanoma_share: 0.5,
            noise_sigma: 0.15,
            mode: SynthMode::ScoreOnly,
            calibration: Calibration::PerfectlyCalibrated,
            raster_size: 16,
            population_samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid synthetic spec: {0}")]
pub struct InvalidSpec(pub String);

impl SynthSpec {
    pub fn validate(&self) -> Result<(), InvalidSpec> {
        let bad = |m: &str| Err(InvalidSpec(m.into()));
        if self.n_lesions < 2 {
            return bad("need at least 2 lesions");
        }
        if self.images_per_lesion == 0 {
            return bad("need at least 1 image per lesion");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        if !(self.latent_mean > 0.0 && self.latent_mean < 1.0) {
            return bad("latent mean must lie in (0, 1)");
        }
        if !(self.latent_concentration > 0.0 && self.latent_concentration.is_finite()) {
            return bad("latent concentration must be positive");
        }
        if !(0.0..=1.0).contains(&self.melanoma_share) {
            return bad("melanoma share must lie in [0, 1]");
        }
        if self.mode == SynthMode::RasterBacked && self.raster_size == 0 {
            return bad("raster size must be positive");
        }
        if let Calibration::ConstantOverconfident { confidence, accuracy } = self.calibration {
            if !(0.0..=1.0).contains(&confidence) || !(0.0..=1.0).contains(&accuracy) {
                return bad("confidence and accuracy must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Range view probabilities are clamped to. Raster-backed views must stay
    /// strictly inside what a uniform raster can encode.
    fn clamp_range(&self) -> (f64, f64) {
        match self.mode {
            SynthMode::ScoreOnly => (0.0, 1.0),
            SynthMode::RasterBacked => {
                let edge = 1.0 / (1.0 + (-BUILTIN_BIAS).exp());
                (edge * 2.0, 1.0 - edge * 2.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Latent probability per lesion, in dataset order.
    pub theta: Vec<f64>,
    /// AUROC of a single noisy view against the label, over the generator's
    /// population (Monte Carlo estimate for the calibrated mode).
    pub population_auroc: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Intended score of every image.
    pub scores: ScoreTable,
    /// Present in `RasterBacked` mode.
    pub rasters: Option<InMemoryRasters>,
    pub truth: GroundTruth,
}

struct Sampler {
    low: Beta<f64>,
    high: Beta<f64>,
    melanoma_share: f64,
    noise: Normal<f64>,
    lo: f64,
    hi: f64,
}

impl Sampler {
    fn new(spec: &SynthSpec) -> Self {
        let (lo, hi) = spec.clamp_range();
        let a = spec.latent_mean * spec.latent_concentration;
        let b = (1.0 - spec.latent_mean) * spec.latent_concentration;
        Self {
            low: Beta::new(a, b).expect("validated latent parameters"),
            high: Beta::new(b, a).expect("validated latent parameters"),
            melanoma_share: spec.melanoma_share,
            noise: Normal::new(0.0, spec.noise_sigma).expect("validated sigma"),
            lo,
            hi,
        }
    }

    fn theta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random_bool(self.melanoma_share) {
            self.high.sample(rng)
        } else {
            self.low.sample(rng)
        }
    }

    fn view<R: Rng + ?Sized>(&self, theta: f64, rng: &mut R) -> f64 {
        (theta + self.noise.sample(rng)).clamp(self.lo, self.hi)
    }
}

/// Monte Carlo AUROC of one noisy view in the calibrated mode.
pub fn population_auroc(spec: &SynthSpec) -> f64 {
    let sampler = Sampler::new(spec);
    let mut rng = StreamKey::new(POPULATION_SEED, "population-auroc").rng();
    let mut items = Vec::with_capacity(spec.population_samples);
    for i in 0..spec.population_samples.max(2) {
        let theta = sampler.theta(&mut rng);
        let label = if rng.random_bool(theta) { Label::Melanoma } else { Label::Nevus };
        let p = sampler.view(theta, &mut rng);
        items.push(ScoredLesion::new(i.to_string(), label, Probability::new(p).expect("clamped")));
    }
    auroc(&items).unwrap_or(0.5)
}

pub fn generate<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<SynthDataset, InvalidSpec> {
    spec.validate()?;
    let n = spec.n_lesions;
    let k = spec.images_per_lesion;
    let sampler = Sampler::new(spec);

    let (theta, labels, views): (Vec<f64>, Vec<Label>, Vec<Vec<f64>>) = match spec.calibration {
        Calibration::PerfectlyCalibrated => {
            let mut theta = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            let mut views = Vec::with_capacity(n);
            for _ in 0..n {
                let t = sampler.theta(rng);
                labels.push(if rng.random_bool(t) { Label::Melanoma } else { Label::Nevus });
                views.push((0..k).map(|_| sampler.view(t, rng)).collect());
                theta.push(t);
            }
            (theta, labels, views)
        }
        Calibration::ConstantOverconfident { confidence, accuracy } => {
            let agreeing = if confidence >= 0.5 { Label::Melanoma } else { Label::Nevus };
            let n_correct = (accuracy * n as f64).round() as usize;
            let mut labels: Vec<Label> = (0..n)
                .map(|i| if i < n_correct { agreeing } else { agreeing.flipped() })
                .collect();
            labels.shuffle(rng);
            let p = confidence.clamp(sampler.lo, sampler.hi);
            (vec![confidence; n], labels, vec![vec![p; k]; n])
        }
    };
    if !labels.contains(&Label::Melanoma) || !labels.contains(&Label::Nevus) {
        return Err(InvalidSpec("generated labels contain a single class".into()));
    }

    let mut scores = ScoreTable::new();
    let mut rasters = (spec.mode == SynthMode::RasterBacked).then(InMemoryRasters::new);
    let mut records = Vec::with_capacity(n);
    for (i, (label, lesion_views)) in labels.iter().zip(&views).enumerate() {
        let id = format!("S{i:05}");
        for (j, &p) in lesion_views.iter().enumerate() {
            scores.insert(id.clone(), j, Probability::new(p).expect("clamped view"));
            if let Some(store) = rasters.as_mut() {
                let v = builtin_uniform_value(p).expect("view inside encodable range");
                store.insert(id.clone(), j, Raster::filled(spec.raster_size, spec.raster_size, v as f32));
            }
        }
        records.push(LesionRecord::with_score_keys(id, *label, k));
    }
    let dataset = validate_dataset(records).map_err(|e| InvalidSpec(format!("{e:?}")))?;

    let population_auroc = match spec.calibration {
        Calibration::PerfectlyCalibrated => population_auroc(spec),
        Calibration::ConstantOverconfident { .. } => 0.5,
    };
    Ok(SynthDataset {
        dataset,
        scores,
        rasters,
        truth: GroundTruth {
            theta,
            population_auroc,
            noise_sigma: spec.noise_sigma,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ece;

    fn small(sigma: f64) -> SynthSpec {
        SynthSpec {
            n_lesions: 200,
            noise_sigma: sigma,
            population_samples: 20_000,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_noise_views_are_identical() {
        let out = generate(&small(0.0), &mut StreamKey::new(1, "s").rng()).unwrap();
        for r in out.dataset.records() {
            let first = out.scores.get(&r.lesion_id, 0).unwrap();
            assert!((1..6).all(|j| out.scores.get(&r.lesion_id, j).unwrap() == first));
        }
    }

    #[test]
    fn constant_overconfident_has_forced_accuracy() {
        let spec = SynthSpec {
            n_lesions: 1000,
            calibration: Calibration::ConstantOverconfident {
                confidence: 0.9,
                accuracy: 0.5,
            },
            ..small(0.1)
        };
        let out = generate(&spec, &mut StreamKey::new(2, "s").rng()).unwrap();
        let items: Vec<ScoredLesion> = out
            .dataset
            .records()
            .iter()
            .map(|r| ScoredLesion::new(&r.lesion_id, r.label.unwrap(), out.scores.get(&r.lesion_id, 0).unwrap()))
            .collect();
        assert!((ece(&items, 10).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn raster_backed_views_encode_scores() {
        let spec = SynthSpec {
            n_lesions: 20,
            mode: SynthMode::RasterBacked,
            raster_size: 4,
            ..small(0.2)
        };
        let out = generate(&spec, &mut StreamKey::new(3, "s").rng()).unwrap();
        let rasters = out.rasters.as_ref().unwrap();
        assert_eq!(rasters.len(), 20 * 6);
        for r in out.dataset.records() {
            for j in 0..6 {
                let want = out.scores.get(&r.lesion_id, j).unwrap().value();
                let got = crate::scorer::builtin_score(rasters.get(&r.lesion_id, j).unwrap()).value();
                assert!((want - got).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small(0.1);
        spec.noise_sigma = -1.0;
        assert!(generate(&spec, &mut StreamKey::new(0, "s").rng()).is_err());
        spec = small(0.1);
        spec.n_lesions = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate(&small(0.15), &mut StreamKey::new(5, "s").rng()).unwrap();
        let b = generate(&small(0.15), &mut StreamKey::new(5, "s").rng()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.truth, b.truth);
    }
}
