//! The three prediction methods and their aggregation rule.
//!
//! Every method scores the lesion's original image; the multiview methods add
//! further images (generated or real) and average all predictions with equal
//! weight in probability space.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugSetup, Preset};
use crate::imageio::{self, ImageIoError, Preprocess};
use crate::model::{ImageRef, ImageSource, Probability};
use crate::raster::{Raster, RasterError};
use crate::scorer::{ScoreItem, Scorer, ScorerError};

/// Number of additional images the multiview methods use by default.
pub const DEFAULT_EXTRA_VIEWS: usize = 5;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("cannot average an empty list of predictions")]
    EmptyList,
    #[error("lesion {lesion_id:?} needs {needed} additional real images but has {available}")]
    InsufficientRealViews {
        lesion_id: String,
        needed: usize,
        available: usize,
    },
    #[error("image {0} has no raster to augment")]
    MissingRaster(String),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodSpec {
    SingleView,
    MvArtificial { setup: AugSetup, n_extra: usize },
    MvReal { n_extra: usize },
}

impl MethodSpec {
    pub fn mv_artificial(preset: Preset, n_extra: usize) -> Self {
        MethodSpec::MvArtificial {
            setup: AugSetup::preset(preset),
            n_extra,
        }
    }

    /// The three methods with their default configuration.
    pub fn defaults() -> Vec<MethodSpec> {
        vec![
            MethodSpec::SingleView,
            MethodSpec::mv_artificial(Preset::Mild, DEFAULT_EXTRA_VIEWS),
            MethodSpec::MvReal {
                n_extra: DEFAULT_EXTRA_VIEWS,
            },
        ]
    }

    pub fn n_extra(&self) -> usize {
        match self {
            MethodSpec::SingleView => 0,
            MethodSpec::MvArtificial { n_extra, .. } | MethodSpec::MvReal { n_extra } => *n_extra,
        }
    }

    pub fn is_mv_real(&self) -> bool {
        matches!(self, MethodSpec::MvReal { .. })
    }

    /// Column label used in reports.
    pub fn label(&self) -> String {
        match self {
            MethodSpec::SingleView => "Single-View".into(),
            MethodSpec::MvArtificial { setup, n_extra } => {
                if *setup == AugSetup::preset(Preset::Mild) && *n_extra == DEFAULT_EXTRA_VIEWS {
                    "MV-Artificial".into()
                } else {
                    format!("MV-Artificial ({}, n={n_extra})", setup.name)
                }
            }
            MethodSpec::MvReal { n_extra } if *n_extra == DEFAULT_EXTRA_VIEWS => "MV-Real".into(),
            MethodSpec::MvReal { n_extra } => format!("MV-Real (n={n_extra})"),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Unweighted arithmetic mean of the predictions.
///
/// Computed as an offset from the first value, so a list of identical
/// predictions averages to exactly that prediction.
pub fn aggregate_mean(scores: &[Probability]) -> Result<Probability, InferenceError> {
    let (first, rest) = scores.split_first().ok_or(InferenceError::EmptyList)?;
    let base = first.value();
    let offset: f64 = rest.iter().map(|p| p.value() - base).sum();
    Ok(Probability::clamped(base + offset / scores.len() as f64).expect("finite mean"))
}

/// Supplies pixels for stored images.
pub trait RasterProvider: Sync {
    /// `Ok(None)` when the image has no raster (e.g. score-table entries).
    fn raster(&self, image: &ImageRef) -> Result<Option<Arc<Raster>>, ImageIoError>;
}

/// For score-only datasets.
pub struct NoRasters;

impl RasterProvider for NoRasters {
    fn raster(&self, _: &ImageRef) -> Result<Option<Arc<Raster>>, ImageIoError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryRasters {
    rasters: HashMap<(String, usize), Arc<Raster>>,
}

impl InMemoryRasters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lesion_id: impl Into<String>, index: usize, raster: Raster) {
        self.rasters.insert((lesion_id.into(), index), Arc::new(raster));
    }

    pub fn len(&self) -> usize {
        self.rasters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rasters.is_empty()
    }

    pub fn get(&self, lesion_id: &str, index: usize) -> Option<&Raster> {
        self.rasters.get(&(lesion_id.to_string(), index)).map(Arc::as_ref)
    }
}

impl RasterProvider for InMemoryRasters {
    fn raster(&self, image: &ImageRef) -> Result<Option<Arc<Raster>>, ImageIoError> {
        Ok(self.rasters.get(&(image.lesion_id.clone(), image.index)).cloned())
    }
}

/// Loads and preprocesses rasters from disk on demand.
pub struct FileRasters {
    pub base_dir: Option<PathBuf>,
    pub preprocess: Preprocess,
}

impl RasterProvider for FileRasters {
    fn raster(&self, image: &ImageRef) -> Result<Option<Arc<Raster>>, ImageIoError> {
        match &image.source {
            ImageSource::ScoreKey => Ok(None),
            ImageSource::Path(p) => {
                let path = match &self.base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.clone(),
                };
                imageio::load_raster(&path, &self.preprocess).map(|r| Some(Arc::new(r)))
            }
        }
    }
}

/// A scorer paired with the source of pixels it may need.
#[derive(Clone, Copy)]
pub struct Backend<'a> {
    pub scorer: &'a Scorer,
    pub rasters: &'a dyn RasterProvider,
}

impl<'a> Backend<'a> {
    pub fn new(scorer: &'a Scorer, rasters: &'a dyn RasterProvider) -> Self {
        Self { scorer, rasters }
    }

    fn needs_pixels(&self, image: &ImageRef) -> bool {
        match self.scorer {
            Scorer::Builtin => true,
            Scorer::External(_) => !matches!(image.source, ImageSource::Path(_)),
            Scorer::Constant(_) | Scorer::Table(_) => false,
        }
    }

    pub fn stored_raster(&self, image: &ImageRef) -> Result<Option<Arc<Raster>>, ImageIoError> {
        if self.needs_pixels(image) {
            self.rasters.raster(image)
        } else {
            Ok(None)
        }
    }
}

/// An image ready to be scored.
pub enum PreparedView<'a> {
    Stored(&'a ImageRef, Option<Arc<Raster>>),
    Generated(&'a ImageRef, usize, Raster),
}

impl PreparedView<'_> {
    pub fn item(&self) -> ScoreItem<'_> {
        match self {
            PreparedView::Stored(image, raster) => ScoreItem::Stored {
                image,
                raster: raster.as_deref(),
            },
            PreparedView::Generated(origin, view, raster) => ScoreItem::Generated {
                origin,
                view: *view,
                raster,
            },
        }
    }
}

/// The images `method` scores for one lesion: the original first, then the
/// additional views. Artificial views are drawn from `rng`.
pub fn prepare_views<'a, R: Rng + ?Sized>(
    method: &MethodSpec,
    original: &'a ImageRef,
    extra_real: &[&'a ImageRef],
    backend: &Backend<'_>,
    rng: &mut R,
) -> Result<Vec<PreparedView<'a>>, InferenceError> {
    match method {
        MethodSpec::SingleView => Ok(vec![PreparedView::Stored(original, backend.stored_raster(original)?)]),
        MethodSpec::MvReal { n_extra } => {
            if extra_real.len() < *n_extra {
                return Err(InferenceError::InsufficientRealViews {
                    lesion_id: original.lesion_id.clone(),
                    needed: *n_extra,
                    available: extra_real.len(),
                });
            }
            std::iter::once(original)
                .chain(extra_real[..*n_extra].iter().copied())
                .map(|image| Ok(PreparedView::Stored(image, backend.stored_raster(image)?)))
                .collect()
        }
        MethodSpec::MvArtificial { setup, n_extra } => {
            let raster = backend
                .rasters
                .raster(original)?
                .ok_or_else(|| InferenceError::MissingRaster(original.to_string()))?;
            let generated = augment::generate_artificial_views(&raster, *n_extra, setup, rng)?;
            let mut views = Vec::with_capacity(n_extra + 1);
            views.push(PreparedView::Stored(
                original,
                backend.needs_pixels(original).then_some(raster),
            ));
            views.extend(
                generated
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| PreparedView::Generated(original, i, r)),
            );
            Ok(views)
        }
    }
}

/// Scores groups of prepared views with one scorer call and averages each group.
pub fn score_groups(groups: &[Vec<PreparedView<'_>>], backend: &Backend<'_>) -> Result<Vec<Probability>, InferenceError> {
    let items: Vec<ScoreItem<'_>> = groups.iter().flatten().map(PreparedView::item).collect();
    let scores = backend.scorer.score_batch(&items)?;
    let mut out = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for group in groups {
        out.push(aggregate_mean(&scores[offset..offset + group.len()])?);
        offset += group.len();
    }
    Ok(out)
}

/// Prediction of `method` for one lesion.
///
/// Single-View scores `original`; MV-Artificial averages it with `n_extra`
/// augmentations of it; MV-Real averages it with the first `n_extra` images of
/// `extra_real`.
pub fn predict<R: Rng + ?Sized>(
    method: &MethodSpec,
    original: &ImageRef,
    extra_real: &[ImageRef],
    backend: &Backend<'_>,
    rng: &mut R,
) -> Result<Probability, InferenceError> {
    let extra: Vec<&ImageRef> = extra_real.iter().collect();
    let views = prepare_views(method, original, &extra, backend, rng)?;
    Ok(score_groups(&[views], backend)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::scorer::ScoreTable;

    fn p(v: f64) -> Probability {
        Probability::new(v).unwrap()
    }

    fn table(scores: &[f64]) -> (Scorer, Vec<ImageRef>) {
        let mut t = ScoreTable::new();
        let refs = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                t.insert("L1", i, p(s));
                ImageRef::score_key("L1", i)
            })
            .collect();
        (Scorer::Table(t), refs)
    }

    #[test]
    fn mean_examples() {
        assert_eq!(aggregate_mean(&[p(0.3)]).unwrap(), p(0.3));
        assert!((aggregate_mean(&[p(0.2), p(0.4), p(0.6)]).unwrap().value() - 0.4).abs() < 1e-15);
        assert_eq!(aggregate_mean(&[p(0.0), p(1.0)]).unwrap(), p(0.5));
        assert!(matches!(aggregate_mean(&[]), Err(InferenceError::EmptyList)));
        assert_eq!(aggregate_mean(&[p(0.1); 6]).unwrap(), p(0.1));
    }

    #[test]
    fn single_view_passes_score_through() {
        let (scorer, refs) = table(&[0.7, 0.1]);
        let backend = Backend::new(&scorer, &NoRasters);
        let mut rng = StreamKey::new(0, "t").rng();
        let got = predict(&MethodSpec::SingleView, &refs[0], &refs[1..], &backend, &mut rng).unwrap();
        assert_eq!(got, p(0.7));
    }

    #[test]
    fn mv_real_averages_first_extras() {
        let (scorer, refs) = table(&[0.9, 0.6, 0.6, 0.0]);
        let backend = Backend::new(&scorer, &NoRasters);
        let mut rng = StreamKey::new(0, "t").rng();
        let got = predict(&MethodSpec::MvReal { n_extra: 2 }, &refs[0], &refs[1..], &backend, &mut rng).unwrap();
        assert!((got.value() - 0.7).abs() < 1e-15);

        let err = predict(&MethodSpec::MvReal { n_extra: 4 }, &refs[0], &refs[1..], &backend, &mut rng).unwrap_err();
        assert!(matches!(err, InferenceError::InsufficientRealViews { needed: 4, available: 3, .. }));
    }

    #[test]
    fn mv_real_with_duplicates_equals_single_view() {
        let (scorer, refs) = table(&[0.37; 6]);
        let backend = Backend::new(&scorer, &NoRasters);
        let mut rng = StreamKey::new(0, "t").rng();
        let single = predict(&MethodSpec::SingleView, &refs[0], &refs[1..], &backend, &mut rng).unwrap();
        let multi = predict(&MethodSpec::MvReal { n_extra: 5 }, &refs[0], &refs[1..], &backend, &mut rng).unwrap();
        assert_eq!(single, multi);
    }

    #[test]
    fn disabled_augmentation_equals_single_view() {
        let image = ImageRef::score_key("L", 0);
        let mut rasters = InMemoryRasters::new();
        rasters.insert("L", 0, Raster::from_fn(7, 7, |x, y, c| ((x * 3 + y + c) % 9) as f32 / 8.0));
        let backend = Backend::new(&Scorer::Builtin, &rasters);
        let mut rng = StreamKey::new(0, "t").rng();
        let single = predict(&MethodSpec::SingleView, &image, &[], &backend, &mut rng).unwrap();
        for n_extra in [0, 1, 5, 9] {
            let method = MethodSpec::MvArtificial {
                setup: AugSetup::disabled(Preset::Severe),
                n_extra,
            };
            assert_eq!(predict(&method, &image, &[], &backend, &mut rng).unwrap(), single);
        }
    }

    #[test]
    fn mv_artificial_needs_pixels() {
        let (scorer, refs) = table(&[0.5]);
        let backend = Backend::new(&scorer, &NoRasters);
        let mut rng = StreamKey::new(0, "t").rng();
        let err = predict(&MethodSpec::mv_artificial(Preset::Mild, 5), &refs[0], &[], &backend, &mut rng).unwrap_err();
        assert!(matches!(err, InferenceError::MissingRaster(_)));
    }

    #[test]
    fn labels() {
        let labels: Vec<String> = MethodSpec::defaults().iter().map(MethodSpec::label).collect();
        assert_eq!(labels, ["Single-View", "MV-Artificial", "MV-Real"]);
        assert_eq!(MethodSpec::MvReal { n_extra: 2 }.label(), "MV-Real (n=2)");
        assert_eq!(MethodSpec::mv_artificial(Preset::Strong, 5).label(), "MV-Artificial (strong, n=5)");
    }
}
