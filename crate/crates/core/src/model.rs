//! Domain types shared across the harness and dataset validation.
//!
//! Melanoma is the positive class everywhere: every [`Probability`] is a
//! melanoma probability.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A melanoma probability in `[0, 1]`. NaN is rejected at construction.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Probability(f64);

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("invalid probability {0}: must be finite and within [0, 1]")]
pub struct InvalidProbability(pub f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self, InvalidProbability> {
        if value.is_finite() && (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(InvalidProbability(value))
        }
    }

    /// Clamps a finite value into `[0, 1]`.
    pub fn clamped(value: f64) -> Result<Self, InvalidProbability> {
        if value.is_finite() {
            Ok(Self(value.clamp(0.0, 1.0)))
        } else {
            Err(InvalidProbability(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The probability of the other class.
    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }
}

impl<'de> Deserialize<'de> for Probability {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Probability::new(v).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Melanoma,
    Nevus,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Melanoma)
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Melanoma => Label::Nevus,
            Label::Nevus => Label::Melanoma,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Melanoma => "melanoma",
            Label::Nevus => "nevus",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "melanoma" | "mel" | "1" => Ok(Label::Melanoma),
            "nevus" | "nev" | "0" => Ok(Label::Nevus),
            other => Err(other.to_string()),
        }
    }
}

/// Where an image's prediction comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// A raster file on disk.
    Path(PathBuf),
    /// A precomputed score looked up by `(lesion_id, index)`.
    ScoreKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub lesion_id: String,
    pub index: usize,
    pub source: ImageSource,
}

impl ImageRef {
    pub fn score_key(lesion_id: impl Into<String>, index: usize) -> Self {
        Self {
            lesion_id: lesion_id.into(),
            index,
            source: ImageSource::ScoreKey,
        }
    }

    pub fn key(&self) -> (&str, usize) {
        (&self.lesion_id, self.index)
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.lesion_id, self.index)
    }
}

/// One histopathologically labeled lesion and its ordered image series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    /// `None` only for records built from unparseable input; validation rejects it.
    pub label: Option<Label>,
    pub images: Vec<ImageRef>,
    /// Descriptive only, never read by any computation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl LesionRecord {
    pub fn new(lesion_id: impl Into<String>, label: Label, images: Vec<ImageRef>) -> Self {
        Self {
            lesion_id: lesion_id.into(),
            label: Some(label),
            images,
            metadata: BTreeMap::new(),
        }
    }

    /// A record whose `k` images are all score-table keys.
    pub fn with_score_keys(lesion_id: impl Into<String>, label: Label, k: usize) -> Self {
        let id: String = lesion_id.into();
        let images = (0..k).map(|i| ImageRef::score_key(id.clone(), i)).collect();
        Self::new(id, label, images)
    }

    pub fn k(&self) -> usize {
        self.images.len()
    }
}

/// Which image plays "original" for a lesion in one repeat, and which were set aside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub lesion_id: String,
    pub original_index: usize,
    pub set_aside_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("duplicate lesion id {0:?}")]
    DuplicateLesionId(String),
    #[error("lesion {lesion_id:?}: image indices {found:?} are not the contiguous range 0..{expected}")]
    NonContiguousIndices {
        lesion_id: String,
        found: Vec<usize>,
        expected: usize,
    },
    #[error("lesion {0:?} has no images")]
    EmptySeries(String),
    #[error("lesion {0:?} has no recognised label")]
    UnknownLabel(String),
    #[error("lesion {lesion_id:?}: image {index} is attributed to lesion {found:?}")]
    ForeignImage {
        lesion_id: String,
        index: usize,
        found: String,
    },
}

/// A dataset whose records passed [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    records: Vec<LesionRecord>,
}

impl Dataset {
    pub fn records(&self) -> &[LesionRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LesionRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels in record order.
    pub fn labels(&self) -> Vec<Label> {
        self.records
            .iter()
            .map(|r| r.label.expect("validated record has a label"))
            .collect()
    }

    /// The common series length, if every lesion has the same number of images.
    pub fn uniform_k(&self) -> Option<usize> {
        let first = self.records.first()?.k();
        self.records.iter().all(|r| r.k() == first).then_some(first)
    }

    pub fn get(&self, lesion_id: &str) -> Option<&LesionRecord> {
        self.records.iter().find(|r| r.lesion_id == lesion_id)
    }
}

/// Checks every record invariant and returns all violations, not just the first.
pub fn validate_dataset(records: Vec<LesionRecord>) -> Result<Dataset, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut duplicates = BTreeSet::new();

    for record in &records {
        let count = seen.entry(record.lesion_id.as_str()).or_default();
        *count += 1;
        if *count == 2 {
            duplicates.insert(record.lesion_id.clone());
        }
        if record.label.is_none() {
            errors.push(ValidationError::UnknownLabel(record.lesion_id.clone()));
        }
        if record.images.is_empty() {
            errors.push(ValidationError::EmptySeries(record.lesion_id.clone()));
            continue;
        }
        for image in &record.images {
            if image.lesion_id != record.lesion_id {
                errors.push(ValidationError::ForeignImage {
                    lesion_id: record.lesion_id.clone(),
                    index: image.index,
                    found: image.lesion_id.clone(),
                });
            }
        }
        let found: Vec<usize> = record.images.iter().map(|i| i.index).collect();
        if found.iter().enumerate().any(|(pos, &idx)| pos != idx) {
            errors.push(ValidationError::NonContiguousIndices {
                lesion_id: record.lesion_id.clone(),
                found,
                expected: record.images.len(),
            });
        }
    }
    errors.extend(duplicates.into_iter().map(ValidationError::DuplicateLesionId));

    if errors.is_empty() {
        Ok(Dataset { records })
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesion(id: &str, k: usize) -> LesionRecord {
        LesionRecord::with_score_keys(id, Label::Melanoma, k)
    }

    #[test]
    fn well_formed_dataset_validates() {
        let ds = validate_dataset(vec![lesion("L1", 6), lesion("L2", 6)]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.uniform_k(), Some(6));
    }

    #[test]
    fn empty_series_is_reported() {
        let errs = validate_dataset(vec![lesion("L1", 0)]).unwrap_err();
        assert_eq!(errs, vec![ValidationError::EmptySeries("L1".into())]);
    }

    #[test]
    fn duplicate_ids_are_reported() {
        let errs = validate_dataset(vec![lesion("L1", 2), lesion("L1", 2)]).unwrap_err();
        assert_eq!(errs, vec![ValidationError::DuplicateLesionId("L1".into())]);
    }

    #[test]
    fn every_violation_is_reported() {
        let mut gap = lesion("L2", 3);
        gap.images[2].index = 5;
        let mut unlabeled = lesion("L3", 1);
        unlabeled.label = None;
        let records = vec![lesion("L1", 0), gap, unlabeled, lesion("L4", 1), lesion("L4", 1)];
        let errs = validate_dataset(records).unwrap_err();
        assert_eq!(errs.len(), 4);
        assert!(matches!(errs[1], ValidationError::NonContiguousIndices { .. }));
        assert!(matches!(errs[2], ValidationError::UnknownLabel(_)));
    }

    #[test]
    fn validation_is_idempotent() {
        let ds = validate_dataset(vec![lesion("a", 3), lesion("b", 1)]).unwrap();
        let again = validate_dataset(ds.clone().into_records()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn probability_rejects_nan_and_out_of_range() {
        assert!(Probability::new(f64::NAN).is_err());
        assert!(Probability::new(1.5).is_err());
        assert!(Probability::new(-0.1).is_err());
        assert_eq!(Probability::clamped(1.2).unwrap().value(), 1.0);
        assert!(serde_json::from_str::<Probability>("2.0").is_err());
    }
}
