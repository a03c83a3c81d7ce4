//! Manifests, score tables, configuration files and report emission.
//!
//! Manifest format: comma-separated text with a header containing
//! `lesion_id,image_index,label,source`. `source` is a raster path or the
//! sentinel `scores`. Any further columns become lesion metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::imageio::{self, ImageIoError, Preprocess};
use crate::inference::InMemoryRasters;
use crate::model::{validate_dataset, Dataset, ImageRef, ImageSource, Label, LesionRecord, Probability, ValidationError};
use crate::report::{ExperimentReport, SweepReport};
use crate::scorer::ScoreTable;
use crate::synth::SynthDataset;

pub const SCORES_SENTINEL: &str = "scores";
pub const MANIFEST_COLUMNS: [&str; 4] = ["lesion_id", "image_index", "label", "source"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: String, column: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationError>),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn column_map(path: &Path, headers: &csv::StringRecord, required: &[&str]) -> Result<HashMap<String, usize>, IoError> {
    let map: HashMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
    for col in required {
        if !map.contains_key(*col) {
            return Err(IoError::MissingColumn {
                path: path.display().to_string(),
                column: col.to_string(),
            });
        }
    }
    Ok(map)
}

fn parse_error(path: &Path, record: &csv::StringRecord, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line: record.position().map_or(0, |p| p.line()),
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Reads and validates a manifest. Lesions keep the order of their first
/// row; images are ordered by index.
pub fn parse_manifest(path: &Path) -> Result<Dataset, IoError> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = column_map(path, &headers, &MANIFEST_COLUMNS)?;
    let extra: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !MANIFEST_COLUMNS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut lesions: HashMap<String, LesionRecord> = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let field = |name: &str| row.get(cols[name]).unwrap_or("");
        let lesion_id = field("lesion_id").to_string();
        if lesion_id.is_empty() {
            return Err(parse_error(path, &row, "empty lesion_id"));
        }
        let index: usize = field("image_index")
            .parse()
            .map_err(|_| parse_error(path, &row, format!("bad image_index {:?}", field("image_index"))))?;
        let label: Option<Label> = field("label").parse().ok();
        let source = match field("source") {
            SCORES_SENTINEL => ImageSource::ScoreKey,
            "" => return Err(parse_error(path, &row, "empty source")),
            p => ImageSource::Path(PathBuf::from(p)),
        };
        let record = lesions.entry(lesion_id.clone()).or_insert_with(|| {
            order.push(lesion_id.clone());
            let metadata: BTreeMap<String, String> = extra
                .iter()
                .filter_map(|(i, name)| row.get(*i).filter(|v| !v.is_empty()).map(|v| (name.clone(), v.to_string())))
                .collect();
            LesionRecord {
                lesion_id: lesion_id.clone(),
                label,
                images: Vec::new(),
                metadata,
            }
        });
        if record.label != label {
            return Err(parse_error(path, &row, format!("conflicting labels for lesion {lesion_id:?}")));
        }
        record.images.push(ImageRef {
            lesion_id,
            index,
            source,
        });
    }
    let records = order
        .into_iter()
        .map(|id| {
            let mut r = lesions.remove(&id).expect("every ordered id was inserted");
            r.images.sort_by_key(|i| i.index);
            r
        })
        .collect();
    validate_dataset(records).map_err(IoError::Validation)
}

pub fn manifest_text(dataset: &Dataset) -> String {
    let keys: Vec<String> = {
        let mut k: Vec<String> = dataset
            .records()
            .iter()
            .flat_map(|r| r.metadata.keys().cloned())
            .collect();
        k.sort();
        k.dedup();
        k
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = MANIFEST_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(keys.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for r in dataset.records() {
        let label = r.label.map_or("", Label::as_str);
        for img in &r.images {
            let source = match &img.source {
                ImageSource::ScoreKey => SCORES_SENTINEL.to_string(),
                ImageSource::Path(p) => p.display().to_string(),
            };
            let mut row = vec![img.lesion_id.clone(), img.index.to_string(), label.to_string(), source];
            row.extend(keys.iter().map(|k| r.metadata.get(k).cloned().unwrap_or_default()));
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 input")
}

pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<(), IoError> {
    fs::write(path, manifest_text(dataset)).map_err(io_err(path))
}

pub fn read_score_table(path: &Path) -> Result<ScoreTable, IoError> {
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = column_map(path, &headers, &["lesion_id", "image_index", "score"])?;
    let mut table = ScoreTable::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let field = |name: &str| row.get(cols[name]).unwrap_or("");
        let index: usize = field("image_index")
            .parse()
            .map_err(|_| parse_error(path, &row, "bad image_index"))?;
        let score = field("score")
            .parse::<f64>()
            .ok()
            .and_then(|v| Probability::new(v).ok())
            .ok_or_else(|| parse_error(path, &row, format!("bad score {:?}", field("score"))))?;
        table.insert(field("lesion_id"), index, score);
    }
    Ok(table)
}

/// Scores are written with shortest round-trip formatting.
pub fn score_table_text(table: &ScoreTable) -> String {
    let mut out = String::from("lesion_id,image_index,score\n");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for (id, index, p) in table.iter() {
        w.write_record([id, &index.to_string(), &p.value().to_string()])
            .expect("in-memory write");
    }
    out.push_str(std::str::from_utf8(&w.into_inner().expect("flush")).expect("utf-8"));
    out
}

pub fn write_score_table(table: &ScoreTable, path: &Path) -> Result<(), IoError> {
    fs::write(path, score_table_text(table)).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn json_text<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    fs::write(path, json_text(value)).map_err(io_err(path))
}

/// Loads and preprocesses every raster of the dataset. Relative paths are
/// resolved against `base_dir`.
pub fn load_rasters(dataset: &Dataset, base_dir: Option<&Path>, opts: &Preprocess) -> Result<InMemoryRasters, IoError> {
    let images: Vec<&ImageRef> = dataset.records().iter().flat_map(|r| &r.images).collect();
    type Loaded = Option<(String, usize, crate::raster::Raster)>;
    let loaded: Vec<Result<Loaded, ImageIoError>> = images
        .par_iter()
        .map(|img| match &img.source {
            ImageSource::ScoreKey => Ok(None),
            ImageSource::Path(p) => {
                let path = match base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.clone(),
                };
                imageio::load_raster(&path, opts).map(|r| Some((img.lesion_id.clone(), img.index, r)))
            }
        })
        .collect();
    let mut store = InMemoryRasters::new();
    for item in loaded {
        if let Some((id, index, raster)) = item? {
            store.insert(id, index, raster);
        }
    }
    Ok(store)
}

/// Rewrites relative raster paths as `base_dir`-joined paths.
pub fn resolve_sources(dataset: Dataset, base_dir: &Path) -> Dataset {
    let records = dataset
        .into_records()
        .into_iter()
        .map(|mut r| {
            for img in &mut r.images {
                if let ImageSource::Path(p) = &img.source {
                    if p.is_relative() {
                        img.source = ImageSource::Path(base_dir.join(p));
                    }
                }
            }
            r
        })
        .collect();
    validate_dataset(records).expect("path rewriting keeps a valid dataset valid")
}

/// Writes `manifest.csv`, `scores.csv` and `truth.json` into `dir`. With
/// rasters, each image is also written to `images/` and the manifest points
/// at those files.
pub fn write_synth(synth: &SynthDataset, dir: &Path) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let dataset = match &synth.rasters {
        None => synth.dataset.clone(),
        Some(rasters) => {
            let images = dir.join("images");
            fs::create_dir_all(&images).map_err(io_err(&images))?;
            let mut records = synth.dataset.clone().into_records();
            for r in &mut records {
                for img in &mut r.images {
                    let rel = PathBuf::from("images").join(format!("{}_{}.png", img.lesion_id, img.index));
                    let raster = rasters
                        .get(&img.lesion_id, img.index)
                        .expect("raster-backed synth has a raster per image");
                    imageio::save_png(raster, &dir.join(&rel))?;
                    img.source = ImageSource::Path(rel);
                }
            }
            validate_dataset(records).map_err(IoError::Validation)?
        }
    };
    let paths = vec![dir.join("manifest.csv"), dir.join("scores.csv"), dir.join("truth.json")];
    write_manifest(&dataset, &paths[0])?;
    write_score_table(&synth.scores, &paths[1])?;
    write_json(&synth.truth, &paths[2])?;
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv];

    fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

fn write_all(dir: &Path, stem: &str, files: Vec<(ReportFormat, String)>) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    files
        .into_iter()
        .map(|(format, text)| {
            let path = dir.join(format!("{stem}.{}", format.extension()));
            fs::write(&path, text).map_err(io_err(&path))?;
            Ok(path)
        })
        .collect()
}

/// Writes `report.{json,md,csv}` (as requested) into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, IoError> {
    let files = formats
        .iter()
        .map(|&f| {
            let text = match f {
                ReportFormat::Json => json_text(report),
                ReportFormat::Markdown => report.to_markdown(),
                ReportFormat::Csv => report.to_csv(),
            };
            (f, text)
        })
        .collect();
    write_all(dir, "report", files)
}

pub fn emit_sweep(report: &SweepReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, IoError> {
    let files = formats
        .iter()
        .map(|&f| {
            let text = match f {
                ReportFormat::Json => json_text(report),
                ReportFormat::Markdown => report.to_markdown(),
                ReportFormat::Csv => report.to_csv(),
            };
            (f, text)
        })
        .collect();
    write_all(dir, "sweep", files)
}
