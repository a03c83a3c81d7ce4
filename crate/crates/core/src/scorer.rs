//! The classifier boundary: anything that turns an image into a melanoma
//! probability.
//!
//! Three backends are available: a deterministic builtin model over simple
//! image statistics, a precomputed score table, and an external process that
//! reads raster paths on stdin and answers one probability per line.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio;
use crate::model::{ImageRef, ImageSource, Probability};
use crate::raster::{Raster, CHANNELS};

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("no score for lesion {lesion_id:?} image {index}")]
    MissingScore { lesion_id: String, index: usize },
    #[error("image {0} has no raster but the scorer needs pixels")]
    MissingRaster(String),
    #[error("generated view {view} of image {origin} cannot be scored by a score table")]
    GeneratedView { origin: String, view: usize },
    #[error("scorer protocol error: {0}")]
    Protocol(String),
    #[error("scorer produced non-finite score {value} for {image}")]
    NonFiniteScore { image: String, value: f64 },
    #[error("scorer I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// One image to score.
#[derive(Debug, Clone, Copy)]
pub enum ScoreItem<'a> {
    /// A stored image of the dataset, with its raster when one is loaded.
    Stored {
        image: &'a ImageRef,
        raster: Option<&'a Raster>,
    },
    /// The `view`-th artificial view generated from `origin`.
    Generated {
        origin: &'a ImageRef,
        view: usize,
        raster: &'a Raster,
    },
}

impl ScoreItem<'_> {
    pub fn raster(&self) -> Option<&Raster> {
        match self {
            ScoreItem::Stored { raster, .. } => *raster,
            ScoreItem::Generated { raster, .. } => Some(raster),
        }
    }

    fn describe(&self) -> String {
        match self {
            ScoreItem::Stored { image, .. } => image.to_string(),
            ScoreItem::Generated { origin, view, .. } => format!("{origin}/view{view}"),
        }
    }
}

/// How a scorer is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    Builtin,
    ExternalProcess {
        command: Vec<String>,
        #[serde(default)]
        workdir: Option<PathBuf>,
    },
    ScoreTable {
        path: PathBuf,
    },
}

impl ScorerSpec {
    pub fn build(&self) -> Result<Scorer, crate::io::IoError> {
        Ok(match self {
            ScorerSpec::Builtin => Scorer::Builtin,
            ScorerSpec::ExternalProcess { command, workdir } => {
                Scorer::External(ExternalScorer::new(command.clone(), workdir.clone()))
            }
            ScorerSpec::ScoreTable { path } => Scorer::Table(crate::io::read_score_table(path)?),
        })
    }
}

/// Precomputed probabilities keyed by `(lesion_id, image index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: BTreeMap<(String, usize), Probability>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lesion_id: impl Into<String>, index: usize, p: Probability) {
        self.scores.insert((lesion_id.into(), index), p);
    }

    pub fn get(&self, lesion_id: &str, index: usize) -> Option<Probability> {
        // BTreeMap lookups with a borrowed tuple need an owned key.
        self.scores.get(&(lesion_id.to_string(), index)).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize, Probability)> {
        self.scores.iter().map(|((id, i), p)| (id.as_str(), *i, *p))
    }

    pub fn lookup(&self, image: &ImageRef) -> Result<Probability, ScorerError> {
        self.get(&image.lesion_id, image.index)
            .ok_or_else(|| ScorerError::MissingScore {
                lesion_id: image.lesion_id.clone(),
                index: image.index,
            })
    }
}

/// Weights of the builtin model, applied to
/// `(mean, std, mean_r, mean_g, mean_b, center - border contrast)`.
pub const BUILTIN_WEIGHTS: [f64; 6] = [6.0, 2.0, 3.0, 1.0, 2.0, -3.0];
pub const BUILTIN_BIAS: f64 = -6.0;

/// Lipschitz constant of [`builtin_score`] with respect to the largest
/// absolute change of any single pixel value.
///
/// The mean, std and channel means move by at most that change, the contrast
/// by at most twice it, and the logistic slope never exceeds 1/4.
pub fn builtin_lipschitz() -> f64 {
    let w = BUILTIN_WEIGHTS;
    (w[0].abs() + w[1].abs() + w[2].abs() + w[3].abs() + w[4].abs() + 2.0 * w[5].abs()) / 4.0
}

/// Sum of the weights seen by a uniform raster (mean plus channel means).
pub fn builtin_uniform_gain() -> f64 {
    BUILTIN_WEIGHTS[0] + BUILTIN_WEIGHTS[2] + BUILTIN_WEIGHTS[3] + BUILTIN_WEIGHTS[4]
}

/// Uniform pixel value whose builtin score equals `p`, if one exists in `[0, 1]`.
pub fn builtin_uniform_value(p: f64) -> Option<f64> {
    if !(p > 0.0 && p < 1.0) {
        return None;
    }
    let v = ((p / (1.0 - p)).ln() - BUILTIN_BIAS) / builtin_uniform_gain();
    (0.0..=1.0).contains(&v).then_some(v)
}

/// Image statistics consumed by the builtin model.
pub fn builtin_features(img: &Raster) -> [f64; 6] {
    let (w, h) = (img.width(), img.height());
    let data = img.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut channel = [0.0; CHANNELS];
    for px in data.chunks_exact(CHANNELS) {
        for (acc, &v) in channel.iter_mut().zip(px) {
            *acc += v as f64;
        }
    }
    let pixels = (w * h) as f64;
    for acc in &mut channel {
        *acc /= pixels;
    }

    let (x0, x1) = (w / 4, (3 * w).div_ceil(4));
    let (y0, y1) = (h / 4, (3 * h).div_ceil(4));
    let (mut center, mut n_center, mut border, mut n_border) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * CHANNELS;
            let lum = data[o..o + CHANNELS].iter().map(|&v| v as f64).sum::<f64>() / CHANNELS as f64;
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                center += lum;
                n_center += 1;
            } else {
                border += lum;
                n_border += 1;
            }
        }
    }
    let contrast = if n_center == 0 || n_border == 0 {
        0.0
    } else {
        center / n_center as f64 - border / n_border as f64
    };
    [mean, var.sqrt(), channel[0], channel[1], channel[2], contrast]
}

/// Deterministic toy model: logistic regression over [`builtin_features`].
pub fn builtin_score(img: &Raster) -> Probability {
    let f = builtin_features(img);
    let z = BUILTIN_WEIGHTS.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>() + BUILTIN_BIAS;
    Probability::clamped(1.0 / (1.0 + (-z).exp())).expect("finite features")
}

/// Runs an external command once per batch.
///
/// The command reads one absolute raster path per line on stdin and writes
/// one decimal probability per line on stdout, in the same order.
#[derive(Debug)]
pub struct ExternalScorer {
    command: Vec<String>,
    workdir: Option<PathBuf>,
    in_flight: Mutex<()>,
}

impl ExternalScorer {
    pub fn new(command: Vec<String>, workdir: Option<PathBuf>) -> Self {
        Self {
            command,
            workdir,
            in_flight: Mutex::new(()),
        }
    }

    fn run(&self, items: &[ScoreItem<'_>]) -> Result<Vec<Probability>, ScorerError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| ScorerError::Protocol("empty command".into()))?;
        let scratch = tempfile::tempdir()?;
        let mut manifest = String::new();
        for (i, item) in items.iter().enumerate() {
            let path = match (item.raster(), item) {
                (Some(raster), _) => {
                    let path = scratch.path().join(format!("{i:06}.png"));
                    imageio::save_png(raster, &path).map_err(|e| ScorerError::Protocol(e.to_string()))?;
                    path
                }
                (None, ScoreItem::Stored { image, .. }) => match &image.source {
                    ImageSource::Path(p) => std::path::absolute(p)?,
                    ImageSource::ScoreKey => return Err(ScorerError::MissingRaster(image.to_string())),
                },
                (None, ScoreItem::Generated { .. }) => unreachable!("generated views carry rasters"),
            };
            manifest.push_str(&path.to_string_lossy());
            manifest.push('\n');
        }

        let _guard = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(dir) = &self.workdir {
            cmd.current_dir(dir);
        }
        let mut child = cmd.spawn()?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || stdin.write_all(manifest.as_bytes()));
        let mut stdout = String::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_string(&mut stdout)?;
        let status = child.wait()?;
        match writer.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            Ok(Err(e)) => return Err(e.into()),
            Err(_) => return Err(ScorerError::Protocol("stdin writer panicked".into())),
        }
        if !status.success() {
            return Err(ScorerError::Protocol(format!("scorer exited with {status}")));
        }
        parse_score_lines(&stdout, items)
    }
}

fn parse_score_lines(stdout: &str, items: &[ScoreItem<'_>]) -> Result<Vec<Probability>, ScorerError> {
    let lines: Vec<&str> = stdout.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() != items.len() {
        return Err(ScorerError::Protocol(format!(
            "expected {} scores, got {}",
            items.len(),
            lines.len()
        )));
    }
    lines
        .iter()
        .zip(items)
        .enumerate()
        .map(|(i, (line, item))| {
            let value: f64 = line
                .parse()
                .map_err(|_| ScorerError::Protocol(format!("line {}: cannot parse {line:?}", i + 1)))?;
            if !value.is_finite() {
                return Err(ScorerError::NonFiniteScore {
                    image: item.describe(),
                    value,
                });
            }
            Probability::new(value)
                .map_err(|_| ScorerError::Protocol(format!("line {}: {value} is outside [0, 1]", i + 1)))
        })
        .collect()
}

#[derive(Debug)]
pub enum Scorer {
    Builtin,
    /// Returns the same probability for every image.
    Constant(Probability),
    Table(ScoreTable),
    External(ExternalScorer),
}

impl Scorer {
    /// Whether this scorer can score artificial views.
    pub fn scores_pixels(&self) -> bool {
        !matches!(self, Scorer::Table(_))
    }

    pub fn describe(&self) -> String {
        match self {
            Scorer::Builtin => "builtin".into(),
            Scorer::Constant(p) => format!("constant({p})"),
            Scorer::Table(t) => format!("score_table({} entries)", t.len()),
            Scorer::External(e) => format!("external({})", e.command.join(" ")),
        }
    }

    /// One probability per item, in input order.
    pub fn score_batch(&self, items: &[ScoreItem<'_>]) -> Result<Vec<Probability>, ScorerError> {
        match self {
            Scorer::Constant(p) => Ok(vec![*p; items.len()]),
            Scorer::Builtin => items
                .iter()
                .map(|item| {
                    item.raster()
                        .map(builtin_score)
                        .ok_or_else(|| ScorerError::MissingRaster(item.describe()))
                })
                .collect(),
            Scorer::Table(table) => items
                .iter()
                .map(|item| match item {
                    ScoreItem::Stored { image, .. } => table.lookup(image),
                    ScoreItem::Generated { origin, view, .. } => Err(ScorerError::GeneratedView {
                        origin: origin.to_string(),
                        view: *view,
                    }),
                })
                .collect(),
            Scorer::External(_) if items.is_empty() => Ok(Vec::new()),
            Scorer::External(ext) => ext.run(items),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> Raster {
        Raster::from_fn(4, 4, |x, y, c| ((x + 2 * y + c) % 4) as f32 / 4.0)
    }

    #[test]
    fn table_lookup_and_miss() {
        let mut table = ScoreTable::new();
        table.insert("L1", 0, Probability::new(0.8).unwrap());
        let scorer = Scorer::Table(table);
        let hit = ImageRef::score_key("L1", 0);
        let got = scorer
            .score_batch(&[ScoreItem::Stored { image: &hit, raster: None }])
            .unwrap();
        assert_eq!(got[0].value(), 0.8);
        let miss = ImageRef::score_key("L1", 3);
        let err = scorer
            .score_batch(&[ScoreItem::Stored { image: &miss, raster: None }])
            .unwrap_err();
        assert!(err.to_string().contains("\"L1\" image 3"));
    }

    #[test]
    fn zero_raster_scores_sigmoid_of_bias() {
        let p = builtin_score(&Raster::filled(4, 4, 0.0));
        assert_eq!(p.value(), 1.0 / (1.0 + (-BUILTIN_BIAS).exp()));
    }

    #[test]
    fn builtin_golden_value() {
        // Features of the checkerboard, worked by hand:
        // values per channel cycle through {0, .25, .5, .75} uniformly,
        // so mean = .375, std = sqrt(5/64), channel means = .375,
        // and the centre 2x2 luminance equals the border luminance.
        let f = builtin_features(&checkerboard());
        assert!((f[0] - 0.375).abs() < 1e-12);
        assert!((f[1] - (5.0f64 / 64.0).sqrt()).abs() < 1e-12);
        assert!(f[2..5].iter().all(|c| (c - 0.375).abs() < 1e-12));
        assert!(f[5].abs() < 1e-12);
        let z = 12.0 * 0.375 + 2.0 * (5.0f64 / 64.0).sqrt() - 6.0;
        let expected = 1.0 / (1.0 + (-z).exp());
        let p = builtin_score(&checkerboard()).value();
        assert!((p - expected).abs() < 1e-12);
        assert_eq!(p, builtin_score(&checkerboard()).value());
    }

    #[test]
    fn uniform_value_inverts_builtin() {
        for p in [0.01, 0.2, 0.5, 0.93, 0.99] {
            let v = builtin_uniform_value(p).unwrap();
            let got = builtin_score(&Raster::filled(6, 6, v as f32)).value();
            assert!((got - p).abs() < 1e-5, "{p} -> {got}");
        }
        assert!(builtin_uniform_value(0.0).is_none());
    }

    #[test]
    fn builtin_respects_lipschitz_bound() {
        let base = checkerboard();
        let eps = 0.01f32;
        let brighter = Raster::from_fn(4, 4, |x, y, c| base.get(x, y, c) + eps);
        let delta = (builtin_score(&brighter).value() - builtin_score(&base).value()).abs();
        assert!(delta <= builtin_lipschitz() * eps as f64 + 1e-9);
        assert_eq!(builtin_lipschitz(), 5.0);
    }

    #[test]
    fn builtin_needs_pixels() {
        let image = ImageRef::score_key("L", 0);
        let err = Scorer::Builtin
            .score_batch(&[ScoreItem::Stored { image: &image, raster: None }])
            .unwrap_err();
        assert!(matches!(err, ScorerError::MissingRaster(_)));
    }

    #[test]
    fn table_rejects_generated_views() {
        let image = ImageRef::score_key("L", 0);
        let raster = Raster::filled(2, 2, 0.5);
        let err = Scorer::Table(ScoreTable::new())
            .score_batch(&[ScoreItem::Generated { origin: &image, view: 0, raster: &raster }])
            .unwrap_err();
        assert!(matches!(err, ScorerError::GeneratedView { .. }));
    }

    #[test]
    fn score_lines_are_checked() {
        let image = ImageRef::score_key("L", 0);
        let items = [ScoreItem::Stored { image: &image, raster: None }];
        assert_eq!(parse_score_lines("0.25\n", &items).unwrap()[0].value(), 0.25);
        assert!(matches!(parse_score_lines("", &items), Err(ScorerError::Protocol(_))));
        assert!(matches!(parse_score_lines("abc", &items), Err(ScorerError::Protocol(_))));
        assert!(matches!(parse_score_lines("NaN", &items), Err(ScorerError::NonFiniteScore { .. })));
        assert!(matches!(parse_score_lines("1.5", &items), Err(ScorerError::Protocol(_))));
    }
}
