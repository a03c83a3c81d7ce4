use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use multiview::augment::{generate_artificial_views, AugSetup, Preset};
use multiview::imageio::{self, Preprocess};
use multiview::inference::{Backend, FileRasters, InferenceError, MethodSpec, RasterProvider};
use multiview::io::{self, IoError, ReportFormat};
use multiview::protocol::{self, ExperimentConfig, ProtocolError};
use multiview::report::ExperimentReport;
use multiview::scorer::{ScoreItem, ScoreTable, Scorer, ScorerError, ScorerSpec};
use multiview::synth::{self, Calibration, SynthMode, SynthSpec};
use multiview::{Dataset, StreamKey};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_SCORER: u8 = 3;

#[derive(Parser)]
#[command(name = "multiview", version, about = "Evaluate single-view, augmented and multi-photograph inference")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Bootstrap iterations.
    #[arg(long = "bootstrap", value_name = "N", global = true)]
    n_bootstrap: Option<usize>,
    /// Number of repeats with fresh downsampling.
    #[arg(long = "repeats", value_name = "N", global = true)]
    n_repeats: Option<usize>,
    #[arg(long = "ece-bins", value_name = "N", global = true)]
    ece_bins: Option<usize>,
    /// Augmentation preset for MV-Artificial and `augment`.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true, overrides_with = "no_stratified")]
    stratified: bool,
    #[arg(long = "no-stratified", global = true, overrides_with = "stratified")]
    no_stratified: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ScorerArgs {
    /// Precomputed score table (`lesion_id,image_index,score`).
    #[arg(long, conflicts_with = "external")]
    scores: Option<PathBuf>,
    /// External scoring command; reads image paths on stdin, writes one
    /// probability per line.
    #[arg(long, num_args = 1.., value_name = "CMD")]
    external: Option<Vec<String>>,
    /// Square side images are resized to after margin cropping.
    #[arg(long, default_value_t = 300)]
    image_size: usize,
    /// Channel value below which border rows and columns count as margin.
    #[arg(long, default_value_t = 0.04)]
    crop_threshold: f32,
}

impl ScorerArgs {
    fn spec(&self) -> ScorerSpec {
        match (&self.scores, &self.external) {
            (Some(path), _) => ScorerSpec::ScoreTable { path: path.clone() },
            (None, Some(command)) => ScorerSpec::ExternalProcess {
                command: command.clone(),
                workdir: None,
            },
            (None, None) => ScorerSpec::Builtin,
        }
    }

    fn preprocess(&self) -> Preprocess {
        Preprocess {
            size: self.image_size,
            crop_threshold: self.crop_threshold,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Scores,
    Rasters,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrationArg {
    Calibrated,
    Overconfident,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and summarize it.
    Validate { manifest: PathBuf },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        #[arg(long, default_value_t = 656)]
        lesions: usize,
        #[arg(long, default_value_t = 6)]
        images: usize,
        #[arg(long, default_value_t = 0.15)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "scores")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "calibrated")]
        calibration: CalibrationArg,
        /// Prediction confidence in the overconfident mode.
        #[arg(long, default_value_t = 0.9)]
        confidence: f64,
        /// Fraction of correct predictions in the overconfident mode.
        #[arg(long, default_value_t = 0.5)]
        accuracy: f64,
    },
    /// Write artificial views of images.
    Augment {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        views: usize,
        #[arg(long, default_value_t = 300)]
        image_size: usize,
    },
    /// Score every image of a manifest and write a score table.
    Score {
        manifest: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Run the full evaluation protocol.
    Evaluate {
        manifest: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// AUROC and ECE of MV-Real against the number of images.
    Sweep {
        manifest: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Re-render a stored JSON report.
    Report { report: PathBuf },
}

enum Failure {
    Validation(String),
    Scorer(String),
    Other(String),
}

impl Failure {
    fn exit(self) -> ExitCode {
        let (code, msg) = match self {
            Failure::Validation(m) => (EXIT_VALIDATION, m),
            Failure::Scorer(m) => (EXIT_SCORER, m),
            Failure::Other(m) => (EXIT_FAILURE, m),
        };
        eprintln!("error: {msg}");
        ExitCode::from(code)
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Parse { .. } | IoError::MissingColumn { .. } | IoError::Validation(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn scorer_failure(e: &ScorerError) -> bool {
    matches!(e, ScorerError::Protocol(_) | ScorerError::NonFiniteScore { .. } | ScorerError::Io(_))
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match &e {
            InferenceError::Scorer(s) if scorer_failure(s) => Failure::Scorer(e.to_string()),
            InferenceError::InsufficientRealViews { .. } | InferenceError::MissingRaster(_) => {
                Failure::Validation(e.to_string())
            }
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Inference { source, repeat, stage } => match Failure::from(source) {
                Failure::Scorer(m) => Failure::Scorer(format!("repeat {repeat}, {stage}: {m}")),
                Failure::Validation(m) => Failure::Validation(format!("repeat {repeat}, {stage}: {m}")),
                Failure::Other(m) => Failure::Other(format!("repeat {repeat}, {stage}: {m}")),
            },
            ProtocolError::Config(_)
            | ProtocolError::NonUniformSeries
            | ProtocolError::NonDivisibleSeriesLength { .. }
            | ProtocolError::AssignmentMismatch { .. } => Failure::Validation(e.to_string()),
            ProtocolError::Stats { .. } => Failure::Other(e.to_string()),
        }
    }
}

fn experiment_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config: ExperimentConfig = match &common.config {
        Some(path) => io::read_json(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = common.n_bootstrap {
        config.n_bootstrap = n;
    }
    if let Some(n) = common.n_repeats {
        config.n_repeats = n;
    }
    if let Some(n) = common.ece_bins {
        config.ece_bins = n;
    }
    if common.stratified {
        config.stratified = true;
    }
    if common.no_stratified {
        config.stratified = false;
    }
    if let Some(preset) = common.preset {
        for m in &mut config.methods {
            if let MethodSpec::MvArtificial { setup, .. } = m {
                *setup = AugSetup::preset(preset);
            }
        }
    }
    config.validate()?;
    Ok(config)
}

fn load_dataset(manifest: &Path) -> Result<Dataset, Failure> {
    let dataset = io::parse_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(io::resolve_sources(dataset, base))
}

/// A score table cannot score generated views, so MV-Artificial is dropped.
fn fit_methods(config: &mut ExperimentConfig, scorer: &Scorer) -> Result<(), Failure> {
    if !scorer.scores_pixels() && config.methods.iter().any(|m| matches!(m, MethodSpec::MvArtificial { .. })) {
        eprintln!("note: {} cannot score artificial views; skipping MV-Artificial", scorer.describe());
        config.methods.retain(|m| !matches!(m, MethodSpec::MvArtificial { .. }));
        config.validate()?;
    }
    Ok(())
}

/// Builtin scoring reads every raster many times, so they are loaded once.
fn raster_provider(scorer: &Scorer, dataset: &Dataset, args: &ScorerArgs) -> Result<Box<dyn RasterProvider>, Failure> {
    if matches!(scorer, Scorer::Builtin) {
        Ok(Box::new(io::load_rasters(dataset, None, &args.preprocess())?))
    } else {
        Ok(Box::new(FileRasters {
            base_dir: None,
            preprocess: args.preprocess(),
        }))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Validate { manifest } => {
            let dataset = io::parse_manifest(manifest)?;
            let labels = dataset.labels();
            let positives = labels.iter().filter(|l| l.is_positive()).count();
            let k = dataset
                .uniform_k()
                .map_or_else(|| "varying".to_string(), |k| k.to_string());
            println!(
                "{}: {} lesions ({} melanoma, {} nevus), images per lesion: {k}",
                manifest.display(),
                dataset.len(),
                positives,
                labels.len() - positives
            );
        }
        Command::Synth {
            lesions,
            images,
            sigma,
            mode,
            calibration,
            confidence,
            accuracy,
        } => {
            let spec = SynthSpec {
                n_lesions: *lesions,
                images_per_lesion: *images,
                noise_sigma: *sigma,
                mode: match mode {
                    ModeArg::Scores => SynthMode::ScoreOnly,
                    ModeArg::Rasters => SynthMode::RasterBacked,
                },
                calibration: match calibration {
                    CalibrationArg::Calibrated => Calibration::PerfectlyCalibrated,
                    CalibrationArg::Overconfident => Calibration::ConstantOverconfident {
                        confidence: *confidence,
                        accuracy: *accuracy,
                    },
                },
                ..SynthSpec::default()
            };
            let seed = common.seed.unwrap_or_else(|| ExperimentConfig::default().seed);
            let data = synth::generate(&spec, &mut StreamKey::new(seed, "synth").rng())
                .map_err(|e| Failure::Validation(e.to_string()))?;
            for path in io::write_synth(&data, &common.out)? {
                println!("{}", path.display());
            }
        }
        Command::Augment {
            images,
            views,
            image_size,
        } => {
            let preset = common.preset.unwrap_or(Preset::Mild);
            let setup = AugSetup::preset(preset);
            let seed = common.seed.unwrap_or_else(|| ExperimentConfig::default().seed);
            let opts = Preprocess {
                size: *image_size,
                ..Preprocess::default()
            };
            std::fs::create_dir_all(&common.out).map_err(|e| Failure::Other(e.to_string()))?;
            for (i, path) in images.iter().enumerate() {
                let raster = imageio::load_raster(path, &opts).map_err(|e| Failure::Validation(e.to_string()))?;
                let mut rng = StreamKey::new(seed, "augment").with_index(i as u64).rng();
                let generated = generate_artificial_views(&raster, *views, &setup, &mut rng)
                    .map_err(|e| Failure::Other(e.to_string()))?;
                let stem = path.file_stem().map_or_else(|| format!("image{i}"), |s| s.to_string_lossy().into_owned());
                for (v, view) in generated.iter().enumerate() {
                    let target = common.out.join(format!("{stem}_{preset}_{v}.png"));
                    imageio::save_png(view, &target).map_err(|e| Failure::Other(e.to_string()))?;
                    println!("{}", target.display());
                }
            }
        }
        Command::Score { manifest, scorer } => {
            let dataset = load_dataset(manifest)?;
            let model = scorer.spec().build()?;
            let rasters = raster_provider(&model, &dataset, scorer)?;
            let backend = Backend::new(&model, rasters.as_ref());
            let images: Vec<_> = dataset.records().iter().flat_map(|r| &r.images).collect();
            let loaded = images
                .iter()
                .map(|img| backend.stored_raster(img).map_err(InferenceError::from))
                .collect::<Result<Vec<_>, _>>()?;
            let items: Vec<ScoreItem<'_>> = images
                .iter()
                .zip(&loaded)
                .map(|(img, r)| ScoreItem::Stored {
                    image: img,
                    raster: r.as_deref(),
                })
                .collect();
            let scores = model.score_batch(&items).map_err(InferenceError::from)?;
            let mut table = ScoreTable::new();
            for (img, p) in images.iter().zip(scores) {
                table.insert(img.lesion_id.clone(), img.index, p);
            }
            std::fs::create_dir_all(&common.out).map_err(|e| Failure::Other(e.to_string()))?;
            let target = common.out.join("scores.csv");
            io::write_score_table(&table, &target)?;
            println!("{}", target.display());
        }
        Command::Evaluate { manifest, scorer } => {
            let mut config = experiment_config(common)?;
            let dataset = load_dataset(manifest)?;
            let model = scorer.spec().build()?;
            fit_methods(&mut config, &model)?;
            let rasters = raster_provider(&model, &dataset, scorer)?;
            let report = protocol::run_experiment(&config, &dataset, &Backend::new(&model, rasters.as_ref()))?;
            for path in io::emit_report(&report, &common.out, &ReportFormat::ALL)? {
                println!("{}", path.display());
            }
        }
        Command::Sweep { manifest, scorer } => {
            let config = experiment_config(common)?;
            let dataset = load_dataset(manifest)?;
            let model = scorer.spec().build()?;
            let rasters = raster_provider(&model, &dataset, scorer)?;
            let report = protocol::sweep_n_images(&config, &dataset, &Backend::new(&model, rasters.as_ref()))?;
            for path in io::emit_sweep(&report, &common.out, &ReportFormat::ALL)? {
                println!("{}", path.display());
            }
        }
        Command::Report { report } => {
            let report: ExperimentReport = io::read_json(report)?;
            for path in io::emit_report(&report, &common.out, &[ReportFormat::Markdown, ReportFormat::Csv])? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.exit(),
    }
}
