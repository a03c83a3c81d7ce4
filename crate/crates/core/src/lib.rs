//! Evaluation harness comparing single-view, test-time-augmentation and
//! multi-photograph inference for lesion classifiers.

pub mod augment;
pub mod imageio;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod raster;
pub mod report;
pub mod rng;
pub mod scorer;
pub mod stats;
pub mod synth;

pub use model::{Dataset, ImageRef, ImageSource, Label, LesionRecord, Probability};
pub use protocol::{run_experiment, sweep_n_images, ExperimentConfig};
pub use rng::StreamKey;
