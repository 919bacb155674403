//! Sarcomere organization scoring for fluorescence images of stem-cell
//! derived cardiomyocytes.
//!
//! The crate covers the whole path from a labeled manifest to a score:
//! [`dataset`] loads and filters expert scores, [`representations`] builds the
//! FFT power, maturity-map and gradient channels, [`patchnet`] classifies local
//! patterns, [`dsarcnet`] is the dual-stream regressor, [`trainer`] fits it and
//! [`metrics`] scores predictions. [`synthgen`] produces labeled synthetic cells.

pub mod backbone;
pub mod dataset;
pub mod dsarcnet;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod patchnet;
pub mod pipeline;
pub mod representations;
pub mod synthgen;
pub mod trainer;

pub use dataset::{
    filter_and_label, load_image, load_manifest, split_dataset, CellImage, DatasetManifest, Labeled, ManifestRecord,
    ScoredCell, Split, SplitSpec,
};
pub use dsarcnet::{Ablation, CellInput, DSarcNet, DSarcNetConfig, ScorePrediction};
pub use error::{Error, Result};
pub use metrics::{ClassificationReport, EvalReport, SamplePrediction};
pub use patchnet::{MaturityMap, PatchExample, PatchNet, PatchNetConfig, PatchTrainConfig, Preset};
pub use pipeline::{prepare_cell, PrepareOptions};
pub use representations::{FftPowerImage, GradientMagnitudeImage, RepresentationStack, WindowGrid};
pub use synthgen::{LevelDistribution, SynthDatasetSpec, SynthSpec};
pub use trainer::{TrainConfig, TrainHistory, TrainSample};
