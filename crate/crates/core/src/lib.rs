//! Automatic classification of 3D scalar volume datasets.
//!
//! A volume's joint intensity/gradient-magnitude histogram, downscaled by a
//! power of two and normalized to `[0,1]`, is fed into a small feed-forward
//! network whose outputs score user-defined categories. The pieces:
//!
//! - [`volume_io`]: raw volume files with sidecar descriptors.
//! - [`histogram`]: gradient magnitude, 2D histogramming, rebinning, export.
//! - [`mlp`]: the network, back-propagation training, output addition.
//! - [`decision`]: argmax decisions with rest-class and threshold rejection.
//! - [`model_store`]: persistent classifier state and the retrain lifecycle.
//! - [`synthgen`]: synthetic corpora and confusion-matrix evaluation.

pub mod decision;
pub mod histogram;
pub mod mlp;
pub mod model_store;
pub mod synthgen;
pub mod volume_io;

pub use decision::{decide, ClassRegistry, Classification, DecisionPolicy};
pub use histogram::{compute_histogram, gradient_magnitude_field, Histogram2D};
pub use mlp::{Network, TrainingConfig, TrainingReport, TrainingSample};
pub use model_store::ClassifierState;
pub use synthgen::{evaluate, generate, ConfusionReport, Family, FamilySpec, LabeledVolume};
pub use volume_io::{intensity_range, load_volume, Volume, VolumeMeta};
