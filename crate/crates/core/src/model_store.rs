//! Classifier state and its persistence.
//!
//! A [`ClassifierState`] bundles the network, the class registry, the
//! histogram reduction factor and every training sample seen so far. Samples
//! are kept because retraining runs over the complete set each time; using
//! only the newest sample would make the network forget the older ones.
//!
//! On disk the state is a single little-endian binary file (magic `VCLS`,
//! version 1) whose round trip is byte-exact:
//!
//! ```text
//! "VCLS"  u16 version  u8 reduction_factor
//! u8 layer_count, u32 layer_size...
//! u16 class_count, { u16 len, utf-8 name }...
//! u16 rest_class_index (0xFFFF = none)
//! per layer pair: f32 weights row-major, f32 biases
//! u32 sample_count, { u16 len, utf-8 source_id, u16 label, f32 input... }...
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::decision::{decide, ClassRegistry, Classification, DecisionPolicy, RegistryError};
use crate::histogram::{compute_histogram, HistogramError};
use crate::mlp::{one_hot, MlpError, Network, TrainingConfig, TrainingReport, TrainingSample};
use crate::volume_io::Volume;

/// Magic bytes at the start of every model file.
pub const MODEL_MAGIC: [u8; 4] = *b"VCLS";
/// Current model file version.
pub const MODEL_VERSION: u16 = 1;
/// Histograms enter a model at this base resolution before reduction.
pub const MODEL_BASE_BINS: usize = 256;

const NO_REST_CLASS: u16 = u16::MAX;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error("no class named {0:?} in the model")]
    UnknownLabel(String),
    #[error("class {0:?} already exists")]
    DuplicateClass(String),
    #[error("training requires at least one stored sample")]
    EmptySampleSet,
    #[error(
        "input length {got} does not match the network input {expected} \
         (histogram size vs model reduction factor)"
    )]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error("bad class registry: {0}")]
    Registry(#[from] RegistryError),
}

/// A stored training sample. The one-hot target is derived from `label` and
/// the current class count, so targets widen automatically when classes are
/// added.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub source_id: String,
    pub label: usize,
    pub input: Vec<f32>,
}

/// Whether an upsert appended a new sample or replaced the label of an
/// existing one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Updated,
}

/// The complete classifier: network, class registry, reduction factor and
/// sample store.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    network: Network,
    registry: ClassRegistry,
    reduction_factor: u8,
    samples: Vec<StoredSample>,
}

/// Histogram size for a reduction factor: 256 / 2^factor.
pub fn reduced_bins(reduction_factor: u8) -> Result<usize, StoreError> {
    let bins = MODEL_BASE_BINS >> reduction_factor;
    if reduction_factor > 5 || bins < 8 {
        return Err(StoreError::CorruptFile(format!(
            "reduction factor {reduction_factor} out of range (max 5)"
        )));
    }
    Ok(bins)
}

impl ClassifierState {
    /// Bundle a network and registry into a classifier state. The network's
    /// output count must match the registry and its input size must equal
    /// the square of the reduced histogram size.
    pub fn new(
        network: Network,
        registry: ClassRegistry,
        reduction_factor: u8,
    ) -> Result<Self, StoreError> {
        let bins = reduced_bins(reduction_factor)?;
        if network.input_size() != bins * bins {
            return Err(StoreError::ShapeMismatch {
                expected: bins * bins,
                got: network.input_size(),
            });
        }
        if network.output_size() != registry.len() {
            return Err(StoreError::ShapeMismatch {
                expected: registry.len(),
                got: network.output_size(),
            });
        }
        Ok(ClassifierState {
            network,
            registry,
            reduction_factor,
            samples: Vec::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn registry(&self) -> &ClassRegistry {
        &self.registry
    }

    pub fn reduction_factor(&self) -> u8 {
        self.reduction_factor
    }

    /// Histogram bins per axis after reduction.
    pub fn histogram_bins(&self) -> usize {
        MODEL_BASE_BINS >> self.reduction_factor
    }

    pub fn samples(&self) -> &[StoredSample] {
        &self.samples
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Mark an existing class as the rest class.
    pub fn set_rest_class(&mut self, name: &str) -> Result<(), StoreError> {
        self.registry.set_rest_class(name)?;
        Ok(())
    }

    /// Compute the network input for a volume: base histogram, reduction by
    /// the model's factor, row-major flattening.
    pub fn prepare_input(&self, volume: &Volume) -> Result<Vec<f32>, StoreError> {
        let histogram = compute_histogram(volume, MODEL_BASE_BINS)?
            .downscale(u32::from(self.reduction_factor))?;
        Ok(histogram.flatten().iter().map(|&v| v as f32).collect())
    }

    /// Run a prepared input through the network and the decision policy.
    pub fn classify_input(
        &self,
        input: &[f32],
        policy: &DecisionPolicy,
    ) -> Result<Classification, StoreError> {
        if input.len() != self.network.input_size() {
            return Err(StoreError::ShapeMismatch {
                expected: self.network.input_size(),
                got: input.len(),
            });
        }
        let scores = self.network.forward(input)?;
        decide(&scores, &self.registry, policy).map_err(|_| StoreError::ShapeMismatch {
            expected: self.registry.len(),
            got: self.network.output_size(),
        })
    }

    /// Classify a volume through the full pipeline.
    pub fn classify_volume(
        &self,
        volume: &Volume,
        policy: &DecisionPolicy,
    ) -> Result<Classification, StoreError> {
        let input = self.prepare_input(volume)?;
        self.classify_input(&input, policy)
    }

    /// Insert a sample or, when one with the same `source_id` already
    /// exists, replace its label with the new user preference. Does not
    /// retrain.
    pub fn upsert_sample(
        &mut self,
        source_id: &str,
        label: &str,
        input: Vec<f32>,
    ) -> Result<UpsertOutcome, StoreError> {
        let label_index = self
            .registry
            .index_of(label)
            .ok_or_else(|| StoreError::UnknownLabel(label.to_string()))?;
        if input.len() != self.network.input_size() {
            return Err(StoreError::ShapeMismatch {
                expected: self.network.input_size(),
                got: input.len(),
            });
        }
        if let Some(existing) = self.samples.iter_mut().find(|s| s.source_id == source_id) {
            existing.label = label_index;
            existing.input = input;
            Ok(UpsertOutcome::Updated)
        } else {
            self.samples.push(StoredSample {
                source_id: source_id.to_string(),
                label: label_index,
                input,
            });
            Ok(UpsertOutcome::Inserted)
        }
    }

    /// Add a class: the registry gains the name and the network gains one
    /// output neuron whose incoming weights are drawn from `seed`. All
    /// existing outputs keep their exact values. Does not retrain.
    pub fn add_class(&mut self, name: &str, seed: u64) -> Result<usize, StoreError> {
        if self.registry.index_of(name).is_some() {
            return Err(StoreError::DuplicateClass(name.to_string()));
        }
        let index = self.registry.add(name)?;
        self.network = self.network.add_output(seed);
        Ok(index)
    }

    /// One-hot training samples over the current class count, in insertion
    /// order. Targets of samples stored before a class addition carry a 0 in
    /// the new position.
    pub fn build_training_samples(&self) -> Vec<TrainingSample> {
        let classes = self.registry.len();
        self.samples
            .iter()
            .map(|s| {
                TrainingSample::new(
                    s.input.clone(),
                    one_hot(classes, s.label),
                    s.label,
                    &s.source_id,
                )
            })
            .collect()
    }

    /// Retrain the network on every stored sample.
    pub fn retrain(&mut self, cfg: &TrainingConfig) -> Result<TrainingReport, StoreError> {
        if self.samples.is_empty() {
            return Err(StoreError::EmptySampleSet);
        }
        let samples = self.build_training_samples();
        Ok(self.network.train(&samples, cfg)?)
    }

    /// Serialize to the VCLS byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.write_u16::<LittleEndian>(MODEL_VERSION).unwrap();
        out.write_u8(self.reduction_factor).unwrap();

        let sizes = self.network.layer_sizes();
        out.write_u8(sizes.len() as u8).unwrap();
        for &s in sizes {
            out.write_u32::<LittleEndian>(s as u32).unwrap();
        }

        out.write_u16::<LittleEndian>(self.registry.len() as u16)
            .unwrap();
        for name in self.registry.names() {
            write_string(&mut out, name);
        }
        let rest = self
            .registry
            .rest_class_index()
            .map_or(NO_REST_CLASS, |i| i as u16);
        out.write_u16::<LittleEndian>(rest).unwrap();

        for l in 0..sizes.len() - 1 {
            for &w in &self.network.weights()[l] {
                out.write_f32::<LittleEndian>(w).unwrap();
            }
            for &b in &self.network.biases()[l] {
                out.write_f32::<LittleEndian>(b).unwrap();
            }
        }

        out.write_u32::<LittleEndian>(self.samples.len() as u32)
            .unwrap();
        for s in &self.samples {
            write_string(&mut out, &s.source_id);
            out.write_u16::<LittleEndian>(s.label as u16).unwrap();
            for &x in &s.input {
                out.write_f32::<LittleEndian>(x).unwrap();
            }
        }
        out
    }

    /// Parse the VCLS byte format, revalidating every structural invariant.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = Cursor::new(bytes);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != MODEL_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
        if version != MODEL_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let reduction_factor = r.read_u8().map_err(truncated)?;
        let bins = reduced_bins(reduction_factor)?;

        let layer_count = r.read_u8().map_err(truncated)? as usize;
        if !(3..=4).contains(&layer_count) {
            return Err(StoreError::CorruptFile(format!(
                "layer count {layer_count} out of range"
            )));
        }
        let mut sizes = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let s = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            if s == 0 {
                return Err(StoreError::CorruptFile("zero layer size".into()));
            }
            sizes.push(s);
        }
        if sizes[0] != bins * bins {
            return Err(StoreError::CorruptFile(format!(
                "input size {} does not match reduction factor {} ({}x{} histogram)",
                sizes[0], reduction_factor, bins, bins
            )));
        }

        let class_count = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
        if class_count != *sizes.last().unwrap() {
            return Err(StoreError::CorruptFile(format!(
                "{} classes but {} output neurons",
                class_count,
                sizes.last().unwrap()
            )));
        }
        let mut names = Vec::with_capacity(class_count);
        for _ in 0..class_count {
            names.push(read_string(&mut r)?);
        }
        let rest = r.read_u16::<LittleEndian>().map_err(truncated)?;
        let rest_class_index = if rest == NO_REST_CLASS {
            None
        } else if (rest as usize) < class_count {
            Some(rest as usize)
        } else {
            return Err(StoreError::CorruptFile(format!(
                "rest class index {rest} out of range"
            )));
        };
        let registry = ClassRegistry::from_parts(names, rest_class_index)
            .map_err(|e| StoreError::CorruptFile(e.to_string()))?;

        let mut weights = Vec::with_capacity(layer_count - 1);
        let mut biases = Vec::with_capacity(layer_count - 1);
        for pair in sizes.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            let mut w = Vec::with_capacity(prev * next);
            for _ in 0..prev * next {
                w.push(r.read_f32::<LittleEndian>().map_err(truncated)?);
            }
            let mut b = Vec::with_capacity(next);
            for _ in 0..next {
                b.push(r.read_f32::<LittleEndian>().map_err(truncated)?);
            }
            weights.push(w);
            biases.push(b);
        }
        let network = Network::from_parts(sizes.clone(), weights, biases, 0)
            .map_err(|e| StoreError::CorruptFile(e.to_string()))?;

        let sample_count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut samples = Vec::with_capacity(sample_count);
        for _ in 0..sample_count {
            let source_id = read_string(&mut r)?;
            let label = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
            if label >= class_count {
                return Err(StoreError::CorruptFile(format!(
                    "sample label {label} out of range"
                )));
            }
            let mut input = Vec::with_capacity(sizes[0]);
            for _ in 0..sizes[0] {
                input.push(r.read_f32::<LittleEndian>().map_err(truncated)?);
            }
            samples.push(StoredSample {
                source_id,
                label,
                input,
            });
        }

        if r.position() != bytes.len() as u64 {
            return Err(StoreError::CorruptFile(format!(
                "{} trailing bytes",
                bytes.len() as u64 - r.position()
            )));
        }

        let mut state = ClassifierState::new(network, registry, reduction_factor)?;
        state.samples = samples;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn truncated(_: std::io::Error) -> StoreError {
    StoreError::CorruptFile("unexpected end of file".into())
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.write_u16::<LittleEndian>(s.len() as u16).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String, StoreError> {
    let len = r.read_u16::<LittleEndian>().map_err(truncated)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| StoreError::CorruptFile("invalid utf-8 string".into()))
}
