//! Synthetic volume corpus generation and classifier evaluation.
//!
//! Five deterministic volume families with distinct histogram signatures
//! stand in for real scan series: `blob` (Gaussian ball), `shell` (spherical
//! shell) and `ramp` (linear gradient) act as well-defined classes, while
//! `noise` and `checker` supply miscellaneous "rest" data. Instances within
//! a family share their histogram character but differ by seeded parameter
//! jitter, so held-out instances make a meaningful generalization test.
//!
//! [`evaluate`] runs a labeled corpus through the full classification
//! pipeline and tallies a confusion matrix plus the headline
//! misclassification counts.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

use crate::decision::{ClassRegistry, DecisionPolicy, REST_OUTCOME};
use crate::model_store::{ClassifierState, StoreError};
use crate::volume_io::{write_volume, Volume, VolumeError, VolumeMeta, VoxelType};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad family spec: {0}")]
    BadSpec(String),
    #[error("corpus label {0:?} is neither a registered class nor \"rest\"")]
    UnknownLabel(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Synthetic volume family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Blob,
    Shell,
    Ramp,
    Noise,
    Checker,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Blob,
        Family::Shell,
        Family::Ramp,
        Family::Noise,
        Family::Checker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Blob => "blob",
            Family::Shell => "shell",
            Family::Ramp => "ramp",
            Family::Noise => "noise",
            Family::Checker => "checker",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SynthError> {
        match s.trim() {
            "blob" => Ok(Family::Blob),
            "shell" => Ok(Family::Shell),
            "ramp" => Ok(Family::Ramp),
            "noise" => Ok(Family::Noise),
            "checker" => Ok(Family::Checker),
            other => Err(SynthError::BadSpec(format!(
                "unknown family {other:?} (expected blob, shell, ramp, noise or checker)"
            ))),
        }
    }

    /// Families that play the miscellaneous role rather than forming a
    /// well-defined class of their own.
    pub fn is_rest_family(self) -> bool {
        matches!(self, Family::Noise | Family::Checker)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Recipe for generating instances of one family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilySpec {
    pub family: Family,
    /// Cube side length in voxels, at least 8.
    pub dims: usize,
    /// Per-instance parameter perturbation scale in [0,1]; 0 makes all
    /// instances identical.
    pub jitter: f64,
    pub seed: u64,
}

impl FamilySpec {
    pub fn new(family: Family, seed: u64) -> Self {
        FamilySpec {
            family,
            dims: 64,
            jitter: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.dims < 8 {
            return Err(SynthError::BadSpec(format!(
                "dims must be at least 8, got {}",
                self.dims
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(SynthError::BadSpec(format!(
                "jitter must be in [0,1], got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

#[inline]
fn unit(rng: &mut ChaCha8Rng) -> f64 {
    f64::from(rng.next_u32() >> 8) / f64::from(1u32 << 24)
}

/// Symmetric unit draw in [-1, 1).
#[inline]
fn centered(rng: &mut ChaCha8Rng) -> f64 {
    2.0 * unit(rng) - 1.0
}

/// `base` scaled by a relative jitter of up to `rel * jitter`.
#[inline]
fn jittered(rng: &mut ChaCha8Rng, base: f64, rel: f64, jitter: f64) -> f64 {
    base * (1.0 + rel * jitter * centered(rng))
}

/// Generate `count` volumes of a family. Instance `i` is a pure function of
/// (spec, spec.seed, i): regenerating with the same spec gives bit-identical
/// voxels. Voxel values are quantized through f32 so writing instances as
/// f32 raw files and reloading them reproduces the volumes exactly.
pub fn generate(spec: &FamilySpec, count: usize) -> Result<Vec<Volume>, SynthError> {
    spec.validate()?;
    if count == 0 {
        return Err(SynthError::BadSpec("count must be at least 1".into()));
    }
    (0..count).map(|i| generate_instance(spec, i)).collect()
}

/// Generate the `index`-th instance of a family.
pub fn generate_instance(spec: &FamilySpec, index: usize) -> Result<Volume, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let n = spec.dims;
    let j = spec.jitter;
    let nf = n as f64;
    let mut voxels = Vec::with_capacity(n * n * n);

    match spec.family {
        Family::Blob => {
            // anisotropic Gaussian ball: the direction-dependent gradient
            // fattens its histogram arc into a band
            let center = jittered_center(&mut rng, nf, j);
            let sx = jittered(&mut rng, nf / 5.5, 0.4, j);
            let sy = sx * jittered(&mut rng, 0.7, 0.3, j);
            let sz = sx * jittered(&mut rng, 0.5, 0.3, j);
            let amp = jittered(&mut rng, 200.0, 0.3, j);
            let noise_amp = 6.0 * j * unit(&mut rng);
            fill(&mut voxels, n, &mut rng, |x, y, z, rng| {
                let dx = (x - center.0) / sx;
                let dy = (y - center.1) / sy;
                let dz = (z - center.2) / sz;
                let q = dx * dx + dy * dy + dz * dz;
                amp * (-q / 2.0).exp() + noise(rng, noise_amp)
            });
        }
        Family::Shell => {
            // bright spherical membrane around a dim filled core: puts mass
            // at mid intensity with near-zero gradient, which the blob lacks
            let center = jittered_center(&mut rng, nf, j);
            let radius = jittered(&mut rng, nf / 3.0, 0.25, j);
            let width = jittered(&mut rng, nf / 14.0, 0.4, j);
            let amp = jittered(&mut rng, 220.0, 0.25, j);
            let core = amp * jittered(&mut rng, 0.3, 0.3, j);
            let core_edge = radius - 2.5 * width;
            let noise_amp = 6.0 * j * unit(&mut rng);
            fill(&mut voxels, n, &mut rng, |x, y, z, rng| {
                let r = dist2((x, y, z), center).sqrt();
                let band = gaussian(amp, (r - radius) * (r - radius), width);
                let fill_in = core / (1.0 + (r - core_edge).exp());
                band + fill_in + noise(rng, noise_amp)
            });
        }
        Family::Ramp => {
            let dir = (
                jittered(&mut rng, 1.0, 0.8, j),
                jittered(&mut rng, 0.55, 0.8, j),
                jittered(&mut rng, 0.3, 0.8, j),
            );
            let amp = jittered(&mut rng, 180.0, 0.25, j);
            let offset = 10.0 * j * unit(&mut rng);
            let span = dir.0 + dir.1 + dir.2;
            fill(&mut voxels, n, &mut rng, |x, y, z, _| {
                let t = (dir.0 * x + dir.1 * y + dir.2 * z) / (span * (nf - 1.0));
                offset + amp * t
            });
        }
        Family::Noise => {
            let amp = jittered(&mut rng, 255.0, 0.2, j);
            let floor = 20.0 * j * unit(&mut rng);
            fill(&mut voxels, n, &mut rng, |_, _, _, rng| {
                floor + (amp - floor) * unit(rng)
            });
        }
        Family::Checker => {
            let block = jittered(&mut rng, nf / 8.0, 0.5, j).round().max(2.0) as usize;
            let lo = jittered(&mut rng, 40.0, 0.5, j);
            let hi = jittered(&mut rng, 210.0, 0.2, j);
            let noise_amp = 8.0 * j * unit(&mut rng);
            fill(&mut voxels, n, &mut rng, |x, y, z, rng| {
                let cell = x as usize / block + y as usize / block + z as usize / block;
                let base = if cell.is_multiple_of(2) { lo } else { hi };
                base + noise(rng, noise_amp)
            });
        }
    }

    let meta = VolumeMeta::new((n, n, n), VoxelType::F32);
    Ok(Volume::from_voxels(meta, voxels).expect("generated voxels are finite"))
}

/// Write instances `start..start+count` of a family into `dir` as raw f32
/// volumes with sidecar descriptors, named `<prefix>_<index>.raw`. Returns
/// the file names. Instance values are f32-quantized at generation, so
/// reloading a written corpus reproduces the in-memory volumes exactly.
pub fn write_corpus(
    spec: &FamilySpec,
    count: usize,
    start: usize,
    dir: &std::path::Path,
    prefix: &str,
) -> Result<Vec<String>, SynthError> {
    spec.validate()?;
    if count == 0 {
        return Err(SynthError::BadSpec("count must be at least 1".into()));
    }
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let index = start + i;
        let volume = generate_instance(spec, index)?;
        let file = format!("{prefix}_{index:03}.raw");
        write_volume(&dir.join(&file), &volume)?;
        files.push(file);
    }
    Ok(files)
}

fn jittered_center(rng: &mut ChaCha8Rng, n: f64, jitter: f64) -> (f64, f64, f64) {
    let half = (n - 1.0) / 2.0;
    (
        half + 0.25 * jitter * n * centered(rng),
        half + 0.25 * jitter * n * centered(rng),
        half + 0.25 * jitter * n * centered(rng),
    )
}

#[inline]
fn dist2(p: (f64, f64, f64), c: (f64, f64, f64)) -> f64 {
    let dx = p.0 - c.0;
    let dy = p.1 - c.1;
    let dz = p.2 - c.2;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn gaussian(amp: f64, d2: f64, sigma: f64) -> f64 {
    amp * (-d2 / (2.0 * sigma * sigma)).exp()
}

#[inline]
fn noise(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    if amp > 0.0 {
        amp * unit(rng)
    } else {
        0.0
    }
}

/// Fill voxels in x-fastest order, quantizing each value through f32. The
/// rng is threaded through the closure so per-voxel draws follow the voxel
/// order exactly.
fn fill(
    voxels: &mut Vec<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(f64, f64, f64, &mut ChaCha8Rng) -> f64,
) {
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let v = f(x as f64, y as f64, z as f64, rng);
                voxels.push(f64::from(v as f32));
            }
        }
    }
}

/// A volume with its ground-truth label for evaluation.
#[derive(Debug, Clone)]
pub struct LabeledVolume {
    /// A registered class name, the trained rest class name, or the literal
    /// `"rest"` for miscellaneous data.
    pub label: String,
    pub source_id: String,
    pub volume: Volume,
}

/// Confusion matrix over the well-defined classes plus a final rest row and
/// column. A decision counts as rest when it lands in the trained rest class
/// or is rejected by thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionReport {
    labels: Vec<String>,
    matrix: Vec<Vec<u32>>,
    /// Well-defined datasets decided as rest.
    pub some_to_rest: u32,
    /// Rest datasets decided as a well-defined class.
    pub rest_to_some: u32,
    /// Cross-class errors among well-defined classes.
    pub some_to_other_some: u32,
}

impl ConfusionReport {
    /// Row/column labels; the last entry is always the rest group.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn matrix(&self) -> &[Vec<u32>] {
        &self.matrix
    }

    pub fn count(&self, true_axis: usize, decided_axis: usize) -> u32 {
        self.matrix[true_axis][decided_axis]
    }

    pub fn row_sums(&self) -> Vec<u32> {
        self.matrix.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn total(&self) -> u32 {
        self.row_sums().iter().sum()
    }

    /// Datasets whose decision matched their label (diagonal sum).
    pub fn correct(&self) -> u32 {
        (0..self.labels.len()).map(|i| self.matrix[i][i]).sum()
    }

    /// Aligned text table with the headline counts underneath.
    pub fn to_text_table(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(4)
            .max(7);
        let mut out = String::new();
        out.push_str(&format!("{:width$}", "true\\dec"));
        for l in &self.labels {
            out.push_str(&format!("  {l:>width$}"));
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            out.push_str(&format!("{:width$}", self.labels[i]));
            for &c in row {
                out.push_str(&format!("  {c:>width$}"));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "some->rest: {}  rest->some: {}  some->other-some: {}\n",
            self.some_to_rest, self.rest_to_some, self.some_to_other_some
        ));
        out
    }

    /// Matrix as CSV: a `true_class` column followed by one column per
    /// decided class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true_class");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            out.push_str(&self.labels[i]);
            for &c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Classify every corpus volume through the full pipeline (histogram at the
/// model's reduction factor, forward pass, decision policy) and tally the
/// confusion matrix.
pub fn evaluate(
    state: &ClassifierState,
    corpus: &[LabeledVolume],
    policy: &DecisionPolicy,
) -> Result<ConfusionReport, SynthError> {
    if corpus.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }

    let registry = state.registry();
    let axes = Axes::new(registry);
    let n_axes = axes.labels.len();
    let mut matrix = vec![vec![0u32; n_axes]; n_axes];

    for item in corpus {
        let true_axis = axes
            .axis_for_label(registry, &item.label)
            .ok_or_else(|| SynthError::UnknownLabel(item.label.clone()))?;
        let classification = state.classify_volume(&item.volume, policy)?;
        let decided_axis = match classification.chosen_index {
            Some(i) if !registry.is_rest(i) => axes.axis_of_class[i].unwrap(),
            _ => axes.rest_axis,
        };
        matrix[true_axis][decided_axis] += 1;
    }

    let rest = axes.rest_axis;
    let mut some_to_rest = 0;
    let mut rest_to_some = 0;
    let mut some_to_other_some = 0;
    for (t, row) in matrix.iter().enumerate() {
        for (d, &c) in row.iter().enumerate() {
            if t != rest && d == rest {
                some_to_rest += c;
            } else if t == rest && d != rest {
                rest_to_some += c;
            } else if t != rest && d != rest && t != d {
                some_to_other_some += c;
            }
        }
    }

    Ok(ConfusionReport {
        labels: axes.labels,
        matrix,
        some_to_rest,
        rest_to_some,
        some_to_other_some,
    })
}

struct Axes {
    labels: Vec<String>,
    /// Registry class index -> axis position (None for the rest class).
    axis_of_class: Vec<Option<usize>>,
    rest_axis: usize,
}

impl Axes {
    fn new(registry: &ClassRegistry) -> Self {
        let mut labels = Vec::new();
        let mut axis_of_class = vec![None; registry.len()];
        for (i, name) in registry.names().iter().enumerate() {
            if !registry.is_rest(i) {
                axis_of_class[i] = Some(labels.len());
                labels.push(name.clone());
            }
        }
        let rest_axis = labels.len();
        let rest_label = registry
            .rest_class_index()
            .map_or(REST_OUTCOME.to_string(), |i| registry.name(i).to_string());
        labels.push(rest_label);
        Axes {
            labels,
            axis_of_class,
            rest_axis,
        }
    }

    fn axis_for_label(&self, registry: &ClassRegistry, label: &str) -> Option<usize> {
        if label == REST_OUTCOME {
            return Some(self.rest_axis);
        }
        let index = registry.index_of(label)?;
        Some(match self.axis_of_class[index] {
            Some(axis) => axis,
            None => self.rest_axis,
        })
    }
}
