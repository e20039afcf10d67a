//! From-scratch feed-forward multilayer perceptron.
//!
//! Sigmoid activations on every non-input layer, trained by back-propagation
//! with per-sample (online) updates and momentum until the mean squared error
//! drops below a target. Weights and biases are stored as `f32`; all dot
//! products and gradient arithmetic accumulate in `f64`. Loop order is fixed
//! everywhere so a given (seed, samples, config) reproduces identical weights
//! run after run.
//!
//! A trained network can grow a new output neuron without disturbing any
//! existing weight: only the connections from the last hidden layer to the
//! new neuron are added, so all previous outputs keep their exact values.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("bad network shape: {0}")]
    BadShape(String),
    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training requires at least one sample")]
    EmptySampleSet,
    #[error("bad training config: {0}")]
    InvalidConfig(String),
}

/// Largest `f32` below 1.0; with [`OUTPUT_MIN`] it keeps reported outputs
/// strictly inside (0,1) even where the sigmoid would round to 0 or 1.
const OUTPUT_MAX: f32 = 0.999_999_94;
const OUTPUT_MIN: f32 = f32::MIN_POSITIVE;

/// One training example: a flattened histogram and its desired output
/// vector. For classification the target is one-hot (exactly one component
/// is 1); `label` is the index of that class and `source_id` names the
/// dataset the sample came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub label: usize,
    pub source_id: String,
}

impl TrainingSample {
    pub fn new(input: Vec<f32>, target: Vec<f32>, label: usize, source_id: &str) -> Self {
        TrainingSample {
            input,
            target,
            label,
            source_id: source_id.to_string(),
        }
    }
}

/// One-hot target vector over `classes` outputs with a 1 at `index`.
pub fn one_hot(classes: usize, index: usize) -> Vec<f32> {
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    v
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Training stops once the epoch MSE drops below this value.
    pub mse_target: f64,
    pub max_epochs: u32,
    /// Seed for any weight randomization done around training (initial
    /// network creation, output addition). The epoch loop itself is
    /// deterministic and draws nothing.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.2,
            momentum: 0.9,
            mse_target: 0.003,
            max_epochs: 10_000,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<(), MlpError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlpError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MlpError::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.mse_target > 0.0 && self.mse_target.is_finite()) {
            return Err(MlpError::InvalidConfig(format!(
                "mse_target must be positive, got {}",
                self.mse_target
            )));
        }
        if self.max_epochs == 0 {
            return Err(MlpError::InvalidConfig(
                "max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs_run: u32,
    pub final_mse: f64,
    pub converged: bool,
}

/// Layered perceptron. `weights[l]` connects layer `l` to layer `l+1` as a
/// flat row-major matrix of shape (size of layer l+1) x (size of layer l);
/// `biases[l]` belongs to layer `l+1`.
#[derive(Debug, Clone)]
pub struct Network {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f32>>,
    biases: Vec<Vec<f32>>,
    /// Seed used at initialization; kept for provenance, not persisted.
    seed: u64,
}

/// Networks compare by what they compute; the provenance seed is excluded
/// so a persisted round trip (which does not store it) compares equal.
impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes
            && self.weights == other.weights
            && self.biases == other.biases
    }
}

/// Uniform draw from [-0.5, 0.5] with 24-bit resolution. Built directly on
/// the raw generator output so the value stream is pinned by the ChaCha
/// specification rather than any distribution crate internals.
#[inline]
fn uniform_half(rng: &mut ChaCha8Rng) -> f32 {
    ((rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32) - 0.5
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Network {
    /// Create a network with weights and biases drawn uniformly from
    /// [-0.5, 0.5] by a seeded generator. Identical seeds give bit-identical
    /// networks. One or two hidden layers (3 or 4 layers total).
    pub fn init(
        input_size: usize,
        hidden_sizes: &[usize],
        output_size: usize,
        seed: u64,
    ) -> Result<Network, MlpError> {
        if hidden_sizes.is_empty() || hidden_sizes.len() > 2 {
            return Err(MlpError::BadShape(format!(
                "expected 1 or 2 hidden layers, got {}",
                hidden_sizes.len()
            )));
        }
        let mut layer_sizes = Vec::with_capacity(hidden_sizes.len() + 2);
        layer_sizes.push(input_size);
        layer_sizes.extend_from_slice(hidden_sizes);
        layer_sizes.push(output_size);
        if layer_sizes.contains(&0) {
            return Err(MlpError::BadShape("all layer sizes must be >= 1".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            let w: Vec<f32> = (0..next * prev).map(|_| uniform_half(&mut rng)).collect();
            let b: Vec<f32> = (0..next).map(|_| uniform_half(&mut rng)).collect();
            weights.push(w);
            biases.push(b);
        }
        Ok(Network {
            layer_sizes,
            weights,
            biases,
            seed,
        })
    }

    /// Rebuild a network from stored parts, validating shape consistency.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f32>>,
        biases: Vec<Vec<f32>>,
        seed: u64,
    ) -> Result<Network, MlpError> {
        if !(3..=4).contains(&layer_sizes.len()) {
            return Err(MlpError::BadShape(format!(
                "expected 3 or 4 layers, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(MlpError::BadShape("all layer sizes must be >= 1".into()));
        }
        let pairs = layer_sizes.len() - 1;
        if weights.len() != pairs || biases.len() != pairs {
            return Err(MlpError::BadShape(format!(
                "expected {pairs} weight/bias sets, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] {
                return Err(MlpError::BadShape(format!(
                    "weight matrix {l} has {} entries, expected {}",
                    weights[l].len(),
                    pair[0] * pair[1]
                )));
            }
            if biases[l].len() != pair[1] {
                return Err(MlpError::BadShape(format!(
                    "bias vector {l} has {} entries, expected {}",
                    biases[l].len(),
                    pair[1]
                )));
            }
        }
        Ok(Network {
            layer_sizes,
            weights,
            biases,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Vec<f32>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f32>] {
        &self.biases
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feed an input through the network. Every output lies strictly in
    /// (0,1); outputs do not in general sum to 1.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>, MlpError> {
        if input.len() != self.input_size() {
            return Err(MlpError::ShapeMismatch {
                expected: self.input_size(),
                got: input.len(),
            });
        }
        let acts = self.forward_activations(input);
        Ok(acts
            .last()
            .unwrap()
            .iter()
            .map(|&a| (a as f32).clamp(OUTPUT_MIN, OUTPUT_MAX))
            .collect())
    }

    /// Full activation stack in f64; element 0 is the widened input.
    fn forward_activations(&self, input: &[f32]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layer_sizes.len());
        acts.push(input.iter().map(|&x| f64::from(x)).collect());
        for l in 0..self.weights.len() {
            let prev = &acts[l];
            let next_size = self.layer_sizes[l + 1];
            let mut next = Vec::with_capacity(next_size);
            for j in 0..next_size {
                let row = &self.weights[l][j * prev.len()..(j + 1) * prev.len()];
                let mut z = f64::from(self.biases[l][j]);
                for (w, a) in row.iter().zip(prev.iter()) {
                    z += f64::from(*w) * a;
                }
                next.push(sigmoid(z));
            }
            acts.push(next);
        }
        acts
    }

    /// Per-sample loss: mean over output components of (output - target)^2.
    /// The epoch MSE reported by [`Network::train`] is the mean of this over
    /// all samples, so the convergence target is comparable across class
    /// counts.
    fn sample_loss(&self, input: &[f32], target: &[f32]) -> f64 {
        let acts = self.forward_activations(input);
        let out = acts.last().unwrap();
        mean_squared_error(out, target)
    }

    /// Back-propagated deltas for one sample, outermost layer first in
    /// `deltas[l]` corresponding to layer `l+1`. The gradient of the
    /// per-sample loss is `dL/dw[l][j][i] = deltas[l][j] * acts[l][i]` and
    /// `dL/db[l][j] = deltas[l][j]`.
    fn backprop_deltas(&self, acts: &[Vec<f64>], target: &[f32]) -> Vec<Vec<f64>> {
        let pairs = self.weights.len();
        let mut deltas: Vec<Vec<f64>> = vec![Vec::new(); pairs];

        let out = acts.last().unwrap();
        let k = out.len() as f64;
        deltas[pairs - 1] = out
            .iter()
            .zip(target.iter())
            .map(|(&o, &t)| (2.0 / k) * (o - f64::from(t)) * o * (1.0 - o))
            .collect();

        for l in (0..pairs - 1).rev() {
            let next_delta = &deltas[l + 1];
            let w_next = &self.weights[l + 1];
            let layer = &acts[l + 1];
            let size = layer.len();
            let mut d = Vec::with_capacity(size);
            for i in 0..size {
                let mut err = 0.0f64;
                for (j, dj) in next_delta.iter().enumerate() {
                    err += f64::from(w_next[j * size + i]) * dj;
                }
                d.push(err * layer[i] * (1.0 - layer[i]));
            }
            deltas[l] = d;
        }
        deltas
    }

    /// Train in place over the full sample list until the epoch MSE drops
    /// below `cfg.mse_target` or `cfg.max_epochs` is reached.
    ///
    /// Each epoch walks the samples in their given order and applies a
    /// momentum update after every sample; the MSE is then measured with a
    /// fresh pass over all samples. Fully deterministic for a given
    /// (network, samples, config).
    pub fn train(
        &mut self,
        samples: &[TrainingSample],
        cfg: &TrainingConfig,
    ) -> Result<TrainingReport, MlpError> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(MlpError::EmptySampleSet);
        }
        for s in samples {
            if s.input.len() != self.input_size() {
                return Err(MlpError::ShapeMismatch {
                    expected: self.input_size(),
                    got: s.input.len(),
                });
            }
            if s.target.len() != self.output_size() {
                return Err(MlpError::ShapeMismatch {
                    expected: self.output_size(),
                    got: s.target.len(),
                });
            }
        }

        let mut vel_w: Vec<Vec<f32>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut vel_b: Vec<Vec<f32>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        let mut epochs_run = 0;
        let mut mse = f64::INFINITY;
        while epochs_run < cfg.max_epochs {
            for sample in samples {
                let acts = self.forward_activations(&sample.input);
                let deltas = self.backprop_deltas(&acts, &sample.target);
                // deltas are complete; now update layer by layer, input side first
                for l in 0..self.weights.len() {
                    let prev = &acts[l];
                    let prev_len = prev.len();
                    for (j, &dj) in deltas[l].iter().enumerate() {
                        let row = &mut self.weights[l][j * prev_len..(j + 1) * prev_len];
                        let vrow = &mut vel_w[l][j * prev_len..(j + 1) * prev_len];
                        for i in 0..prev_len {
                            let v = cfg.momentum * f64::from(vrow[i])
                                - cfg.learning_rate * dj * prev[i];
                            vrow[i] = v as f32;
                            row[i] = (f64::from(row[i]) + v) as f32;
                        }
                        let vb = cfg.momentum * f64::from(vel_b[l][j]) - cfg.learning_rate * dj;
                        vel_b[l][j] = vb as f32;
                        self.biases[l][j] = (f64::from(self.biases[l][j]) + vb) as f32;
                    }
                }
            }
            epochs_run += 1;

            mse = samples
                .iter()
                .map(|s| self.sample_loss(&s.input, &s.target))
                .sum::<f64>()
                / samples.len() as f64;
            if mse < cfg.mse_target {
                break;
            }
        }

        Ok(TrainingReport {
            epochs_run,
            final_mse: mse,
            converged: mse < cfg.mse_target,
        })
    }

    /// Return a network with one more output neuron. All existing weights
    /// and biases are carried over bit-identically; only the connections
    /// from the last hidden layer to the new neuron (plus its bias) are
    /// drawn from `seed`, so every pre-existing output keeps its exact value
    /// for any input.
    pub fn add_output(&self, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = self.clone();
        let last = net.weights.len() - 1;
        let hidden = net.layer_sizes[net.layer_sizes.len() - 2];
        net.weights[last].extend((0..hidden).map(|_| uniform_half(&mut rng)));
        net.biases[last].push(uniform_half(&mut rng));
        *net.layer_sizes.last_mut().unwrap() += 1;
        net
    }

    /// Compare the analytic back-propagation gradient of the per-sample loss
    /// against central finite differences for every weight and bias, and
    /// return the maximum relative error
    /// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)`.
    ///
    /// The finite differences are evaluated on an f64 mirror of the weights
    /// so the probe step is not quantized by f32 storage; the analytic side
    /// is the same backward pass that training applies.
    #[allow(clippy::needless_range_loop)] // indices name the probed parameter
    pub fn gradient_check(&self, sample: &TrainingSample, epsilon: f64) -> Result<f64, MlpError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(MlpError::InvalidConfig(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if sample.input.len() != self.input_size() {
            return Err(MlpError::ShapeMismatch {
                expected: self.input_size(),
                got: sample.input.len(),
            });
        }
        if sample.target.len() != self.output_size() {
            return Err(MlpError::ShapeMismatch {
                expected: self.output_size(),
                got: sample.target.len(),
            });
        }

        let acts = self.forward_activations(&sample.input);
        let deltas = self.backprop_deltas(&acts, &sample.target);

        let mut mirror = F64Params::from_network(self);
        let mut max_rel = 0.0f64;
        for l in 0..self.weights.len() {
            let prev_len = self.layer_sizes[l];
            for j in 0..self.layer_sizes[l + 1] {
                for i in 0..prev_len {
                    let analytic = deltas[l][j] * acts[l][i];
                    let numeric = mirror.central_difference(
                        ParamRef::Weight(l, j * prev_len + i),
                        epsilon,
                        sample,
                    );
                    max_rel = max_rel.max(relative_error(analytic, numeric));
                }
                let analytic = deltas[l][j];
                let numeric = mirror.central_difference(ParamRef::Bias(l, j), epsilon, sample);
                max_rel = max_rel.max(relative_error(analytic, numeric));
            }
        }
        Ok(max_rel)
    }
}

fn mean_squared_error(out: &[f64], target: &[f32]) -> f64 {
    let k = out.len() as f64;
    out.iter()
        .zip(target.iter())
        .map(|(&o, &t)| {
            let d = o - f64::from(t);
            d * d
        })
        .sum::<f64>()
        / k
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

enum ParamRef {
    Weight(usize, usize),
    Bias(usize, usize),
}

/// f64 copy of the parameters for finite-difference probing.
struct F64Params {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl F64Params {
    fn from_network(net: &Network) -> Self {
        F64Params {
            layer_sizes: net.layer_sizes.clone(),
            weights: net
                .weights
                .iter()
                .map(|w| w.iter().map(|&x| f64::from(x)).collect())
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| b.iter().map(|&x| f64::from(x)).collect())
                .collect(),
        }
    }

    fn param_mut(&mut self, p: &ParamRef) -> &mut f64 {
        match *p {
            ParamRef::Weight(l, idx) => &mut self.weights[l][idx],
            ParamRef::Bias(l, idx) => &mut self.biases[l][idx],
        }
    }

    fn central_difference(&mut self, p: ParamRef, epsilon: f64, sample: &TrainingSample) -> f64 {
        let original = *self.param_mut(&p);
        *self.param_mut(&p) = original + epsilon;
        let plus = self.loss(&sample.input, &sample.target);
        *self.param_mut(&p) = original - epsilon;
        let minus = self.loss(&sample.input, &sample.target);
        *self.param_mut(&p) = original;
        (plus - minus) / (2.0 * epsilon)
    }

    fn loss(&self, input: &[f32], target: &[f32]) -> f64 {
        let mut prev: Vec<f64> = input.iter().map(|&x| f64::from(x)).collect();
        for l in 0..self.weights.len() {
            let next_size = self.layer_sizes[l + 1];
            let mut next = Vec::with_capacity(next_size);
            for j in 0..next_size {
                let row = &self.weights[l][j * prev.len()..(j + 1) * prev.len()];
                let mut z = self.biases[l][j];
                for (w, a) in row.iter().zip(prev.iter()) {
                    z += w * a;
                }
                next.push(sigmoid(z));
            }
            prev = next;
        }
        mean_squared_error(&prev, target)
    }
}
