//! Trainable binary classifiers producing a scalar logit: a logistic (linear)
//! model and a small multilayer perceptron with rectifier hidden units.
//!
//! Parameters live in one flat vector with a fixed layout: for each layer in
//! order, the weight matrix row-major (`weight[out][in]`) followed by the bias
//! vector. The logistic model is the degenerate case with no hidden layers.
//! The flat layout keeps the optimizer, checkpointing, and finite-difference
//! checks straightforward.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EapoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

/// A classifier with a flat parameter vector. `forward` produces the raw
/// logit; callers needing probabilities apply the sigmoid themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    kind: ModelKind,
    dim: usize,
    hidden: Vec<usize>,
    /// Seeds that have shaped these parameters: the init seed followed by the
    /// seed of every training run applied since.
    seed_history: Vec<u64>,
    parameters: Vec<f64>,
}

/// Per-layer (input width, output width) pairs implied by `dim` and `hidden`.
fn layer_shapes(dim: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(dim);
    widths.extend_from_slice(hidden);
    widths.push(1);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

fn parameter_len(dim: usize, hidden: &[usize]) -> usize {
    layer_shapes(dim, hidden)
        .iter()
        .map(|(i, o)| i * o + o)
        .sum()
}

impl Classifier {
    /// Initialize with uniform Xavier weights in
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]` and zero
    /// biases, fully determined by `seed`.
    pub fn init(kind: ModelKind, dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(EapoError::InvalidConfig(
                "input dimension must be positive".into(),
            ));
        }
        if hidden.contains(&0) {
            return Err(EapoError::InvalidConfig(
                "hidden layer widths must be positive".into(),
            ));
        }
        let hidden: Vec<usize> = match kind {
            ModelKind::Logistic => {
                if !hidden.is_empty() {
                    return Err(EapoError::InvalidConfig(
                        "logistic model takes no hidden layers".into(),
                    ));
                }
                Vec::new()
            }
            ModelKind::Mlp => hidden.to_vec(),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parameters = Vec::with_capacity(parameter_len(dim, &hidden));
        for (fan_in, fan_out) in layer_shapes(dim, &hidden) {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                parameters.push(rng.random_range(-bound..bound));
            }
            parameters.extend(std::iter::repeat_n(0.0, fan_out));
        }

        Ok(Self {
            kind,
            dim,
            hidden,
            seed_history: vec![seed],
            parameters,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.parameters
    }

    pub fn seed_history(&self) -> &[u64] {
        &self.seed_history
    }

    /// Append a training seed to the provenance trail.
    pub fn record_seed(&mut self, seed: u64) {
        self.seed_history.push(seed);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(EapoError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(EapoError::NonFiniteInput(format!("feature value {bad}")));
        }
        Ok(())
    }

    /// Compute the logit for one input.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cached(x)?.logit())
    }

    /// Forward pass that retains per-layer activations for a later backward
    /// pass over the same input.
    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache<'_>> {
        self.check_input(x)?;
        let shapes = layer_shapes(self.dim, &self.hidden);
        let n_layers = shapes.len();
        // activations[l] is the input to layer l; the last entry holds the
        // scalar output.
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());

        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let weights = &self.parameters[offset..offset + fan_in * fan_out];
            let biases = &self.parameters[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;

            let input = &activations[l];
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let mut acc = biases[o];
                for (w, v) in row.iter().zip(input.iter()) {
                    acc += w * v;
                }
                // Rectifier on hidden layers, identity on the output logit.
                if l + 1 < n_layers && acc < 0.0 {
                    acc = 0.0;
                }
                out.push(acc);
            }
            activations.push(out);
        }

        Ok(ForwardCache {
            model: self,
            activations,
        })
    }

    /// Gradient of `upstream * logit(x)` with respect to every parameter, in
    /// the flat layout. The rectifier subgradient at exactly 0 is 0.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<Vec<f64>> {
        if !upstream.is_finite() {
            return Err(EapoError::NonFiniteInput(format!("upstream {upstream}")));
        }
        let cache = self.forward_cached(x)?;
        let mut grad = vec![0.0; self.parameters.len()];
        cache.accumulate_backward(upstream, &mut grad);
        Ok(grad)
    }

    /// Save as a self-describing JSON checkpoint. Reloading reproduces
    /// bit-identical forward outputs because parameters round-trip through
    /// shortest-representation decimal.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| EapoError::Checkpoint(e.to_string()))?;
        fs::write(path, body).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| EapoError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let model: Classifier =
            serde_json::from_str(&body).map_err(|e| EapoError::Checkpoint(e.to_string()))?;
        if model.parameters.len() != parameter_len(model.dim, &model.hidden) {
            return Err(EapoError::Checkpoint(format!(
                "parameter vector length {} does not match layout",
                model.parameters.len()
            )));
        }
        if model.parameters.iter().any(|p| !p.is_finite()) {
            return Err(EapoError::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }

    /// Freeze a deep, immutable snapshot to serve as the reference policy.
    pub fn freeze_reference(&self) -> ReferencePolicy {
        ReferencePolicy {
            snapshot: self.clone(),
        }
    }
}

/// Activations retained by [`Classifier::forward_cached`].
pub struct ForwardCache<'a> {
    model: &'a Classifier,
    activations: Vec<Vec<f64>>,
}

impl ForwardCache<'_> {
    pub fn logit(&self) -> f64 {
        self.activations.last().expect("output layer")[0]
    }

    /// Add the gradient of `upstream * logit` into `grad` (flat layout).
    pub fn accumulate_backward(&self, upstream: f64, grad: &mut [f64]) {
        let model = self.model;
        let shapes = layer_shapes(model.dim, &model.hidden);
        let n_layers = shapes.len();

        // Parameter offsets of each layer.
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for &(fan_in, fan_out) in &shapes {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }

        // delta holds d(upstream * logit) / d(layer output).
        let mut delta = vec![upstream];
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = shapes[l];
            let base = offsets[l];
            let input = &self.activations[l];
            let output = &self.activations[l + 1];

            // Hidden outputs passed through the rectifier: zero the delta
            // where the unit was inactive (output 0 covers pre-activation
            // <= 0 given the subgradient-at-0 convention).
            if l + 1 < n_layers {
                for (d, &o) in delta.iter_mut().zip(output.iter()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }

            let mut prev_delta = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row_base = base + o * fan_in;
                for i in 0..fan_in {
                    grad[row_base + i] += d * input[i];
                    prev_delta[i] += d * model.parameters[row_base + i];
                }
                grad[base + fan_in * fan_out + o] += d;
            }
            delta = prev_delta;
        }
    }
}

/// Frozen snapshot of a pretrained classifier. The policy probability of the
/// positive class is `sigmoid(logit(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferencePolicy {
    snapshot: Classifier,
}

impl ReferencePolicy {
    pub fn snapshot(&self) -> &Classifier {
        &self.snapshot
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.snapshot.forward(x)
    }

    pub fn dim(&self) -> usize {
        self.snapshot.dim
    }
}
