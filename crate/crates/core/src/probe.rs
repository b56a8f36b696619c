//! The MLP probe: `input → 512 → 256 → 128 → 1`, rectifier hidden units and
//! a single logistic output unit whose value is the hallucination-risk score.
//!
//! All arithmetic is `f64`. Features arrive as `f32` and are widened on entry.
//! Training minimizes binary cross-entropy on the logistic output, so the
//! gradient at the output pre-activation is simply `score - label`.
//!
//! Weight files (`HALPPW01`) carry a JSON header followed by the raw tensors:
//!
//! ```text
//! magic   8 bytes "HALPPW01"
//! header  u32 len + JSON {arch: [in, h1, h2, h3, 1], activation: "relu", output: "sigmoid", provenance}
//! tensors f64 LE, row-major, in order W1 b1 W2 b2 W3 b3 W4 b4
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::PackHeader;
use crate::rng::Stream;
use crate::trainer::{Standardizer, TrainConfig};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"HALPPW01";
pub const DEFAULT_HIDDEN: [usize; 3] = [512, 256, 128];

/// Scores are clamped into this closed range, which lies strictly inside (0, 1).
pub const SCORE_MIN: f64 = f64::MIN_POSITIVE;
pub const SCORE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("input has {found} components, probe expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite input at component {0}")]
    NonFiniteInput(usize),
    #[error("bad magic: stream does not start with \"HALPPW01\"")]
    BadMagic,
    #[error("truncated stream at byte offset {0}")]
    Truncated(usize),
    #[error("malformed weights header: {0}")]
    Header(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameter in {tensor} at index {index}")]
    NonFiniteParameter { tensor: String, index: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProbeArch {
    pub input_dim: usize,
    pub hidden: [usize; 3],
}

impl ProbeArch {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: DEFAULT_HIDDEN,
        }
    }

    /// Non-default hidden sizes are recorded in the weights' provenance.
    pub fn with_hidden(input_dim: usize, hidden: [usize; 3]) -> Self {
        Self { input_dim, hidden }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> [usize; 5] {
        [self.input_dim, self.hidden[0], self.hidden[1], self.hidden[2], 1]
    }

    pub fn is_default(&self) -> bool {
        self.hidden == DEFAULT_HIDDEN
    }

    pub fn parameter_count(&self) -> usize {
        let w = self.widths();
        w.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// A fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.bias)
                .map(|(row, b)| b + dot(row, x)),
        );
    }
}

/// Dot product with eight independent accumulators. The summation order is
/// fixed, so results are reproducible bit-for-bit.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Where the weights came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    #[serde(default)]
    pub hidden_override: bool,
    #[serde(default)]
    pub train_config_digest: Option<String>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub sources: Vec<PackHeader>,
    #[serde(default)]
    pub standardization: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeWeights {
    pub arch: ProbeArch,
    /// Exactly four layers: three hidden, one output.
    pub layers: Vec<Dense>,
    pub provenance: Provenance,
}

/// Intermediate values from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer: `inputs[0]` is the probe input, `inputs[k]` the
    /// rectified output of hidden layer `k`.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of the three hidden layers.
    pub pre_activations: Vec<Vec<f64>>,
    /// Output pre-activation.
    pub logit: f64,
    pub score: f64,
}

/// Gradients with the same layout as [`ProbeWeights::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros(arch: &ProbeArch) -> Self {
        let w = arch.widths();
        Self {
            layers: w.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Flattened in file order: W1, b1, ..., W4, b4.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy expressed through the logit.
pub fn bce_from_logit(logit: f64, label: bool) -> f64 {
    softplus(logit) - if label { logit } else { 0.0 }
}

/// Kaiming-uniform weights drawn from `U[-sqrt(6/fan_in), sqrt(6/fan_in))`,
/// zero biases. Layers are filled in order from one seeded stream.
pub fn init_weights(arch: ProbeArch, seed: u64) -> ProbeWeights {
    assert!(arch.input_dim >= 1, "input_dim must be positive");
    let mut rng = Stream::new(seed, "probe-init");
    let w = arch.widths();
    let layers = w
        .windows(2)
        .map(|p| {
            let (fan_in, fan_out) = (p[0], p[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut layer = Dense::zeros(fan_in, fan_out);
            for v in &mut layer.weights {
                *v = (2.0 * rng.next_f64() - 1.0) * bound;
            }
            layer
        })
        .collect();
    ProbeWeights {
        arch,
        layers,
        provenance: Provenance {
            seed,
            hidden_override: !arch.is_default(),
            ..Provenance::default()
        },
    }
}

impl ProbeWeights {
    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.arch.input_dim {
            return Err(ProbeError::DimensionMismatch {
                expected: self.arch.input_dim,
                found: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFiniteInput(i));
        }
        let mut inputs = Vec::with_capacity(4);
        let mut pre_activations = Vec::with_capacity(3);
        inputs.push(x.to_vec());
        for layer in &self.layers[..3] {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine_into(inputs.last().unwrap(), &mut z);
            inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
            pre_activations.push(z);
        }
        let out = &self.layers[3];
        let logit = out.bias[0] + dot(&out.weights, inputs.last().unwrap());
        let score = logistic(logit).clamp(SCORE_MIN, SCORE_MAX);
        Ok(ForwardCache {
            inputs,
            pre_activations,
            logit,
            score,
        })
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.score)
    }

    /// Scores a raw feature vector, applying the stored standardization.
    pub fn score_features(&self, x: &[f32]) -> Result<f64> {
        let input = match &self.provenance.standardization {
            Some(stats) => {
                if stats.mean.len() != x.len() {
                    return Err(ProbeError::DimensionMismatch {
                        expected: stats.mean.len(),
                        found: x.len(),
                    });
                }
                stats.apply(x)
            }
            None => x.iter().map(|&v| f64::from(v)).collect(),
        };
        self.score(&input)
    }

    pub fn loss(&self, x: &[f64], label: bool) -> Result<f64> {
        Ok(bce_from_logit(self.forward(x)?.logit, label))
    }

    pub fn backward(&self, cache: &ForwardCache, label: bool) -> Gradients {
        let mut grads = Gradients::zeros(&self.arch);
        self.backward_into(cache, label, 1.0, &mut grads);
        grads
    }

    /// Adds `scale ×` the loss gradient for one sample into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, label: bool, scale: f64, grads: &mut Gradients) {
        let target = if label { 1.0 } else { 0.0 };
        // Unclamped logistic keeps the gradient exact for the softplus loss.
        let mut delta = vec![(logistic(cache.logit) - target) * scale];
        for k in (0..4).rev() {
            let layer = &self.layers[k];
            let input = &cache.inputs[k];
            let g = &mut grads.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &xi) in row.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mut next = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
            }
            for (n, &z) in next.iter_mut().zip(&cache.pre_activations[k - 1]) {
                if z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    /// Mutable access to every parameter in file order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    fn check_shapes(&self) -> Result<()> {
        let w = self.arch.widths();
        if self.layers.len() != 4 {
            return Err(ProbeError::ShapeMismatch(format!(
                "expected 4 layers, found {}",
                self.layers.len()
            )));
        }
        for (k, (layer, p)) in self.layers.iter().zip(w.windows(2)).enumerate() {
            if layer.inputs != p[0]
                || layer.outputs != p[1]
                || layer.weights.len() != p[0] * p[1]
                || layer.bias.len() != p[1]
            {
                return Err(ProbeError::ShapeMismatch(format!(
                    "layer {} is {}x{}, arch says {}x{}",
                    k + 1,
                    layer.outputs,
                    layer.inputs,
                    p[1],
                    p[0]
                )));
            }
        }
        if let Some(stats) = &self.provenance.standardization {
            if stats.mean.len() != self.arch.input_dim || stats.std.len() != self.arch.input_dim {
                return Err(ProbeError::ShapeMismatch(format!(
                    "standardization stats have length {}/{}, input_dim is {}",
                    stats.mean.len(),
                    stats.std.len(),
                    self.arch.input_dim
                )));
            }
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        for (k, layer) in self.layers.iter().enumerate() {
            if let Some(index) = layer.weights.iter().position(|v| !v.is_finite()) {
                return Err(ProbeError::NonFiniteParameter {
                    tensor: format!("W{}", k + 1),
                    index,
                });
            }
            if let Some(index) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Err(ProbeError::NonFiniteParameter {
                    tensor: format!("b{}", k + 1),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        self.check_finite()?;
        let header = WeightsHeader {
            arch: self.arch.widths().to_vec(),
            activation: "relu".into(),
            output: "sigmoid".into(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ProbeError::Header(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| ProbeError::Header("header too long".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + self.arch.parameter_count() * 8);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(ProbeError::BadMagic);
        }
        if bytes.len() < 12 {
            return Err(ProbeError::Truncated(8));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes.get(12..12 + len).ok_or(ProbeError::Truncated(12))?;
        let header: WeightsHeader = serde_json::from_slice(json).map_err(|e| ProbeError::Header(e.to_string()))?;
        if header.activation != "relu" || header.output != "sigmoid" {
            return Err(ProbeError::Header(format!(
                "unsupported activations {}/{}",
                header.activation, header.output
            )));
        }
        let widths: [usize; 5] =
            header.arch.as_slice().try_into().map_err(|_| {
                ProbeError::ShapeMismatch(format!("arch must list 5 widths, found {}", header.arch.len()))
            })?;
        if widths.contains(&0) || widths[4] != 1 {
            return Err(ProbeError::ShapeMismatch(format!("invalid arch {widths:?}")));
        }
        let arch = ProbeArch::with_hidden(widths[0], [widths[1], widths[2], widths[3]]);

        let body = &bytes[12 + len..];
        let expected = widths
            .windows(2)
            .try_fold(0usize, |acc, p| {
                p[0].checked_mul(p[1])
                    .and_then(|m| m.checked_add(p[1]))
                    .and_then(|m| acc.checked_add(m))
            })
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| ProbeError::ShapeMismatch("arch too large".into()))?;
        if body.len() != expected {
            return Err(ProbeError::ShapeMismatch(format!(
                "arch {widths:?} needs {expected} tensor bytes, found {}",
                body.len()
            )));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let layers = widths
            .windows(2)
            .map(|p| {
                let weights = values.by_ref().take(p[0] * p[1]).collect();
                let bias = values.by_ref().take(p[1]).collect();
                Dense {
                    inputs: p[0],
                    outputs: p[1],
                    weights,
                    bias,
                }
            })
            .collect();
        let w = ProbeWeights {
            arch,
            layers,
            provenance: header.provenance,
        };
        w.check_shapes()?;
        w.check_finite()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsHeader {
    arch: Vec<usize>,
    activation: String,
    output: String,
    provenance: Provenance,
}
