//! Feed-forward binary classifier trained with plain mini-batch SGD.
//!
//! Default topology: `12 -> 128 -> 64 -> 32 -> 1`, ReLU hidden units each
//! followed by inverted dropout, sigmoid output, binary cross-entropy loss.
//!
//! Parameter layout (used by [`ModelParameters::flatten`] and checkpoints):
//! layers in order from input to output; per layer the weight matrix in
//! row-major `fan_in x fan_out` order followed by the `fan_out` biases.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledWindow;
use crate::error::{Error, Result};
use crate::seeds::{self, Rng};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the loss.
pub const PROB_EPS: f64 = 1e-7;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADFLMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input: 12,
            hidden: vec![128, 64, 32],
        }
    }
}

impl Architecture {
    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input;
        for &h in self.hidden.iter().chain(std::iter::once(&1)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden.contains(&0) {
            return Err(Error::config("layer widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_in x fan_out`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// `out = input . W + b`
    fn affine(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Weights and biases of the whole network. Gradients share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    layers: Vec<Dense>,
}

pub type Gradient = ModelParameters;

impl ModelParameters {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layers: arch
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = seeds::derive_rng(seed, &[seeds::purpose::INIT]);
        let mut params = Self::zeros(arch);
        for layer in &mut params.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        params
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.layers[0].fan_in,
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.fan_out)
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out)
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// All entries in layout order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().collect()
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(arch);
        if flat.len() != params.num_params() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                params.num_params(),
                flat.len()
            )));
        }
        for (dst, &src) in params.values_mut().zip(flat) {
            *dst = src;
        }
        Ok(params)
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::input("parameter shapes differ"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 5,
            dropout_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(
                "learning rate must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy of a (clamped) probability against a label.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Per-layer buffers of one forward pass, kept for backprop.
struct Trace {
    /// Input to each layer (post-dropout activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
    /// Multiplier applied after ReLU for each hidden unit: 0 when dropped,
    /// `1 / (1 - rate)` when kept.
    scale: Vec<Vec<f64>>,
}

impl Trace {
    fn new(params: &ModelParameters) -> Self {
        let layers = params.layers();
        Self {
            inputs: layers.iter().map(|l| vec![0.0; l.fan_in]).collect(),
            pre: layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            scale: layers.iter().map(|l| vec![1.0; l.fan_out]).collect(),
        }
    }
}

fn check_input(params: &ModelParameters, x: &[f64]) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::input(format!(
            "expected {} features, got {}",
            params.input_dim(),
            x.len()
        )));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite feature {v}")));
    }
    Ok(())
}

/// Runs the network, recording activations. Returns the unclamped
/// probability. `dropout` is `Some((rate, rng))` only in train mode.
fn forward_traced(
    params: &ModelParameters,
    x: &[f64],
    mut dropout: Option<(f64, &mut Rng)>,
    trace: &mut Trace,
) -> f64 {
    let layers = params.layers();
    let last = layers.len() - 1;
    trace.inputs[0].copy_from_slice(x);
    for (l, layer) in layers.iter().enumerate() {
        let (input, pre) = (&trace.inputs[l], &mut trace.pre[l]);
        layer.affine(input, pre);
        if l == last {
            break;
        }
        let scale = &mut trace.scale[l];
        match dropout.as_mut() {
            Some((rate, rng)) if *rate > 0.0 => {
                let keep = 1.0 / (1.0 - *rate);
                for s in scale.iter_mut() {
                    *s = if rng.random::<f64>() < *rate {
                        0.0
                    } else {
                        keep
                    };
                }
            }
            _ => scale.fill(1.0),
        }
        let next = &mut trace.inputs[l + 1];
        for ((n, &z), &s) in next.iter_mut().zip(pre.iter()).zip(scale.iter()) {
            *n = if z > 0.0 { z * s } else { 0.0 };
        }
    }
    sigmoid(trace.pre[last][0])
}

/// Probability of label 1.
///
/// Eval mode is deterministic and never touches `rng`. Train mode applies
/// inverted dropout with masks drawn from `rng`.
pub fn forward(
    params: &ModelParameters,
    x: &[f64],
    mode: Mode,
    dropout_rate: f64,
    rng: &mut Rng,
) -> Result<f64> {
    check_input(params, x)?;
    let mut trace = Trace::new(params);
    let dropout = match mode {
        Mode::Train => Some((dropout_rate, rng)),
        Mode::Eval => None,
    };
    Ok(clamp_prob(forward_traced(params, x, dropout, &mut trace)))
}

/// Eval-mode probabilities for every window.
pub fn predict(params: &ModelParameters, windows: &[LabeledWindow]) -> Result<Vec<f64>> {
    let mut trace = Trace::new(params);
    windows
        .iter()
        .map(|w| {
            check_input(params, &w.x)?;
            Ok(clamp_prob(forward_traced(params, &w.x, None, &mut trace)))
        })
        .collect()
}

/// Mean eval-mode BCE over the windows.
pub fn local_loss(params: &ModelParameters, windows: &[LabeledWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::input("loss over an empty dataset"));
    }
    let probs = predict(params, windows)?;
    let total: f64 = probs
        .iter()
        .zip(windows)
        .map(|(&p, w)| bce_loss(p, w.y))
        .sum();
    Ok(total / windows.len() as f64)
}

/// Gradient of the mean clamped BCE over `batch`, plus that mean loss.
///
/// Dropout masks are drawn from `rng` (one per sample and hidden layer) when
/// `dropout_rate > 0`.
pub fn backward(
    params: &ModelParameters,
    batch: &[&LabeledWindow],
    dropout_rate: f64,
    rng: &mut Rng,
) -> Result<(Gradient, f64)> {
    if batch.is_empty() {
        return Err(Error::input("gradient of an empty batch"));
    }
    let layers = params.layers();
    let last = layers.len() - 1;
    let mut grad = ModelParameters {
        layers: layers
            .iter()
            .map(|l| Dense::zeros(l.fan_in, l.fan_out))
            .collect(),
    };
    let mut trace = Trace::new(params);
    let mut delta: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.fan_out]).collect();
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for w in batch {
        check_input(params, &w.x)?;
        let p = forward_traced(params, &w.x, Some((dropout_rate, &mut *rng)), &mut trace);
        loss += bce_loss(p, w.y);

        // d(loss)/d(logit); zero where the clamp is active.
        delta[last][0] = if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            (p - f64::from(w.y)) * inv_n
        } else {
            0.0
        };

        for l in (0..=last).rev() {
            let layer = &layers[l];
            let g = &mut grad.layers[l];
            let dz = &delta[l];
            let input = &trace.inputs[l];
            for (gb, &d) in g.bias.iter_mut().zip(dz) {
                *gb += d;
            }
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &mut g.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (gw, &d) in row.iter_mut().zip(dz) {
                    *gw += xi * d;
                }
            }
            if l == 0 {
                break;
            }
            // Back through the previous layer's dropout and ReLU.
            let (lower, upper) = delta.split_at_mut(l);
            let dz = &upper[0];
            let prev = &mut lower[l - 1];
            let pre = &trace.pre[l - 1];
            let scale = &trace.scale[l - 1];
            for (i, d_prev) in prev.iter_mut().enumerate() {
                if pre[i] <= 0.0 || scale[i] == 0.0 {
                    *d_prev = 0.0;
                    continue;
                }
                let row = &layer.weights[i * layer.fan_out..(i + 1) * layer.fan_out];
                let dot: f64 = row.iter().zip(dz).map(|(w, d)| w * d).sum();
                *d_prev = dot * scale[i];
            }
        }
    }
    Ok((grad, loss * inv_n))
}

fn apply_sgd(params: &mut ModelParameters, grad: &Gradient, learning_rate: f64) {
    for (p, g) in params.values_mut().zip(grad.values()) {
        *p -= learning_rate * g;
    }
}

/// `params - learning_rate * grad`, elementwise.
pub fn sgd_step(
    params: &ModelParameters,
    grad: &Gradient,
    learning_rate: f64,
) -> Result<ModelParameters> {
    params.check_shape(grad)?;
    if !learning_rate.is_finite() {
        return Err(Error::input("learning rate must be finite"));
    }
    let mut out = params.clone();
    apply_sgd(&mut out, grad, learning_rate);
    Ok(out)
}

/// One pass over `windows` in an order shuffled by `(cfg.seed, epoch)`.
///
/// The same stream drives the dropout masks, so calling this for epochs
/// `0..E` is identical to [`train_epochs`] with `cfg.epochs = E`.
pub fn train_epoch(
    params: &ModelParameters,
    windows: &[LabeledWindow],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ModelParameters> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::input("training on an empty dataset"));
    }
    let mut rng = seeds::derive_rng(cfg.seed, &[seeds::purpose::EPOCH, epoch as u64]);
    let mut order: Vec<&LabeledWindow> = windows.iter().collect();
    order.shuffle(&mut rng);

    let mut params = params.clone();
    for batch in order.chunks(cfg.batch_size) {
        let (grad, _) = backward(&params, batch, cfg.dropout_rate, &mut rng)?;
        apply_sgd(&mut params, &grad, cfg.learning_rate);
    }
    if !params.is_finite() {
        return Err(Error::Numeric(format!(
            "parameters diverged in epoch {epoch}"
        )));
    }
    Ok(params)
}

pub fn train_epochs(
    params: &ModelParameters,
    windows: &[LabeledWindow],
    cfg: &TrainConfig,
) -> Result<ModelParameters> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::input("training on an empty dataset"));
    }
    (0..cfg.epochs).try_fold(params.clone(), |p, e| train_epoch(&p, windows, cfg, e))
}

/// Writes the 16-byte header (magic, version, parameter count) and the
/// parameters as little-endian `f64` in layout order.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParameters) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(params.num_params())
        .map_err(|_| Error::input("too many parameters for a checkpoint"))?;
    w.write_all(&count.to_le_bytes())?;
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, arch: &Architecture) -> Result<ModelParameters> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    if count != arch.num_params() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, architecture needs {}",
            arch.num_params()
        )));
    }
    let mut bytes = Vec::with_capacity(count * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(Error::Format("truncated or oversized checkpoint".into()));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelParameters::from_flat(arch, &flat)
}

pub fn save_checkpoint(path: &Path, params: &ModelParameters) -> Result<()> {
    write_checkpoint(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        params,
    )
}

pub fn load_checkpoint(path: &Path, arch: &Architecture) -> Result<ModelParameters> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?), arch)
}
