//! Utterance-level regression probe on frozen layer representations.
//!
//! Frames are collapsed by statistical pooling (per-dimension mean and
//! population standard deviation), then passed through two hidden dense
//! layers and a scalar output trained against perceptual scores with MSE.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gemm, Operand};
use crate::rng::{derive_seed, seeded};
use crate::store::{EmbeddingMatrix, SCORE_MAX, SCORE_MIN};

pub const DEFAULT_HIDDEN_DIM: usize = 1024;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PRB1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need at least {needed} items, got {found}")]
    TooFewItems { needed: usize, found: usize },
    #[error("input has {found} features, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{inputs} inputs but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("target {index} = {value} outside [0, 10]")]
    TargetOutOfRange { index: usize, value: f64 },
    #[error("loss became non-finite at epoch {epoch}, step {step} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, step: usize, last_loss: f64 },
    #[error("segment [{start}, {end}) invalid for {n_frames} frames")]
    InvalidSegment { start: usize, end: usize, n_frames: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// `[means ‖ stds]` over frames, length `2·dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledVector(Vec<f64>);

impl PooledVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0.len() / 2
    }

    pub fn means(&self) -> &[f64] {
        &self.0[..self.dim()]
    }

    pub fn stds(&self) -> &[f64] {
        &self.0[self.dim()..]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Two-pass mean / population std over all frames.
pub fn statistical_pool(matrix: &EmbeddingMatrix) -> PooledVector {
    pool_frames(matrix, 0, matrix.n_frames()).expect("full span is valid")
}

/// Pool the frame span `[start, end)`.
pub fn pool_frames(matrix: &EmbeddingMatrix, start: usize, end: usize) -> Result<PooledVector> {
    if start >= end || end > matrix.n_frames() {
        return Err(ProbeError::InvalidSegment {
            start,
            end,
            n_frames: matrix.n_frames(),
        });
    }
    let d = matrix.dim();
    let n = (end - start) as f64;
    let mut mean = vec![0.0f64; d];
    for f in start..end {
        for (m, &v) in mean.iter_mut().zip(matrix.frame(f)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for f in start..end {
        for ((s, &v), m) in var.iter_mut().zip(matrix.frame(f)).zip(&mean) {
            let dv = f64::from(v) - m;
            *s += dv * dv;
        }
    }
    let mut out = mean;
    out.extend(var.into_iter().map(|s| (s / n).sqrt()));
    Ok(PooledVector(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Dense head: `input → hidden → hidden → 1`. Weight matrices are stored
/// row-major as `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    input_dim: usize,
    hidden_dim: usize,
    activation: Activation,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

/// Same layout as [`ProbeModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.w3);
        v.push(self.b3);
        v
    }
}

impl ProbeModel {
    /// Uniform fan-in initialization: every weight and bias of a layer with
    /// fan-in `k` is drawn from `U(-1/√k, 1/√k)`.
    pub fn init(input_dim: usize, hidden_dim: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = draw(input_dim * hidden_dim, input_dim);
        let b1 = draw(hidden_dim, input_dim);
        let w2 = draw(hidden_dim * hidden_dim, hidden_dim);
        let b2 = draw(hidden_dim, hidden_dim);
        let w3 = draw(hidden_dim, hidden_dim);
        let b3 = draw(1, hidden_dim)[0];
        Self {
            input_dim,
            hidden_dim,
            activation,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_dim,
            activation,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * hidden_dim],
            b2: vec![0.0; hidden_dim],
            w3: vec![0.0; hidden_dim],
            b3: 0.0,
        }
    }

    /// Hidden layers are identity maps with linear activation, so the model
    /// reduces to `w3ᵀ·x + b3`. Paired with `freeze_hidden` this gives a
    /// convex (linear least squares) training problem.
    pub fn identity_passthrough(input_dim: usize) -> Self {
        let mut m = Self::zeros(input_dim, input_dim, Activation::Identity);
        for i in 0..input_dim {
            m.w1[i * input_dim + i] = 1.0;
            m.w2[i * input_dim + i] = 1.0;
        }
        m
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.iter().all(|v| v.is_finite())) && self.b3.is_finite()
    }

    fn params(&self) -> [&[f64]; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for t in self.params() {
            v.extend_from_slice(t);
        }
        v.push(self.b3);
        v
    }

    /// Overwrite parameters from a flat vector in [`Self::flatten`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(ProbeError::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut off = 0;
        for t in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3] {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.b3 = flat[off];
        Ok(())
    }

    pub fn forward(&self, pooled: &PooledVector) -> Result<f64> {
        self.check_input(pooled.len())?;
        Ok(self.forward_batch(pooled.as_slice(), 1).output[0])
    }

    /// Predictions for row-major `inputs` (`n × input_dim`).
    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        if self.input_dim == 0 || !inputs.len().is_multiple_of(self.input_dim) {
            return Err(ProbeError::DimensionMismatch {
                expected: self.input_dim,
                found: inputs.len(),
            });
        }
        let n = inputs.len() / self.input_dim;
        // Bounded chunks keep the hidden activations small.
        let mut out = Vec::with_capacity(n);
        for chunk in inputs.chunks(self.input_dim * 256) {
            out.extend(self.forward_batch(chunk, chunk.len() / self.input_dim).output);
        }
        Ok(out)
    }

    fn check_input(&self, found: usize) -> Result<()> {
        if found != self.input_dim {
            return Err(ProbeError::DimensionMismatch {
                expected: self.input_dim,
                found,
            });
        }
        Ok(())
    }

    fn forward_batch(&self, x: &[f64], batch: usize) -> ForwardCache {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut z1 = broadcast_rows(&self.b1, batch);
        gemm(
            batch,
            d,
            h,
            Operand::new(x, d, false),
            Operand::new(&self.w1, h, false),
            &mut z1,
            1.0,
        );
        let a1: Vec<f64> = z1.iter().map(|&z| self.activation.apply(z)).collect();
        let mut z2 = broadcast_rows(&self.b2, batch);
        gemm(
            batch,
            h,
            h,
            Operand::new(&a1, h, false),
            Operand::new(&self.w2, h, false),
            &mut z2,
            1.0,
        );
        let a2: Vec<f64> = z2.iter().map(|&z| self.activation.apply(z)).collect();
        let mut output = vec![self.b3; batch];
        gemm(
            batch,
            h,
            1,
            Operand::new(&a2, h, false),
            Operand::new(&self.w3, 1, false),
            &mut output,
            1.0,
        );
        ForwardCache { z1, a1, z2, a2, output }
    }

    /// Mean squared error over the batch and its exact gradient.
    pub fn loss_and_gradient(&self, inputs: &[f64], targets: &[f64]) -> Result<(f64, Gradients)> {
        let batch = targets.len();
        if batch == 0 {
            return Err(ProbeError::EmptyDataset);
        }
        if inputs.len() != batch * self.input_dim {
            return Err(ProbeError::DimensionMismatch {
                expected: batch * self.input_dim,
                found: inputs.len(),
            });
        }
        let (d, h) = (self.input_dim, self.hidden_dim);
        let cache = self.forward_batch(inputs, batch);
        let inv_n = 1.0 / batch as f64;
        let resid: Vec<f64> = cache.output.iter().zip(targets).map(|(p, t)| p - t).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() * inv_n;
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r * inv_n).collect();

        let mut w3 = vec![0.0; h];
        gemm(
            h,
            batch,
            1,
            Operand::new(&cache.a2, h, true),
            Operand::new(&d_out, 1, false),
            &mut w3,
            0.0,
        );
        let b3: f64 = d_out.iter().sum();

        let mut dz2 = vec![0.0; batch * h];
        for (i, &g) in d_out.iter().enumerate() {
            let row = &mut dz2[i * h..(i + 1) * h];
            let z = &cache.z2[i * h..(i + 1) * h];
            for ((o, &w), &zz) in row.iter_mut().zip(&self.w3).zip(z) {
                *o = g * w * self.activation.derivative(zz);
            }
        }
        let mut w2 = vec![0.0; h * h];
        gemm(
            h,
            batch,
            h,
            Operand::new(&cache.a1, h, true),
            Operand::new(&dz2, h, false),
            &mut w2,
            0.0,
        );
        let b2 = column_sums(&dz2, batch, h);

        let mut dz1 = vec![0.0; batch * h];
        gemm(
            batch,
            h,
            h,
            Operand::new(&dz2, h, false),
            Operand::new(&self.w2, h, true),
            &mut dz1,
            0.0,
        );
        for (g, &z) in dz1.iter_mut().zip(&cache.z1) {
            *g *= self.activation.derivative(z);
        }
        let mut w1 = vec![0.0; d * h];
        gemm(
            d,
            batch,
            h,
            Operand::new(inputs, d, true),
            Operand::new(&dz1, h, false),
            &mut w1,
            0.0,
        );
        let b1 = column_sums(&dz1, batch, h);

        Ok((loss, Gradients { w1, b1, w2, b2, w3, b3 }))
    }

    /// Loss only; used by finite-difference checks.
    pub fn loss(&self, inputs: &[f64], targets: &[f64]) -> Result<f64> {
        let preds = self.predict(inputs)?;
        if preds.len() != targets.len() || preds.is_empty() {
            return Err(ProbeError::LengthMismatch {
                inputs: preds.len(),
                targets: targets.len(),
            });
        }
        Ok(preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len() as f64)
    }
}

struct ForwardCache {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    output: Vec<f64>,
}

fn broadcast_rows(bias: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(bias.len() * rows);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn column_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub activation: Activation,
    /// Fraction held out for early stopping when no explicit validation set
    /// is supplied.
    pub validation_fraction: f64,
    /// Update only the output layer.
    #[serde(default)]
    pub freeze_hidden: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            max_epochs: 200,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            activation: Activation::Relu,
            validation_fraction: 0.1,
            freeze_hidden: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.hidden_dim == 0 {
            return bad("batch_size, max_epochs, patience and hidden_dim must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("optimizer moments must lie in [0, 1) and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the minibatch losses seen during the epoch (each evaluated
    /// before its update).
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Per-tensor optimizer state.
struct Optimizer {
    slots: [Adam; 6],
}

impl Optimizer {
    fn new(model: &ProbeModel) -> Self {
        Self {
            slots: [
                Adam::new(model.w1.len()),
                Adam::new(model.b1.len()),
                Adam::new(model.w2.len()),
                Adam::new(model.b2.len()),
                Adam::new(model.w3.len()),
                Adam::new(1),
            ],
        }
    }

    fn step(&mut self, model: &mut ProbeModel, g: &Gradients, cfg: &TrainConfig) {
        let [s1, sb1, s2, sb2, s3, sb3] = &mut self.slots;
        if !cfg.freeze_hidden {
            s1.step(&mut model.w1, &g.w1, cfg);
            sb1.step(&mut model.b1, &g.b1, cfg);
            s2.step(&mut model.w2, &g.w2, cfg);
            sb2.step(&mut model.b2, &g.b2, cfg);
        }
        s3.step(&mut model.w3, &g.w3, cfg);
        let mut b3 = [model.b3];
        sb3.step(&mut b3, &[g.b3], cfg);
        model.b3 = b3[0];
    }
}

/// Row-major design matrix from pooled vectors.
pub fn stack_inputs(inputs: &[PooledVector]) -> Result<(Vec<f64>, usize)> {
    let dim = inputs.first().ok_or(ProbeError::EmptyDataset)?.len();
    let mut flat = Vec::with_capacity(inputs.len() * dim);
    for p in inputs {
        if p.len() != dim {
            return Err(ProbeError::DimensionMismatch {
                expected: dim,
                found: p.len(),
            });
        }
        flat.extend_from_slice(p.as_slice());
    }
    Ok((flat, dim))
}

fn check_targets(targets: &[f64]) -> Result<()> {
    for (index, &value) in targets.iter().enumerate() {
        if !(SCORE_MIN..=SCORE_MAX).contains(&value) {
            return Err(ProbeError::TargetOutOfRange { index, value });
        }
    }
    Ok(())
}

/// Train a fresh probe, holding out `validation_fraction` of the items for
/// early stopping (or reusing the training items when the fraction is 0).
pub fn train(inputs: &[PooledVector], targets: &[f64], config: &TrainConfig) -> Result<(ProbeModel, TrainHistory)> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    if inputs.len() != targets.len() {
        return Err(ProbeError::LengthMismatch {
            inputs: inputs.len(),
            targets: targets.len(),
        });
    }
    if inputs.len() < 2 {
        return Err(ProbeError::TooFewItems {
            needed: 2,
            found: inputs.len(),
        });
    }
    check_targets(targets)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut seeded(derive_seed(config.seed, 2)));
    let n_val = if config.validation_fraction > 0.0 {
        ((inputs.len() as f64 * config.validation_fraction).ceil() as usize).clamp(1, inputs.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| -> (Vec<PooledVector>, Vec<f64>) {
        (
            idx.iter().map(|&i| inputs[i].clone()).collect(),
            idx.iter().map(|&i| targets[i]).collect(),
        )
    };
    let (tx, ty) = pick(train_idx);
    if n_val == 0 {
        train_with_validation(&tx, &ty, &tx, &ty, config)
    } else {
        let (vx, vy) = pick(val_idx);
        train_with_validation(&tx, &ty, &vx, &vy, config)
    }
}

/// Train against an explicit validation set; the returned model is the one
/// with the lowest validation MSE.
pub fn train_with_validation(
    train_inputs: &[PooledVector],
    train_targets: &[f64],
    val_inputs: &[PooledVector],
    val_targets: &[f64],
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory)> {
    let d = stack_inputs(train_inputs)?.1;
    let model = ProbeModel::init(d, config.hidden_dim, config.activation, derive_seed(config.seed, 0));
    train_from(model, train_inputs, train_targets, val_inputs, val_targets, config)
}

/// Continue training an existing model (e.g. [`ProbeModel::identity_passthrough`]).
pub fn train_from(
    mut model: ProbeModel,
    train_inputs: &[PooledVector],
    train_targets: &[f64],
    val_inputs: &[PooledVector],
    val_targets: &[f64],
    config: &TrainConfig,
) -> Result<(ProbeModel, TrainHistory)> {
    config.validate()?;
    if train_inputs.len() != train_targets.len() {
        return Err(ProbeError::LengthMismatch {
            inputs: train_inputs.len(),
            targets: train_targets.len(),
        });
    }
    if val_inputs.len() != val_targets.len() {
        return Err(ProbeError::LengthMismatch {
            inputs: val_inputs.len(),
            targets: val_targets.len(),
        });
    }
    let (x, d) = stack_inputs(train_inputs)?;
    let (vx, vd) = stack_inputs(val_inputs)?;
    model.check_input(d)?;
    model.check_input(vd)?;
    check_targets(train_targets)?;
    check_targets(val_targets)?;

    let n = train_targets.len();
    let mut opt = Optimizer::new(&model);
    let mut shuffle_rng = seeded(derive_seed(config.seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = model.clone();
    let mut best_val = model.loss(&vx, val_targets)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut stopped_early = false;
    let mut bx = Vec::with_capacity(config.batch_size * d);
    let mut by = Vec::with_capacity(config.batch_size);
    let mut step = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&x[i * d..(i + 1) * d]);
                by.push(train_targets[i]);
            }
            let (loss, grads) = model.loss_and_gradient(&bx, &by)?;
            step += 1;
            if !loss.is_finite() || !grads.b3.is_finite() {
                return Err(ProbeError::NonFiniteLoss {
                    epoch,
                    step,
                    last_loss: loss_sum / n as f64,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            opt.step(&mut model, &grads, config);
        }
        if !model.is_finite() {
            return Err(ProbeError::NonFiniteLoss {
                epoch,
                step,
                last_loss: loss_sum / n as f64,
            });
        }
        let val_mse = model.loss(&vx, val_targets)?;
        if !val_mse.is_finite() {
            return Err(ProbeError::NonFiniteLoss {
                epoch,
                step,
                last_loss: loss_sum / n as f64,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_mse: loss_sum / n as f64,
            val_mse,
        });
        if val_mse < best_val {
            best_val = val_mse;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= config.patience {
            stopped_early = true;
            break;
        }
    }
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_mse: best_val,
            stopped_early,
        },
    ))
}

/// Encode as `PRB1`: magic, version u32, input_dim u64, hidden_dim u64,
/// activation u32, then `w1 b1 w2 b2 w3 b3` as f64 LE.
pub fn encode_checkpoint(model: &ProbeModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(28 + model.num_params() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.input_dim as u64).to_le_bytes());
    buf.extend_from_slice(&(model.hidden_dim as u64).to_le_bytes());
    buf.extend_from_slice(&model.activation.code().to_le_bytes());
    for v in model.flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ProbeModel> {
    let bad = |m: String| ProbeError::BadCheckpoint(m);
    if bytes.len() < 28 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let input_dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let hidden_dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let activation = Activation::from_code(u32::from_le_bytes(bytes[24..28].try_into().unwrap()))
        .ok_or_else(|| bad("unknown activation".into()))?;
    let mut model = ProbeModel::zeros(input_dim, hidden_dim, activation);
    let payload = &bytes[28..];
    if payload.len() != model.num_params() * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            model.num_params() * 8
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_flat(&flat)?;
    Ok(model)
}

pub fn write_checkpoint(model: &ProbeModel, path: &Path) -> Result<()> {
    let io = |source| ProbeError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io)?;
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&encode_checkpoint(model)).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<ProbeModel> {
    let bytes = fs::read(path).map_err(|source| ProbeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
