//! Conditional noise estimator `eps(x, c, t)` and its training loop.
//!
//! The network input is `[x, time embedding, condition embedding]`. The time
//! embedding is a fixed sinusoid table; the condition embedding is a learned
//! row per class plus one dedicated row for the null condition.
//!
//! The network is wrapped in a fixed noise-level preconditioning: with
//! `s2 = alpha sigma^2 + 1 - alpha` and `xc = x - sqrt(alpha) mu`,
//! `eps = sqrt(1 - alpha)/s2 * xc + sqrt(alpha) sigma/sqrt(s2) * net(xc/sqrt(s2), ...)`.
//! The first term is the exact estimate for Gaussian data with mean `mu` and
//! standard deviation `sigma`, so the network only models the residual.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, MlpShape};
use crate::rng::{self, seeded};
use crate::scalar::{cast_slice, Scalar};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    pub fn is_null(self) -> bool {
        matches!(self, Condition::Null)
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Class(c) => write!(f, "class:{c}"),
            Condition::Null => f.write_str("null"),
        }
    }
}

/// Pooled statistics of the default shapes generator (20k samples).
pub const SHAPES_MEAN: f64 = -0.445;
pub const SHAPES_STD: f64 = 0.313;
/// Per-coordinate standard deviation of the 2-D mixture, `sqrt(0.3^2 + 2)`.
pub const GM2D_STD: f64 = 1.445683229480096;

/// Per-row preconditioning coefficients at timestep `t`.
#[derive(Debug, Clone, Copy)]
struct Precond {
    shift: f64,
    c_in: f64,
    c_skip: f64,
    c_out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    pub n_classes: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub max_frequency: f64,
    pub zero_init_output: bool,
    pub init_seed: u64,
    /// Wrap the network in the Gaussian skip preconditioning. When off the
    /// estimate is the raw network output.
    pub preconditioning: bool,
    /// Scalar data mean and standard deviation used by the preconditioning.
    pub data_mean: f64,
    pub data_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::shapes()
    }
}

impl DenoiserConfig {
    pub fn shapes() -> Self {
        Self {
            data_dim: 256,
            n_classes: 4,
            width: 256,
            hidden_layers: 3,
            time_dim: 32,
            cond_dim: 32,
            max_frequency: 1000.0,
            zero_init_output: true,
            init_seed: 0,
            preconditioning: true,
            data_mean: SHAPES_MEAN,
            data_std: SHAPES_STD,
        }
    }

    pub fn gm2d() -> Self {
        Self { data_dim: 2, width: 128, data_mean: 0.0, data_std: GM2D_STD, ..Self::shapes() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.width == 0 || self.hidden_layers == 0 {
            return Err(invalid("denoiser dimensions must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(invalid("time embedding size must be even and >= 2"));
        }
        if self.n_classes == 0 || self.cond_dim == 0 {
            return Err(invalid("condition embedding needs classes and width"));
        }
        if !(self.max_frequency >= 1.0) {
            return Err(invalid("max frequency must be >= 1"));
        }
        if !self.data_mean.is_finite() || !(self.data_std > 0.0 && self.data_std.is_finite()) {
            return Err(invalid("data mean must be finite and data std positive"));
        }
        Ok(())
    }

    pub fn mlp_shape(&self) -> MlpShape {
        MlpShape {
            input: self.data_dim + self.time_dim + self.cond_dim,
            width: self.width,
            hidden_layers: self.hidden_layers,
            output: self.data_dim,
        }
    }

    fn embedding_rows(&self) -> usize {
        self.n_classes + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<S> {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    mlp: MlpShape,
    params: Vec<S>,
    frequencies: Vec<f64>,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let mlp = config.mlp_shape();
        let mut rng = seeded(config.init_seed);
        let mut params = mlp.init::<S>(&mut rng, config.zero_init_output);
        let table: Vec<S> = rng::normal_vec(&mut rng, config.embedding_rows() * config.cond_dim);
        params.extend(table);
        Ok(Self::from_parts(config, schedule, params))
    }

    fn from_parts(config: DenoiserConfig, schedule: NoiseSchedule, params: Vec<S>) -> Self {
        let half = config.time_dim / 2;
        // geometric frequencies 1 .. max_frequency
        let frequencies = (0..half)
            .map(|k| {
                if half == 1 {
                    1.0
                } else {
                    config.max_frequency.powf(k as f64 / (half - 1) as f64)
                }
            })
            .collect();
        Self { mlp: config.mlp_shape(), config, schedule, params, frequencies }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.config.data_dim
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Same weights in another precision.
    pub fn cast<T: Scalar>(&self) -> Denoiser<T> {
        Denoiser::from_parts(self.config, self.schedule.clone(), cast_slice(&self.params))
    }

    fn embedding_offset(&self) -> usize {
        self.mlp.param_count()
    }

    fn embedding_row(&self, c: Condition) -> Result<usize> {
        match c {
            Condition::Null => Ok(self.config.n_classes),
            Condition::Class(k) if k < self.config.n_classes => Ok(k),
            Condition::Class(k) => Err(invalid(format!(
                "class {k} out of range for {} classes",
                self.config.n_classes
            ))),
        }
    }

    pub fn condition_embedding(&self, c: Condition) -> Result<&[S]> {
        let row = self.embedding_row(c)?;
        let off = self.embedding_offset() + row * self.config.cond_dim;
        Ok(&self.params[off..off + self.config.cond_dim])
    }

    fn time_embedding(&self, t: f64, out: &mut [S]) {
        let half = self.frequencies.len();
        for (k, f) in self.frequencies.iter().enumerate() {
            out[k] = S::from_f64_lossy((f * t).sin());
            out[half + k] = S::from_f64_lossy((f * t).cos());
        }
    }

    fn precond(&self, t: f64) -> Result<Precond> {
        let a = self.schedule.alpha(t)?;
        if !self.config.preconditioning {
            return Ok(Precond { shift: 0.0, c_in: 1.0, c_skip: 0.0, c_out: 1.0 });
        }
        let (mu, sigma) = (self.config.data_mean, self.config.data_std);
        let s2 = a * sigma * sigma + 1.0 - a;
        Ok(Precond {
            shift: a.sqrt() * mu,
            c_in: 1.0 / s2.sqrt(),
            c_skip: (1.0 - a).sqrt() / s2,
            c_out: a.sqrt() * sigma / s2.sqrt(),
        })
    }

    fn row_preconds(&self, ts: &[f64], batch: usize) -> Result<Vec<Precond>> {
        if ts.len() == 1 {
            return Ok(vec![self.precond(ts[0])?; batch]);
        }
        ts.iter().map(|&t| self.precond(t)).collect()
    }

    /// Network input rows and the per-row preconditioning.
    fn assemble_input(&self, x: &[S], conds: &[Condition], ts: &[f64]) -> Result<(Vec<S>, Vec<Precond>)> {
        let d = self.config.data_dim;
        if x.len() % d != 0 || x.len() / d != conds.len() {
            return Err(Error::ShapeMismatch { expected: conds.len() * d, got: x.len() });
        }
        let batch = conds.len();
        if ts.len() != batch && ts.len() != 1 {
            return Err(invalid("timestep count must be 1 or the batch size"));
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid(format!("timestep {t} outside [0, 1]")));
        }
        let pre = self.row_preconds(ts, batch)?;
        let width = self.mlp.input;
        let mut input = vec![S::zero(); batch * width];
        for i in 0..batch {
            let t = ts[if ts.len() == 1 { 0 } else { i }];
            let (shift, c_in) = (S::from_f64_lossy(pre[i].shift), S::from_f64_lossy(pre[i].c_in));
            let row = &mut input[i * width..(i + 1) * width];
            for (dst, &v) in row[..d].iter_mut().zip(&x[i * d..(i + 1) * d]) {
                *dst = (v - shift) * c_in;
            }
            self.time_embedding(t, &mut row[d..d + self.config.time_dim]);
            row[d + self.config.time_dim..].copy_from_slice(self.condition_embedding(conds[i])?);
        }
        Ok((input, pre))
    }

    /// `c_skip (x - shift) + c_out net` per row, written over `net`.
    fn combine(&self, x: &[S], net: &mut [S], pre: &[Precond]) {
        let d = self.config.data_dim;
        for (i, p) in pre.iter().enumerate() {
            let (shift, skip, out) =
                (S::from_f64_lossy(p.shift), S::from_f64_lossy(p.c_skip), S::from_f64_lossy(p.c_out));
            for j in i * d..(i + 1) * d {
                net[j] = skip * (x[j] - shift) + out * net[j];
            }
        }
    }

    /// Noise estimate for a batch of rows. `ts` holds one timestep shared by
    /// the batch or one per row.
    pub fn forward(&self, x: &[S], conds: &[Condition], ts: &[f64]) -> Result<Vec<S>> {
        let (input, pre) = self.assemble_input(x, conds, ts)?;
        let mut out = self.mlp.forward(&self.params[..self.embedding_offset()], &input, pre.len());
        self.combine(x, &mut out, &pre);
        Ok(out)
    }

    /// Forward value and `J v`, the Jacobian of the estimate with respect to
    /// `x` applied to `v`.
    pub fn jvp(&self, x: &[S], v: &[S], conds: &[Condition], ts: &[f64]) -> Result<(Vec<S>, Vec<S>)> {
        let (input, pre) = self.assemble_input(x, conds, ts)?;
        let batch = pre.len();
        let d = self.config.data_dim;
        if v.len() != x.len() {
            return Err(Error::ShapeMismatch { expected: x.len(), got: v.len() });
        }
        let width = self.mlp.input;
        let mut tangent = vec![S::zero(); input.len()];
        for i in 0..batch {
            let c_in = S::from_f64_lossy(pre[i].c_in);
            for j in 0..d {
                tangent[i * width + j] = c_in * v[i * d + j];
            }
        }
        let (mut out, mut jv) = self.mlp.jvp(&self.params[..self.embedding_offset()], &input, &tangent, batch);
        self.combine(x, &mut out, &pre);
        for (i, p) in pre.iter().enumerate() {
            let (skip, c_out) = (S::from_f64_lossy(p.c_skip), S::from_f64_lossy(p.c_out));
            for j in i * d..(i + 1) * d {
                jv[j] = skip * v[j] + c_out * jv[j];
            }
        }
        Ok((out, jv))
    }

    /// `v^T J`, the Jacobian of the estimate with respect to `x` transposed.
    pub fn vjp(&self, x: &[S], u: &[S], conds: &[Condition], ts: &[f64]) -> Result<Vec<S>> {
        let (input, pre) = self.assemble_input(x, conds, ts)?;
        let batch = pre.len();
        if u.len() != x.len() {
            return Err(Error::ShapeMismatch { expected: x.len(), got: u.len() });
        }
        let d = self.config.data_dim;
        let split = self.embedding_offset();
        let (_, cache) = self.mlp.forward_cached(&self.params[..split], &input, batch);
        let mut d_out = u.to_vec();
        for (i, p) in pre.iter().enumerate() {
            let c_out = S::from_f64_lossy(p.c_out);
            for v in &mut d_out[i * d..(i + 1) * d] {
                *v = *v * c_out;
            }
        }
        let mut scratch = vec![S::zero(); split];
        let dinput = self
            .mlp
            .backward(&self.params[..split], &cache, &d_out, &mut scratch, true)
            .expect("input gradient requested");
        let width = self.mlp.input;
        let mut out = Vec::with_capacity(x.len());
        for (i, p) in pre.iter().enumerate() {
            let (skip, c_in) = (S::from_f64_lossy(p.c_skip), S::from_f64_lossy(p.c_in));
            for j in 0..d {
                out.push(skip * u[i * d + j] + c_in * dinput[i * width + j]);
            }
        }
        Ok(out)
    }
}

/// Randomness of one training batch, drawn up front so the loss is a pure
/// function of the parameters (used by the finite-difference oracle).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDraws<S> {
    pub ts: Vec<f64>,
    pub noise: Vec<S>,
    pub conds: Vec<Condition>,
    pub dropped: usize,
}

/// Draws timesteps, noise and conditioning dropout for a batch. Per row the
/// order is: timestep, dropout coin, then `d` noise values.
pub fn draw_batch<S: Scalar>(
    rng: &mut impl Rng,
    conds: &[Condition],
    dim: usize,
    dropout: f64,
) -> BatchDraws<S> {
    let mut ts = Vec::with_capacity(conds.len());
    let mut noise = Vec::with_capacity(conds.len() * dim);
    let mut out_conds = Vec::with_capacity(conds.len());
    let mut dropped = 0;
    for &c in conds {
        ts.push(rng.gen_range(0.0..=1.0));
        let coin: f64 = rng.gen();
        if coin < dropout {
            out_conds.push(Condition::Null);
            dropped += 1;
        } else {
            out_conds.push(c);
        }
        for _ in 0..dim {
            noise.push(rng::normal(rng));
        }
    }
    BatchDraws { ts, noise, conds: out_conds, dropped }
}

#[derive(Debug, Clone)]
pub struct LossGrad<S> {
    /// Per-coordinate mean squared error.
    pub loss: f64,
    pub grad: Vec<S>,
}

impl<S: Scalar> Denoiser<S> {
    /// Denoising loss and its exact gradient for fixed draws.
    ///
    /// `loss = mean_{i,j} (noise_ij - eps(sqrt(a_i) x0_i + sqrt(1 - a_i) noise_i, c_i, t_i)_j)^2`
    pub fn loss_with_draws(&self, x0: &[S], draws: &BatchDraws<S>, step: usize) -> Result<LossGrad<S>> {
        let d = self.config.data_dim;
        let batch = draws.conds.len();
        if x0.len() != batch * d {
            return Err(Error::ShapeMismatch { expected: batch * d, got: x0.len() });
        }
        if batch == 0 {
            return Err(invalid("empty batch"));
        }
        let mut xt = vec![S::zero(); x0.len()];
        for i in 0..batch {
            let a = self.schedule.alpha(draws.ts[i])?;
            let (sa, sn) = (S::from_f64_lossy(a.sqrt()), S::from_f64_lossy((1.0 - a).sqrt()));
            for j in i * d..(i + 1) * d {
                xt[j] = sa * x0[j] + sn * draws.noise[j];
            }
        }
        let (input, pre) = self.assemble_input(&xt, &draws.conds, &draws.ts)?;
        let split = self.embedding_offset();
        let (mut pred, cache) = self.mlp.forward_cached(&self.params[..split], &input, batch);
        self.combine(&xt, &mut pred, &pre);

        let scale = S::from_f64_lossy(2.0 / (batch * d) as f64);
        let mut d_out = vec![S::zero(); pred.len()];
        let mut row_loss = vec![0.0f64; batch];
        for i in 0..batch {
            for j in i * d..(i + 1) * d {
                let diff = pred[j] - draws.noise[j];
                row_loss[i] += diff.as_f64() * diff.as_f64();
                d_out[j] = scale * diff * S::from_f64_lossy(pre[i].c_out);
            }
        }
        let loss = row_loss.iter().sum::<f64>() / (batch * d) as f64;
        if !loss.is_finite() {
            let row = row_loss.iter().position(|v| !v.is_finite());
            return Err(Error::NonFinite { step, row });
        }

        let mut grad = vec![S::zero(); self.params.len()];
        let dinput = self
            .mlp
            .backward(&self.params[..split], &cache, &d_out, &mut grad[..split], true)
            .expect("input gradient requested");
        let width = self.mlp.input;
        let cd = self.config.cond_dim;
        let cond_start = d + self.config.time_dim;
        for i in 0..batch {
            let row = self.embedding_row(draws.conds[i])?;
            let g = &mut grad[split + row * cd..split + (row + 1) * cd];
            for (k, gv) in g.iter_mut().enumerate() {
                *gv = *gv + dinput[i * width + cond_start + k];
            }
        }
        Ok(LossGrad { loss, grad })
    }

    /// Draws a batch's randomness from `rng` and evaluates loss and gradient.
    pub fn loss_and_grad(
        &self,
        x0: &[S],
        conds: &[Condition],
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<LossGrad<S>> {
        if conds.is_empty() {
            return Err(invalid("empty batch"));
        }
        let draws = draw_batch(rng, conds, self.config.data_dim, dropout);
        self.loss_with_draws(x0, &draws, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub cond_dropout: f64,
    pub seed: u64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
    /// Decay of the exponential moving average of the weights that is
    /// stored as the trained model. Zero keeps the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 20_000,
            cond_dropout: 0.1,
            seed: 17,
            cosine_decay: true,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(invalid("conditioning dropout must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(invalid("batch size and step count must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("EMA decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub dropout_events: usize,
}

/// Single-threaded Adam training on the denoising objective.
pub fn train<S: Scalar>(
    model: &mut Denoiser<S>,
    config: &TrainConfig,
    data: &[Sample],
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("empty training set"));
    }
    let d = model.dim();
    if let Some(s) = data.iter().find(|s| s.data.len() != d) {
        return Err(Error::ShapeMismatch { expected: d, got: s.data.len() });
    }
    if let Some(s) = data.iter().find(|s| s.class >= model.config.n_classes) {
        return Err(invalid(format!("label {} out of range", s.class)));
    }
    let mut rng = seeded(config.seed);
    let mut opt = Adam::new(model.params.len(), config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    let mut dropout_events = 0;
    let mut initial = None;
    let mut above = 0usize;
    let mut x0 = vec![S::zero(); config.batch_size * d];
    let mut conds = Vec::with_capacity(config.batch_size);
    let mut ema: Vec<S> = model.params.clone();
    let ema_rate = S::from_f64_lossy(1.0 - config.ema_decay);
    for step in 0..config.steps {
        if config.cosine_decay {
            let progress = step as f64 / config.steps as f64;
            opt.set_learning_rate(config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        }
        conds.clear();
        for i in 0..config.batch_size {
            let s = &data[rng.gen_range(0..data.len())];
            for (dst, &v) in x0[i * d..(i + 1) * d].iter_mut().zip(&s.data) {
                *dst = S::from_f64_lossy(v as f64);
            }
            conds.push(Condition::Class(s.class));
        }
        let draws = draw_batch(&mut rng, &conds, d, config.cond_dropout);
        dropout_events += draws.dropped;
        let LossGrad { loss, grad } = model.loss_with_draws(&x0, &draws, step)?;
        let init = *initial.get_or_insert(loss);
        if loss > 10.0 * init {
            above += 1;
            if above >= 100 {
                return Err(Error::Diverged { step, loss, initial: init });
            }
        } else {
            above = 0;
        }
        opt.update(&mut model.params, &grad);
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { step, row: None });
        }
        for (e, &p) in ema.iter_mut().zip(&model.params) {
            *e = *e + ema_rate * (p - *e);
        }
        losses.push(loss);
    }
    if config.ema_decay > 0.0 {
        model.params = ema;
    }
    Ok(TrainReport { losses, dropout_events })
}

// ----------------------------------------------------------------------------
// checkpoint files: magic, u64 LE header length, JSON header, f32 LE payload

pub(crate) const MAGIC: &[u8; 8] = b"DIFFEDIT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub kind: String,
    pub architecture: serde_json::Value,
    pub layer_shapes: Vec<[usize; 2]>,
    pub param_count: usize,
    pub schedule: Option<ScheduleConfig>,
    pub schedule_fingerprint: Option<String>,
    pub seed: u64,
    pub dtype: String,
}

pub(crate) fn write_checkpoint<S: Scalar>(path: &Path, header: &CheckpointHeader, params: &[S]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut bytes = Vec::with_capacity(16 + json.len() + params.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for p in params {
        bytes.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f32>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let payload = &bytes[16 + len..];
    if payload.len() != header.param_count * 4 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header declares {} parameters",
            payload.len(),
            header.param_count
        )));
    }
    let params = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, params))
}

pub(crate) fn layer_shapes(mlp: &MlpShape, extra: Option<[usize; 2]>) -> Vec<[usize; 2]> {
    let mut v: Vec<[usize; 2]> = mlp
        .layers()
        .iter()
        .flat_map(|l| [[l.rows, l.cols], [l.rows, 1]])
        .collect();
    v.extend(extra);
    v
}

impl<S: Scalar> Denoiser<S> {
    fn header(&self, seed: u64) -> CheckpointHeader {
        CheckpointHeader {
            format: "diffedit-checkpoint/1".into(),
            kind: "denoiser".into(),
            architecture: serde_json::to_value(self.config).expect("config serializes"),
            layer_shapes: layer_shapes(
                &self.mlp,
                Some([self.config.embedding_rows(), self.config.cond_dim]),
            ),
            param_count: self.params.len(),
            schedule: Some(self.schedule.config()),
            schedule_fingerprint: Some(self.schedule.fingerprint()),
            seed,
            dtype: "f32-le".into(),
        }
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        write_checkpoint(path, &self.header(seed), &self.params)
    }

    /// Loads a checkpoint and validates its shapes, and the schedule
    /// fingerprint when `expected` is given.
    pub fn load(path: &Path, expected: Option<&NoiseSchedule>) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        if header.kind != "denoiser" {
            return Err(Error::Checkpoint(format!("expected a denoiser checkpoint, got {}", header.kind)));
        }
        let config: DenoiserConfig = serde_json::from_value(header.architecture.clone())?;
        config.validate()?;
        let schedule_config = header
            .schedule
            .ok_or_else(|| Error::Checkpoint("missing schedule".into()))?;
        let schedule = NoiseSchedule::new(schedule_config)?;
        if header.schedule_fingerprint.as_deref() != Some(schedule.fingerprint().as_str()) {
            return Err(Error::Checkpoint("schedule fingerprint mismatch".into()));
        }
        if let Some(exp) = expected {
            if exp.fingerprint() != schedule.fingerprint() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint schedule {} differs from configured {}",
                    schedule.fingerprint(),
                    exp.fingerprint()
                )));
            }
        }
        let model = Self::from_parts(config, schedule, cast_slice(&params));
        let want = model.header(header.seed);
        if want.layer_shapes != header.layer_shapes || want.param_count != params.len() {
            return Err(Error::Checkpoint("layer shapes do not match architecture".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DatasetSpec};

    fn tiny(zero: bool) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 3,
            n_classes: 2,
            width: 8,
            hidden_layers: 2,
            time_dim: 4,
            cond_dim: 3,
            zero_init_output: zero,
            preconditioning: !zero,
            ..DenoiserConfig::gm2d()
        }
    }

    #[test]
    fn zero_readout_outputs_zero() {
        let m: Denoiser<f32> = Denoiser::new(tiny(true), NoiseSchedule::linear_default()).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.2, 0.3];
        let out = m.forward(&x, &[Condition::Class(1), Condition::Null], &[0.4]).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn preconditioned_zero_readout_is_gaussian_estimate() {
        let cfg = DenoiserConfig { data_dim: 2, preconditioning: true, data_mean: 0.5, data_std: 2.0, ..tiny(true) };
        let m: Denoiser<f64> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let x = [0.3, -1.0];
        let t = 0.3;
        let a = m.schedule().alpha(t).unwrap();
        let s2 = 4.0 * a + 1.0 - a;
        let out = m.forward(&x, &[Condition::Class(1)], &[t]).unwrap();
        for (o, xv) in out.iter().zip(x) {
            let want = (1.0 - a).sqrt() / s2 * (xv - a.sqrt() * 0.5);
            assert!((o - want).abs() < 1e-15);
        }
        let zero = m.forward(&x, &[Condition::Null], &[0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn input_jacobian_products() {
        let cfg = DenoiserConfig { data_dim: 5, data_mean: 0.2, data_std: 0.7, ..tiny(false) };
        let m: Denoiser<f64> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let mut rng = seeded(4);
        let x: Vec<f64> = rng::normal_vec(&mut rng, 10);
        let v: Vec<f64> = rng::normal_vec(&mut rng, 10);
        let u: Vec<f64> = rng::normal_vec(&mut rng, 10);
        let conds = [Condition::Class(0), Condition::Null];
        let ts = [0.35, 0.8];
        let (out, jv) = m.jvp(&x, &v, &conds, &ts).unwrap();
        assert_eq!(out, m.forward(&x, &conds, &ts).unwrap());
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (fp, fm) = (m.forward(&xp, &conds, &ts).unwrap(), m.forward(&xm, &conds, &ts).unwrap());
        for i in 0..10 {
            assert!((jv[i] - (fp[i] - fm[i]) / (2.0 * h)).abs() < 1e-7);
        }
        let jtu = m.vjp(&x, &u, &conds, &ts).unwrap();
        let lhs: f64 = u.iter().zip(&jv).map(|(a, b)| a * b).sum();
        let rhs: f64 = jtu.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn forward_is_deterministic_and_validates() {
        let m: Denoiser<f32> = Denoiser::new(tiny(false), NoiseSchedule::linear_default()).unwrap();
        let x = [0.3, -1.0, 2.0];
        let a = m.forward(&x, &[Condition::Class(0)], &[0.7]).unwrap();
        let b = m.forward(&x, &[Condition::Class(0)], &[0.7]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            m.forward(&x[..2], &[Condition::Class(0)], &[0.7]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(m.forward(&x, &[Condition::Class(5)], &[0.7]).is_err());
        assert!(m.forward(&x, &[Condition::Class(0)], &[1.2]).is_err());
    }

    #[test]
    fn null_condition_has_dedicated_row() {
        let m: Denoiser<f64> = Denoiser::new(tiny(false), NoiseSchedule::linear_default()).unwrap();
        let null = m.condition_embedding(Condition::Null).unwrap();
        assert!(null.iter().any(|&v| v != 0.0));
        assert_ne!(null, m.condition_embedding(Condition::Class(0)).unwrap());
    }

    #[test]
    fn zero_estimator_loss_is_unit_per_coordinate() {
        let cfg = DenoiserConfig { data_dim: 64, ..tiny(true) };
        let m: Denoiser<f64> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let batch = 256;
        let x0 = vec![0.5; batch * 64];
        let conds = vec![Condition::Class(1); batch];
        let lg = m.loss_and_grad(&x0, &conds, 0.1, &mut seeded(2)).unwrap();
        // E||eps||^2 / d = 1; 16384 draws give a standard error near 0.011
        assert!((lg.loss - 1.0).abs() < 0.05, "{}", lg.loss);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m: Denoiser<f64> = Denoiser::new(tiny(false), NoiseSchedule::linear_default()).unwrap();
        let x0 = [0.3, -0.4, 1.1, -0.8, 0.2, 0.5, 0.0, 0.9, -1.0];
        let conds = [Condition::Class(0), Condition::Class(1), Condition::Class(0)];
        let draws = draw_batch(&mut seeded(11), &conds, 3, 0.3);
        let lg = m.loss_with_draws(&x0, &draws, 0).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..m.param_count() {
            let mut p = m.clone();
            p.params[i] += h;
            let up = p.loss_with_draws(&x0, &draws, 0).unwrap().loss;
            p.params[i] -= 2.0 * h;
            let dn = p.loss_with_draws(&x0, &draws, 0).unwrap().loss;
            let fd = (up - dn) / (2.0 * h);
            let a = lg.grad[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn dropout_one_never_touches_class_rows() {
        let spec = DatasetSpec::gm2d(64, 1);
        let data = generate(&spec).unwrap();
        let cfg = DenoiserConfig { width: 16, n_classes: 4, ..DenoiserConfig::gm2d() };
        let mut m: Denoiser<f32> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let before: Vec<Vec<f32>> =
            (0..4).map(|c| m.condition_embedding(Condition::Class(c)).unwrap().to_vec()).collect();
        let null_before = m.condition_embedding(Condition::Null).unwrap().to_vec();
        let tc = TrainConfig { steps: 20, batch_size: 8, cond_dropout: 1.0, ..TrainConfig::default() };
        let report = train(&mut m, &tc, &data).unwrap();
        assert_eq!(report.dropout_events, 20 * 8);
        for c in 0..4 {
            assert_eq!(m.condition_embedding(Condition::Class(c)).unwrap(), before[c].as_slice());
        }
        assert_ne!(m.condition_embedding(Condition::Null).unwrap(), null_before.as_slice());
    }

    #[test]
    fn training_is_reproducible() {
        let data = generate(&DatasetSpec::gm2d(128, 2)).unwrap();
        let cfg = DenoiserConfig { width: 16, ..DenoiserConfig::gm2d() };
        let tc = TrainConfig { steps: 30, batch_size: 16, ..TrainConfig::default() };
        let run = || {
            let mut m: Denoiser<f32> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
            let r = train(&mut m, &tc, &data).unwrap();
            (m, r.losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.params(), b.params());
        assert_eq!(la, lb);
    }

    #[test]
    fn bad_train_config_rejected() {
        let data = generate(&DatasetSpec::gm2d(8, 2)).unwrap();
        let mut m: Denoiser<f32> =
            Denoiser::new(DenoiserConfig::gm2d(), NoiseSchedule::linear_default()).unwrap();
        let tc = TrainConfig { cond_dropout: 1.5, ..TrainConfig::default() };
        assert!(train(&mut m, &tc, &data).is_err());
        assert!(train(&mut m, &TrainConfig::default(), &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m: Denoiser<f32> = Denoiser::new(tiny(false), NoiseSchedule::linear_default()).unwrap();
        m.save(&path, 5).unwrap();
        let back: Denoiser<f32> = Denoiser::load(&path, Some(&NoiseSchedule::linear_default())).unwrap();
        assert_eq!(back, m);

        let other = NoiseSchedule::new(ScheduleConfig { beta_end: 0.03, ..ScheduleConfig::default() }).unwrap();
        assert!(matches!(Denoiser::<f32>::load(&path, Some(&other)), Err(Error::Checkpoint(_))));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Denoiser::<f32>::load(&path, None), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Denoiser::<f32>::load(&dir.path().join("missing"), None),
            Err(Error::MissingInput(_))
        ));
    }
}
