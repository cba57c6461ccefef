//! Mask-guided editing: contrastive mask inference, DDIM encoding, and
//! decoding with the out-of-mask region pinned to the encoded latents.
//!
//! Also hosts the ablations (SDEdit, encode-decode, masking without DDIM
//! encoding) and the alternative operator that composites in the predicted
//! clean image instead of the latent.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, SampleShape};
use crate::denoiser::{Condition, Denoiser};
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, seeded, SimRng};
use crate::sampler::{
    ddim_decode_with, ddim_encode_with, guided_eps, noise_to, predict_x0, NoHook, StepContext,
    StepHook, Trajectory,
};
use crate::scalar::Scalar;
use crate::schedule::StepGrid;

/// Below this pre-normalization maximum the difference map is treated as
/// identically zero.
pub const DEGENERATE_LEVEL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// The class of the input sample.
    Source,
    /// The null condition.
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub n_noises: usize,
    pub noise_strength: f64,
    pub clip_percentile: f64,
    pub threshold: f64,
    pub reference: ReferenceMode,
    pub smoothing: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            n_noises: 10,
            noise_strength: 0.5,
            clip_percentile: 95.0,
            threshold: 0.5,
            reference: ReferenceMode::Source,
            smoothing: false,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_noises == 0 {
            return Err(invalid("mask needs at least one noise draw"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!("mask threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.noise_strength > 0.0 && self.noise_strength < 1.0) {
            return Err(invalid(format!("mask noise strength {} outside (0, 1)", self.noise_strength)));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 100.0) {
            return Err(invalid("clip percentile must lie in (0, 100]"));
        }
        Ok(())
    }

    pub fn reference_for(&self, sample_class: usize) -> Condition {
        match self.reference {
            ReferenceMode::Source => Condition::Class(sample_class),
            ReferenceMode::Null => Condition::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMask {
    pub soft: Vec<f32>,
    pub binary: Vec<u8>,
    pub threshold: f64,
    pub degenerate: bool,
    pub config: MaskConfig,
    pub seed: u64,
}

impl EditMask {
    pub fn area_fraction(&self) -> f64 {
        if self.binary.is_empty() {
            return 0.0;
        }
        self.binary.iter().filter(|&&b| b == 1).count() as f64 / self.binary.len() as f64
    }

    /// Same soft map binarized at another level.
    pub fn rebinarize(&self, threshold: f64) -> Result<EditMask> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(invalid(format!("mask threshold {threshold} outside (0, 1)")));
        }
        Ok(EditMask { binary: binarize(&self.soft, threshold), threshold, ..self.clone() })
    }

    /// Fraction of the truth region covered by the mask.
    pub fn recall(&self, truth: &[u8]) -> f64 {
        let total = truth.iter().filter(|&&t| t == 1).count();
        if total == 0 {
            return 0.0;
        }
        let hit = truth.iter().zip(&self.binary).filter(|(&t, &m)| t == 1 && m == 1).count();
        hit as f64 / total as f64
    }

    /// Soft-map percentiles at 5, 25, 50, 75, 95.
    pub fn soft_percentiles(&self) -> [f64; 5] {
        let v: Vec<f64> = self.soft.iter().map(|&x| x as f64).collect();
        [5.0, 25.0, 50.0, 75.0, 95.0].map(|p| percentile(&v, p))
    }
}

/// Linear-interpolation percentile (the common "linear" definition).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn binarize(soft: &[f32], threshold: f64) -> Vec<u8> {
    soft.iter().map(|&s| (s as f64 >= threshold) as u8).collect()
}

fn box_smooth(map: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; map.len()];
    for y in 0..height {
        for x in 0..width {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    acc += map[yy * width + xx];
                    n += 1.0;
                }
            }
            out[y * width + x] = acc / n;
        }
    }
    out
}

/// Clip at the configured percentile, rescale to `[0, 1]`, optionally
/// smooth, and binarize. Returns `(soft, binary, degenerate)`.
pub fn normalize_difference_map(
    averaged: &[f64],
    shape: SampleShape,
    config: &MaskConfig,
) -> (Vec<f32>, Vec<u8>, bool) {
    let max = averaged.iter().copied().fold(0.0f64, f64::max);
    if !(max >= DEGENERATE_LEVEL) {
        return (vec![0.0; averaged.len()], vec![0; averaged.len()], true);
    }
    let cap = percentile(averaged, config.clip_percentile);
    let clipped: Vec<f64> = averaged.iter().map(|&v| v.min(cap)).collect();
    let top = clipped.iter().copied().fold(0.0f64, f64::max);
    let mut soft: Vec<f64> = clipped.iter().map(|&v| v / top).collect();
    if config.smoothing {
        soft = box_smooth(&soft, shape.height, shape.width);
    }
    let soft: Vec<f32> = soft.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let binary = binarize(&soft, config.threshold);
    (soft, binary, false)
}

/// Contrastive masks for a batch of inputs: noise each input `n_noises`
/// times, compare guided estimates under query and reference, average the
/// per-location difference magnitudes, then normalize and binarize.
#[allow(clippy::too_many_arguments)]
pub fn compute_masks<S: Scalar>(
    model: &Denoiser<S>,
    inputs: &[S],
    shape: SampleShape,
    queries: &[Condition],
    references: &[Condition],
    config: &MaskConfig,
    guidance: f64,
    seeds: &[u64],
) -> Result<Vec<EditMask>> {
    config.validate()?;
    let d = model.dim();
    if shape.len() != d {
        return Err(invalid("sample shape does not match the denoiser"));
    }
    let n = queries.len();
    if inputs.len() != n * d || references.len() != n || seeds.len() != n {
        return Err(invalid("mask batch arguments disagree in length"));
    }
    let k = config.n_noises;
    let alpha = model.schedule().alpha(config.noise_strength)?;
    let mut noised = Vec::with_capacity(n * k * d);
    let mut q = Vec::with_capacity(n * k);
    let mut r = Vec::with_capacity(n * k);
    for i in 0..n {
        let mut rng = seeded(seeds[i]);
        for _ in 0..k {
            noised.extend(noise_to(alpha, &inputs[i * d..(i + 1) * d], &mut rng)?);
            q.push(queries[i]);
            r.push(references[i]);
        }
    }
    let eq = guided_eps(model, &noised, &q, guidance, config.noise_strength)?;
    let er = guided_eps(model, &noised, &r, guidance, config.noise_strength)?;

    let locs = shape.locations();
    let ch = shape.channels;
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let mut avg = vec![0.0f64; locs];
        for j in 0..k {
            let base = (i * k + j) * d;
            for (loc, a) in avg.iter_mut().enumerate() {
                let sq: f64 = (0..ch)
                    .map(|c| {
                        let idx = base + loc * ch + c;
                        (eq[idx] - er[idx]).as_f64().powi(2)
                    })
                    .sum();
                *a += sq.sqrt();
            }
        }
        for a in &mut avg {
            *a /= k as f64;
        }
        let (soft, binary, degenerate) = normalize_difference_map(&avg, shape, config);
        masks.push(EditMask { soft, binary, threshold: config.threshold, degenerate, config: *config, seed: seeds[i] });
    }
    Ok(masks)
}

/// Single-input convenience wrapper over [`compute_masks`].
#[allow(clippy::too_many_arguments)]
pub fn compute_mask<S: Scalar>(
    model: &Denoiser<S>,
    input: &[S],
    shape: SampleShape,
    query: Condition,
    reference: Condition,
    config: &MaskConfig,
    guidance: f64,
    seed: u64,
) -> Result<EditMask> {
    Ok(compute_masks(model, input, shape, &[query], &[reference], config, guidance, &[seed])?
        .remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Diffedit,
    Sdedit,
    EncodeDecode,
    DiffeditNoEncode,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::Diffedit, Method::EncodeDecode, Method::Sdedit, Method::DiffeditNoEncode];

    pub fn is_masked(self) -> bool {
        matches!(self, Method::Diffedit | Method::DiffeditNoEncode)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Diffedit => "diffedit",
            Method::Sdedit => "sdedit",
            Method::EncodeDecode => "encode-decode",
            Method::DiffeditNoEncode => "diffedit-no-encode",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskOperator {
    /// `y <- M y + (1 - M) x_t` with `x_t` the reference latent.
    #[default]
    LatentReplace,
    /// Composite the predicted clean image with the input, then re-noise.
    Glide,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub input: Vec<f32>,
    pub shape: SampleShape,
    pub query: Condition,
    pub reference: Condition,
    pub encoding_ratio: f64,
    pub guidance: f64,
    pub mask: MaskConfig,
    pub method: Method,
    pub operator: MaskOperator,
    pub seed: u64,
    /// Steps of the `[0, 1]` inference schedule; the ratio keeps a fraction.
    pub base_steps: usize,
    /// Encode with the reference condition instead of the null condition.
    pub conditional_encoding: bool,
    /// Guidance used for the mask estimates; `None` reuses `guidance`.
    pub mask_guidance: Option<f64>,
}

impl EditRequest {
    pub fn new(sample: &Sample, query: Condition, method: Method, r: f64, seed: u64) -> Self {
        let mask = MaskConfig::default();
        Self {
            input: sample.data.clone(),
            shape: sample.shape,
            query,
            reference: mask.reference_for(sample.class),
            encoding_ratio: r,
            guidance: 5.0,
            mask,
            method,
            operator: MaskOperator::LatentReplace,
            seed,
            base_steps: 50,
            conditional_encoding: false,
            mask_guidance: None,
        }
    }

    pub fn effective_mask_guidance(&self) -> f64 {
        self.mask_guidance.unwrap_or(self.guidance)
    }

    pub fn mask_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.encoding_ratio > 0.0 && self.encoding_ratio <= 1.0) {
            return Err(invalid(format!("encoding ratio {} outside (0, 1]", self.encoding_ratio)));
        }
        if !self.guidance.is_finite() || self.guidance < 0.0 {
            return Err(invalid("guidance scale must be finite and >= 0"));
        }
        if self.mask_guidance.is_some_and(|g| !g.is_finite() || g < 0.0) {
            return Err(invalid("mask guidance scale must be finite and >= 0"));
        }
        if self.operator == MaskOperator::Glide && !self.method.is_masked() {
            return Err(invalid(format!("mask operator glide does not apply to {}", self.method.name())));
        }
        if self.input.len() != self.shape.len() {
            return Err(invalid("input length does not match its shape"));
        }
        if self.input.iter().any(|v| !v.is_finite()) {
            return Err(invalid("input holds non-finite values"));
        }
        if self.method.is_masked() {
            self.mask.validate()?;
        }
        if self.base_steps == 0 {
            return Err(invalid("base step count must be positive"));
        }
        Ok(())
    }

    fn same_settings(&self, other: &EditRequest) -> bool {
        self.shape == other.shape
            && self.encoding_ratio == other.encoding_ratio
            && self.guidance == other.guidance
            && self.mask == other.mask
            && self.method == other.method
            && self.operator == other.operator
            && self.base_steps == other.base_steps
            && self.conditional_encoding == other.conditional_encoding
            && self.mask_guidance == other.mask_guidance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub output: Vec<f32>,
    pub mask: Option<EditMask>,
    /// Hash of this request's encode trajectory, for methods that encode.
    pub encode_fingerprint: Option<String>,
    pub elapsed: Duration,
}

/// `y <- M y + (1 - M) x` for a binary mask broadcast over channels.
fn composite<S: Scalar>(y: &mut [S], x: &[S], mask: &[u8], channels: usize) {
    for (i, (yv, &xv)) in y.iter_mut().zip(x).enumerate() {
        if mask[i / channels] == 0 {
            *yv = xv;
        }
    }
}

struct LatentReplace<'a, S> {
    masks: &'a [Vec<u8>],
    stored: &'a Trajectory<S>,
    channels: usize,
}

impl<S: Scalar> StepHook<S> for LatentReplace<'_, S> {
    fn after_update(&mut self, ctx: &StepContext<'_, S>, next: &mut [S]) -> Result<()> {
        let reference = &self.stored.states[ctx.to];
        let d = next.len() / self.masks.len();
        for (row, m) in self.masks.iter().enumerate() {
            composite(&mut next[row * d..(row + 1) * d], &reference[row * d..(row + 1) * d], m, self.channels);
        }
        Ok(())
    }
}

/// Out-of-mask reference is a fresh noising of the input at every step.
struct FreshNoise<'a, S> {
    masks: &'a [Vec<u8>],
    x0: &'a [S],
    rngs: Vec<SimRng>,
    channels: usize,
}

impl<S: Scalar> StepHook<S> for FreshNoise<'_, S> {
    fn after_update(&mut self, ctx: &StepContext<'_, S>, next: &mut [S]) -> Result<()> {
        let d = next.len() / self.masks.len();
        for (row, m) in self.masks.iter().enumerate() {
            let x0 = &self.x0[row * d..(row + 1) * d];
            let reference = noise_to(ctx.alpha_to, x0, &mut self.rngs[row])?;
            composite(&mut next[row * d..(row + 1) * d], &reference, m, self.channels);
        }
        Ok(())
    }
}

struct GlideHook<'a, S> {
    masks: &'a [Vec<u8>],
    x0: &'a [S],
    channels: usize,
}

impl<S: Scalar> StepHook<S> for GlideHook<'_, S> {
    fn after_update(&mut self, ctx: &StepContext<'_, S>, next: &mut [S]) -> Result<()> {
        let d = next.len() / self.masks.len();
        for (row, m) in self.masks.iter().enumerate() {
            let r = row * d..(row + 1) * d;
            let step = glide_mask_step(
                &ctx.prev[r.clone()],
                &self.x0[r.clone()],
                m,
                self.channels,
                &ctx.eps[r.clone()],
                ctx.alpha_from,
                ctx.alpha_to,
            )?;
            next[r].copy_from_slice(&step);
        }
        Ok(())
    }
}

/// Predicted-image compositing update: `y0_hat = (y - sqrt(1-a) eps)/sqrt(a)`,
/// `y0' = M y0_hat + (1-M) x0`, next `= sqrt(a') y0' + sqrt(1-a') eps`.
pub fn glide_mask_step<S: Scalar>(
    y_t: &[S],
    x0: &[S],
    mask: &[u8],
    channels: usize,
    eps: &[S],
    alpha_t: f64,
    alpha_next: f64,
) -> Result<Vec<S>> {
    if alpha_t < 1e-6 {
        return Err(invalid(format!("alpha {alpha_t} below 1e-6 in predicted-image step")));
    }
    if y_t.len() != x0.len() || y_t.len() != eps.len() || mask.len() * channels != y_t.len() {
        return Err(invalid("predicted-image step arguments disagree in length"));
    }
    let sa = S::from_f64_lossy(alpha_next.sqrt());
    let sn = S::from_f64_lossy((1.0 - alpha_next).sqrt());
    Ok((0..y_t.len())
        .map(|i| {
            let pred = if mask[i / channels] == 1 { predict_x0(y_t[i], eps[i], alpha_t) } else { x0[i] };
            sa * pred + sn * eps[i]
        })
        .collect())
}

/// Decode `x_r` with the chosen masking rule. `stored` must hold the encode
/// trajectory for the latent-replace operator.
#[allow(clippy::too_many_arguments)]
pub fn masked_decode<S: Scalar>(
    model: &Denoiser<S>,
    x0: &[S],
    x_r: &[S],
    grid: &StepGrid,
    queries: &[Condition],
    guidance: f64,
    masks: &[Vec<u8>],
    channels: usize,
    operator: MaskOperator,
    stored: Option<&Trajectory<S>>,
) -> Result<Trajectory<S>> {
    match operator {
        MaskOperator::LatentReplace => {
            let stored = stored.ok_or_else(|| invalid("latent replacement needs stored latents"))?;
            if stored.grid != *grid {
                return Err(invalid("stored latents were computed on another grid"));
            }
            let mut hook = LatentReplace { masks, stored, channels };
            ddim_decode_with(model, x_r, grid, queries, guidance, &mut hook)
        }
        MaskOperator::Glide => {
            let mut hook = GlideHook { masks, x0, channels };
            ddim_decode_with(model, x_r, grid, queries, guidance, &mut hook)
        }
    }
}

fn row_fingerprint<S: Scalar>(traj: &Trajectory<S>, row: usize, d: usize) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for s in &traj.states {
        for v in &s[row * d..(row + 1) * d] {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    crate::io::hex(&h.finalize())
}

pub fn edit<S: Scalar>(model: &Denoiser<S>, request: &EditRequest) -> Result<EditResult> {
    Ok(edit_many(model, std::slice::from_ref(request))?.remove(0))
}

/// Runs requests that share all settings except input, query, reference and
/// seed as one batch. Results match running each request on its own.
pub fn edit_many<S: Scalar>(model: &Denoiser<S>, requests: &[EditRequest]) -> Result<Vec<EditResult>> {
    let Some(first) = requests.first() else {
        return Ok(Vec::new());
    };
    let start = Instant::now();
    for req in requests {
        req.validate()?;
        if !req.same_settings(first) {
            return Err(invalid("batched edit requests must share method, ratio and mask settings"));
        }
    }
    let d = model.dim();
    if first.shape.len() != d {
        return Err(invalid("input shape does not match the denoiser"));
    }
    let n = requests.len();
    let x0: Vec<S> = requests
        .iter()
        .flat_map(|r| r.input.iter().map(|&v| S::from_f64_lossy(v as f64)))
        .collect();
    let queries: Vec<Condition> = requests.iter().map(|r| r.query).collect();
    let references: Vec<Condition> = requests.iter().map(|r| r.reference).collect();
    let method = first.method;
    let grid = StepGrid::for_ratio(first.encoding_ratio, first.base_steps)?;
    let channels = first.shape.channels;

    let masks = if method.is_masked() {
        let seeds: Vec<u64> = requests.iter().map(EditRequest::mask_seed).collect();
        Some(compute_masks(
            model,
            &x0,
            first.shape,
            &queries,
            &references,
            &first.mask,
            first.effective_mask_guidance(),
            &seeds,
        )?)
    } else {
        None
    };
    let binaries: Vec<Vec<u8>> = masks
        .as_ref()
        .map(|ms| ms.iter().map(|m| m.binary.clone()).collect())
        .unwrap_or_default();

    let mut noise_rngs: Vec<SimRng> = requests.iter().map(|r| seeded(r.noise_seed())).collect();
    let encode_conds = if first.conditional_encoding { references.clone() } else { vec![Condition::Null; n] };

    let (decoded, encoded) = match method {
        Method::Diffedit | Method::EncodeDecode => {
            let enc = ddim_encode_with(model, &x0, &grid, &encode_conds)?;
            let dec = if method == Method::Diffedit {
                masked_decode(model, &x0, enc.noise_end(), &grid, &queries, first.guidance, &binaries, channels, first.operator, Some(&enc))?
            } else {
                ddim_decode_with(model, enc.noise_end(), &grid, &queries, first.guidance, &mut NoHook)?
            };
            (dec, Some(enc))
        }
        Method::Sdedit | Method::DiffeditNoEncode => {
            let alpha = model.schedule().alpha(grid.end())?;
            let mut x_r = Vec::with_capacity(n * d);
            for (i, rng) in noise_rngs.iter_mut().enumerate() {
                x_r.extend(noise_to(alpha, &x0[i * d..(i + 1) * d], rng)?);
            }
            let dec = match (method, first.operator) {
                (Method::Sdedit, _) => ddim_decode_with(model, &x_r, &grid, &queries, first.guidance, &mut NoHook)?,
                (_, MaskOperator::LatentReplace) => {
                    let mut hook = FreshNoise { masks: &binaries, x0: &x0, rngs: noise_rngs, channels };
                    ddim_decode_with(model, &x_r, &grid, &queries, first.guidance, &mut hook)?
                }
                (_, MaskOperator::Glide) => {
                    masked_decode(model, &x0, &x_r, &grid, &queries, first.guidance, &binaries, channels, MaskOperator::Glide, None)?
                }
            };
            (dec, None)
        }
    };

    let out = decoded.data_end();
    let elapsed = start.elapsed() / n as u32;
    let mut masks = masks.map(|m| m.into_iter().map(Some).collect::<Vec<_>>()).unwrap_or_else(|| vec![None; n]);
    Ok((0..n)
        .map(|i| EditResult {
            output: out[i * d..(i + 1) * d].iter().map(|v| v.as_f64() as f32).collect(),
            mask: masks[i].take(),
            encode_fingerprint: encoded.as_ref().map(|e| row_fingerprint(e, i, d)),
            elapsed,
        })
        .collect())
}

/// Root-mean-square difference between two equally sized vectors.
pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// RMSE restricted to locations where `mask == 0`.
pub fn rmse_outside(a: &[f32], b: &[f32], mask: &[u8], channels: usize) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..a.len() {
        if mask[i / channels] == 0 {
            acc += (a[i] as f64 - b[i] as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (acc / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSpec, SQUARE, CIRCLE};
    use crate::denoiser::DenoiserConfig;
    use crate::sampler::{ddim_decode, ddim_encode};
    use crate::schedule::NoiseSchedule;

    fn shapes_model(zero: bool) -> Denoiser<f32> {
        let cfg = DenoiserConfig { width: 32, hidden_layers: 2, zero_init_output: zero, ..DenoiserConfig::shapes() };
        Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap()
    }

    fn sample() -> Sample {
        DatasetSpec::shapes(1, 3).sample_of_class(SQUARE, 0)
    }

    #[test]
    fn identical_conditions_give_degenerate_mask() {
        let m = shapes_model(false);
        let s = sample();
        let mask = compute_mask(&m, &s.data, s.shape, Condition::Class(1), Condition::Class(1), &MaskConfig::default(), 5.0, 3).unwrap();
        assert!(mask.degenerate);
        assert!(mask.binary.iter().all(|&b| b == 0));
        assert!(mask.soft.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_difference_map_normalizes_to_ones() {
        let cfg = MaskConfig::default();
        let (soft, binary, degenerate) = normalize_difference_map(&[0.3; 256], SampleShape::SHAPES, &cfg);
        assert!(!degenerate);
        assert!(soft.iter().all(|&v| v == 1.0));
        assert!(binary.iter().all(|&b| b == 1));
    }

    #[test]
    fn percentile_clipping_caps_outliers() {
        let mut map = vec![0.1; 100];
        map[7] = 50.0;
        map[8] = 0.6;
        let cfg = MaskConfig { clip_percentile: 95.0, ..MaskConfig::default() };
        let shape = SampleShape { height: 10, width: 10, channels: 1 };
        let (soft, _, _) = normalize_difference_map(&map, shape, &cfg);
        // the 95th percentile is 0.1, so both large values saturate at 1
        assert_eq!(soft[7], 1.0);
        assert_eq!(soft[8], 1.0);
        assert_eq!(soft[0], 1.0);
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 50.0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn smoothing_stays_in_unit_range() {
        let mut map = vec![0.0; 256];
        for i in 100..140 {
            map[i] = i as f64;
        }
        let cfg = MaskConfig { smoothing: true, ..MaskConfig::default() };
        let (soft, binary, _) = normalize_difference_map(&map, SampleShape::SHAPES, &cfg);
        assert!(soft.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (s, b) in soft.iter().zip(&binary) {
            assert_eq!(*b == 1, *s as f64 >= cfg.threshold);
        }
    }

    #[test]
    fn thresholds_nest() {
        let m = shapes_model(false);
        let s = sample();
        let mask = compute_mask(&m, &s.data, s.shape, Condition::Class(CIRCLE), Condition::Class(SQUARE), &MaskConfig::default(), 5.0, 9).unwrap();
        let lo = mask.rebinarize(0.25).unwrap();
        let hi = mask.rebinarize(0.75).unwrap();
        for i in 0..256 {
            assert!(hi.binary[i] <= mask.binary[i] && mask.binary[i] <= lo.binary[i]);
            assert_eq!(mask.binary[i] == 1, mask.soft[i] as f64 >= 0.5);
        }
        assert!(mask.rebinarize(1.0).is_err());
    }

    #[test]
    fn mask_config_validation() {
        assert!(MaskConfig { threshold: 0.0, ..MaskConfig::default() }.validate().is_err());
        assert!(MaskConfig { n_noises: 0, ..MaskConfig::default() }.validate().is_err());
        assert!(MaskConfig::default().validate().is_ok());
    }

    #[test]
    fn glide_step_special_cases() {
        let y = [0.4f64, -0.2];
        let eps = [0.3, 0.9];
        let x0 = [1.0, 2.0];
        let (a, an) = (0.3, 0.6);
        let mut plain = [0.0; 2];
        crate::sampler::ddim_step(&y, &eps, a, an, &mut plain);
        assert_eq!(glide_mask_step(&y, &x0, &[1, 1], 1, &eps, a, an).unwrap(), plain.to_vec());
        let zero = glide_mask_step(&y, &x0, &[0, 0], 1, &[0.0, 0.0], a, an).unwrap();
        assert_eq!(zero, vec![an.sqrt() * 1.0, an.sqrt() * 2.0]);
        assert!(glide_mask_step(&y, &x0, &[1, 1], 1, &eps, 1e-7, an).is_err());
    }

    #[test]
    fn zero_and_full_masks() {
        let m = shapes_model(false).cast::<f64>();
        let s = sample();
        let x0: Vec<f64> = s.data.iter().map(|&v| v as f64).collect();
        let grid = StepGrid::for_ratio(0.6, 50).unwrap();
        let enc = ddim_encode(&m, &x0, &grid).unwrap();
        let q = [Condition::Class(CIRCLE)];

        let ones = vec![vec![1u8; 256]];
        let full = masked_decode(&m, &x0, enc.noise_end(), &grid, &q, 5.0, &ones, 1, MaskOperator::LatentReplace, Some(&enc)).unwrap();
        let plain = ddim_decode(&m, enc.noise_end(), &grid, &q, 5.0).unwrap();
        assert_eq!(full.data_end(), plain.data_end());

        let zeros = vec![vec![0u8; 256]];
        let none = masked_decode(&m, &x0, enc.noise_end(), &grid, &q, 5.0, &zeros, 1, MaskOperator::LatentReplace, Some(&enc)).unwrap();
        assert_eq!(none.data_end(), x0.as_slice());
        for (i, state) in none.states.iter().enumerate() {
            assert_eq!(state, &enc.states[i]);
        }
    }

    #[test]
    fn request_validation() {
        let s = sample();
        let mut req = EditRequest::new(&s, Condition::Class(CIRCLE), Method::Sdedit, 0.5, 1);
        req.operator = MaskOperator::Glide;
        assert!(req.validate().is_err());
        req.operator = MaskOperator::LatentReplace;
        assert!(req.validate().is_ok());
        req.encoding_ratio = 0.0;
        assert!(req.validate().is_err());
        assert_eq!("encode-decode".parse::<Method>().unwrap(), Method::EncodeDecode);
        assert!("inpaint".parse::<Method>().is_err());
    }

    #[test]
    fn edit_outputs_and_determinism() {
        let m = shapes_model(false);
        let s = sample();
        for method in Method::ALL {
            let req = EditRequest::new(&s, Condition::Class(CIRCLE), method, 0.4, 5);
            let a = edit(&m, &req).unwrap();
            let b = edit(&m, &req).unwrap();
            assert_eq!(a.output, b.output);
            assert_eq!(a.output.len(), 256);
            assert!(a.output.iter().all(|v| v.is_finite()));
            assert_eq!(a.mask.is_some(), method.is_masked());
            assert_eq!(a.encode_fingerprint.is_some(), matches!(method, Method::Diffedit | Method::EncodeDecode));
            if let Some(mask) = &a.mask {
                for i in 0..256 {
                    if mask.binary[i] == 0 {
                        assert_eq!(a.output[i], s.data[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn batching_matches_single_requests() {
        let m = shapes_model(false);
        let spec = DatasetSpec::shapes(4, 8);
        let reqs: Vec<EditRequest> = (0..3)
            .map(|i| EditRequest::new(&spec.sample_at(i), Condition::Class(((i + 1) % 4) as usize), Method::DiffeditNoEncode, 0.5, 40 + i))
            .collect();
        let batch = edit_many(&m, &reqs).unwrap();
        for (req, got) in reqs.iter().zip(&batch) {
            let single = edit(&m, req).unwrap();
            assert_eq!(single.mask, got.mask);
            for (a, b) in single.output.iter().zip(&got.output) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        let mut mixed = reqs.clone();
        mixed[1].encoding_ratio = 0.7;
        assert!(edit_many(&m, &mixed).is_err());
    }

    #[test]
    fn mask_ignores_decode_seed() {
        let m = shapes_model(false);
        let s = sample();
        let mut req = EditRequest::new(&s, Condition::Class(CIRCLE), Method::Diffedit, 0.5, 5);
        let a = edit(&m, &req).unwrap().mask.unwrap();
        let mask_seed = req.mask_seed();
        req.seed = 999;
        // same mask stream, different everything else
        let b = compute_mask(&m, &s.data, s.shape, req.query, req.reference, &req.mask, req.guidance, mask_seed).unwrap();
        assert_eq!(a, b);
    }
}
