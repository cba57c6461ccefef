//! Edit evaluation: a shapes classifier for the query-match score, trade-off
//! sweeps over the encoding ratio, matched-level comparisons and ablations.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate, DatasetSpec, EditPair, Family, Sample};
use crate::denoiser::{layer_shapes, read_checkpoint, write_checkpoint, CheckpointHeader, Condition, Denoiser};
use crate::diffedit::{edit_many, rmse, EditRequest, MaskConfig, MaskOperator, Method};
use crate::error::{invalid, Error, Result};
use crate::io::{Mark, Plot, Series};
use crate::nn::{Adam, MlpShape};
use crate::rng::{self, derive_seed, seeded};
use crate::scalar::{cast_slice, Scalar};
use crate::stats::{mean, paired_less, signed_rank_less, std_error, PairedTest};

/// Held-out accuracy required before any editing evaluation.
pub const ACCURACY_GATE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub width: usize,
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Standard deviation of Gaussian input jitter during training.
    pub input_noise: f64,
    pub seed: u64,
    pub holdout: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 128,
            hidden_layers: 2,
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 6000,
            input_noise: 0.05,
            seed: 23,
            holdout: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    shape: MlpShape,
    params: Vec<S>,
    config: ClassifierConfig,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifierArchitecture {
    mlp: MlpShape,
    config: ClassifierConfig,
    accuracy: f64,
}

fn softmax_rows(logits: &mut [f64], k: usize) {
    for row in logits.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

impl<S: Scalar> Classifier<S> {
    pub fn n_classes(&self) -> usize {
        self.shape.output
    }

    pub fn dim(&self) -> usize {
        self.shape.input
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    /// Class probabilities, `n x k` row-major.
    pub fn probabilities(&self, x: &[S]) -> Result<Vec<f64>> {
        if x.len() % self.shape.input != 0 {
            return Err(Error::ShapeMismatch { expected: self.shape.input, got: x.len() });
        }
        let batch = x.len() / self.shape.input;
        let logits = self.shape.forward(&self.params, x, batch);
        let mut p: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        softmax_rows(&mut p, self.shape.output);
        Ok(p)
    }

    pub fn predict(&self, x: &[S]) -> Result<Vec<usize>> {
        let k = self.n_classes();
        Ok(self
            .probabilities(x)?
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn evaluate_accuracy(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(f64::NAN);
        }
        let x: Vec<S> = samples.iter().flat_map(|s| s.data.iter().map(|&v| S::from_f64_lossy(v as f64))).collect();
        let pred = self.predict(&x)?;
        Ok(pred.iter().zip(samples).filter(|(p, s)| **p == s.class).count() as f64 / samples.len() as f64)
    }

    /// Errors with an accuracy-gate failure below [`ACCURACY_GATE`].
    pub fn check_gate(&self) -> Result<()> {
        if self.accuracy >= ACCURACY_GATE {
            Ok(())
        } else {
            Err(Error::AccuracyGate { accuracy: self.accuracy, required: ACCURACY_GATE })
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arch = ClassifierArchitecture { mlp: self.shape, config: self.config, accuracy: self.accuracy };
        let header = CheckpointHeader {
            format: "diffedit-checkpoint/1".into(),
            kind: "classifier".into(),
            architecture: serde_json::to_value(arch)?,
            layer_shapes: layer_shapes(&self.shape, None),
            param_count: self.params.len(),
            schedule: None,
            schedule_fingerprint: None,
            seed: self.config.seed,
            dtype: "f32-le".into(),
        };
        write_checkpoint(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        if header.kind != "classifier" {
            return Err(Error::Checkpoint(format!("expected a classifier checkpoint, got {}", header.kind)));
        }
        let arch: ClassifierArchitecture = serde_json::from_value(header.architecture)?;
        if header.layer_shapes != layer_shapes(&arch.mlp, None) || params.len() != arch.mlp.param_count() {
            return Err(Error::Checkpoint("layer shapes do not match architecture".into()));
        }
        Ok(Self { shape: arch.mlp, params: cast_slice(&params), config: arch.config, accuracy: arch.accuracy })
    }
}

/// Held-out clean samples used for the accuracy gate.
pub fn holdout_set(spec: &DatasetSpec, n: usize) -> Result<Vec<Sample>> {
    generate(&DatasetSpec { seed: derive_seed(spec.seed, 0xC1A5), size: n, ..spec.clone() })
}

/// Softmax cross-entropy training with Adam on the shapes data; the
/// held-out accuracy is stored on the result.
pub fn train_classifier<S: Scalar>(
    spec: &DatasetSpec,
    data: &[Sample],
    config: &ClassifierConfig,
) -> Result<Classifier<S>> {
    if data.is_empty() {
        return Err(invalid("empty classifier training set"));
    }
    if config.steps == 0 || config.batch_size == 0 || config.width == 0 || config.hidden_layers == 0 {
        return Err(invalid("classifier sizes must be positive"));
    }
    let d = data[0].data.len();
    let k = spec.n_classes();
    let shape = MlpShape { input: d, width: config.width, hidden_layers: config.hidden_layers, output: k };
    let mut rng = seeded(config.seed);
    let mut params: Vec<S> = shape.init(&mut rng, false);
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut x = vec![S::zero(); config.batch_size * d];
    let mut labels = vec![0usize; config.batch_size];
    for step in 0..config.steps {
        for i in 0..config.batch_size {
            let s = &data[rng.gen_range(0..data.len())];
            if s.data.len() != d {
                return Err(Error::ShapeMismatch { expected: d, got: s.data.len() });
            }
            labels[i] = s.class;
            for (dst, &v) in x[i * d..(i + 1) * d].iter_mut().zip(&s.data) {
                let jitter: f64 = rng::normal(&mut rng);
                *dst = S::from_f64_lossy(v as f64 + config.input_noise * jitter);
            }
        }
        let (logits, cache) = shape.forward_cached(&params, &x, config.batch_size);
        let mut p: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        softmax_rows(&mut p, k);
        let mut loss = 0.0;
        let mut d_out = vec![S::zero(); logits.len()];
        let scale = 1.0 / config.batch_size as f64;
        for i in 0..config.batch_size {
            loss -= p[i * k + labels[i]].max(1e-300).ln();
            for c in 0..k {
                let target = if c == labels[i] { 1.0 } else { 0.0 };
                d_out[i * k + c] = S::from_f64_lossy((p[i * k + c] - target) * scale);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, row: None });
        }
        let mut grad = vec![S::zero(); params.len()];
        shape.backward(&params, &cache, &d_out, &mut grad, false);
        opt.update(&mut params, &grad);
    }
    let mut model = Classifier { shape, params, config: *config, accuracy: 0.0 };
    model.accuracy = model.evaluate_accuracy(&holdout_set(spec, config.holdout)?)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub ratios: Vec<f64>,
    pub n_pairs: usize,
    pub guidance: f64,
    pub mask_guidance: Option<f64>,
    pub mask: MaskConfig,
    pub operator: MaskOperator,
    pub base_steps: usize,
    pub seed: u64,
    /// Requests per batch. Fixed so results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Diffedit, Method::EncodeDecode, Method::Sdedit, Method::DiffeditNoEncode],
            ratios: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            n_pairs: 100,
            guidance: 5.0,
            mask_guidance: None,
            mask: MaskConfig::default(),
            operator: MaskOperator::LatentReplace,
            base_steps: 50,
            seed: 31,
            chunk_size: 25,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.ratios.is_empty() {
            return Err(invalid("sweep needs at least one method and one ratio"));
        }
        if self.n_pairs == 0 || self.chunk_size == 0 {
            return Err(invalid("sweep needs pairs and a positive chunk size"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(invalid(format!("encoding ratio {r} outside (0, 1]")));
        }
        if self.operator == MaskOperator::Glide && self.methods.iter().any(|m| !m.is_masked()) {
            return Err(invalid("the glide operator applies to masked methods only"));
        }
        self.mask.validate()
    }

    /// Per-pair seed, shared across methods and ratios.
    pub fn pair_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// Outcome of one edit in a sweep. Failed edits carry `NaN` metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub method: Method,
    pub r: f64,
    pub pair: usize,
    pub seed: u64,
    pub distance: f64,
    pub match_score: f64,
    pub correct: bool,
    pub mask_area: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: Method,
    pub r: f64,
    pub n: usize,
    pub failures: usize,
    pub distance: f64,
    pub distance_se: f64,
    pub match_score: f64,
    pub match_se: f64,
    pub accuracy: f64,
    pub mask_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<TradeoffPoint>,
    pub records: Vec<PairRecord>,
}

fn score_outputs<S: Scalar>(
    classifier: &Classifier<S>,
    requests: &[EditRequest],
    outputs: &[Vec<f32>],
) -> Result<Vec<(f64, f64, bool)>> {
    let x: Vec<S> = outputs.iter().flat_map(|o| o.iter().map(|&v| S::from_f64_lossy(v as f64))).collect();
    let probs = classifier.probabilities(&x)?;
    let k = classifier.n_classes();
    let pred = classifier.predict(&x)?;
    requests
        .iter()
        .enumerate()
        .map(|(i, req)| {
            let Condition::Class(q) = req.query else {
                return Err(invalid("sweep queries must be classes"));
            };
            Ok((rmse(&outputs[i], &req.input), probs[i * k + q], pred[i] == q))
        })
        .collect()
}

fn run_chunk<S: Scalar>(
    model: &Denoiser<S>,
    classifier: &Classifier<S>,
    requests: &[EditRequest],
    pair_offset: usize,
) -> Result<Vec<PairRecord>> {
    let outcome: Vec<std::result::Result<crate::diffedit::EditResult, String>> = match edit_many(model, requests) {
        Ok(res) => res.into_iter().map(Ok).collect(),
        // fall back to one request at a time so a single failure stays local
        Err(_) => requests
            .iter()
            .map(|r| edit_many(model, std::slice::from_ref(r)).map(|mut v| v.remove(0)).map_err(|e| e.to_string()))
            .collect(),
    };
    let ok: Vec<usize> = (0..requests.len()).filter(|&i| outcome[i].is_ok()).collect();
    let ok_reqs: Vec<EditRequest> = ok.iter().map(|&i| requests[i].clone()).collect();
    let ok_out: Vec<Vec<f32>> = ok.iter().map(|&i| outcome[i].as_ref().expect("ok").output.clone()).collect();
    let scores = score_outputs(classifier, &ok_reqs, &ok_out)?;
    let mut scored = ok.iter().zip(scores);
    let mut next = scored.next();
    let mut records = Vec::with_capacity(requests.len());
    for (i, req) in requests.iter().enumerate() {
        let base = PairRecord {
            method: req.method,
            r: req.encoding_ratio,
            pair: pair_offset + i,
            seed: req.seed,
            distance: f64::NAN,
            match_score: f64::NAN,
            correct: false,
            mask_area: None,
            failure: None,
        };
        match &outcome[i] {
            Ok(res) => {
                let (&j, (dist, m, correct)) = next.take().expect("one score per success");
                debug_assert_eq!(j, i);
                next = scored.next();
                records.push(PairRecord {
                    distance: dist,
                    match_score: m,
                    correct,
                    mask_area: res.mask.as_ref().map(|m| m.area_fraction()),
                    ..base
                });
            }
            Err(e) => records.push(PairRecord { failure: Some(e.clone()), ..base }),
        }
    }
    Ok(records)
}

fn summarize(method: Method, r: f64, records: &[&PairRecord]) -> TradeoffPoint {
    let ok: Vec<&&PairRecord> = records.iter().filter(|p| p.failure.is_none()).collect();
    let dist: Vec<f64> = ok.iter().map(|p| p.distance).collect();
    let matches: Vec<f64> = ok.iter().map(|p| p.match_score).collect();
    let areas: Vec<f64> = ok.iter().filter_map(|p| p.mask_area).collect();
    TradeoffPoint {
        method,
        r,
        n: ok.len(),
        failures: records.len() - ok.len(),
        distance: mean(&dist),
        distance_se: std_error(&dist),
        match_score: mean(&matches),
        match_se: std_error(&matches),
        accuracy: ok.iter().filter(|p| p.correct).count() as f64 / ok.len().max(1) as f64,
        mask_area: if areas.is_empty() { f64::NAN } else { mean(&areas) },
    }
}

/// Runs every (method, ratio) over the first `n_pairs` edit pairs on a pool
/// of `jobs` threads. Output order and values do not depend on `jobs`.
pub fn sweep<S: Scalar>(
    model: &Denoiser<S>,
    classifier: &Classifier<S>,
    pairs: &[EditPair],
    config: &SweepConfig,
    jobs: usize,
) -> Result<SweepResult> {
    config.validate()?;
    classifier.check_gate()?;
    if pairs.len() < config.n_pairs {
        return Err(invalid(format!("sweep needs {} edit pairs, got {}", config.n_pairs, pairs.len())));
    }
    if classifier.dim() != model.dim() {
        return Err(invalid("classifier and denoiser disagree on the data dimension"));
    }
    let pairs = &pairs[..config.n_pairs];
    let mut tasks: Vec<(Method, f64, usize, Vec<EditRequest>)> = Vec::new();
    for &method in &config.methods {
        for &r in &config.ratios {
            for (c, chunk) in pairs.chunks(config.chunk_size).enumerate() {
                let offset = c * config.chunk_size;
                let reqs = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let mut req = EditRequest::new(&p.sample, Condition::Class(p.query), method, r, config.pair_seed(offset + i));
                        req.guidance = config.guidance;
                        req.mask_guidance = config.mask_guidance;
                        req.mask = config.mask;
                        req.reference = config.mask.reference_for(p.sample.class);
                        req.operator = if method.is_masked() { config.operator } else { MaskOperator::LatentReplace };
                        req.base_steps = config.base_steps;
                        req
                    })
                    .collect();
                tasks.push((method, r, offset, reqs));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let chunks: Vec<Result<Vec<PairRecord>>> =
        pool.install(|| tasks.par_iter().map(|(_, _, off, reqs)| run_chunk(model, classifier, reqs, *off)).collect());
    let mut records = Vec::with_capacity(config.n_pairs * tasks.len());
    for c in chunks {
        records.extend(c?);
    }
    let mut points = Vec::new();
    for &method in &config.methods {
        for &r in &config.ratios {
            let subset: Vec<&PairRecord> = records.iter().filter(|p| p.method == method && p.r == r).collect();
            points.push(summarize(method, r, &subset));
        }
    }
    Ok(SweepResult { points, records })
}

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

impl SweepResult {
    pub const CSV_HEADER: [&'static str; 8] =
        ["method", "r", "n", "distance", "distance_se", "match", "match_se", "mask_area"];

    pub fn to_csv(&self) -> Result<String> {
        points_csv(&self.points, None)
    }

    pub fn curve(&self, method: Method) -> Result<MethodCurve> {
        MethodCurve::from_records(&self.records, method)
    }

    pub fn plot(&self, title: &str) -> Plot {
        tradeoff_plot(title, &self.points, None)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.failure.is_some()).count()
    }
}

fn points_csv(points: &[TradeoffPoint], prefix: Option<(&str, &[f64])>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = Vec::new();
    if prefix.is_some() {
        header.extend(["kind", "value"]);
    }
    header.extend(SweepResult::CSV_HEADER);
    w.write_record(&header)?;
    for (i, p) in points.iter().enumerate() {
        let mut row: Vec<String> = Vec::new();
        if let Some((kind, values)) = prefix {
            row.push(kind.to_string());
            row.push(fmt(values[i]));
        }
        row.extend([
            p.method.name().to_string(),
            fmt(p.r),
            p.n.to_string(),
            fmt(p.distance),
            fmt(p.distance_se),
            fmt(p.match_score),
            fmt(p.match_se),
            fmt(p.mask_area),
        ]);
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

fn tradeoff_plot(title: &str, points: &[TradeoffPoint], labels: Option<&[String]>) -> Plot {
    let mut keys: Vec<String> = Vec::new();
    let key = |i: usize| match labels {
        Some(l) => l[i].clone(),
        None => points[i].method.name().to_string(),
    };
    for i in 0..points.len() {
        let k = key(i);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let series = keys
        .iter()
        .map(|k| {
            let idx: Vec<usize> = (0..points.len()).filter(|&i| &key(i) == k).collect();
            Series::line(k.clone(), idx.iter().map(|&i| (points[i].distance, points[i].match_score)).collect())
                .with_mark(Mark::LineAndPoints)
                .with_labels(idx.iter().map(|&i| format!("r={}", points[i].r)).collect())
        })
        .collect();
    Plot {
        title: title.to_string(),
        x_label: "distance to input (RMSE)".into(),
        y_label: "query match (classifier probability)".into(),
        series,
        y_max: None,
    }
}

/// Per-pair values of one method across the sweep ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodCurve {
    pub method: Method,
    pub ratios: Vec<f64>,
    /// `distance[k][i]`: pair `i` at ratio `k`, `NaN` on failure.
    pub distance: Vec<Vec<f64>>,
    pub match_score: Vec<Vec<f64>>,
}

impl MethodCurve {
    pub fn from_records(records: &[PairRecord], method: Method) -> Result<Self> {
        let mut ratios: Vec<f64> = Vec::new();
        for r in records.iter().filter(|r| r.method == method) {
            if !ratios.contains(&r.r) {
                ratios.push(r.r);
            }
        }
        if ratios.is_empty() {
            return Err(invalid(format!("no records for {}", method.name())));
        }
        ratios.sort_by(|a, b| a.total_cmp(b));
        let n = records.iter().filter(|r| r.method == method).map(|r| r.pair + 1).max().unwrap_or(0);
        let mut distance = vec![vec![f64::NAN; n]; ratios.len()];
        let mut match_score = vec![vec![f64::NAN; n]; ratios.len()];
        for rec in records.iter().filter(|r| r.method == method && r.failure.is_none()) {
            let k = ratios.iter().position(|&r| r == rec.r).expect("ratio collected above");
            distance[k][rec.pair] = rec.distance;
            match_score[k][rec.pair] = rec.match_score;
        }
        Ok(Self { method, ratios, distance, match_score })
    }

    fn finite_mean(v: &[f64]) -> f64 {
        let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        mean(&f)
    }

    pub fn mean_match(&self) -> Vec<f64> {
        self.match_score.iter().map(|v| Self::finite_mean(v)).collect()
    }

    pub fn mean_distance(&self) -> Vec<f64> {
        self.distance.iter().map(|v| Self::finite_mean(v)).collect()
    }

    /// Segment `k` and weight `w` where the piecewise-linear mean-match curve
    /// first reaches `level`.
    pub fn locate(&self, level: f64) -> Option<(usize, f64)> {
        let m = self.mean_match();
        for k in 0..m.len().saturating_sub(1) {
            let (a, b) = (m[k], m[k + 1]);
            if (a <= level && level <= b) || (b <= level && level <= a) {
                let w = if b == a { 0.0 } else { (level - a) / (b - a) };
                return Some((k, w));
            }
        }
        None
    }

    /// Per-pair distances interpolated at the match level, with the same
    /// weights for every pair.
    pub fn distances_at(&self, level: f64) -> Option<Vec<f64>> {
        let (k, w) = self.locate(level)?;
        Some(
            self.distance[k]
                .iter()
                .zip(&self.distance[k + 1])
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        )
    }

    pub fn match_range(&self) -> (f64, f64) {
        let m = self.mean_match();
        (m.iter().copied().fold(f64::INFINITY, f64::min), m.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedTest {
    pub level: f64,
    pub better: Method,
    pub worse: Method,
    pub mean_better: f64,
    pub mean_worse: f64,
    pub n: usize,
    pub t: f64,
    pub p_value: f64,
}

/// Match levels at the given fractions of the shared match range of `curves`.
pub fn shared_levels(curves: &[&MethodCurve], fractions: &[f64]) -> Option<Vec<f64>> {
    let lo = curves.iter().map(|c| c.match_range().0).fold(f64::NEG_INFINITY, f64::max);
    let hi = curves.iter().map(|c| c.match_range().1).fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return None;
    }
    Some(fractions.iter().map(|f| lo + f * (hi - lo)).collect())
}

/// Paired one-sided test that `better` has lower distance than `worse` at a
/// shared match level. Pairs that failed under either method are dropped.
pub fn matched_test(better: &MethodCurve, worse: &MethodCurve, level: f64) -> Result<MatchedTest> {
    let a = better.distances_at(level).ok_or_else(|| invalid("level outside the first curve"))?;
    let b = worse.distances_at(level).ok_or_else(|| invalid("level outside the second curve"))?;
    let keep: Vec<usize> = (0..a.len().min(b.len())).filter(|&i| a[i].is_finite() && b[i].is_finite()).collect();
    let a: Vec<f64> = keep.iter().map(|&i| a[i]).collect();
    let b: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
    let PairedTest { n, t, p_less, .. } = paired_less(&a, &b)?;
    Ok(MatchedTest {
        level,
        better: better.method,
        worse: worse.method,
        mean_better: mean(&a),
        mean_worse: mean(&b),
        n,
        t,
        p_value: p_less,
    })
}

/// Latent replacement against the predicted-image operator at one ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorComparison {
    pub r: f64,
    /// Mean query match of the predicted-image operator at `r`; the
    /// latent-replace curve is read off at this level.
    pub level: f64,
    pub n: usize,
    pub glide_failures: usize,
    pub replace_mean: f64,
    pub glide_median: f64,
    pub rank_z: f64,
    /// One-sided signed-rank p-value for replace distance < glide distance.
    pub p_value: f64,
    /// Paired t-test p-value on the same pairs, reported alongside.
    pub t_p_value: f64,
}

/// Compares per-pair distances of the predicted-image operator at `r` with
/// the latent-replace curve interpolated to the same mean match. A failed
/// predicted-image edit counts as infinitely far from the input.
pub fn operator_comparison(replace: &MethodCurve, glide: &[PairRecord], r: f64) -> Result<OperatorComparison> {
    let at_r: Vec<&PairRecord> = glide.iter().filter(|p| p.r == r).collect();
    if at_r.is_empty() {
        return Err(invalid(format!("no predicted-image records at r={r}")));
    }
    let matches: Vec<f64> = at_r.iter().filter(|p| p.failure.is_none()).map(|p| p.match_score).collect();
    let level = mean(&matches);
    let ours = replace
        .distances_at(level)
        .ok_or_else(|| invalid(format!("match level {level:.4} outside the latent-replace curve")))?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in &at_r {
        let Some(&d) = ours.get(p.pair) else { continue };
        if !d.is_finite() {
            continue;
        }
        a.push(d);
        b.push(if p.failure.is_some() || !p.distance.is_finite() { f64::INFINITY } else { p.distance });
    }
    let rank = signed_rank_less(&a, &b)?;
    let finite: Vec<(f64, f64)> = a.iter().zip(&b).filter(|(_, y)| y.is_finite()).map(|(x, y)| (*x, *y)).collect();
    let (fa, fb): (Vec<f64>, Vec<f64>) = finite.into_iter().unzip();
    let t_p_value = paired_less(&fa, &fb).map(|t| t.p_less).unwrap_or(f64::NAN);
    let mut sorted = b.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let glide_median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    Ok(OperatorComparison {
        r,
        level,
        n: a.len(),
        glide_failures: at_r.iter().filter(|p| p.failure.is_some()).count(),
        replace_mean: mean(&a),
        glide_median,
        rank_z: rank.z,
        p_value: rank.p_less,
        t_p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Threshold,
    MaskNoise,
    Guidance,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Self::Threshold),
            "mask-noise" => Ok(Self::MaskNoise),
            "guidance" => Ok(Self::Guidance),
            other => Err(invalid(format!("unknown ablation kind {other:?}"))),
        }
    }
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Threshold => "threshold",
            Self::MaskNoise => "mask-noise",
            Self::Guidance => "guidance",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Threshold => vec![0.25, 0.5, 0.75],
            Self::MaskNoise => (1..=8).map(|i| i as f64 / 10.0).collect(),
            Self::Guidance => vec![0.0, 1.0, 3.0, 5.0],
        }
    }

    /// Sweep settings for one ablation value. Guidance ablations keep the
    /// mask estimate at the base guidance so only decoding changes.
    pub fn apply(self, base: &SweepConfig, value: f64) -> SweepConfig {
        let mut cfg = base.clone();
        match self {
            Self::Threshold => cfg.mask.threshold = value,
            Self::MaskNoise => cfg.mask.noise_strength = value,
            Self::Guidance => {
                cfg.mask_guidance = Some(base.mask_guidance.unwrap_or(base.guidance));
                cfg.guidance = value;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub kind: AblationKind,
    pub values: Vec<f64>,
    pub sweeps: Vec<SweepResult>,
    /// Value with the highest mean of `match - distance` over ratios.
    pub best_value: f64,
}

pub fn ablation_grid<S: Scalar>(
    model: &Denoiser<S>,
    classifier: &Classifier<S>,
    pairs: &[EditPair],
    kind: AblationKind,
    values: &[f64],
    base: &SweepConfig,
    jobs: usize,
) -> Result<AblationResult> {
    if values.is_empty() {
        return Err(invalid("ablation needs at least one value"));
    }
    let mut sweeps = Vec::with_capacity(values.len());
    for &v in values {
        sweeps.push(sweep(model, classifier, pairs, &kind.apply(base, v), jobs)?);
    }
    let score = |s: &SweepResult| mean(&s.points.iter().map(|p| p.match_score - p.distance).collect::<Vec<_>>());
    let best = (0..values.len())
        .max_by(|&a, &b| score(&sweeps[a]).total_cmp(&score(&sweeps[b])))
        .expect("non-empty");
    Ok(AblationResult { kind, values: values.to_vec(), best_value: values[best], sweeps })
}

impl AblationResult {
    fn flat(&self) -> (Vec<TradeoffPoint>, Vec<f64>) {
        let mut points = Vec::new();
        let mut vals = Vec::new();
        for (v, s) in self.values.iter().zip(&self.sweeps) {
            for p in &s.points {
                points.push(p.clone());
                vals.push(*v);
            }
        }
        (points, vals)
    }

    pub fn to_csv(&self) -> Result<String> {
        let (points, vals) = self.flat();
        points_csv(&points, Some((self.kind.name(), &vals)))
    }

    pub fn plot(&self) -> Plot {
        let (points, vals) = self.flat();
        let labels: Vec<String> = points
            .iter()
            .zip(&vals)
            .map(|(p, v)| format!("{} {}={}", p.method.name(), self.kind.name(), v))
            .collect();
        tradeoff_plot(&format!("{} ablation", self.kind.name()), &points, Some(&labels))
    }
}

/// Shapes-only guard for evaluation entry points.
pub fn require_shapes(spec: &DatasetSpec) -> Result<()> {
    if spec.family != Family::Shapes {
        return Err(invalid("editing evaluation runs on the shapes dataset"));
    }
    Ok(())
}
