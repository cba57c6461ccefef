//! Command-line surface: one subcommand per pipeline stage, each writing a
//! self-describing artifact directory under `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{empirical_curve, estimate_constants, ot_defect};
use crate::config::RunConfig;
use crate::dataset::{self, edit_pairs, generate, Family, Sample, SampleShape, SHAPE_NAMES};
use crate::denoiser::{train, Condition, Denoiser};
use crate::diffedit::{compute_mask, edit, rmse, EditMask, EditRequest, MaskOperator, Method};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    ablation_grid, operator_comparison, shared_levels, sweep, train_classifier, AblationKind, Classifier, MatchedTest,
    MethodCurve, SweepConfig,
};
use crate::io::{parse_pgm, pgm_string, sha256_bytes};
use crate::schedule::NoiseSchedule;

pub const DENOISER_PATH: &str = "train/denoiser.ckpt";
pub const CLASSIFIER_PATH: &str = "classifier/classifier.ckpt";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "diffedit", version, about = "Mask-guided diffusion editing on small trainable denoisers")]
pub struct Cli {
    /// Strict JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; derives every component seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding inputs and outputs of all commands.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps and ablations.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured dataset.
    Dataset,
    /// Train the denoiser on the stored dataset.
    Train,
    /// Train the shapes classifier used for match scores.
    TrainClassifier,
    /// Edit one sample.
    Edit(EditArgs),
    /// Compute the contrastive mask of one sample.
    Mask(SampleArgs),
    /// Distance/match trade-off sweep over encoding ratios.
    Sweep,
    /// Sweep one mask or guidance setting over a list of values.
    Ablation(AblationArgs),
    /// Estimate bound constants and compare with empirical distances.
    Bounds,
    /// Encoder transport cost against exact assignment cost.
    Ot,
    /// Re-hash every artifact listed in the run's manifests.
    Verify,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    /// Index into the stored dataset.
    #[arg(long, conflicts_with = "input")]
    pub index: Option<usize>,
    /// Plain PGM image to edit instead of a stored sample.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Class of the `--input` image (name or index).
    #[arg(long)]
    pub source: Option<String>,
    /// Query class (name or index).
    #[arg(long)]
    pub query: String,
    /// Reference condition: a class or `null`. Defaults to the mask config.
    #[arg(long)]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long, default_value = "diffedit")]
    pub method: String,
    /// Encoding ratio.
    #[arg(long, default_value_t = 0.8)]
    pub r: f64,
    /// Mask operator: latent-replace or glide.
    #[arg(long)]
    pub operator: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AblationArgs {
    /// threshold, mask-noise or guidance.
    #[arg(long)]
    pub kind: String,
    /// Comma-separated values overriding the configured list.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
}

/// Parses and runs a command line, printing a JSON summary on success and a
/// JSON error on failure. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            let _ = writeln!(std::io::stdout(), "{text}");
            0
        }
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{body}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Value> {
    if cli.jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(cli.seed, cli.out.clone())?;
    let out = cfg.out_dir()?.to_path_buf();
    match &cli.command {
        Command::Dataset => cmd_dataset(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::TrainClassifier => cmd_train_classifier(&cfg, &out),
        Command::Edit(a) => cmd_edit(&cfg, &out, a),
        Command::Mask(a) => cmd_mask(&cfg, &out, a),
        Command::Sweep => cmd_sweep(&cfg, &out, cli.jobs),
        Command::Ablation(a) => cmd_ablation(&cfg, &out, a, cli.jobs),
        Command::Bounds => cmd_bounds(&cfg, &out),
        Command::Ot => cmd_ot(&cfg, &out),
        Command::Verify => cmd_verify(&out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub command: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Collects the files of one command's artifact directory.
struct Artifacts {
    root: PathBuf,
    sub: String,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl Artifacts {
    /// Starts from an empty `root/sub` so no stale files survive a rerun.
    fn new(root: &Path, sub: &str) -> Result<Self> {
        let dir = root.join(sub);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Self { root: root.to_path_buf(), sub: sub.to_string(), inputs: Vec::new(), outputs: Vec::new() })
    }

    fn dir(&self) -> PathBuf {
        self.root.join(&self.sub)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        fs::write(self.dir().join(name), bytes)?;
        self.outputs.push(FileHash { path: format!("{}/{name}", self.sub), sha256: sha256_bytes(bytes) });
        Ok(())
    }

    /// Registers a file written by library code inside this directory.
    fn adopt(&mut self, name: &str) -> Result<()> {
        let bytes = fs::read(self.dir().join(name))?;
        self.outputs.push(FileHash { path: format!("{}/{name}", self.sub), sha256: sha256_bytes(&bytes) });
        Ok(())
    }

    fn input(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        self.inputs.push(FileHash { path: rel.to_string(), sha256: sha256_bytes(&fs::read(path)?) });
        Ok(())
    }

    /// Writes the resolved config (without the run directory, which is
    /// implied by its location) and the manifest.
    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
        let mut stored = cfg.clone();
        stored.out = None;
        self.write(CONFIG, stored.to_json()?)?;
        let manifest =
            Manifest { format: "diffedit-manifest/1".into(), command: command.into(), inputs: self.inputs, outputs: self.outputs };
        let path = self.root.join(&self.sub).join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

/// Deserializes a kebab-case enum value from a bare command-line word.
fn parse_word<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| invalid(format!("unknown {what} {s:?}")))
}

fn parse_class(s: &str, n_classes: usize) -> Result<usize> {
    let idx = match SHAPE_NAMES.iter().position(|n| *n == s) {
        Some(i) => i,
        None => s.parse::<usize>().map_err(|_| invalid(format!("unknown class {s:?}")))?,
    };
    if idx >= n_classes {
        return Err(invalid(format!("class {idx} out of range")));
    }
    Ok(idx)
}

fn parse_condition(s: &str, n_classes: usize) -> Result<Condition> {
    if s == "null" {
        Ok(Condition::Null)
    } else {
        parse_class(s, n_classes).map(Condition::Class)
    }
}

fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

fn load_samples(out: &Path) -> Result<(dataset::DatasetSpec, Vec<Sample>)> {
    dataset::load(&dataset_dir(out))
}

fn load_denoiser(cfg: &RunConfig, out: &Path) -> Result<Denoiser<f32>> {
    let schedule = NoiseSchedule::new(cfg.schedule)?;
    Denoiser::load(&out.join(DENOISER_PATH), Some(&schedule))
}

fn require_family(cfg: &RunConfig, family: Family, what: &str) -> Result<()> {
    if cfg.dataset.family != family {
        return Err(invalid(format!("{what} needs a {family:?} dataset in the config")));
    }
    Ok(())
}

fn cmd_dataset(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let samples = generate(&cfg.dataset)?;
    let mut art = Artifacts::new(out, "dataset")?;
    let written = dataset::save(&art.dir(), &cfg.dataset, &samples)?;
    for p in &written {
        let name = p.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Internal("bad file name".into()))?;
        art.adopt(name)?;
    }
    let manifest = art.finish("dataset", cfg)?;
    Ok(json!({ "command": "dataset", "count": samples.len(), "manifest": manifest }))
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (spec, samples) = load_samples(out)?;
    let mut resolved = cfg.clone();
    resolved.dataset = spec;
    let arch = resolved.denoiser_for(&samples);
    resolved.denoiser = Some(arch);
    let mut model: Denoiser<f32> = Denoiser::new(arch, NoiseSchedule::new(cfg.schedule)?)?;
    let report = train(&mut model, &cfg.train, &samples)?;
    let mut art = Artifacts::new(out, "train")?;
    art.input("dataset/dataset.json")?;
    model.save(&art.dir().join("denoiser.ckpt"), cfg.train.seed)?;
    art.adopt("denoiser.ckpt")?;
    let rows = report.losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), fmt(*l)]).collect();
    art.write("loss.csv", csv_string(&["step", "loss"], rows)?)?;
    let tail = &report.losses[report.losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let manifest = art.finish("train", &resolved)?;
    Ok(json!({ "command": "train", "steps": report.losses.len(), "final_loss": final_loss, "manifest": manifest }))
}

fn cmd_train_classifier(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (spec, samples) = load_samples(out)?;
    if spec.family != Family::Shapes {
        return Err(invalid("the classifier is trained on the shapes dataset"));
    }
    let clf: Classifier<f32> = train_classifier(&spec, &samples, &cfg.classifier)?;
    let mut art = Artifacts::new(out, "classifier")?;
    art.input("dataset/dataset.json")?;
    clf.save(&art.dir().join("classifier.ckpt"))?;
    art.adopt("classifier.ckpt")?;
    art.write(
        "classifier.json",
        serde_json::to_string_pretty(&json!({ "holdout_accuracy": clf.accuracy, "required": crate::eval::ACCURACY_GATE }))? + "\n",
    )?;
    let mut resolved = cfg.clone();
    resolved.dataset = spec;
    let manifest = art.finish("train-classifier", &resolved)?;
    clf.check_gate()?;
    Ok(json!({ "command": "train-classifier", "accuracy": clf.accuracy, "manifest": manifest }))
}

/// The sample named by `--index` or `--input`, with its class.
fn select_sample(cfg: &RunConfig, out: &Path, a: &SampleArgs, art: &mut Artifacts) -> Result<Sample> {
    let k = cfg.dataset.n_classes();
    match (a.index, &a.input) {
        (Some(i), None) => {
            let (_, samples) = load_samples(out)?;
            art.input("dataset/dataset.json")?;
            samples.get(i).cloned().ok_or_else(|| invalid(format!("index {i} outside the dataset of {}", samples.len())))
        }
        (None, Some(path)) => {
            if !path.exists() {
                return Err(Error::MissingInput(path.clone()));
            }
            let source = a.source.as_deref().ok_or_else(|| invalid("--input needs --source <class>"))?;
            let (data, w, h) = parse_pgm(&fs::read_to_string(path)?, -1.0, 1.0)?;
            let shape = SampleShape { height: h, width: w, channels: 1 };
            Ok(Sample { data, shape, class: parse_class(source, k)?, truth_region: None })
        }
        _ => Err(invalid("pass exactly one of --index and --input")),
    }
}

fn mask_images(art: &mut Artifacts, mask: &EditMask, shape: SampleShape) -> Result<()> {
    if shape.height > 1 {
        let binary: Vec<f32> = mask.binary.iter().map(|&b| b as f32).collect();
        art.write("mask_soft.pgm", pgm_string(&mask.soft, shape.width, shape.height, 0.0, 1.0)?)?;
        art.write("mask_binary.pgm", pgm_string(&binary, shape.width, shape.height, 0.0, 1.0)?)?;
    }
    Ok(())
}

fn mask_json(mask: &EditMask, truth: Option<&Vec<u8>>) -> Value {
    json!({
        "area": mask.area_fraction(),
        "degenerate": mask.degenerate,
        "threshold": mask.threshold,
        "seed": mask.seed,
        "recall": truth.map(|t| mask.recall(t)),
    })
}

fn classify(out: &Path, art: &mut Artifacts, image: &[f32]) -> Result<Option<Value>> {
    let path = out.join(CLASSIFIER_PATH);
    if !path.exists() {
        return Ok(None);
    }
    art.input(CLASSIFIER_PATH)?;
    let clf: Classifier<f32> = Classifier::load(&path)?;
    if clf.dim() != image.len() {
        return Ok(None);
    }
    let p = clf.probabilities(image)?;
    let predicted = clf.predict(image)?[0];
    Ok(Some(json!({ "probabilities": p, "predicted": predicted, "predicted_name": SHAPE_NAMES.get(predicted) })))
}

fn cmd_edit(cfg: &RunConfig, out: &Path, a: &EditArgs) -> Result<Value> {
    let mut art = Artifacts::new(out, "edit")?;
    let sample = select_sample(cfg, out, &a.sample, &mut art)?;
    let model = load_denoiser(cfg, out)?;
    art.input(DENOISER_PATH)?;
    let k = cfg.dataset.n_classes();
    let query = Condition::Class(parse_class(&a.sample.query, k)?);
    let method: Method = a.method.parse()?;
    let mut req = EditRequest::new(&sample, query, method, a.r, cfg.sweep.seed);
    req.guidance = cfg.sweep.guidance;
    req.mask_guidance = cfg.sweep.mask_guidance;
    req.mask = cfg.sweep.mask;
    req.base_steps = cfg.sweep.base_steps;
    req.reference = match &a.sample.reference {
        Some(r) => parse_condition(r, k)?,
        None => cfg.sweep.mask.reference_for(sample.class),
    };
    req.operator = match &a.operator {
        Some(o) => parse_word::<MaskOperator>("operator", o)?,
        None if method.is_masked() => cfg.sweep.operator,
        None => MaskOperator::LatentReplace,
    };
    let result = edit(&model, &req)?;
    let shape = sample.shape;
    if shape.height > 1 {
        art.write("input.pgm", pgm_string(&sample.data, shape.width, shape.height, -1.0, 1.0)?)?;
        art.write("output.pgm", pgm_string(&result.output, shape.width, shape.height, -1.0, 1.0)?)?;
    }
    if let Some(m) = &result.mask {
        mask_images(&mut art, m, shape)?;
    }
    let classifier = classify(out, &mut art, &result.output)?;
    let sidecar = json!({
        "method": method.name(),
        "encoding_ratio": req.encoding_ratio,
        "source_class": sample.class,
        "query": req.query,
        "reference": req.reference,
        "guidance": req.guidance,
        "operator": req.operator,
        "seed": req.seed,
        "distance": rmse(&result.output, &sample.data),
        "mask": result.mask.as_ref().map(|m| mask_json(m, sample.truth_region.as_ref())),
        "encode_fingerprint": result.encode_fingerprint,
        "classifier": classifier,
        "input": if shape.height > 1 { Value::Null } else { json!(sample.data) },
        "output": if shape.height > 1 { Value::Null } else { json!(result.output) },
    });
    art.write("edit.json", serde_json::to_string_pretty(&sidecar)? + "\n")?;
    let manifest = art.finish("edit", cfg)?;
    Ok(json!({ "command": "edit", "result": sidecar, "manifest": manifest }))
}

fn cmd_mask(cfg: &RunConfig, out: &Path, a: &SampleArgs) -> Result<Value> {
    let mut art = Artifacts::new(out, "mask")?;
    let sample = select_sample(cfg, out, a, &mut art)?;
    let model = load_denoiser(cfg, out)?;
    art.input(DENOISER_PATH)?;
    let k = cfg.dataset.n_classes();
    let query = Condition::Class(parse_class(&a.query, k)?);
    let reference = match &a.reference {
        Some(r) => parse_condition(r, k)?,
        None => cfg.sweep.mask.reference_for(sample.class),
    };
    let guidance = cfg.sweep.mask_guidance.unwrap_or(cfg.sweep.guidance);
    let seed = crate::rng::derive_seed(cfg.sweep.seed, 1);
    let mask = compute_mask(&model, &sample.data, sample.shape, query, reference, &cfg.sweep.mask, guidance, seed)?;
    mask_images(&mut art, &mask, sample.shape)?;
    let summary = mask_json(&mask, sample.truth_region.as_ref());
    art.write("mask.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    let manifest = art.finish("mask", cfg)?;
    Ok(json!({ "command": "mask", "mask": summary, "manifest": manifest }))
}

fn load_eval_models(cfg: &RunConfig, out: &Path, art: &mut Artifacts) -> Result<(Denoiser<f32>, Classifier<f32>)> {
    require_family(cfg, Family::Shapes, "editing evaluation")?;
    let model = load_denoiser(cfg, out)?;
    art.input(DENOISER_PATH)?;
    let clf_path = out.join(CLASSIFIER_PATH);
    let clf: Classifier<f32> = Classifier::load(&clf_path)?;
    art.input(CLASSIFIER_PATH)?;
    clf.check_gate()?;
    Ok((model, clf))
}

fn records_csv(records: &[crate::eval::PairRecord]) -> Result<String> {
    let rows = records
        .iter()
        .map(|p| {
            vec![
                p.method.name().to_string(),
                fmt(p.r),
                p.pair.to_string(),
                p.seed.to_string(),
                fmt(p.distance),
                fmt(p.match_score),
                (p.correct as u8).to_string(),
                p.mask_area.map(fmt).unwrap_or_default(),
                p.failure.clone().unwrap_or_default(),
            ]
        })
        .collect();
    csv_string(&["method", "r", "pair", "seed", "distance", "match", "correct", "mask_area", "failure"], rows)
}

/// Paired tests of DiffEdit < Encode-Decode < SDEdit at shared match levels.
pub fn ordering_tests(result: &crate::eval::SweepResult) -> Result<Vec<MatchedTest>> {
    let order = [Method::Diffedit, Method::EncodeDecode, Method::Sdedit];
    let curves: Vec<MethodCurve> = order.iter().map(|&m| result.curve(m)).collect::<Result<_>>()?;
    let refs: Vec<&MethodCurve> = curves.iter().collect();
    let levels = shared_levels(&refs, &[0.25, 0.5, 0.75]).ok_or_else(|| invalid("method curves share no match range"))?;
    let mut tests = Vec::new();
    for level in levels {
        tests.push(crate::eval::matched_test(&curves[0], &curves[1], level)?);
        tests.push(crate::eval::matched_test(&curves[1], &curves[2], level)?);
    }
    Ok(tests)
}

/// Statistical summaries that need overlapping curves are reported as
/// unavailable, with the reason, instead of failing the whole sweep.
fn unavailable_on_error<T: Serialize>(r: Result<T>) -> Result<Value> {
    match r {
        Ok(v) => Ok(serde_json::to_value(v)?),
        Err(Error::InvalidArgument(msg)) => Ok(json!({ "unavailable": msg })),
        Err(e) => Err(e),
    }
}

fn cmd_sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Value> {
    let mut art = Artifacts::new(out, "sweep")?;
    let (model, clf) = load_eval_models(cfg, out, &mut art)?;
    let pairs = edit_pairs(&cfg.dataset, cfg.sweep.n_pairs)?;
    let result = sweep(&model, &clf, &pairs, &cfg.sweep, jobs)?;
    art.write("tradeoff.csv", result.to_csv()?)?;
    art.write("tradeoff.svg", result.plot("edit distance against query match").to_svg())?;
    art.write("records.csv", records_csv(&result.records)?)?;
    let has = |m: Method| cfg.sweep.methods.contains(&m);
    let ordering = if has(Method::Diffedit) && has(Method::EncodeDecode) && has(Method::Sdedit) {
        unavailable_on_error(ordering_tests(&result))?
    } else {
        Value::Null
    };
    let operator = match cfg.operator_comparison_r {
        Some(r) if has(Method::Diffedit) && cfg.sweep.operator == MaskOperator::LatentReplace => {
            let glide_cfg = SweepConfig {
                methods: vec![Method::Diffedit],
                ratios: vec![r],
                operator: MaskOperator::Glide,
                ..cfg.sweep.clone()
            };
            let glide = sweep(&model, &clf, &pairs, &glide_cfg, jobs)?;
            unavailable_on_error(operator_comparison(&result.curve(Method::Diffedit)?, &glide.records, r))?
        }
        _ => Value::Null,
    };
    let summary = json!({
        "classifier_accuracy": clf.accuracy,
        "points": result.points,
        "ordering": ordering,
        "operator_comparison": operator,
    });
    art.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    let manifest = art.finish("sweep", cfg)?;
    Ok(json!({ "command": "sweep", "failures": result.failures(), "manifest": manifest }))
}

fn cmd_ablation(cfg: &RunConfig, out: &Path, a: &AblationArgs, jobs: usize) -> Result<Value> {
    let kind: AblationKind = a.kind.parse()?;
    let values = a.values.clone().unwrap_or_else(|| cfg.ablation.get(kind).to_vec());
    let mut art = Artifacts::new(out, &format!("ablation-{}", kind.name()))?;
    let (model, clf) = load_eval_models(cfg, out, &mut art)?;
    let pairs = edit_pairs(&cfg.dataset, cfg.sweep.n_pairs)?;
    let result = ablation_grid(&model, &clf, &pairs, kind, &values, &cfg.sweep, jobs)?;
    art.write("ablation.csv", result.to_csv()?)?;
    art.write("ablation.svg", result.plot().to_svg())?;
    let summary = json!({ "kind": kind, "values": values, "best_value": result.best_value });
    art.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut resolved = cfg.clone();
    match kind {
        AblationKind::Threshold => resolved.ablation.threshold = values,
        AblationKind::MaskNoise => resolved.ablation.mask_noise = values,
        AblationKind::Guidance => resolved.ablation.guidance = values,
    }
    let manifest = art.finish("ablation", &resolved)?;
    Ok(json!({ "command": "ablation", "summary": summary, "manifest": manifest }))
}

fn cmd_bounds(cfg: &RunConfig, out: &Path) -> Result<Value> {
    require_family(cfg, Family::Gm2d, "bounds")?;
    let mut art = Artifacts::new(out, "bounds")?;
    let model = load_denoiser(cfg, out)?;
    art.input(DENOISER_PATH)?;
    let n = cfg.constants.n_samples.max(cfg.curve.n_mc);
    let pairs = edit_pairs(&cfg.dataset, n)?;
    let constants = estimate_constants(&model, &pairs, &cfg.constants)?;
    let curve = empirical_curve(&model, &pairs, &constants, &cfg.curve)?;
    art.write("bounds.csv", curve.to_csv()?)?;
    art.write("bounds.svg", curve.plot().to_svg())?;
    let violations: Vec<Value> = curve.violations(0.05).into_iter().map(|(r, which)| json!({ "r": r, "bound": which })).collect();
    let summary = json!({
        "constants": curve.constants,
        "crossover_tau": curve.crossover_tau,
        "violations": violations,
    });
    art.write("constants.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    let manifest = art.finish("bounds", cfg)?;
    Ok(json!({ "command": "bounds", "summary": summary, "manifest": manifest }))
}

fn cmd_ot(cfg: &RunConfig, out: &Path) -> Result<Value> {
    require_family(cfg, Family::Gm2d, "ot")?;
    let mut art = Artifacts::new(out, "ot")?;
    let model = load_denoiser(cfg, out)?;
    art.input(DENOISER_PATH)?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for &r in &cfg.ot_ratios {
        let d = ot_defect(&model, &cfg.dataset, r, &cfg.ot)?;
        rows.push(vec![
            fmt(d.r),
            fmt(d.encoder_cost),
            fmt(d.encoder_se),
            fmt(d.ot_cost),
            fmt(d.ot_se),
            fmt(d.ratio),
            fmt(d.gap_se),
            (d.consistent(2.0) as u8).to_string(),
        ]);
        results.push(d);
    }
    let header = ["r", "encoder_cost", "encoder_se", "ot_cost", "ot_se", "ratio", "gap_se", "consistent_2se"];
    art.write("ot.csv", csv_string(&header, rows)?)?;
    let manifest = art.finish("ot", cfg)?;
    Ok(json!({ "command": "ot", "results": results, "manifest": manifest }))
}

/// Re-hashes every file listed by the manifests under `out`.
pub fn cmd_verify(out: &Path) -> Result<Value> {
    if !out.exists() {
        return Err(Error::MissingInput(out.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    let mut checked = 0usize;
    let mut problems = Vec::new();
    for dir in &dirs {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        for entry in manifest.inputs.iter().chain(&manifest.outputs) {
            checked += 1;
            let path = out.join(&entry.path);
            match fs::read(&path) {
                Ok(bytes) if sha256_bytes(&bytes) == entry.sha256 => {}
                Ok(_) => problems.push(format!("{}: hash mismatch", entry.path)),
                Err(_) => problems.push(format!("{}: missing", entry.path)),
            }
        }
    }
    if dirs.is_empty() {
        return Err(Error::MissingInput(out.join("*").join(MANIFEST)));
    }
    if !problems.is_empty() {
        return Err(Error::Verification(problems.join("; ")));
    }
    Ok(json!({ "command": "verify", "manifests": dirs.len(), "files": checked }))
}
