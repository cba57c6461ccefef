//! Seeded synthetic datasets with ground-truth edit regions.
//!
//! * `gm2d` – 2-D Gaussian mixture, four components on a circle of radius 2.
//! * `shapes` – 16x16 single-channel images holding one shape (square,
//!   circle, cross, triangle) over a smooth textured background.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, normal, seeded, SimRng};

pub const SHAPES_SIDE: usize = 16;
pub const GM2D_RADIUS: f64 = 2.0;
pub const GM2D_STD: f64 = 0.3;

pub const SQUARE: usize = 0;
pub const CIRCLE: usize = 1;
pub const CROSS: usize = 2;
pub const TRIANGLE: usize = 3;
pub const SHAPE_NAMES: [&str; 4] = ["square", "circle", "cross", "triangle"];

// stream tags for derive_seed, keeping training data and edit pairs disjoint
const PAIR_STREAM: u64 = 0x5041_4952;
const CLASS_STREAM: u64 = 0x434c_4153;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gm2d,
    Shapes,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gm2d" => Ok(Family::Gm2d),
            "shapes" => Ok(Family::Shapes),
            other => Err(invalid(format!("unknown dataset family {other:?}"))),
        }
    }
}

/// Spatial layout of a sample, channel-last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SampleShape {
    pub const POINT2: SampleShape = SampleShape { height: 1, width: 2, channels: 1 };
    pub const SHAPES: SampleShape = SampleShape { height: SHAPES_SIDE, width: SHAPES_SIDE, channels: 1 };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: Vec<f32>,
    pub shape: SampleShape,
    pub class: usize,
    /// Generator's object support, one byte per spatial location.
    pub truth_region: Option<Vec<u8>>,
}

/// Range of the constant background level of a shapes image.
const BASE_RANGE: (f64, f64) = (-0.65, -0.45);
const CONTRAST_SPREAD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub family: Family,
    pub size: usize,
    pub seed: u64,
    /// Peak amplitude of the linear background gradient.
    pub gradient_amplitude: f64,
    /// Peak amplitude of the low-frequency background texture.
    pub noise_amplitude: f64,
    /// Minimum intensity step between shape and background; the step is
    /// drawn from `[contrast, contrast + CONTRAST_SPREAD]`.
    pub contrast: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Largest offset in pixels of the shape centre from the image centre,
    /// per axis, further limited by keeping the shape inside the image.
    pub position_jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            family: Family::Shapes,
            size: 20_000,
            seed: 0,
            gradient_amplitude: 0.25,
            noise_amplitude: 0.1,
            contrast: 0.8,
            radius_min: 2.5,
            radius_max: 3.8,
            position_jitter: 2.0,
        }
    }
}

impl DatasetSpec {
    pub fn gm2d(size: usize, seed: u64) -> Self {
        Self { family: Family::Gm2d, size, seed, ..Self::default() }
    }

    pub fn shapes(size: usize, seed: u64) -> Self {
        Self { family: Family::Shapes, size, seed, ..Self::default() }
    }

    pub fn n_classes(&self) -> usize {
        4
    }

    pub fn sample_shape(&self) -> SampleShape {
        match self.family {
            Family::Gm2d => SampleShape::POINT2,
            Family::Shapes => SampleShape::SHAPES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::Shapes {
            if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max && self.radius_max <= 5.0) {
                return Err(invalid("shape radius range must satisfy 0 < min <= max <= 5"));
            }
            if !(self.position_jitter >= 0.0) {
                return Err(invalid("position jitter must be non-negative"));
            }
            if self.gradient_amplitude < 0.0 || self.noise_amplitude < 0.0 {
                return Err(invalid("background amplitudes must be non-negative"));
            }
            let swing = self.gradient_amplitude + self.noise_amplitude;
            if BASE_RANGE.0 - swing < -1.0 {
                return Err(invalid("background amplitudes would push the background below -1"));
            }
            let headroom = 1.0 - (BASE_RANGE.1 + swing) - CONTRAST_SPREAD;
            if !(self.contrast > 0.0 && self.contrast <= headroom + 1e-12) {
                return Err(invalid(format!("contrast must lie in (0, {headroom:.3}] for these amplitudes")));
            }
        }
        Ok(())
    }

    /// The `index`-th sample; pure in `(spec, index)`.
    pub fn sample_at(&self, index: u64) -> Sample {
        let mut rng = seeded(derive_seed(self.seed, index));
        let class = rng.gen_range(0..self.n_classes());
        self.render(&mut rng, class)
    }

    /// A sample of a fixed class, drawn from a stream disjoint from `sample_at`.
    pub fn sample_of_class(&self, class: usize, index: u64) -> Sample {
        let mut rng = seeded(derive_seed(derive_seed(self.seed, CLASS_STREAM + class as u64), index));
        self.render(&mut rng, class)
    }

    fn render(&self, rng: &mut SimRng, class: usize) -> Sample {
        match self.family {
            Family::Gm2d => gm2d_point(rng, class),
            Family::Shapes => render_shape(self, rng, class),
        }
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.size as u64).map(|i| spec.sample_at(i)).collect())
}

pub fn gm2d_center(class: usize) -> [f64; 2] {
    let angle = class as f64 * std::f64::consts::FRAC_PI_2;
    [GM2D_RADIUS * angle.cos(), GM2D_RADIUS * angle.sin()]
}

fn gm2d_point(rng: &mut SimRng, class: usize) -> Sample {
    let c = gm2d_center(class);
    let x: f64 = normal(rng);
    let y: f64 = normal(rng);
    Sample {
        data: vec![(c[0] + GM2D_STD * x) as f32, (c[1] + GM2D_STD * y) as f32],
        shape: SampleShape::POINT2,
        class,
        truth_region: None,
    }
}

fn inside(class: usize, dx: f64, dy: f64, radius: f64) -> bool {
    match class {
        SQUARE => {
            // equal area to the circle of the same radius
            let a = radius * std::f64::consts::PI.sqrt() / 2.0;
            dx.abs() <= a && dy.abs() <= a
        }
        CIRCLE => dx * dx + dy * dy <= radius * radius,
        CROSS => {
            let (arm, half) = (radius * 1.1, radius * 0.35);
            (dx.abs() <= half && dy.abs() <= arm) || (dy.abs() <= half && dx.abs() <= arm)
        }
        TRIANGLE => {
            // upward triangle inscribed in a circle of radius 1.35 r
            let big = radius * 1.35;
            let top = -big;
            let base = big * 0.5;
            if dy < top || dy > base {
                return false;
            }
            let half_width = (dy - top) / (base - top) * big * 3f64.sqrt() / 2.0;
            dx.abs() <= half_width
        }
        _ => unreachable!("class index validated by caller"),
    }
}

fn extent(class: usize, radius: f64) -> f64 {
    match class {
        CROSS => radius * 1.1,
        TRIANGLE => radius * 1.35,
        _ => radius,
    }
}

fn render_shape(spec: &DatasetSpec, rng: &mut SimRng, class: usize) -> Sample {
    let n = SHAPES_SIDE;
    let half = n as f64 / 2.0;
    let radius = rng.gen_range(spec.radius_min..=spec.radius_max);
    let ext = extent(class, radius);
    let lo = ext.max(half - spec.position_jitter);
    let hi = (n as f64 - ext).min(half + spec.position_jitter);
    let cx = rng.gen_range(lo..=hi);
    let cy = rng.gen_range(lo..=hi);

    let base = rng.gen_range(BASE_RANGE.0..=BASE_RANGE.1);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let grad = rng.gen_range(0.0..=spec.gradient_amplitude);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let kx = rng.gen_range(-2i32..=2) as f64;
            let ky = rng.gen_range(1i32..=2) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (kx, ky, phase)
        })
        .collect();
    let contrast = rng.gen_range(spec.contrast..=spec.contrast + CONTRAST_SPREAD);

    let diag = half * std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(n * n);
    let mut truth = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let proj = ((px - half) * theta.cos() + (py - half) * theta.sin()) / diag;
            let tex: f64 = waves
                .iter()
                .map(|&(kx, ky, ph)| {
                    (std::f64::consts::TAU * (kx * px + ky * py) / n as f64 + ph).cos()
                })
                .sum::<f64>()
                / 3.0;
            let background = base + grad * proj + spec.noise_amplitude * tex;
            let hit = inside(class, px - cx, py - cy, radius);
            let value = if hit { background + contrast } else { background };
            let clamped = value.clamp(-1.0, 1.0);
            if hit {
                // counterfactual background-only render must differ by the contrast
                assert!(
                    clamped - background.clamp(-1.0, 1.0) >= spec.contrast - 1e-9,
                    "shape contrast lost to clamping"
                );
            }
            data.push(clamped as f32);
            truth.push(hit as u8);
        }
    }
    Sample { data, shape: SampleShape::SHAPES, class, truth_region: Some(truth) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditPair {
    pub sample: Sample,
    pub query: usize,
}

/// `n` held-out samples, each paired with a uniformly drawn query class
/// different from its own.
pub fn edit_pairs(spec: &DatasetSpec, n: usize) -> Result<Vec<EditPair>> {
    spec.validate()?;
    let k = spec.n_classes();
    if k < 2 {
        return Err(invalid("edit pairs need at least two classes"));
    }
    let pair_spec = DatasetSpec { seed: derive_seed(spec.seed, PAIR_STREAM), ..spec.clone() };
    Ok((0..n as u64)
        .map(|i| {
            let sample = pair_spec.sample_at(i);
            let mut rng = seeded(derive_seed(pair_spec.seed, i + (1 << 40)));
            let query = (sample.class + 1 + rng.gen_range(0..k - 1)) % k;
            EditPair { sample, query }
        })
        .collect())
}

/// Pairs with a fixed source and query class, e.g. square to circle.
pub fn class_pairs(spec: &DatasetSpec, source: usize, query: usize, n: usize) -> Vec<EditPair> {
    (0..n as u64)
        .map(|i| EditPair { sample: spec.sample_of_class(source, i), query })
        .collect()
}

/// Per-coordinate standard deviation pooled over samples and coordinates.
pub fn data_std(samples: &[Sample]) -> f64 {
    let n: usize = samples.iter().map(|s| s.data.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = samples.iter().flat_map(|s| &s.data).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = samples
        .iter()
        .flat_map(|s| &s.data)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    var.sqrt()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    spec: DatasetSpec,
    count: usize,
    shape: SampleShape,
    labels: Vec<usize>,
    payload: String,
    truth_payload: Option<String>,
}

const DATA_FILE: &str = "data.f32le";
const TRUTH_FILE: &str = "truth.u8";
pub const MANIFEST_FILE: &str = "dataset.json";

/// Writes `dataset.json` plus little-endian payloads into `dir`.
pub fn save(dir: &Path, spec: &DatasetSpec, samples: &[Sample]) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let shape = spec.sample_shape();
    let mut bytes = Vec::with_capacity(samples.len() * shape.len() * 4);
    for s in samples {
        if s.shape != shape {
            return Err(invalid("sample shape differs from dataset spec"));
        }
        for v in &s.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut written = vec![dir.join(MANIFEST_FILE), dir.join(DATA_FILE)];
    fs::write(dir.join(DATA_FILE), bytes)?;
    let truth_payload = if spec.family == Family::Shapes {
        let truth: Vec<u8> = samples
            .iter()
            .flat_map(|s| s.truth_region.clone().unwrap_or_else(|| vec![0; shape.locations()]))
            .collect();
        fs::write(dir.join(TRUTH_FILE), truth)?;
        written.push(dir.join(TRUTH_FILE));
        Some(TRUTH_FILE.to_string())
    } else {
        None
    };
    let manifest = Manifest {
        format: "diffedit-dataset/1".into(),
        spec: spec.clone(),
        count: samples.len(),
        shape,
        labels: samples.iter().map(|s| s.class).collect(),
        payload: DATA_FILE.into(),
        truth_payload,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(written)
}

pub fn load(dir: &Path) -> Result<(DatasetSpec, Vec<Sample>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingInput(manifest_path));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let shape = manifest.shape;
    let bytes = fs::read(dir.join(&manifest.payload))?;
    if bytes.len() != manifest.count * shape.len() * 4 || manifest.labels.len() != manifest.count {
        return Err(invalid("dataset payload size does not match manifest"));
    }
    let truth = match &manifest.truth_payload {
        Some(f) => {
            let t = fs::read(dir.join(f))?;
            if t.len() != manifest.count * shape.locations() {
                return Err(invalid("truth payload size does not match manifest"));
            }
            Some(t)
        }
        None => None,
    };
    let samples = bytes
        .chunks_exact(shape.len() * 4)
        .enumerate()
        .map(|(i, chunk)| Sample {
            data: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            shape,
            class: manifest.labels[i],
            truth_region: truth
                .as_ref()
                .map(|t| t[i * shape.locations()..(i + 1) * shape.locations()].to_vec()),
        })
        .collect();
    Ok((manifest.spec, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = DatasetSpec::shapes(50, 9);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let spec = DatasetSpec::gm2d(50, 9);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn family_parse() {
        assert_eq!("gm2d".parse::<Family>().unwrap(), Family::Gm2d);
        assert!("mnist".parse::<Family>().is_err());
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"family":"mnist"}"#).is_err());
    }

    #[test]
    fn gm2d_class_means() {
        let spec = DatasetSpec::gm2d(40_000, 3);
        let data = generate(&spec).unwrap();
        for c in 0..4 {
            let pts: Vec<_> = data.iter().filter(|s| s.class == c).collect();
            assert!(pts.len() > 9_000);
            let center = gm2d_center(c);
            for k in 0..2 {
                let m = pts.iter().map(|s| s.data[k] as f64).sum::<f64>() / pts.len() as f64;
                assert!((m - center[k]).abs() < 0.02, "class {c} coord {k}: {m}");
            }
        }
    }

    #[test]
    fn shapes_ranges_and_area() {
        let spec = DatasetSpec::shapes(2000, 5);
        for s in generate(&spec).unwrap() {
            assert!(s.data.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
            let truth = s.truth_region.as_ref().unwrap();
            assert_eq!(truth.len(), 256);
            let frac = truth.iter().filter(|&&v| v == 1).count() as f64 / 256.0;
            assert!((0.02..=0.20).contains(&frac), "class {} area {frac}", s.class);
        }
    }

    #[test]
    fn position_jitter_bounds_the_centre() {
        // square, circle and cross are point-symmetric, so the truth-region
        // centroid is the drawn centre up to pixel discretization
        let centroids = |jitter: f64| -> Vec<(f64, f64)> {
            let spec = DatasetSpec { position_jitter: jitter, ..DatasetSpec::shapes(400, 9) };
            generate(&spec)
                .unwrap()
                .into_iter()
                .filter(|s| s.class != 3)
                .map(|s| {
                    let t = s.truth_region.unwrap();
                    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                    for (i, &v) in t.iter().enumerate() {
                        if v == 1 {
                            sx += (i % 16) as f64 + 0.5;
                            sy += (i / 16) as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                    (sx / n, sy / n)
                })
                .collect()
        };
        let fixed = centroids(0.0);
        assert!(fixed.iter().all(|&(x, y)| (x - 8.0).abs() < 0.75 && (y - 8.0).abs() < 0.75));
        let loose = centroids(2.0);
        assert!(loose.iter().all(|&(x, y)| (x - 8.0).abs() < 2.75 && (y - 8.0).abs() < 2.75));
        assert!(loose.iter().any(|&(x, _)| (x - 8.0).abs() > 1.25));
        assert!(DatasetSpec { position_jitter: -1.0, ..DatasetSpec::default() }.validate().is_err());
    }

    #[test]
    fn every_class_appears() {
        let spec = DatasetSpec::shapes(400, 1);
        let data = generate(&spec).unwrap();
        for c in 0..4 {
            assert!(data.iter().any(|s| s.class == c));
        }
    }

    #[test]
    fn pairs() {
        let spec = DatasetSpec::shapes(10, 2);
        assert!(edit_pairs(&spec, 0).unwrap().is_empty());
        let pairs = edit_pairs(&spec, 500).unwrap();
        assert!(pairs.iter().all(|p| p.query != p.sample.class && p.query < 4));
        let sq = class_pairs(&spec, SQUARE, CIRCLE, 5);
        assert!(sq.iter().all(|p| p.sample.class == SQUARE && p.query == CIRCLE));
    }

    #[test]
    fn pair_queries_uniform() {
        // multinomial over 4 classes, 3 sigma per cell
        let spec = DatasetSpec::gm2d(10, 4);
        let n = 10_000;
        let pairs = edit_pairs(&spec, n).unwrap();
        let mut hist = [0usize; 4];
        for p in &pairs {
            hist[p.query] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - n as f64 * p).abs() < 3.0 * sigma, "{hist:?}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::shapes(7, 8);
        let data = generate(&spec).unwrap();
        save(dir.path(), &spec, &data).unwrap();
        let (spec2, data2) = load(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(data, data2);
        assert!(matches!(load(&dir.path().join("nope")), Err(Error::MissingInput(_))));
    }
}
