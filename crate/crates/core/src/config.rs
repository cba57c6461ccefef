//! Run configuration: one strict JSON document covering every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{ConstantsConfig, CurveConfig, OtConfig};
use crate::dataset::{DatasetSpec, Family, Sample};
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{AblationKind, ClassifierConfig, SweepConfig};
use crate::rng::derive_seed;
use crate::schedule::ScheduleConfig;
use crate::stats::mean;

/// Values swept by each ablation kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationValues {
    pub threshold: Vec<f64>,
    pub mask_noise: Vec<f64>,
    pub guidance: Vec<f64>,
}

impl Default for AblationValues {
    fn default() -> Self {
        Self {
            threshold: AblationKind::Threshold.default_values(),
            mask_noise: AblationKind::MaskNoise.default_values(),
            guidance: AblationKind::Guidance.default_values(),
        }
    }
}

impl AblationValues {
    pub fn get(&self, kind: AblationKind) -> &[f64] {
        match kind {
            AblationKind::Threshold => &self.threshold,
            AblationKind::MaskNoise => &self.mask_noise,
            AblationKind::Guidance => &self.guidance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, every component seed below is derived from it.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub dataset: DatasetSpec,
    /// Architecture; the family default with data moments when absent.
    pub denoiser: Option<DenoiserConfig>,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub sweep: SweepConfig,
    /// Ratio at which the `sweep` command compares the two mask operators.
    pub operator_comparison_r: Option<f64>,
    pub ablation: AblationValues,
    pub constants: ConstantsConfig,
    pub curve: CurveConfig,
    pub ot: OtConfig,
    pub ot_ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: None,
            schedule: ScheduleConfig::default(),
            dataset: DatasetSpec::default(),
            denoiser: None,
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            sweep: SweepConfig::default(),
            operator_comparison_r: Some(0.8),
            ablation: AblationValues::default(),
            constants: ConstantsConfig::default(),
            curve: CurveConfig::default(),
            ot: OtConfig::default(),
            ot_ratios: vec![0.3, 0.5, 0.7],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Applies command-line overrides and derives component seeds.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if out.is_some() {
            self.out = out;
        }
        if let Some(s) = self.seed {
            self.dataset.seed = derive_seed(s, 1);
            self.train.seed = derive_seed(s, 2);
            if let Some(d) = self.denoiser.as_mut() {
                d.init_seed = derive_seed(s, 3);
            }
            self.classifier.seed = derive_seed(s, 4);
            self.sweep.seed = derive_seed(s, 5);
            self.constants.seed = derive_seed(s, 6);
            self.curve.seed = derive_seed(s, 7);
            self.ot.seed = derive_seed(s, 8);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if let Some(d) = &self.denoiser {
            d.validate()?;
            if d.data_dim != self.dataset.sample_shape().len() {
                return Err(invalid("denoiser data_dim does not match the dataset"));
            }
        }
        if let Some(r) = self.operator_comparison_r {
            if !(r > 0.0 && r <= 1.0) {
                return Err(invalid("operator comparison ratio must lie in (0, 1]"));
            }
        }
        if self.ot_ratios.iter().any(|r| !(*r >= 0.0 && *r <= 1.0)) {
            return Err(invalid("OT ratios must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| invalid("no output directory: pass --out or set \"out\""))
    }

    /// The configured architecture, or the family default with the data
    /// mean and standard deviation measured on `samples`.
    pub fn denoiser_for(&self, samples: &[Sample]) -> DenoiserConfig {
        if let Some(d) = self.denoiser {
            return d;
        }
        let mut cfg = match self.dataset.family {
            Family::Shapes => DenoiserConfig::shapes(),
            Family::Gm2d => DenoiserConfig::gm2d(),
        };
        let values: Vec<f64> = samples.iter().flat_map(|s| s.data.iter().map(|&v| v as f64)).collect();
        if values.len() > 1 {
            cfg.data_mean = mean(&values);
            cfg.data_std = crate::dataset::data_std(samples);
        }
        if let Some(s) = self.seed {
            cfg.init_seed = derive_seed(s, 3);
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_strictness() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sweep": {"n_pairs": 5, "extra": 0}}"#).is_err());
        let partial = RunConfig::from_json(r#"{"train": {"steps": 7}}"#).unwrap();
        assert_eq!(partial.train.steps, 7);
        assert_eq!(partial.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn master_seed_derives_components() {
        let a = RunConfig::default().resolve(Some(7), None).unwrap();
        let b = RunConfig::default().resolve(Some(7), None).unwrap();
        let c = RunConfig::default().resolve(Some(8), None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.seed, c.train.seed);
        assert_ne!(a.train.seed, a.sweep.seed);
        let plain = RunConfig::default().resolve(None, None).unwrap();
        assert_eq!(plain.train.seed, TrainConfig::default().seed);
    }

    #[test]
    fn validation_and_missing_file() {
        let mut cfg = RunConfig::default();
        cfg.operator_comparison_r = Some(1.5);
        assert!(cfg.resolve(None, None).is_err());
        assert!(matches!(RunConfig::load(Path::new("/nonexistent/run.json")), Err(Error::MissingInput(_))));
        assert!(RunConfig::default().out_dir().is_err());
    }
}
