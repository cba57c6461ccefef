//! Noise schedule, continuous timestep parameterization and inference grids.
//!
//! Timesteps live in `[0, 1]`; `t = 1` corresponds to all `T` training steps.
//! The cumulative signal coefficient `alpha(t)` is the linear interpolation of
//! the discrete cumulative products at index `t * T`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta schedule: `beta` evenly spaced from `beta_start` to
    /// `beta_end` over `train_steps`, `alpha_bar[t] = prod_{s<=t} (1 - beta_s)`.
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { train_steps, beta_start, beta_end } = config;
        if train_steps < 2 {
            return Err(invalid("schedule needs at least 2 training steps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        let span = (train_steps - 1) as f64;
        for s in 0..train_steps {
            let beta = beta_start + (beta_end - beta_start) * s as f64 / span;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn linear_default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn train_steps(&self) -> usize {
        self.config.train_steps
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Stable identifier of the schedule, stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let c = self.config;
        format!("linear-beta:T={}:b0={:e}:b1={:e}", c.train_steps, c.beta_start, c.beta_end)
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("timestep {t} outside [0, 1]")));
        }
        Ok(self.alpha_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        let pos = t * self.config.train_steps as f64;
        let lo = (pos.floor() as usize).min(self.config.train_steps);
        if lo == self.config.train_steps {
            return self.alpha_bar[lo];
        }
        let frac = pos - lo as f64;
        if frac == 0.0 {
            return self.alpha_bar[lo];
        }
        self.alpha_bar[lo] * (1.0 - frac) + self.alpha_bar[lo + 1] * frac
    }

    /// `tau(r) = sqrt(1 / alpha(r) - 1)`.
    pub fn tau(&self, r: f64) -> Result<f64> {
        Ok(tau_from_alpha(self.alpha(r)?))
    }
}

pub fn tau_from_alpha(alpha: f64) -> f64 {
    (1.0 / alpha - 1.0).max(0.0).sqrt()
}

pub fn alpha_from_tau(tau: f64) -> f64 {
    1.0 / (1.0 + tau * tau)
}

/// Uniform, endpoint-inclusive discretization of `[0, r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGrid {
    n_steps: usize,
    times: Vec<f64>,
}

impl StepGrid {
    pub fn new(r: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(invalid(format!("encoding ratio {r} outside (0, 1]")));
        }
        let mut times: Vec<f64> = (0..=n_steps).map(|i| r * i as f64 / n_steps as f64).collect();
        times[n_steps] = r;
        Ok(Self { n_steps, times })
    }

    /// A single timepoint at zero. Decoding or encoding over it is the identity.
    pub fn trivial() -> Self {
        Self { n_steps: 0, times: vec![0.0] }
    }

    /// Grid for encoding ratio `r` carved out of a `base_steps` schedule on
    /// `[0, 1]`: `round(r * base_steps)` intervals, at least one.
    pub fn for_ratio(r: f64, base_steps: usize) -> Result<Self> {
        if base_steps == 0 {
            return Err(invalid("grid needs at least one step"));
        }
        let n = ((r * base_steps as f64).round() as usize).max(1);
        Self::new(r, n)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Final timepoint, the encoding ratio.
    pub fn end(&self) -> f64 {
        *self.times.last().expect("grid is never empty")
    }

    /// Consecutive (from, to) pairs in encoding order, low to high `t`.
    pub fn encode_steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_steps).map(|i| (i, i + 1))
    }

    /// Consecutive (from, to) pairs in decoding order, high to low `t`.
    pub fn decode_steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_steps).rev().map(|i| (i + 1, i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // alpha_bar[500] of the linear schedule, from an independent numpy cumprod.
    const ALPHA_HALF: f64 = 0.07858724288177824;
    const ALPHA_BAR_T: f64 = 4.035829765375676e-05;
    // linear interpolation at t = 0.3337, same script
    const ALPHA_0_3337: f64 = 0.3192728402745525;

    #[test]
    fn boundaries() {
        let s = NoiseSchedule::linear_default();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        assert_eq!(s.alpha_bar()[0], 1.0);
        let end = s.alpha(1.0).unwrap();
        assert_eq!(end, s.alpha_bar()[1000]);
        assert!(end < 1e-3);
        assert!((end - ALPHA_BAR_T).abs() < 1e-15);
    }

    #[test]
    fn midpoint_matches_reference_cumprod() {
        let s = NoiseSchedule::linear_default();
        assert!((s.alpha(0.5).unwrap() - ALPHA_HALF).abs() < 1e-14);
        assert!((s.alpha(0.3337).unwrap() - ALPHA_0_3337).abs() < 1e-12);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::linear_default();
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn out_of_range_rejected() {
        let s = NoiseSchedule::linear_default();
        assert!(s.alpha(-0.01).is_err());
        assert!(s.alpha(1.01).is_err());
        assert!(s.alpha(f64::NAN).is_err());
        assert!(s.tau(1.5).is_err());
    }

    #[test]
    fn tau_values() {
        let s = NoiseSchedule::linear_default();
        assert_eq!(s.tau(0.0).unwrap(), 0.0);
        assert_eq!(tau_from_alpha(0.5), 1.0);
        assert!((tau_from_alpha(0.2) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grids() {
        let g = StepGrid::new(1.0, 50).unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(g.end(), 1.0);
        assert!((g.times()[1] - 0.02).abs() < 1e-15);

        let g = StepGrid::new(0.5, 25).unwrap();
        assert_eq!(g.len(), 26);
        assert_eq!(g.end(), 0.5);
        assert!((g.times()[1] - 0.02).abs() < 1e-15);

        let g = StepGrid::new(0.8, 50).unwrap();
        assert!((g.times()[1] - 0.016).abs() < 1e-15);
        assert_eq!(g.end(), 0.8);

        assert!(StepGrid::new(0.5, 0).is_err());
        assert!(StepGrid::new(0.0, 10).is_err());
        assert_eq!(StepGrid::for_ratio(0.5, 50).unwrap().n_steps(), 25);
        assert_eq!(StepGrid::for_ratio(0.001, 50).unwrap().n_steps(), 1);
    }

    #[test]
    fn encode_and_decode_orders_are_reverses() {
        let g = StepGrid::new(0.7, 13).unwrap();
        let enc: Vec<_> = g.encode_steps().collect();
        let mut dec: Vec<_> = g.decode_steps().map(|(a, b)| (b, a)).collect();
        dec.reverse();
        assert_eq!(enc, dec);
    }

    proptest! {
        #[test]
        fn tau_monotone(r1 in 0.0f64..1.0, dr in 1e-3f64..0.5) {
            let s = NoiseSchedule::linear_default();
            let r2 = (r1 + dr).min(1.0);
            prop_assume!(r2 > r1);
            prop_assert!(s.tau(r1).unwrap() < s.tau(r2).unwrap());
        }

        #[test]
        fn alpha_tau_roundtrip(r in 0.0f64..=1.0) {
            let s = NoiseSchedule::linear_default();
            let a = s.alpha(r).unwrap();
            let t = s.tau(r).unwrap();
            prop_assert!((alpha_from_tau(t) - a).abs() <= 1e-12 * a.max(1e-300) + 1e-15);
        }

        #[test]
        fn alpha_monotone(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let s = NoiseSchedule::linear_default();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(s.alpha(hi).unwrap() <= s.alpha(lo).unwrap());
        }

        #[test]
        fn grid_uniform(r in 0.01f64..=1.0, n in 1usize..200) {
            let g = StepGrid::new(r, n).unwrap();
            prop_assert_eq!(g.times()[0], 0.0);
            prop_assert_eq!(g.end(), r);
            let h = r / n as f64;
            for w in g.times().windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!((w[1] - w[0] - h).abs() < 1e-12);
            }
        }
    }
}
