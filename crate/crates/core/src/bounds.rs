//! Numerical checks of the two edit-distance bounds: estimation of the
//! constants `C`, `K1`, `K2`, the bound formulas, their Monte Carlo
//! counterparts, and the transport defect of the DDIM encoder.
//!
//! All norms are divided by `sqrt(d)`.

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::dataset::{DatasetSpec, EditPair, Family, Sample};
use crate::denoiser::{Condition, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::io::{Mark, Plot, Series};
use crate::rng::{derive_seed, normal_vec, seeded};
use crate::sampler::{ddim_decode, ddim_encode, noise_to};
use crate::scalar::Scalar;
use crate::schedule::StepGrid;
use crate::stats::{mean, std_error};

use rand::Rng;

/// `(C + 1) tau`.
pub fn sdedit_bound(tau: f64, c: f64) -> f64 {
    (c + 1.0) * tau
}

/// `K2 tau / sqrt(tau^2 + 1) * (tau + sqrt(tau^2 + 1))^K1`.
pub fn diffedit_bound(tau: f64, k1: f64, k2: f64) -> f64 {
    let s = (tau * tau + 1.0).sqrt();
    k2 * tau / s * (tau + s).powf(k1)
}

/// Smallest `tau > 0` where the second bound catches up with the first, if
/// the second starts out tighter and crosses below `tau_max`.
pub fn crossover(c: f64, k1: f64, k2: f64, tau_max: f64) -> Option<f64> {
    let gap = |tau: f64| diffedit_bound(tau, k1, k2) - sdedit_bound(tau, c);
    let mut prev = 1e-6;
    if gap(prev) >= 0.0 {
        return None;
    }
    let n = 4000;
    for i in 1..=n {
        // log-spaced scan from 1e-6 to tau_max
        let tau = 1e-6 * (tau_max / 1e-6).powf(i as f64 / n as f64);
        if gap(tau) >= 0.0 {
            let (mut lo, mut hi) = (prev, tau);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if gap(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = tau;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    pub n_samples: usize,
    /// Steps of the encode grid on `[0, 1]` along which estimates are taken.
    pub t_steps: usize,
    pub power_points: usize,
    pub power_iterations: usize,
    pub pairs_per_point: usize,
    pub pair_scale: f64,
    pub seed: u64,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            t_steps: 50,
            power_points: 50,
            power_iterations: 30,
            pairs_per_point: 20,
            pair_scale: 0.05,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c: f64,
    pub k1: f64,
    /// Largest random-pair difference quotient.
    pub k1_pairs: f64,
    /// Largest Jacobian spectral norm found by power iteration.
    pub k1_power: f64,
    pub k2: f64,
    pub n_samples: usize,
    pub t_grid: Vec<f64>,
    pub power_points: usize,
    pub provenance: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit_rows(v: &mut [f64], d: usize) {
    for row in v.chunks_mut(d) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Estimates the constants along DDIM encode trajectories of `pairs`.
///
/// `C` is the largest normalized norm of the conditional estimate, `K2` the
/// mean over samples of the largest normalized conditional-minus-null gap,
/// and `K1` the largest Lipschitz quotient found for either the null or the
/// query estimate. `K1` is a lower bound on the true constant.
pub fn estimate_constants<S: Scalar>(
    model: &Denoiser<S>,
    pairs: &[EditPair],
    config: &ConstantsConfig,
) -> Result<BoundConstants> {
    if pairs.len() < config.n_samples || config.n_samples == 0 {
        return Err(invalid(format!("need {} edit pairs, got {}", config.n_samples, pairs.len())));
    }
    let model = model.cast::<f64>();
    let d = model.dim();
    let n = config.n_samples;
    let pairs = &pairs[..n];
    let grid = StepGrid::new(1.0, config.t_steps)?;
    let times = grid.times().to_vec();
    let x0: Vec<f64> = pairs.iter().flat_map(|p| p.sample.data.iter().map(|&v| v as f64)).collect();
    if x0.len() != n * d {
        return Err(invalid("edit pairs do not match the denoiser dimension"));
    }
    let traj = ddim_encode(&model, &x0, &grid)?;
    let queries: Vec<Condition> = pairs.iter().map(|p| Condition::Class(p.query)).collect();
    let nulls = vec![Condition::Null; n];
    let sd = (d as f64).sqrt();

    let mut c = 0.0f64;
    let mut gap_max = vec![0.0f64; n];
    for (k, &t) in times.iter().enumerate() {
        let x = &traj.states[k];
        let eq = model.forward(x, &queries, &[t])?;
        let en = model.forward(x, &nulls, &[t])?;
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            c = c.max(norm(&eq[r.clone()]) / sd);
            let diff: Vec<f64> = eq[r.clone()].iter().zip(&en[r]).map(|(a, b)| a - b).collect();
            gap_max[i] = gap_max[i].max(norm(&diff) / sd);
        }
    }
    let k2 = mean(&gap_max);

    // Lipschitz probes at sampled trajectory points, for both conditions.
    let mut rng = seeded(derive_seed(config.seed, 0));
    let m = config.power_points;
    let mut px = Vec::with_capacity(m * d);
    let mut pt = Vec::with_capacity(m);
    let mut pq = Vec::with_capacity(m);
    for _ in 0..m {
        let i = rng.gen_range(0..n);
        let k = rng.gen_range(0..times.len());
        px.extend_from_slice(&traj.states[k][i * d..(i + 1) * d]);
        pt.push(times[k]);
        pq.push(queries[i]);
    }
    let mut k1_pairs = 0.0f64;
    let mut k1_power = 0.0f64;
    for conds in [vec![Condition::Null; m], pq.clone()] {
        let base = model.forward(&px, &conds, &pt)?;
        for _ in 0..config.pairs_per_point {
            let delta: Vec<f64> =
                normal_vec::<f64>(&mut rng, m * d).into_iter().map(|z| z * config.pair_scale).collect();
            let moved: Vec<f64> = px.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let out = model.forward(&moved, &conds, &pt)?;
            for i in 0..m {
                let r = i * d..(i + 1) * d;
                let de: Vec<f64> = out[r.clone()].iter().zip(&base[r.clone()]).map(|(a, b)| a - b).collect();
                let dn = norm(&delta[r]);
                if dn > 0.0 {
                    k1_pairs = k1_pairs.max(norm(&de) / dn);
                }
            }
        }
        let mut v: Vec<f64> = normal_vec(&mut rng, m * d);
        unit_rows(&mut v, d);
        for _ in 0..config.power_iterations {
            let (_, jv) = model.jvp(&px, &v, &conds, &pt)?;
            v = model.vjp(&px, &jv, &conds, &pt)?;
            unit_rows(&mut v, d);
        }
        let (_, jv) = model.jvp(&px, &v, &conds, &pt)?;
        for row in jv.chunks(d) {
            k1_power = k1_power.max(norm(row));
        }
    }
    let k1 = k1_pairs.max(k1_power);
    if ![c, k1, k2].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { step: 0, row: None });
    }
    Ok(BoundConstants {
        c,
        k1,
        k1_pairs,
        k1_power,
        k2,
        n_samples: n,
        t_grid: times,
        power_points: m,
        provenance: format!(
            "C and K2 along unconditional DDIM encode trajectories of {n} samples on a {}-step grid; \
             K1 is the max of {} random pairs (scale {}) and {} power iterations at {m} points, \
             for both the null and query estimates; K1 is a lower bound",
            config.t_steps, config.pairs_per_point, config.pair_scale, config.power_iterations
        ),
    })
}

impl BoundConstants {
    /// True when every constant vanished, as for an untrained estimator.
    pub fn is_vacuous(&self) -> bool {
        self.c == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub r_grid: Vec<f64>,
    pub n_mc: usize,
    /// Steps for a full `[0, 1]` trajectory; a ratio `r` keeps `round(r * base)`.
    pub base_steps: usize,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self { r_grid: (1..=9).map(|i| i as f64 / 10.0).collect(), n_mc: 200, base_steps: 100, seed: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub r: f64,
    pub tau: f64,
    pub sdedit_bound: f64,
    pub diffedit_bound: f64,
    pub sdedit_distance: f64,
    pub sdedit_se: f64,
    pub encdec_distance: f64,
    pub encdec_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub constants: BoundConstants,
    pub rows: Vec<CurveRow>,
    pub crossover_tau: Option<f64>,
}

/// Monte Carlo edit distances for SDEdit and unmasked encode-decode with the
/// plain conditional estimate (no guidance), next to both bounds.
pub fn empirical_curve<S: Scalar>(
    model: &Denoiser<S>,
    pairs: &[EditPair],
    constants: &BoundConstants,
    config: &CurveConfig,
) -> Result<BoundCurve> {
    if pairs.len() < config.n_mc || config.n_mc < 2 {
        return Err(invalid(format!("need {} edit pairs, got {}", config.n_mc, pairs.len())));
    }
    let model = model.cast::<f64>();
    let d = model.dim();
    let n = config.n_mc;
    let pairs = &pairs[..n];
    let x0: Vec<f64> = pairs.iter().flat_map(|p| p.sample.data.iter().map(|&v| v as f64)).collect();
    let queries: Vec<Condition> = pairs.iter().map(|p| Condition::Class(p.query)).collect();
    let sd = (d as f64).sqrt();
    let dist = |out: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let diff: Vec<f64> =
                    out[i * d..(i + 1) * d].iter().zip(&x0[i * d..(i + 1) * d]).map(|(a, b)| a - b).collect();
                norm(&diff) / sd
            })
            .collect()
    };
    let mut rows = Vec::with_capacity(config.r_grid.len());
    for (k, &r) in config.r_grid.iter().enumerate() {
        let grid = StepGrid::for_ratio(r, config.base_steps)?;
        let tau = model.schedule().tau(r)?;
        let alpha = model.schedule().alpha(r)?;

        let enc = ddim_encode(&model, &x0, &grid)?;
        let ed = ddim_decode(&model, enc.noise_end(), &grid, &queries, 1.0)?;
        let ed_dist = dist(ed.data_end());

        let mut x_r = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut rng = seeded(derive_seed(derive_seed(config.seed, k as u64), i as u64));
            x_r.extend(noise_to(alpha, &x0[i * d..(i + 1) * d], &mut rng)?);
        }
        let sde = ddim_decode(&model, &x_r, &grid, &queries, 1.0)?;
        let sde_dist = dist(sde.data_end());

        rows.push(CurveRow {
            r,
            tau,
            sdedit_bound: sdedit_bound(tau, constants.c),
            diffedit_bound: diffedit_bound(tau, constants.k1, constants.k2),
            sdedit_distance: mean(&sde_dist),
            sdedit_se: std_error(&sde_dist),
            encdec_distance: mean(&ed_dist),
            encdec_se: std_error(&ed_dist),
        });
    }
    let tau_max = rows.iter().map(|r| r.tau).fold(1.0, f64::max) * 10.0;
    Ok(BoundCurve {
        constants: constants.clone(),
        rows,
        crossover_tau: crossover(constants.c, constants.k1, constants.k2, tau_max),
    })
}

impl BoundCurve {
    pub const CSV_HEADER: [&'static str; 8] = [
        "r",
        "tau",
        "sdedit_bound",
        "diffedit_bound",
        "sdedit_distance",
        "sdedit_se",
        "encdec_distance",
        "encdec_se",
    ];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record(
                [r.r, r.tau, r.sdedit_bound, r.diffedit_bound, r.sdedit_distance, r.sdedit_se, r.encdec_distance, r.encdec_se]
                    .iter()
                    .map(|v| format!("{v:.6e}")),
            )?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Rows where an empirical distance exceeds its bound times `1 + slack`.
    pub fn violations(&self, slack: f64) -> Vec<(f64, &'static str)> {
        let mut out = Vec::new();
        for r in &self.rows {
            if r.sdedit_distance > r.sdedit_bound * (1.0 + slack) {
                out.push((r.r, "sdedit"));
            }
            if r.encdec_distance > r.diffedit_bound * (1.0 + slack) {
                out.push((r.r, "encode-decode"));
            }
        }
        out
    }

    pub fn plot(&self) -> Plot {
        let pts = |f: &dyn Fn(&CurveRow) -> f64| self.rows.iter().map(|r| (r.tau, f(r))).collect::<Vec<_>>();
        let y_cap = self
            .rows
            .iter()
            .map(|r| r.sdedit_bound.max(r.sdedit_distance))
            .fold(0.0, f64::max)
            * 1.2;
        Plot {
            title: "Edit distance bounds".into(),
            x_label: "tau".into(),
            y_label: "distance / sqrt(d)".into(),
            series: vec![
                Series::line("sdedit bound", pts(&|r| r.sdedit_bound)),
                Series::line("diffedit bound", pts(&|r| r.diffedit_bound)),
                Series::line("sdedit empirical", pts(&|r| r.sdedit_distance)).with_mark(Mark::LineAndPoints),
                Series::line("encode-decode empirical", pts(&|r| r.encdec_distance)).with_mark(Mark::LineAndPoints),
            ],
            y_max: Some(y_cap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtConfig {
    pub n_points: usize,
    /// Independent replicates of the assignment problem, for its standard error.
    pub replicates: usize,
    pub base_steps: usize,
    pub seed: u64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self { n_points: 1000, replicates: 4, base_steps: 100, seed: 9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtDefect {
    pub r: f64,
    pub encoder_cost: f64,
    pub encoder_se: f64,
    pub ot_cost: f64,
    pub ot_se: f64,
    pub ratio: f64,
    /// `sqrt(encoder_se^2 + ot_se^2)`, the standard error of the cost gap.
    pub gap_se: f64,
}

impl OtDefect {
    /// Encoder cost is at least the assignment cost up to `k` standard errors.
    pub fn consistent(&self, k: f64) -> bool {
        self.encoder_cost >= self.ot_cost - k * self.gap_se
    }
}

/// Mean squared-Euclidean cost of the exact optimal assignment between two
/// equally sized point sets.
pub fn assignment_cost(a: &[f64], b: &[f64], d: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() % d != 0 {
        return Err(invalid("point sets must have equal size"));
    }
    let n = a.len() / d;
    if n == 0 {
        return Ok(0.0);
    }
    let cost = assignment::squared_distances(a, b, d);
    let (_, total) = assignment::solve(&cost, n).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(total / n as f64)
}

fn draw_points(spec: &DatasetSpec, seed: u64, n: usize) -> Vec<f64> {
    let s = DatasetSpec { seed, ..spec.clone() };
    (0..n as u64).flat_map(|i| s.sample_at(i).data.into_iter().map(|v| v as f64)).collect()
}

/// Transport cost of the DDIM encoder `E_r` against the exact assignment cost
/// between `p_0` and `p_r` samples.
pub fn ot_defect<S: Scalar>(model: &Denoiser<S>, spec: &DatasetSpec, r: f64, config: &OtConfig) -> Result<OtDefect> {
    if spec.family != Family::Gm2d {
        return Err(invalid("transport defect is measured on the 2-D mixture"));
    }
    if config.n_points == 0 || config.n_points > 2000 {
        return Err(invalid("n_points must lie in 1..=2000"));
    }
    if config.replicates == 0 {
        return Err(invalid("at least one replicate required"));
    }
    let model = model.cast::<f64>();
    let d = model.dim();
    let n = config.n_points;
    let alpha = model.schedule().alpha(r)?;
    if alpha == 1.0 {
        return Ok(OtDefect { r, encoder_cost: 0.0, encoder_se: 0.0, ot_cost: 0.0, ot_se: 0.0, ratio: 1.0, gap_se: 0.0 });
    }
    let grid = StepGrid::for_ratio(r, config.base_steps)?;

    let x0 = draw_points(spec, derive_seed(config.seed, 0), n);
    let enc = ddim_encode(&model, &x0, &grid)?;
    let per_point: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|k| (x0[i * d + k] - enc.noise_end()[i * d + k]).powi(2)).sum())
        .collect();

    let mut ot = Vec::with_capacity(config.replicates);
    for rep in 0..config.replicates as u64 {
        let base = derive_seed(config.seed, 1 + rep);
        let a = draw_points(spec, derive_seed(base, 0), n);
        let src = draw_points(spec, derive_seed(base, 1), n);
        let mut rng = seeded(derive_seed(base, 2));
        let b = noise_to(alpha, &src, &mut rng)?;
        ot.push(assignment_cost(&a, &b, d)?);
    }
    let encoder_cost = mean(&per_point);
    let encoder_se = std_error(&per_point);
    let ot_cost = mean(&ot);
    let ot_se = if ot.len() > 1 { std_error(&ot) } else { 0.0 };
    Ok(OtDefect {
        r,
        encoder_cost,
        encoder_se,
        ot_cost,
        ot_se,
        ratio: encoder_cost / ot_cost,
        gap_se: (encoder_se * encoder_se + ot_se * ot_se).sqrt(),
    })
}

/// Squared 2-Wasserstein distance between isotropic Gaussians in `d`
/// dimensions with standard deviations `s1`, `s2` and equal means.
pub fn isotropic_gaussian_w2(s1: f64, s2: f64, d: usize) -> f64 {
    d as f64 * (s1 - s2).powi(2)
}

/// Points used by callers that estimate constants on raw samples rather than
/// edit pairs.
pub fn pairs_from_samples(samples: &[Sample], n_classes: usize) -> Vec<EditPair> {
    samples
        .iter()
        .map(|s| EditPair { sample: s.clone(), query: (s.class + 1) % n_classes })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::edit_pairs;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::NoiseSchedule;
    use proptest::prelude::*;

    #[test]
    fn bound_formulas() {
        assert_eq!(sdedit_bound(0.0, 1.0), 0.0);
        assert_eq!(sdedit_bound(1.0, 1.0), 2.0);
        assert_eq!(sdedit_bound(2.0, 1.0), 4.0);
        assert_eq!(diffedit_bound(0.0, 3.0, 0.02), 0.0);
        // numpy: 0.02 * 1/sqrt(2) * (1 + sqrt(2))**3
        assert!((diffedit_bound(1.0, 3.0, 0.02) - 0.1989949493661166).abs() < 1e-15);
    }

    #[test]
    fn crossover_with_reference_constants() {
        let tau = crossover(1.0, 3.0, 0.02, 100.0).unwrap();
        let below = tau * 0.9;
        let above = tau * 1.1;
        assert!(diffedit_bound(below, 3.0, 0.02) < sdedit_bound(below, 1.0));
        assert!(diffedit_bound(above, 3.0, 0.02) > sdedit_bound(above, 1.0));
        assert!((diffedit_bound(tau, 3.0, 0.02) - sdedit_bound(tau, 1.0)).abs() < 1e-9);
        // K2 above C + 1 never starts out tighter
        assert!(crossover(1.0, 3.0, 2.5, 100.0).is_none());
    }

    proptest! {
        #[test]
        fn bounds_increase(tau in 0.0f64..20.0, dt in 1e-3f64..5.0, c in 0.0f64..3.0, k1 in 0.0f64..6.0, k2 in 1e-3f64..1.0) {
            prop_assert!(sdedit_bound(tau + dt, c) > sdedit_bound(tau, c));
            prop_assert!(diffedit_bound(tau + dt, k1, k2) > diffedit_bound(tau, k1, k2));
            prop_assert!(diffedit_bound(tau, k1, k2) >= 0.0);
        }
    }

    #[test]
    fn zero_estimator_constants_vanish() {
        let cfg = DenoiserConfig { width: 8, hidden_layers: 2, zero_init_output: true, preconditioning: false, ..DenoiserConfig::gm2d() };
        let m: Denoiser<f64> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let pairs = edit_pairs(&DatasetSpec::gm2d(10, 1), 100).unwrap();
        let cfg = ConstantsConfig { n_samples: 100, t_steps: 10, power_points: 5, pairs_per_point: 2, power_iterations: 3, ..ConstantsConfig::default() };
        let k = estimate_constants(&m, &pairs, &cfg).unwrap();
        assert_eq!((k.c, k.k1, k.k2), (0.0, 0.0, 0.0));
        assert!(k.is_vacuous());
    }

    #[test]
    fn linear_estimator_lipschitz_recovered() {
        // preconditioned zero read-out is linear in x with slope c_skip(t),
        // whose maximum over t is sqrt(1 - a)/(a s^2 + 1 - a) at the largest value
        let cfg = DenoiserConfig { width: 8, hidden_layers: 2, zero_init_output: true, data_std: 0.5, ..DenoiserConfig::gm2d() };
        let m: Denoiser<f64> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let pairs = edit_pairs(&DatasetSpec::gm2d(10, 1), 100).unwrap();
        let ccfg = ConstantsConfig { n_samples: 100, t_steps: 20, power_points: 40, pairs_per_point: 3, power_iterations: 5, ..ConstantsConfig::default() };
        let k = estimate_constants(&m, &pairs, &ccfg).unwrap();
        let sched = m.schedule();
        let mut expected = 0.0f64;
        for t in StepGrid::new(1.0, 20).unwrap().times() {
            let a = sched.alpha(*t).unwrap();
            expected = expected.max((1.0 - a).sqrt() / (a * 0.25 + 1.0 - a));
        }
        assert!(k.k1 <= expected + 1e-9);
        assert!(k.k1_pairs > 0.5 * expected);
        assert_eq!(k.k2, 0.0);
    }

    #[test]
    fn csv_and_plot_shapes() {
        let row = CurveRow { r: 0.1, tau: 0.3, sdedit_bound: 0.6, diffedit_bound: 0.1, sdedit_distance: 0.2, sdedit_se: 0.01, encdec_distance: 0.05, encdec_se: 0.002 };
        let constants = BoundConstants { c: 1.0, k1: 3.0, k1_pairs: 2.0, k1_power: 3.0, k2: 0.02, n_samples: 1, t_grid: vec![0.0], power_points: 1, provenance: String::new() };
        let curve = BoundCurve { constants, rows: vec![row], crossover_tau: None };
        let csv = curve.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), BoundCurve::CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap().split(',').count(), 8);
        assert!(curve.violations(0.05).is_empty());
        assert!(curve.plot().to_svg().contains("diffedit bound"));
    }

    #[test]
    fn identity_transport_at_time_zero() {
        let cfg = DenoiserConfig { width: 8, hidden_layers: 2, ..DenoiserConfig::gm2d() };
        let m: Denoiser<f32> = Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap();
        let res = ot_defect(&m, &DatasetSpec::gm2d(10, 1), 0.0, &OtConfig { n_points: 10, ..OtConfig::default() }).unwrap();
        assert_eq!((res.encoder_cost, res.ot_cost, res.ratio), (0.0, 0.0, 1.0));
        assert!(ot_defect(&m, &DatasetSpec::shapes(10, 1), 0.5, &OtConfig::default()).is_err());
    }

    #[test]
    fn assignment_matches_gaussian_closed_form() {
        // N(0, 0.5^2 I) against N(0, 0.9^2 I) in 2-D: W2^2 = 2 (0.4)^2 = 0.32
        let n = 800;
        let mut costs = Vec::new();
        for rep in 0..4 {
            let mut rng = seeded(100 + rep);
            let a: Vec<f64> = normal_vec::<f64>(&mut rng, 2 * n).into_iter().map(|z| 0.5 * z).collect();
            let b: Vec<f64> = normal_vec::<f64>(&mut rng, 2 * n).into_iter().map(|z| 0.9 * z).collect();
            costs.push(assignment_cost(&a, &b, 2).unwrap());
        }
        let want = isotropic_gaussian_w2(0.5, 0.9, 2);
        assert!((want - 0.32).abs() < 1e-12);
        let got = mean(&costs);
        // the empirical cost overestimates the population value by a small
        // finite-sample bias; allow it on top of three standard errors
        assert!(got >= want - 3.0 * std_error(&costs), "{got} vs {want}");
        assert!(got <= want * 1.15 + 3.0 * std_error(&costs), "{got} vs {want}");
    }
}
