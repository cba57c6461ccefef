//! Deterministic DDIM decoding and encoding, classifier-free guidance, and
//! the stochastic noising encoder used by SDEdit.
//!
//! All functions operate on a batch of rows laid out contiguously; the row
//! count is `x.len() / model.dim()`.

use rand::Rng;

use crate::denoiser::{Condition, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::schedule::{tau_from_alpha, StepGrid};

/// Classifier-free guidance with the null condition as origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub query: Condition,
}

impl GuidanceSpec {
    pub fn new(scale: f64, query: Condition) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(invalid(format!("guidance scale {scale} must be finite and >= 0")));
        }
        Ok(Self { scale, query })
    }
}

fn rows_of<S: Scalar>(model: &Denoiser<S>, x: &[S]) -> Result<usize> {
    let d = model.dim();
    if x.len() % d != 0 {
        return Err(Error::ShapeMismatch { expected: d, got: x.len() % d });
    }
    Ok(x.len() / d)
}

/// `eps(x, null, t) + scale * (eps(x, q, t) - eps(x, null, t))` per row.
///
/// `scale = 0` and `scale = 1` return the plain unconditional and
/// conditional estimates without any arithmetic on them.
pub fn guided_eps<S: Scalar>(
    model: &Denoiser<S>,
    x: &[S],
    queries: &[Condition],
    scale: f64,
    t: f64,
) -> Result<Vec<S>> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(invalid(format!("guidance scale {scale} must be finite and >= 0")));
    }
    let n = rows_of(model, x)?;
    if queries.len() != n {
        return Err(invalid(format!("{} queries for {n} rows", queries.len())));
    }
    if scale == 1.0 {
        return model.forward(x, queries, &[t]);
    }
    let nulls = vec![Condition::Null; n];
    if scale == 0.0 {
        return model.forward(x, &nulls, &[t]);
    }
    let mut stacked = Vec::with_capacity(2 * x.len());
    stacked.extend_from_slice(x);
    stacked.extend_from_slice(x);
    let mut conds = nulls;
    conds.extend_from_slice(queries);
    let both = model.forward(&stacked, &conds, &[t])?;
    let (uncond, cond) = both.split_at(x.len());
    let lambda = S::from_f64_lossy(scale);
    Ok(uncond.iter().zip(cond).map(|(&u, &c)| u + lambda * (c - u)).collect())
}

pub fn guided_eps_single<S: Scalar>(
    model: &Denoiser<S>,
    x: &[S],
    guidance: GuidanceSpec,
    t: f64,
) -> Result<Vec<S>> {
    guided_eps(model, x, &[guidance.query], guidance.scale, t)
}

/// Predicted clean sample `(x - sqrt(1 - a) eps) / sqrt(a)`.
pub fn predict_x0<S: Scalar>(x: S, eps: S, alpha: f64) -> S {
    let sa = S::from_f64_lossy(alpha.sqrt());
    let sn = S::from_f64_lossy((1.0 - alpha).sqrt());
    (x - sn * eps) / sa
}

/// One DDIM update from noise level `alpha_from` to `alpha_to`, in either
/// direction: `sqrt(a') x0_hat + sqrt(1 - a') eps`.
pub fn ddim_step<S: Scalar>(x: &[S], eps: &[S], alpha_from: f64, alpha_to: f64, out: &mut [S]) {
    let sa_to = S::from_f64_lossy(alpha_to.sqrt());
    let sn_to = S::from_f64_lossy((1.0 - alpha_to).sqrt());
    for ((o, &xv), &e) in out.iter_mut().zip(x).zip(eps) {
        *o = sa_to * predict_x0(xv, e, alpha_from) + sn_to * e;
    }
}

/// The same update written as an Euler step of `du = eps dtau` in the
/// variables `u = x / sqrt(a)` and `tau = sqrt(1/a - 1)`.
pub fn ode_euler_step<S: Scalar>(x: &[S], eps: &[S], alpha_from: f64, alpha_to: f64, out: &mut [S]) {
    let dtau = S::from_f64_lossy(tau_from_alpha(alpha_to) - tau_from_alpha(alpha_from));
    let inv_sa = S::from_f64_lossy(1.0 / alpha_from.sqrt());
    let sa_to = S::from_f64_lossy(alpha_to.sqrt());
    for ((o, &xv), &e) in out.iter_mut().zip(x).zip(eps) {
        let u = xv * inv_sa;
        *o = sa_to * (u + e * dtau);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Encode,
    Decode,
}

/// Latents at every grid timepoint, indexed like the grid: `states[0]` is
/// the data-space endpoint for both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub grid: StepGrid,
    pub direction: Direction,
    pub states: Vec<Vec<S>>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn data_end(&self) -> &[S] {
        &self.states[0]
    }

    pub fn noise_end(&self) -> &[S] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// SHA-256 over the little-endian bytes of all states, in grid order.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.states {
            for v in s {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        crate::io::hex(&h.finalize())
    }
}

fn check_finite<S: Scalar>(x: &[S], step: usize) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step, row: Some(i) });
    }
    Ok(())
}

/// DDIM encoding from `x0` at `t = 0` to the end of `grid`, storing every
/// intermediate latent. Uses the unconditional estimate for every row.
pub fn ddim_encode<S: Scalar>(model: &Denoiser<S>, x0: &[S], grid: &StepGrid) -> Result<Trajectory<S>> {
    let n = rows_of(model, x0)?;
    ddim_encode_with(model, x0, grid, &vec![Condition::Null; n])
}

/// DDIM encoding with explicit per-row conditions.
pub fn ddim_encode_with<S: Scalar>(
    model: &Denoiser<S>,
    x0: &[S],
    grid: &StepGrid,
    conds: &[Condition],
) -> Result<Trajectory<S>> {
    let n = rows_of(model, x0)?;
    if conds.len() != n {
        return Err(invalid("one encoding condition per row required"));
    }
    check_finite(x0, 0)?;
    let times = grid.times();
    let schedule = model.schedule();
    let mut states = Vec::with_capacity(grid.len());
    states.push(x0.to_vec());
    for (from, to) in grid.encode_steps() {
        let x = &states[from];
        let eps = model.forward(x, conds, &[times[from]])?;
        let mut next = vec![S::zero(); x.len()];
        ddim_step(x, &eps, schedule.alpha(times[from])?, schedule.alpha(times[to])?, &mut next);
        check_finite(&next, to)?;
        states.push(next);
    }
    Ok(Trajectory { grid: grid.clone(), direction: Direction::Encode, states })
}

/// Everything a decode hook sees about the update that just happened.
pub struct StepContext<'a, S> {
    /// Grid index of the source timepoint.
    pub from: usize,
    /// Grid index of the destination timepoint.
    pub to: usize,
    pub alpha_from: f64,
    pub alpha_to: f64,
    pub prev: &'a [S],
    pub eps: &'a [S],
}

/// Post-update rewrite of a decode latent (mask compositing and friends).
pub trait StepHook<S> {
    fn after_update(&mut self, ctx: &StepContext<'_, S>, next: &mut [S]) -> Result<()>;
}

pub struct NoHook;

impl<S> StepHook<S> for NoHook {
    fn after_update(&mut self, _: &StepContext<'_, S>, _: &mut [S]) -> Result<()> {
        Ok(())
    }
}

/// Guided DDIM decoding from the end of `grid` down to `t = 0`.
pub fn ddim_decode<S: Scalar>(
    model: &Denoiser<S>,
    x_r: &[S],
    grid: &StepGrid,
    queries: &[Condition],
    scale: f64,
) -> Result<Trajectory<S>> {
    ddim_decode_with(model, x_r, grid, queries, scale, &mut NoHook)
}

pub fn ddim_decode_with<S: Scalar>(
    model: &Denoiser<S>,
    x_r: &[S],
    grid: &StepGrid,
    queries: &[Condition],
    scale: f64,
    hook: &mut dyn StepHook<S>,
) -> Result<Trajectory<S>> {
    rows_of(model, x_r)?;
    check_finite(x_r, grid.n_steps())?;
    let times = grid.times();
    let schedule = model.schedule();
    let mut states: Vec<Vec<S>> = vec![Vec::new(); grid.len()];
    states[grid.n_steps()] = x_r.to_vec();
    for (from, to) in grid.decode_steps() {
        let x = &states[from];
        let eps = guided_eps(model, x, queries, scale, times[from])?;
        let (a_from, a_to) = (schedule.alpha(times[from])?, schedule.alpha(times[to])?);
        let mut next = vec![S::zero(); x.len()];
        ddim_step(x, &eps, a_from, a_to, &mut next);
        let ctx = StepContext { from, to, alpha_from: a_from, alpha_to: a_to, prev: x, eps: &eps };
        hook.after_update(&ctx, &mut next)?;
        check_finite(&next, to)?;
        states[to] = next;
    }
    Ok(Trajectory { grid: grid.clone(), direction: Direction::Decode, states })
}

/// `sqrt(a_r) x0 + sqrt(1 - a_r) eps` with one fresh standard normal draw per
/// coordinate.
pub fn sdedit_encode<S: Scalar>(
    model: &Denoiser<S>,
    x0: &[S],
    r: f64,
    rng: &mut impl Rng,
) -> Result<Vec<S>> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(invalid(format!("encoding ratio {r} outside (0, 1]")));
    }
    noise_to(model.schedule().alpha(r)?, x0, rng)
}

pub(crate) fn noise_to<S: Scalar>(alpha: f64, x0: &[S], rng: &mut impl Rng) -> Result<Vec<S>> {
    let sa = S::from_f64_lossy(alpha.sqrt());
    let sn = S::from_f64_lossy((1.0 - alpha).sqrt());
    Ok(x0.iter().map(|&v| sa * v + sn * rng::normal::<S>(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rng::{normal_vec, seeded};
    use crate::schedule::NoiseSchedule;

    fn model(zero: bool) -> Denoiser<f64> {
        let cfg = DenoiserConfig {
            width: 16,
            hidden_layers: 2,
            zero_init_output: zero,
            preconditioning: !zero,
            ..DenoiserConfig::gm2d()
        };
        Denoiser::new(cfg, NoiseSchedule::linear_default()).unwrap()
    }

    #[test]
    fn guidance_identities_are_bit_exact() {
        let m = model(false).cast::<f32>();
        let x: Vec<f32> = normal_vec(&mut seeded(1), 6);
        let q = [Condition::Class(2), Condition::Class(0), Condition::Class(3)];
        let cond = m.forward(&x, &q, &[0.4]).unwrap();
        let uncond = m.forward(&x, &[Condition::Null; 3], &[0.4]).unwrap();
        assert_eq!(guided_eps(&m, &x, &q, 1.0, 0.4).unwrap(), cond);
        assert_eq!(guided_eps(&m, &x, &q, 0.0, 0.4).unwrap(), uncond);
        let g = guided_eps(&m, &x, &q, 5.0, 0.4).unwrap();
        for i in 0..6 {
            let want = uncond[i] + 5.0 * (cond[i] - uncond[i]);
            assert!((g[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
        assert!(guided_eps(&m, &x, &q, -1.0, 0.4).is_err());
        assert!(GuidanceSpec::new(f64::NAN, Condition::Null).is_err());
    }

    #[test]
    fn zero_estimator_decode_rescales() {
        let m = model(true);
        let s = m.schedule().clone();
        let grid = StepGrid::new(0.6, 30).unwrap();
        let x_r = vec![0.7, -1.3];
        let traj = ddim_decode(&m, &x_r, &grid, &[Condition::Class(1)], 5.0).unwrap();
        let a_r = s.alpha(0.6).unwrap();
        for (o, i) in traj.data_end().iter().zip(&x_r) {
            assert!((o - i / a_r.sqrt()).abs() < 1e-12 * (i / a_r.sqrt()).abs());
        }
        // single steps scale by sqrt(a'/a)
        let (a1, a0) = (s.alpha(grid.times()[30]).unwrap(), s.alpha(grid.times()[29]).unwrap());
        assert!((traj.states[29][0] - 0.7 * (a0 / a1).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn zero_estimator_encode_scales_down() {
        let m = model(true);
        let grid = StepGrid::new(0.45, 17).unwrap();
        let x0 = vec![1.5, -0.25];
        let traj = ddim_encode(&m, &x0, &grid).unwrap();
        let a = m.schedule().alpha(0.45).unwrap().sqrt();
        assert!((traj.noise_end()[0] - 1.5 * a).abs() < 1e-13);
        assert_eq!(traj.data_end(), x0.as_slice());
        assert_eq!(traj.len(), grid.len());
    }

    #[test]
    fn trivial_grids_are_identity() {
        let m = model(false);
        let x = vec![0.2, 0.9];
        let g = StepGrid::trivial();
        assert_eq!(ddim_decode(&m, &x, &g, &[Condition::Null], 3.0).unwrap().data_end(), x.as_slice());
        assert_eq!(ddim_encode(&m, &x, &g).unwrap().noise_end(), x.as_slice());
        // a zero-length step changes nothing either
        let mut out = vec![0.0; 2];
        ddim_step(&x, &[0.3, -0.1], 0.7, 0.7, &mut out);
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn euler_form_matches_ddim_update() {
        let m = model(false);
        let s = m.schedule();
        let x: Vec<f64> = normal_vec(&mut seeded(4), 8);
        let q = [Condition::Class(0), Condition::Null, Condition::Class(3), Condition::Class(1)];
        for &(t, tn) in &[(0.3, 0.32), (0.8, 0.7), (0.05, 0.0), (0.5, 0.9)] {
            let eps = guided_eps(&m, &x, &q, 2.0, t).unwrap();
            let (a, an) = (s.alpha(t).unwrap(), s.alpha(tn).unwrap());
            let mut via_ddim = vec![0.0; 8];
            let mut via_ode = vec![0.0; 8];
            ddim_step(&x, &eps, a, an, &mut via_ddim);
            ode_euler_step(&x, &eps, a, an, &mut via_ode);
            for (p, q) in via_ddim.iter().zip(&via_ode) {
                assert!((p - q).abs() <= 1e-10 * p.abs().max(1e-3), "{p} vs {q}");
            }
        }
    }

    #[test]
    fn encode_decode_grids_align() {
        let m = model(false);
        let grid = StepGrid::new(0.5, 10).unwrap();
        let x0 = vec![0.1, 0.2];
        let enc = ddim_encode(&m, &x0, &grid).unwrap();
        let dec = ddim_decode(&m, enc.noise_end(), &grid, &[Condition::Null], 0.0).unwrap();
        assert_eq!(enc.grid, dec.grid);
        assert_eq!(enc.len(), dec.len());
        assert_eq!(enc.noise_end(), dec.noise_end());
    }

    #[test]
    fn sdedit_noise_statistics() {
        let m = model(true).cast::<f64>();
        assert_eq!(sdedit_encode(&m, &[0.5, 0.5], 1e-9, &mut seeded(0)).unwrap().len(), 2);
        let a = sdedit_encode(&m, &[0.3, 0.1], 0.4, &mut seeded(9)).unwrap();
        let b = sdedit_encode(&m, &[0.3, 0.1], 0.4, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(sdedit_encode(&m, &[0.0], 0.0, &mut seeded(0)).is_err());

        let r = 0.3;
        let alpha = m.schedule().alpha(r).unwrap();
        let n = 100_000;
        let mut rng = seeded(5);
        let zeros = vec![0.0; 2];
        let mut sum_sq = 0.0;
        for _ in 0..n / 2 {
            for v in sdedit_encode(&m, &zeros, r, &mut rng).unwrap() {
                sum_sq += v * v;
            }
        }
        let var = sum_sq / n as f64;
        assert!((var / (1.0 - alpha) - 1.0).abs() < 0.02, "{var} vs {}", 1.0 - alpha);
    }

    #[test]
    fn alpha_one_adds_no_noise() {
        let x = vec![0.25f64, -0.5];
        assert_eq!(noise_to(1.0, &x, &mut seeded(1)).unwrap(), x);
    }
}
