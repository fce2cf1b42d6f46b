//! Shared denoising-diffusion engine.
//!
//! Noise schedules, the forward noising process, the x0-predicting training
//! loss with classifier-free condition dropping, and the reverse sampler
//! with classifier-free mixing and an optional guidance hook on the
//! posterior mean.
//!
//! Steps are 1-based: `t` runs over `1..=T`, matching the conventional
//! notation where `x_T` is pure noise and `x_0` is clean data.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Default classifier-free guidance scale.
pub const DEFAULT_CFG_SCALE: f64 = 2.5;
/// Default probability of dropping the condition during training.
pub const DEFAULT_P_UNCOND: f64 = 0.1;

/// Noise schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Squared-cosine cumulative schedule; stable at small step counts.
    Cosine,
    /// Betas linear from 1e-4 to 0.02.
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::config(format!(
                "unknown schedule kind '{}'; expected cosine or linear",
                other
            ))),
        }
    }
}

/// A diffusion noise schedule: per-step betas with derived alphas and their
/// cumulative products.  Index `t - 1` stores the values for step `t`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_count: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_count {
            return Err(Error::contract(format!(
                "diffusion step {} outside 1..={}",
                t, self.t_count
            )));
        }
        Ok(())
    }

    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar` of the previous step, with the convention `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }
}

/// Builds a schedule.  Hard invariants (betas in (0,1), strictly decreasing
/// `alpha_bar`) are enforced here; terminal cleanliness (`alpha_bar_T` small)
/// depends on `T` and is a property of production-scale schedules, checked in
/// tests rather than at construction.
pub fn make_schedule(t_count: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if t_count < 2 {
        return Err(Error::config(format!(
            "schedule needs at least 2 steps, got {}",
            t_count
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            (0..t_count)
                .map(|i| lo + (hi - lo) * i as f64 / (t_count - 1) as f64)
                .collect()
        }
        ScheduleKind::Cosine => {
            // Squared-cosine cumulative profile; betas are the step ratios,
            // clipped away from 1 so alphas never vanish.
            let s = 0.008;
            let f = |u: f64| {
                let v = ((u + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                v.cos().powi(2)
            };
            let f0 = f(0.0);
            (1..=t_count)
                .map(|t| {
                    let ratio =
                        f(t as f64 / t_count as f64) / f((t - 1) as f64 / t_count as f64);
                    (1.0 - ratio).clamp(1e-8, 0.999) * (f0 / f0)
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    for (i, b) in beta.iter().enumerate() {
        if !(*b > 0.0 && *b < 1.0) {
            return Err(Error::config(format!("beta_{} = {} outside (0,1)", i + 1, b)));
        }
    }
    for i in 1..t_count {
        if alpha_bar[i] >= alpha_bar[i - 1] {
            return Err(Error::config("alpha_bar is not strictly decreasing"));
        }
    }
    Ok(DiffusionSchedule {
        t_count,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Forward noising: `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn q_sample(
    x0: &[f64],
    t: usize,
    noise: &[f64],
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if x0.len() != noise.len() {
        return Err(Error::contract(format!(
            "q_sample shape mismatch: x0 has {} values, noise {}",
            x0.len(),
            noise.len()
        )));
    }
    let ab = sched.alpha_bar_t(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(noise)
        .map(|(x, n)| a * x + b * n)
        .collect())
}

/// Draws `n` i.i.d. standard normal values.
pub fn standard_normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws a diffusion step uniformly from `1..=T`.
pub fn uniform_step(rng: &mut ChaCha8Rng, t_count: usize) -> usize {
    rng.random_range(1..=t_count)
}

/// The denoiser contract: given the noisy state and the step index, predict
/// the clean state.  `None` for the condition means the learned null token
/// (unconditional branch).
pub trait Denoiser {
    type Cond;
    fn denoise(&self, x_t: &[f64], t: usize, cond: Option<&Self::Cond>) -> Result<Vec<f64>>;
}

/// Optional per-step adjustment of the posterior mean, applied before noise
/// is added.  Must preserve shape.
pub trait GuidanceHook {
    fn adjust(&mut self, t: usize, mu: &mut [f64]) -> Result<()>;
}

/// Classifier-free mix: `(1 + s) cond - s uncond`.
pub fn cfg_mix(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 + scale) * c - scale * u)
        .collect()
}

/// Posterior mean weights `(w0, wt)` so that `mu = w0 x0_hat + wt x_t`.
pub fn posterior_weights(sched: &DiffusionSchedule, t: usize) -> (f64, f64) {
    let ab_t = sched.alpha_bar_t(t);
    let ab_prev = sched.alpha_bar_prev(t);
    let beta_t = sched.beta_t(t);
    let alpha_t = sched.alpha_t(t);
    let w0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let wt = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    (w0, wt)
}

/// Reverse-step variance: `1 - alpha_t` by default, or the posterior
/// variance `beta_tilde_t` when `use_tilde` is set.
pub fn posterior_variance(sched: &DiffusionSchedule, t: usize, use_tilde: bool) -> f64 {
    if use_tilde {
        (1.0 - sched.alpha_bar_prev(t)) / (1.0 - sched.alpha_bar_t(t)) * sched.beta_t(t)
    } else {
        1.0 - sched.alpha_t(t)
    }
}

/// Sampler configuration.
#[derive(Debug, Clone)]
pub struct SampleConfig {
    /// Classifier-free guidance scale `s`; 0 disables the unconditional pass.
    pub cfg_scale: f64,
    /// Use the posterior variance `beta_tilde_t` instead of `1 - alpha_t`.
    pub use_tilde_variance: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            cfg_scale: DEFAULT_CFG_SCALE,
            use_tilde_variance: false,
        }
    }
}

/// One training-loss evaluation: draws a step and noise, forms `x_t`, drops
/// the condition with probability `p_uncond`, and returns the mean squared
/// error between the predicted and true clean states.
pub fn training_loss<D: Denoiser>(
    denoiser: &D,
    x0: &[f64],
    cond: Option<&D::Cond>,
    sched: &DiffusionSchedule,
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = uniform_step(rng, sched.t_count);
    let noise = standard_normal_vec(rng, x0.len());
    let x_t = q_sample(x0, t, &noise, sched)?;
    let dropped = rng.random_range(0.0..1.0) < p_uncond;
    let effective = if dropped { None } else { cond };
    let pred = denoiser.denoise(&x_t, t, effective)?;
    if pred.len() != x0.len() {
        return Err(Error::contract(format!(
            "denoiser returned {} values for a {}-value state",
            pred.len(),
            x0.len()
        )));
    }
    let mse = pred
        .iter()
        .zip(x0)
        .map(|(p, x)| (p - x) * (p - x))
        .sum::<f64>()
        / x0.len() as f64;
    Ok(mse)
}

/// Runs the full reverse process from Gaussian noise to a clean state.
///
/// Each step predicts `x0_hat` (with the classifier-free mix when a condition
/// and a nonzero scale are present), forms the posterior mean, lets the
/// guidance hook adjust it, and adds `sqrt(variance)` noise — zero at the
/// final step `t = 1`.  A non-finite state aborts with the offending step.
pub fn sample<D: Denoiser>(
    denoiser: &D,
    cond: Option<&D::Cond>,
    dim: usize,
    sched: &DiffusionSchedule,
    mut guidance: Option<&mut dyn GuidanceHook>,
    config: &SampleConfig,
    rng: &mut ChaCha8Rng,
    mut observer: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<Vec<f64>> {
    let mut x = standard_normal_vec(rng, dim);
    for t in (1..=sched.t_count).rev() {
        let cond_pred = denoiser.denoise(&x, t, cond)?;
        if cond_pred.len() != dim {
            return Err(Error::contract(format!(
                "denoiser returned {} values for a {}-value state",
                cond_pred.len(),
                dim
            )));
        }
        let x0_hat = if cond.is_some() && config.cfg_scale != 0.0 {
            let uncond_pred = denoiser.denoise(&x, t, None)?;
            cfg_mix(&cond_pred, &uncond_pred, config.cfg_scale)
        } else {
            cond_pred
        };
        let (w0, wt) = posterior_weights(sched, t);
        let mut mu: Vec<f64> = x0_hat
            .iter()
            .zip(&x)
            .map(|(x0v, xv)| w0 * x0v + wt * xv)
            .collect();
        if let Some(hook) = guidance.as_deref_mut() {
            hook.adjust(t, &mut mu)?;
            if mu.len() != dim {
                return Err(Error::contract(
                    "guidance hook changed the state dimension",
                ));
            }
        }
        if t > 1 {
            let sigma = posterior_variance(sched, t, config.use_tilde_variance).sqrt();
            let z = standard_normal_vec(rng, dim);
            for (m, zi) in mu.iter_mut().zip(&z) {
                *m += sigma * zi;
            }
        }
        if !mu.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(
                "sample",
                format!("non-finite state at diffusion step t={}", t),
            ));
        }
        x = mu;
        if let Some(obs) = observer.as_deref_mut() {
            obs(t, &x);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{AdamW, ParamStore, Tape};
    use crate::rng::rng_from_seed;

    // [TRIVIAL] Schedules: alpha_bar strictly decreasing, everything in (0,1).
    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for t_count in [2, 10, 100, 1000] {
                let s = make_schedule(t_count, kind).unwrap();
                assert_eq!(s.beta.len(), t_count);
                for t in 1..=t_count {
                    assert!(s.beta_t(t) > 0.0 && s.beta_t(t) < 1.0);
                    assert!(s.alpha_bar_t(t) > 0.0 && s.alpha_bar_t(t) < 1.0);
                    assert!(s.alpha_bar_t(t) < s.alpha_bar_prev(t));
                }
            }
        }
        assert!(make_schedule(1, ScheduleKind::Cosine).is_err());
        assert!(make_schedule(0, ScheduleKind::Linear).is_err());
    }

    // [TRIVIAL] Linear T=2 hits the endpoints exactly: beta = (1e-4, 0.02),
    // alpha_bar = (0.9999, 0.9999 * 0.98).
    #[test]
    fn linear_t2_endpoints() {
        let s = make_schedule(2, ScheduleKind::Linear).unwrap();
        assert_eq!(s.beta_t(1), 1e-4);
        assert_eq!(s.beta_t(2), 0.02);
        assert!((s.alpha_bar_t(1) - 0.9999).abs() < 1e-15);
        assert!((s.alpha_bar_t(2) - 0.9999 * 0.98).abs() < 1e-15);
    }

    // [DERIVED] Cosine T=1000: nearly clean at t=1, nearly pure noise at T.
    #[test]
    fn cosine_t1000_endpoints() {
        let s = make_schedule(1000, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bar_t(1) > 0.999, "alpha_bar_1 = {}", s.alpha_bar_t(1));
        assert!(s.alpha_bar_t(1000) < 0.05, "alpha_bar_T = {}", s.alpha_bar_t(1000));
    }

    fn hand_schedule(alpha_bar_t: f64) -> DiffusionSchedule {
        // Two-step schedule whose step-2 alpha_bar is the requested value.
        let a2 = alpha_bar_t / 0.9999;
        DiffusionSchedule {
            t_count: 2,
            beta: vec![1e-4, 1.0 - a2],
            alpha: vec![0.9999, a2],
            alpha_bar: vec![0.9999, alpha_bar_t],
        }
    }

    // [TRIVIAL] q_sample: alpha_bar -> 1 limit recovers x0; the plug-in case
    // alpha_bar = 0.25, x0 = 1, noise = 1 gives 0.5 + sqrt(0.75).
    #[test]
    fn q_sample_values() {
        let near_one = hand_schedule(1.0 - 1e-12);
        let x = q_sample(&[1.0, -2.0], 2, &[0.3, 0.7], &near_one).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-5);
        assert!((x[1] + 2.0).abs() < 1e-5);

        let quarter = hand_schedule(0.25);
        let x = q_sample(&[1.0], 2, &[1.0], &quarter).unwrap();
        assert!((x[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-12);

        assert!(q_sample(&[1.0], 3, &[1.0], &quarter).is_err());
        assert!(q_sample(&[1.0], 0, &[1.0], &quarter).is_err());
        assert!(q_sample(&[1.0, 2.0], 1, &[1.0], &quarter).is_err());
    }

    // [DERIVED] Monte-Carlo: the empirical variance of x_t over 1e5 draws
    // matches 1 - alpha_bar_t within 2%.
    #[test]
    fn q_sample_variance_monte_carlo() {
        let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let t = 60;
        let target = 1.0 - sched.alpha_bar_t(t);
        let mut rng = rng_from_seed(42);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let noise = standard_normal_vec(&mut rng, 1);
            let x = q_sample(&[0.7], t, &noise, &sched).unwrap()[0];
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(
            (var - target).abs() / target < 0.02,
            "empirical {} vs target {}",
            var,
            target
        );
    }

    struct OracleDenoiser {
        x0: Vec<f64>,
    }

    impl Denoiser for OracleDenoiser {
        type Cond = ();
        fn denoise(&self, _x: &[f64], _t: usize, _c: Option<&()>) -> Result<Vec<f64>> {
            Ok(self.x0.clone())
        }
    }

    struct ZeroDenoiser;

    impl Denoiser for ZeroDenoiser {
        type Cond = ();
        fn denoise(&self, x: &[f64], _t: usize, _c: Option<&()>) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    // [TRIVIAL] Oracle denoiser: loss 0.  Zero denoiser: loss = mean(x0^2).
    #[test]
    fn training_loss_oracles() {
        let sched = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let x0 = vec![0.6, -0.8]; // unit norm
        let mut rng = rng_from_seed(3);
        let oracle = OracleDenoiser { x0: x0.clone() };
        let loss = training_loss(&oracle, &x0, None, &sched, 0.1, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        let loss = training_loss(&ZeroDenoiser, &x0, None, &sched, 0.1, &mut rng).unwrap();
        let expect = (0.36 + 0.64) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    // [TRIVIAL] cfg_mix algebra: s=0 returns the conditional branch; equal
    // branches collapse to themselves for any s.
    #[test]
    fn cfg_mix_identities() {
        let c = vec![1.0, -2.0, 3.0];
        let u = vec![0.5, 0.5, 0.5];
        assert_eq!(cfg_mix(&c, &u, 0.0), c);
        for s in [0.5, 2.5, 7.0] {
            let same = cfg_mix(&c, &c, s);
            for (a, b) in same.iter().zip(&c) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // [DERIVED] Posterior-mean weights: at t=1 (alpha_bar_0 = 1) they reduce
    // to (1, 0); for all t, w0 sqrt(ab_t) + wt consistency: feeding the exact
    // noiseless pair (x0, sqrt(ab_t) x0) returns sqrt(ab_prev) x0.
    #[test]
    fn posterior_weights_identities() {
        let sched = make_schedule(200, ScheduleKind::Cosine).unwrap();
        let (w0, wt) = posterior_weights(&sched, 1);
        assert!((w0 - 1.0).abs() < 1e-12);
        assert!(wt.abs() < 1e-12);
        for t in 1..=200 {
            let (w0, wt) = posterior_weights(&sched, t);
            let lhs = w0 + wt * sched.alpha_bar_t(t).sqrt();
            let rhs = sched.alpha_bar_prev(t).sqrt();
            assert!((lhs - rhs).abs() < 1e-9, "t={}: {} vs {}", t, lhs, rhs);
        }
    }

    // [TRIVIAL] Variance flag: beta_tilde_1 = 0 and beta_tilde_t < beta_t.
    #[test]
    fn tilde_variance_smaller() {
        let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
        assert_eq!(posterior_variance(&sched, 1, true), 0.0);
        for t in 2..=100 {
            let tilde = posterior_variance(&sched, t, true);
            let plain = posterior_variance(&sched, t, false);
            assert!(tilde < plain);
            assert!((plain - sched.beta_t(t)).abs() < 1e-15);
        }
    }

    // [TRIVIAL] Constant oracle: the sampler lands on x* exactly (the final
    // step weighs x0_hat with coefficient 1 and adds no noise).
    #[test]
    fn sampler_converges_to_oracle() {
        let sched = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let target = vec![1.5, -0.25, 0.0, 4.0];
        let oracle = OracleDenoiser { x0: target.clone() };
        let mut rng = rng_from_seed(7);
        let out = sample(
            &oracle,
            None,
            4,
            &sched,
            None,
            &SampleConfig::default(),
            &mut rng,
            None,
        )
        .unwrap();
        for (o, t) in out.iter().zip(&target) {
            assert!((o - t).abs() < 1e-9);
        }
    }

    // [DERIVED] Identity-on-x0 oracle reproduces x0 over 100 seeds.
    #[test]
    fn oracle_reproduces_x0_over_seeds() {
        let sched = make_schedule(30, ScheduleKind::Cosine).unwrap();
        for seed in 0..100 {
            let mut rng = rng_from_seed(seed);
            let x0 = standard_normal_vec(&mut rng, 3);
            let oracle = OracleDenoiser { x0: x0.clone() };
            let out = sample(
                &oracle,
                None,
                3,
                &sched,
                None,
                &SampleConfig::default(),
                &mut rng,
                None,
            )
            .unwrap();
            for (o, t) in out.iter().zip(&x0) {
                assert!((o - t).abs() < 1e-9);
            }
        }
    }

    // [TRIVIAL] Determinism: same seed, same inputs, bitwise-equal output.
    #[test]
    fn sampler_deterministic() {
        let sched = make_schedule(40, ScheduleKind::Cosine).unwrap();
        let run = || {
            let mut rng = rng_from_seed(123);
            sample(
                &ZeroDenoiser,
                None,
                5,
                &sched,
                None,
                &SampleConfig::default(),
                &mut rng,
                None,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    struct NanDenoiser;

    impl Denoiser for NanDenoiser {
        type Cond = ();
        fn denoise(&self, x: &[f64], _t: usize, _c: Option<&()>) -> Result<Vec<f64>> {
            Ok(vec![f64::NAN; x.len()])
        }
    }

    // [TRIVIAL] A NaN state aborts and names the step.
    #[test]
    fn nan_aborts_with_step() {
        let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let mut rng = rng_from_seed(1);
        let err = sample(
            &NanDenoiser,
            None,
            2,
            &sched,
            None,
            &SampleConfig::default(),
            &mut rng,
            None,
        )
        .unwrap_err();
        let text = err.to_string();
        assert!(text.contains("t=10"), "error was: {}", text);
    }

    // [TRIVIAL] The guidance hook sees the mean and can steer the result;
    // a hook that pins the mean to a constant forces that output.
    #[test]
    fn guidance_hook_applies() {
        struct Pin;
        impl GuidanceHook for Pin {
            fn adjust(&mut self, _t: usize, mu: &mut [f64]) -> Result<()> {
                for v in mu.iter_mut() {
                    *v = 9.0;
                }
                Ok(())
            }
        }
        let sched = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let mut rng = rng_from_seed(5);
        let mut hook = Pin;
        let out = sample(
            &ZeroDenoiser,
            None,
            3,
            &sched,
            Some(&mut hook),
            &SampleConfig::default(),
            &mut rng,
            None,
        )
        .unwrap();
        // Final step applies the hook last with no noise: exactly 9 everywhere.
        assert_eq!(out, vec![9.0, 9.0, 9.0]);
    }

    // [TRIVIAL] The observer sees every step exactly once, in order T..1.
    #[test]
    fn observer_sees_all_steps() {
        let sched = make_schedule(20, ScheduleKind::Cosine).unwrap();
        let mut rng = rng_from_seed(2);
        let mut steps = Vec::new();
        let mut obs = |t: usize, _x: &[f64]| steps.push(t);
        sample(
            &ZeroDenoiser,
            None,
            2,
            &sched,
            None,
            &SampleConfig::default(),
            &mut rng,
            Some(&mut obs),
        )
        .unwrap();
        let expect: Vec<usize> = (1..=20).rev().collect();
        assert_eq!(steps, expect);
    }

    // [DERIVED] End-to-end training sanity: a 2-layer denoiser on a 2-mode
    // synthetic dataset drops the loss at least 10x over 2000 steps.
    #[test]
    fn two_layer_denoiser_training_converges() {
        let sched = make_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut store = ParamStore::new();
        let mut init_rng = rng_from_seed(11);
        let dim = 2;
        let t_dim = 8;
        let hidden = 32;
        let w1 = store.add("w1", crate::ad::nn::glorot(&mut init_rng, dim + t_dim, hidden));
        let b1 = store.add("b1", crate::ad::Tensor::vector(vec![0.0; hidden]));
        let w2 = store.add("w2", crate::ad::nn::glorot(&mut init_rng, hidden, dim));
        let b2 = store.add("b2", crate::ad::Tensor::vector(vec![0.0; dim]));

        let mut opt = AdamW::new(&store, 1e-2, 0.0);
        let mut rng = rng_from_seed(77);
        let batch = 16;
        let mut curve = Vec::with_capacity(2000);
        for _step in 0..2000 {
            // Two modes at (4,4) and (2,2) with 0.05 jitter.  The nonzero
            // mean keeps the untrained loss far above the high-noise Bayes
            // floor, so the curve has room to fall an order of magnitude.
            let mut x0_rows = Vec::with_capacity(batch * dim);
            let mut xt_rows = Vec::with_capacity(batch * dim);
            let mut temb_rows = Vec::with_capacity(batch * t_dim);
            for _ in 0..batch {
                let mode = if rng.random_range(0.0..1.0) < 0.5 { 4.0 } else { 2.0 };
                let x0: Vec<f64> = (0..dim)
                    .map(|_| mode + 0.05 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let t = uniform_step(&mut rng, sched.t_count);
                let noise = standard_normal_vec(&mut rng, dim);
                let x_t = q_sample(&x0, t, &noise, &sched).unwrap();
                x0_rows.extend_from_slice(&x0);
                xt_rows.extend_from_slice(&x_t);
                temb_rows.extend(crate::ad::nn::sinusoidal_embedding(t as f64, t_dim));
            }
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let xt = tape.constant(crate::ad::Tensor::matrix(batch, dim, xt_rows).unwrap());
            let temb = tape.constant(crate::ad::Tensor::matrix(batch, t_dim, temb_rows).unwrap());
            let x0v = tape.constant(crate::ad::Tensor::matrix(batch, dim, x0_rows).unwrap());
            let input = tape.concat_cols(&[xt, temb]);
            let h = tape.matmul(input, bound.var(w1));
            let h = tape.add_bias(h, bound.var(b1));
            let h = tape.gelu(h);
            let out = tape.matmul(h, bound.var(w2));
            let out = tape.add_bias(out, bound.var(b2));
            let loss = tape.mse(out, x0v);
            let grads = tape.backward(loss).unwrap();
            let mut acc = store.zero_grads();
            tape.accumulate_param_grads(&grads, &mut acc);
            opt.step(&mut store, &acc);
            curve.push(tape.value(loss).data[0]);
        }
        // Smooth the per-batch noise: compare the opening and closing
        // stretches of the recorded curve.
        let first: f64 = curve[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = curve[curve.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(
            first / last >= 10.0,
            "loss only fell from {} to {}",
            first,
            last
        );
    }
}
