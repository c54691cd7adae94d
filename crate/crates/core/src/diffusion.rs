//! Closed-form diffusion mathematics.
//!
//! Steps are 1-based throughout: `t = 1..=T`. Index 0 of the level table is
//! the clean-data boundary `l[0] = 1`, and `alpha_bar(0)` is defined as 1 so
//! that the last reverse step is well defined.
//!
//! Everything here runs in `f64`; the network may be evaluated at lower
//! precision, but these routines serve as the reference for it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the reverse-step noise scale is derived from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SigmaRule {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    PosteriorVariance,
}

/// Parameters of the `base + geometric(lo -> hi)` variance schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub base: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            base: 0.02,
            lo: 1e-5,
            hi: 0.4,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.base, self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    levels: Vec<f64>,
}

/// Builds a schedule; shorthand for [`NoiseSchedule::new`].
pub fn make_schedule(steps: usize, base: f64, lo: f64, hi: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, base, lo, hi)
}

impl NoiseSchedule {
    /// `beta_t = base + lo * (hi / lo)^((t - 1) / (T - 1))`, with the two
    /// endpoints pinned to `base + lo` and `base + hi`.
    pub fn new(steps: usize, base: f64, lo: f64, hi: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(lo > 0.0) || !lo.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "geometric start must be positive, got {lo}"
            )));
        }
        if !(hi > lo) || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "geometric end {hi} must exceed start {lo}"
            )));
        }
        if !(base >= 0.0) || !(base + hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "base + hi must lie in (0, 1), got {base} + {hi}"
            )));
        }
        let log_ratio = (hi / lo).ln();
        let last = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                let g = if i == 0 {
                    lo
                } else if i == steps - 1 {
                    hi
                } else {
                    lo * (log_ratio * i as f64 / last).exp()
                };
                base + g
            })
            .collect();
        let config = ScheduleConfig {
            steps,
            base,
            lo,
            hi,
        };
        Ok(Self::from_betas_unchecked(config, beta, SigmaRule::Beta))
    }

    fn from_betas_unchecked(config: ScheduleConfig, beta: Vec<f64>, rule: SigmaRule) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta
            .iter()
            .enumerate()
            .map(|(i, &b)| match rule {
                SigmaRule::Beta => b.sqrt(),
                SigmaRule::PosteriorVariance => {
                    let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    (b * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
                }
            })
            .collect();
        let levels = std::iter::once(1.0)
            .chain(alpha_bar.iter().map(|ab| ab.sqrt()))
            .collect();
        Self {
            config,
            beta,
            alpha,
            alpha_bar,
            sigma,
            levels,
        }
    }

    /// Re-derives `sigma` with a different rule. Only `SigmaRule::Beta` is
    /// used by the samplers in this crate.
    pub fn with_sigma_rule(self, rule: SigmaRule) -> Self {
        Self::from_betas_unchecked(self.config, self.beta, rule)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// Panics if `t` is outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Noise-level boundary `l[t]`, `t = 0..=T`.
    pub fn level(&self, t: usize) -> f64 {
        self.levels[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// One row per step: `(t, beta, alpha, alpha_bar, sigma, l)`.
    pub fn table(&self) -> Vec<ScheduleRow> {
        (1..=self.steps())
            .map(|t| ScheduleRow {
                t,
                beta: self.beta(t),
                alpha: self.alpha(t),
                alpha_bar: self.alpha_bar(t),
                sigma: self.sigma(t),
                level: self.level(t),
            })
            .collect()
    }

    /// Uniform draw of the continuous level `sqrt(alpha_bar)` on
    /// `(l[t], l[t-1]]`.
    pub fn sample_noise_level<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Result<f64> {
        self.check_step(t)?;
        let upper = self.level(t - 1);
        let lower = self.level(t);
        let u: f64 = rng.gen();
        Ok(upper - u * (upper - lower))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t: usize,
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
    pub level: f64,
}

/// Free-function form of [`NoiseSchedule::sample_noise_level`].
pub fn sample_noise_level<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    rng: &mut R,
) -> Result<f64> {
    schedule.sample_noise_level(t, rng)
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::LevelOutOfRange(alpha_bar));
    }
    Ok(())
}

fn check_same_len(what: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `y_t = sqrt(alpha_bar) y0 + sqrt(1 - alpha_bar) eps`.
pub fn forward_diffuse(y0: &[f64], alpha_bar: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_same_len("forward_diffuse", y0, eps)?;
    check_alpha_bar(alpha_bar)?;
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(y0
        .iter()
        .zip(eps)
        .map(|(y, e)| signal * y + noise * e)
        .collect())
}

/// One step of the Markov noising chain:
/// `y_t = sqrt(1 - beta_t) y_{t-1} + sqrt(beta_t) eps`.
pub fn noise_step(y_prev: &[f64], beta: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_same_len("noise_step", y_prev, eps)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside (0, 1)")));
    }
    let keep = (1.0 - beta).sqrt();
    let add = beta.sqrt();
    Ok(y_prev
        .iter()
        .zip(eps)
        .map(|(y, e)| keep * y + add * e)
        .collect())
}

/// Estimate of the clean sequence from a noisy one and predicted noise.
pub fn recover_y0(y_t: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_same_len("recover_y0", y_t, eps_hat)?;
    check_alpha_bar(alpha_bar)?;
    let inv_signal = 1.0 / alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    Ok(y_t
        .iter()
        .zip(eps_hat)
        .map(|(y, e)| inv_signal * (y - noise * e))
        .collect())
}

/// Ancestral step with `sigma_t` noise injection:
/// `(y_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step_original(
    y_t: &[f64],
    eps_hat: &[f64],
    z: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_same_len("reverse_step_original", y_t, eps_hat)?;
    check_same_len("reverse_step_original", y_t, z)?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = schedule.sigma(t);
    Ok(y_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((y, e), n)| inv_sqrt_alpha * (y - eps_coef * e) + sigma * n)
        .collect())
}

/// Predict-then-renoise step:
/// `(y_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sqrt(1 - alpha_bar_{t-1}) z`.
pub fn reverse_step_modified(
    y_t: &[f64],
    eps_hat: &[f64],
    z: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_same_len("reverse_step_modified", y_t, eps_hat)?;
    check_same_len("reverse_step_modified", y_t, z)?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = (1.0 - schedule.alpha_bar(t)).sqrt();
    let renoise = (1.0 - schedule.alpha_bar(t - 1)).sqrt();
    Ok(y_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((y, e), n)| inv_sqrt_alpha * (y - eps_coef * e) + renoise * n)
        .collect())
}

/// Forward-process posterior mean written in terms of the noise that
/// produced `y_t`.
pub fn posterior_mean(
    y_t: &[f64],
    eps: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_same_len("posterior_mean", y_t, eps)?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(y_t
        .iter()
        .zip(eps)
        .map(|(y, e)| inv_sqrt_alpha * (y - eps_coef * e))
        .collect())
}

/// Per-step KL term between the forward posterior and a model with mean
/// `mu_theta` and the fixed variance `sigma_t^2`.
pub fn step_kl_diagnostic(
    y0: &[f64],
    y_t: &[f64],
    mu_theta: &[f64],
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<f64> {
    schedule.check_step(t)?;
    check_same_len("step_kl_diagnostic", y0, y_t)?;
    check_same_len("step_kl_diagnostic", y0, mu_theta)?;
    if y0
        .iter()
        .chain(y_t)
        .chain(mu_theta)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("step_kl_diagnostic input".into()));
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let eps: Vec<f64> = y0
        .iter()
        .zip(y_t)
        .map(|(a, b)| (b - signal * a) / noise)
        .collect();
    let mu = posterior_mean(y_t, &eps, schedule, t)?;
    let sq: f64 = mu
        .iter()
        .zip(mu_theta)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let var = schedule.sigma(t).powi(2);
    Ok(sq / (2.0 * var))
}
