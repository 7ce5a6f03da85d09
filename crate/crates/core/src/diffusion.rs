//! Noise schedule, forward noising, and the DDIM reverse step.
//!
//! Timesteps are 0-based: `t = 0` is the least-noised state and
//! `alpha_bar[t] = prod_{s <= t} (1 - beta[s])`.

use crate::error::{Error, Result};
use crate::image::ThermalImage;
use crate::rng::SeededRng;

pub const PAPER_STEPS: usize = 1000;
pub const PAPER_BETA_START: f64 = 1e-4;
pub const PAPER_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need steps >= 2 and 0 < beta_start < beta_end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let span = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_end
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / span
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// 1000 steps, beta from 1e-4 to 0.02.
    pub fn paper() -> Self {
        Self::linear(PAPER_STEPS, PAPER_BETA_START, PAPER_BETA_END).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range for {} steps",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Evenly strided sub-sequence of `count` timesteps, ascending, always
    /// ending at `steps - 1`.
    pub fn strided(&self, count: usize) -> Vec<usize> {
        let n = self.steps();
        let count = count.clamp(1, n);
        let stride = n / count;
        (0..count).map(|i| n - 1 - (count - 1 - i) * stride).collect()
    }

    /// DDIM noise scale for a jump from `t` to `prev`.
    pub fn ddim_sigma(&self, t: usize, prev: usize, eta_ddim: f64) -> f64 {
        let ab_t = self.alpha_bar[t];
        let ab_p = self.alpha_bar[prev];
        eta_ddim * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt()
    }
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(
    x0: &ThermalImage,
    t: usize,
    eps: &ThermalImage,
    sched: &DiffusionSchedule,
) -> Result<ThermalImage> {
    sched.check(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Inverts [`q_sample`] given a noise estimate.
pub fn predict_x0(
    x_t: &ThermalImage,
    eps_hat: &ThermalImage,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<ThermalImage> {
    sched.check(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Noise estimate consistent with `x_t` and a clean estimate `x0_hat`.
pub fn implied_eps(
    x_t: &ThermalImage,
    x0_hat: &ThermalImage,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<ThermalImage> {
    sched.check(t)?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseStepParams {
    /// 0 gives a deterministic step, 1 matches the ancestral DDPM variance.
    pub eta_ddim: f64,
    pub t: usize,
    /// Target timestep, `< t`. `t - 1` for unstrided sampling.
    pub prev: usize,
}

impl ReverseStepParams {
    pub fn unstrided(t: usize, eta_ddim: f64) -> Self {
        Self {
            eta_ddim,
            t,
            prev: t.saturating_sub(1),
        }
    }
}

/// One DDIM step from `x_t` to `x_prev`:
/// `sqrt(ab_prev) x0 + sqrt(1 - ab_prev - sigma^2) eps + sigma z`.
///
/// `x_t` is only used for its extent; the step is fully described by the
/// clean and noise estimates.
pub fn ddim_step(
    x_t: &ThermalImage,
    x0_hat: &ThermalImage,
    eps_hat: &ThermalImage,
    params: ReverseStepParams,
    rng: &mut SeededRng,
    sched: &DiffusionSchedule,
) -> Result<ThermalImage> {
    let ReverseStepParams { eta_ddim, t, prev } = params;
    sched.check(t)?;
    if t == 0 || prev >= t {
        return Err(Error::InvalidArgument(format!(
            "reverse step needs 0 <= prev < t, got t={t} prev={prev}"
        )));
    }
    if !(0.0..=1.0).contains(&eta_ddim) {
        return Err(Error::InvalidArgument(format!("eta_ddim must lie in [0, 1], got {eta_ddim}")));
    }
    x0_hat.ensure_extent(x_t.extent())?;
    let ab_p = sched.alpha_bar[prev];
    let sigma = sched.ddim_sigma(t, prev, eta_ddim);
    let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let mut out = x0_hat.zip_map(eps_hat, |x0, e| ab_p.sqrt() * x0 + dir * e)?;
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}
