//! Measurement-guided patch diffusion sampling.

use crate::degrade::LinearOperator;
use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_step, implied_eps, DiffusionSchedule, ReverseStepParams};
use crate::error::{Error, Result};
use crate::image::{PatchRef, ThermalImage, ValueDomain};
use crate::patch::{aggregate, GridParams, PatchGrid};
use crate::rng::SeededRng;

/// Where the data-consistency correction is applied within a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GuidanceOrder {
    /// Correct the aggregated clean estimate, then re-noise it to the next step.
    #[default]
    CorrectThenRenoise,
    /// Re-noise the aggregated estimate first, then correct the noisy state.
    RenoiseThenCorrect,
}

impl GuidanceOrder {
    pub fn name(self) -> &'static str {
        match self {
            GuidanceOrder::CorrectThenRenoise => "correct_then_renoise",
            GuidanceOrder::RenoiseThenCorrect => "renoise_then_correct",
        }
    }
}

impl std::str::FromStr for GuidanceOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct_then_renoise" => Ok(Self::CorrectThenRenoise),
            "renoise_then_correct" => Ok(Self::RenoiseThenCorrect),
            _ => Err(Error::InvalidArgument(format!("unknown guidance order '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    /// Regularizer added to the Gram matrix in the back-projection term.
    pub eta_reg: f64,
    /// Weight of the least-squares term.
    pub scale_ls: f64,
    /// Total correction strength; the per-step size defaults to `gamma / T`.
    pub gamma: f64,
    pub eta_ddim: f64,
    /// Default blend between back-projection (0) and least squares (1).
    pub zeta: f64,
    /// Number of reverse steps actually taken.
    pub steps: usize,
    /// Per-step overrides, indexed from the first (noisiest) step.
    pub mu_schedule: Option<Vec<f64>>,
    pub delta_schedule: Option<Vec<f64>>,
    pub order: GuidanceOrder,
    /// Move the tiling by a random offset at every step.
    pub shift_grid: bool,
    /// Clamp each tile's clean estimate to [-1, 1] before blending. Without
    /// it an early bias in the predicted noise is divided by a tiny
    /// `sqrt(alpha_bar)` and drags the whole trajectory off the data range.
    pub clip_denoised: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta_reg: 0.01,
            scale_ls: 1.0,
            gamma: 80.0,
            eta_ddim: 0.7,
            zeta: 0.9,
            steps: 100,
            mu_schedule: None,
            delta_schedule: None,
            order: GuidanceOrder::default(),
            shift_grid: false,
            clip_denoised: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 || self.steps > sched.steps() {
            return bad(format!("steps must lie in 1..={}", sched.steps()));
        }
        if !(self.eta_reg >= 0.0) || !self.scale_ls.is_finite() || !(self.gamma >= 0.0) {
            return bad("eta_reg and gamma must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.eta_ddim) || !(0.0..=1.0).contains(&self.zeta) {
            return bad("eta_ddim and zeta must lie in [0, 1]".into());
        }
        for (name, s) in [("mu", &self.mu_schedule), ("delta", &self.delta_schedule)] {
            if let Some(s) = s {
                if s.len() != self.steps {
                    return bad(format!("{name} schedule has {} entries for {} steps", s.len(), self.steps));
                }
            }
        }
        if let Some(mu) = &self.mu_schedule {
            if mu.iter().any(|&m| !(m >= 0.0)) {
                return bad("mu schedule entries must be non-negative".into());
            }
        }
        if let Some(d) = &self.delta_schedule {
            if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return bad("delta schedule entries must lie in [0, 1]".into());
            }
        }
        Ok(())
    }

    /// Step size at reverse-step index `k` (0 = noisiest).
    pub fn mu(&self, k: usize, sched: &DiffusionSchedule) -> f64 {
        match &self.mu_schedule {
            Some(s) => s[k],
            None => self.gamma / sched.steps() as f64,
        }
    }

    pub fn delta(&self, k: usize) -> f64 {
        match &self.delta_schedule {
            Some(s) => s[k],
            None => self.zeta,
        }
    }
}

/// `Aᵀ (A Aᵀ + eta I)⁻¹ (A x̂ − y)`.
pub fn guidance_bp(x0_hat: &ThermalImage, y: &ThermalImage, op: &LinearOperator, eta_reg: f64) -> Result<ThermalImage> {
    let r = op.forward(x0_hat)?.sub(y)?;
    op.adjoint(&op.solve_gram(&r, eta_reg)?)
}

/// `c Aᵀ (A x̂ − y)`.
pub fn guidance_ls(x0_hat: &ThermalImage, y: &ThermalImage, op: &LinearOperator, scale_ls: f64) -> Result<ThermalImage> {
    let r = op.forward(x0_hat)?.sub(y)?;
    Ok(op.adjoint(&r)?.scale(scale_ls))
}

/// `x̂ − mu ((1 − delta) g_bp + delta g_ls)`.
pub fn guided_update(
    x_hat: &ThermalImage,
    g_bp: &ThermalImage,
    g_ls: &ThermalImage,
    mu: f64,
    delta: f64,
) -> Result<ThermalImage> {
    let blend = g_bp.zip_map(g_ls, |b, l| (1.0 - delta) * b + delta * l)?;
    x_hat.zip_map(&blend, |x, g| x - mu * g)
}

/// Anything that predicts the noise in a set of tiles at one timestep.
pub trait NoisePredictor: Sync {
    fn patch_size(&self) -> usize;
    fn predict_noise(&self, patches: &[PatchRef], t: usize) -> Result<Vec<Vec<f64>>>;
}

impl NoisePredictor for Denoiser {
    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn predict_noise(&self, patches: &[PatchRef], t: usize) -> Result<Vec<Vec<f64>>> {
        let tiles: Vec<Vec<f64>> = patches.iter().map(|p| p.data.clone()).collect();
        self.predict(&tiles, t)
    }
}

/// What the sampler reports after each reverse step.
#[derive(Debug, Clone)]
pub struct StepReport<'a> {
    pub index: usize,
    pub timestep: usize,
    pub x0_hat: &'a ThermalImage,
    pub corrected: &'a ThermalImage,
    pub guidance_norm: f64,
}

/// Coarse estimate `Aᵀ (A Aᵀ + eta I)⁻¹ y` in the image domain.
pub fn initial_estimate(y: &ThermalImage, op: &LinearOperator, eta_reg: f64) -> Result<ThermalImage> {
    op.adjoint(&op.solve_gram(y, eta_reg)?)
}

fn check_finite(img: &ThermalImage, t: usize, what: &str) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            timestep: t,
            context: format!("{what} became non-finite"),
        })
    }
}

/// Restores the image behind measurement `y = A x + n`.
pub fn restore(
    y: &ThermalImage,
    op: &LinearOperator,
    net: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    grid: GridParams,
    cfg: &GuidanceConfig,
    rng: &mut SeededRng,
) -> Result<ThermalImage> {
    restore_observed(y, op, net, sched, grid, cfg, rng, &mut |_| Ok(()))
}

/// [`restore`] with a callback after every reverse step, for snapshots and logs.
#[allow(clippy::too_many_arguments)]
pub fn restore_observed(
    y: &ThermalImage,
    op: &LinearOperator,
    net: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    grid: GridParams,
    cfg: &GuidanceConfig,
    rng: &mut SeededRng,
    observer: &mut dyn FnMut(&StepReport) -> Result<()>,
) -> Result<ThermalImage> {
    cfg.validate(sched)?;
    y.ensure_extent(op.out_shape())?;
    if net.patch_size() != grid.patch_size {
        return Err(Error::InvalidArgument(format!(
            "denoiser patch size {} differs from tiling patch size {}",
            net.patch_size(),
            grid.patch_size
        )));
    }
    let extent = op.in_shape();
    let fixed = PatchGrid::new(extent, grid, true)?;
    let mut shift_rng = rng.derive("grid-shift");

    let ts = sched.strided(cfg.steps);
    let x_init = initial_estimate(y, op, cfg.eta_reg)?;
    let t_max = *ts.last().expect("at least one step");
    let ab = sched.alpha_bar()[t_max];
    let noise = rng.normal_image(extent.0, extent.1);
    let mut x = x_init.zip_map(&noise, |a, z| ab.sqrt() * a + (1.0 - ab).sqrt() * z)?;

    let correct = |img: &ThermalImage, k: usize| -> Result<(ThermalImage, f64)> {
        let mu = cfg.mu(k, sched);
        if mu == 0.0 {
            return Ok((img.clone(), 0.0));
        }
        let delta = cfg.delta(k);
        let g_bp = guidance_bp(img, y, op, cfg.eta_reg)?;
        let g_ls = guidance_ls(img, y, op, cfg.scale_ls)?;
        let out = guided_update(img, &g_bp, &g_ls, mu, delta)?;
        let norm = img.sub(&out)?.norm();
        Ok((out, norm))
    };

    for (k, pos) in (0..ts.len()).rev().enumerate() {
        let t = ts[pos];
        let tiling = if cfg.shift_grid {
            let s = (shift_rng.below(grid.stride), shift_rng.below(grid.stride));
            PatchGrid::shifted(extent, grid, true, s)?
        } else {
            fixed.clone()
        };
        let tiles = tiling.split(&x)?;
        let eps = net.predict_noise(&tiles, t)?;
        if eps.len() != tiles.len() {
            return Err(Error::InvalidArgument("predictor returned the wrong number of tiles".into()));
        }
        let ab_t = sched.alpha_bar()[t];
        let (a, b) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let x0_tiles: Vec<PatchRef> = tiles
            .iter()
            .zip(&eps)
            .map(|(p, e)| PatchRef {
                data: p
                    .data
                    .iter()
                    .zip(e)
                    .map(|(xv, ev)| {
                        let x0 = (xv - b * ev) / a;
                        if cfg.clip_denoised {
                            x0.clamp(-1.0, 1.0)
                        } else {
                            x0
                        }
                    })
                    .collect(),
                ..p.clone()
            })
            .collect();
        let x0_hat = aggregate(&x0_tiles, &tiling)?;
        check_finite(&x0_hat, t, "aggregated clean estimate")?;
        let last = pos == 0;

        match cfg.order {
            GuidanceOrder::CorrectThenRenoise => {
                let (corrected, gnorm) = correct(&x0_hat, k)?;
                check_finite(&corrected, t, "guided estimate")?;
                observer(&StepReport {
                    index: k,
                    timestep: t,
                    x0_hat: &x0_hat,
                    corrected: &corrected,
                    guidance_norm: gnorm,
                })?;
                if last {
                    x = corrected;
                } else {
                    let eps_c = implied_eps(&x, &corrected, t, sched)?;
                    let params = ReverseStepParams {
                        eta_ddim: cfg.eta_ddim,
                        t,
                        prev: ts[pos - 1],
                    };
                    x = ddim_step(&x, &corrected, &eps_c, params, rng, sched)?;
                }
            }
            GuidanceOrder::RenoiseThenCorrect => {
                let next = if last {
                    x0_hat.clone()
                } else {
                    let eps_a = implied_eps(&x, &x0_hat, t, sched)?;
                    let params = ReverseStepParams {
                        eta_ddim: cfg.eta_ddim,
                        t,
                        prev: ts[pos - 1],
                    };
                    ddim_step(&x, &x0_hat, &eps_a, params, rng, sched)?
                };
                let (corrected, gnorm) = correct(&next, k)?;
                observer(&StepReport {
                    index: k,
                    timestep: t,
                    x0_hat: &x0_hat,
                    corrected: &corrected,
                    guidance_norm: gnorm,
                })?;
                x = corrected;
            }
        }
        check_finite(&x, t, "sampler state")?;
    }
    let data = x.into_data().into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    ThermalImage::new(extent.0, extent.1, ValueDomain::Normalized, data)
}
