//! Variance schedules and the elementary diffusion steps.
//!
//! `alpha_bar[t - 1]` holds the cumulative product for timestep `t`, so
//! `t = 1..=T` indexes the stored vector and `t = 0` is the clean latent
//! (`alpha_bar = 1`, no noise).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule kind `{other}`"
            ))),
        }
    }
}

/// Shape parameters for [`DiffusionSchedule::build`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    /// Per-step beta at `t = 1` (linear schedule).
    pub beta_start: f64,
    /// Per-step beta at `t = T` (linear schedule).
    pub beta_end: f64,
    /// Offset `s` of the cosine schedule.
    pub cosine_offset: f64,
    /// Upper clip on per-step betas of the cosine schedule; keeps `alpha_bar[T] > 0`.
    pub max_beta: f64,
    /// DDIM-style stochasticity in `[0, 1]`; `0` gives a deterministic backward step.
    pub sigma_scale: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 2e-2,
            cosine_offset: 0.008,
            max_beta: 0.999,
            sigma_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Backward-step coefficients for one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub c_pred: f64,
    pub c_dir: f64,
    pub c_noise: f64,
}

impl DiffusionSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, params: ScheduleParams) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(0.0..=1.0).contains(&params.sigma_scale) {
            return Err(Error::InvalidArgument(format!(
                "sigma_scale {} outside [0, 1]",
                params.sigma_scale
            )));
        }
        let alpha_bar = match kind {
            ScheduleKind::Linear => linear_alpha_bar(steps, &params)?,
            ScheduleKind::Cosine => cosine_alpha_bar(steps, &params)?,
        };
        let sigma = (1..=steps)
            .map(|t| {
                let prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
                let cur = alpha_bar[t - 1];
                params.sigma_scale * ((1.0 - prev) / (1.0 - cur) * (1.0 - cur / prev)).sqrt()
            })
            .collect();
        Self::from_parts(kind, alpha_bar, sigma)
    }

    /// Linear schedule with the default beta range.
    pub fn linear(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Linear, steps, ScheduleParams::default())
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::build(ScheduleKind::Cosine, steps, ScheduleParams::default())
    }

    /// Assembles a schedule from explicit values, checking every invariant.
    pub fn from_parts(kind: ScheduleKind, alpha_bar: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.len() != sigma.len() {
            return Err(Error::InvalidArgument(
                "alpha_bar and sigma must be non-empty and equally long".into(),
            ));
        }
        for (i, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "alpha_bar[{}] = {a} outside (0, 1]",
                    i + 1
                )));
            }
            if i > 0 && a >= alpha_bar[i - 1] {
                return Err(Error::InvalidArgument(format!(
                    "alpha_bar not strictly decreasing at t={}",
                    i + 1
                )));
            }
        }
        for (i, &s) in sigma.iter().enumerate() {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            // small slack for the rounding in sigma_scale = 1
            if !(s >= 0.0) || 1.0 - prev - s * s < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "sigma[{}] = {s} makes c_dir imaginary",
                    i + 1
                )));
            }
        }
        Ok(Self {
            kind,
            alpha_bar,
            sigma,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `alpha_bar` at timestep `t`; `t = 0` is the clean end (`1.0`).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.len() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {}]",
                self.len()
            ))),
        }
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(self.sigma[t - 1])
    }

    pub fn coefficients(&self, t: usize) -> Result<StepCoefficients> {
        let sigma = self.sigma(t)?;
        let prev = self.alpha_bar(t - 1)?;
        let dir = 1.0 - prev - sigma * sigma;
        if dir < -1e-12 {
            return Err(Error::InvalidSchedule(format!(
                "1 - alpha_bar[t-1] - sigma_t^2 = {dir} < 0 at t={t}"
            )));
        }
        Ok(StepCoefficients {
            c_pred: prev.sqrt(),
            c_dir: dir.max(0.0).sqrt(),
            c_noise: sigma,
        })
    }

    /// `steps` timesteps spread uniformly over `[1, T]`, largest first.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "steps must lie in [1, {total}], got {steps}"
            )));
        }
        if steps == 1 {
            return Ok(vec![total]);
        }
        let span = (total - 1) as f64;
        Ok((0..steps)
            .map(|i| (total as f64 - span * i as f64 / (steps - 1) as f64).round() as usize)
            .collect())
    }
}

fn linear_alpha_bar(steps: usize, params: &ScheduleParams) -> Result<Vec<f64>> {
    let (lo, hi) = (params.beta_start, params.beta_end);
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range [{lo}, {hi}] must satisfy 0 < start <= end < 1"
        )));
    }
    let mut acc = 1.0;
    Ok((0..steps)
        .map(|i| {
            let beta = if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            acc
        })
        .collect())
}

fn cosine_alpha_bar(steps: usize, params: &ScheduleParams) -> Result<Vec<f64>> {
    let s = params.cosine_offset;
    if !(s >= 0.0) || !(params.max_beta > 0.0 && params.max_beta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cosine offset {s} / max_beta {} out of range",
            params.max_beta
        )));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut out = Vec::with_capacity(steps);
    let mut prev = 1.0;
    for t in 1..=steps {
        let exact = f(t) / f0;
        let beta = (1.0 - exact / prev).min(params.max_beta);
        let value = if beta < params.max_beta { exact } else { prev * (1.0 - beta) };
        out.push(value);
        prev = value;
    }
    Ok(out)
}

/// Forward noising: `sqrt(ab_t)·z0 + sqrt(1 - ab_t)·eps`.
pub fn forward_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    check_step(t, schedule)?;
    let ab = schedule.alpha_bar(t)?;
    z0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// DDIM estimate of the clean latent from a noise prediction.
pub fn ddim_predict_z0(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    check_step(t, schedule)?;
    let ab = schedule.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::SingularSchedule {
            t,
            reason: "alpha_bar is 0",
        });
    }
    let root = ab.sqrt();
    z_t.axpby(1.0 / root, eps_hat, -(1.0 - ab).sqrt() / root)
}

/// One generic backward step `c_pred·z0_hat + c_dir·eps_hat + c_noise·noise`.
pub fn backward_step(
    z_t: &LatentTensor,
    t: usize,
    z0_hat: &LatentTensor,
    eps_hat: &LatentTensor,
    noise: &LatentTensor,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    check_step(t, schedule)?;
    z_t.ensure_same_shape(z0_hat)?;
    let c = schedule.coefficients(t)?;
    z0_hat
        .axpby(c.c_pred, eps_hat, c.c_dir)?
        .axpby(1.0, noise, c.c_noise)
}

fn check_step(t: usize, schedule: &DiffusionSchedule) -> Result<()> {
    if t == 0 || t > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside [1, {}]",
            schedule.len()
        )));
    }
    Ok(())
}
