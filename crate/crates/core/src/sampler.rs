//! Inversion-free consistency sampling of the source branch.
//!
//! Each step denoises with the consistency noise that points at the known
//! source latent, then re-noises to the next timestep with fresh keyed noise.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::predictor::{consistency_noise, Conditioning, NoisePredictor};
use crate::rng::{gaussian, NoiseStream};
use crate::schedule::{forward_noise, DiffusionSchedule};
use crate::tensor::{encode_f32_le, LatentTensor};

pub const DEFAULT_STEPS: usize = 15;
pub const DEFAULT_GUIDANCE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub schedule: DiffusionSchedule,
}

impl SamplerConfig {
    pub fn new(schedule: DiffusionSchedule) -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
            schedule,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_guidance(mut self, guidance: f64) -> Self {
        self.guidance = guidance;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > self.schedule.len() {
            return Err(Error::InvalidArgument(format!(
                "steps {} must lie in [1, {}]",
                self.steps,
                self.schedule.len()
            )));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::InvalidArgument(format!("guidance {} must be >= 0", self.guidance)));
        }
        Ok(())
    }

    /// The descending timestep grid.
    pub fn timesteps(&self) -> Result<Vec<usize>> {
        self.validate()?;
        self.schedule.timesteps(self.steps)
    }
}

/// Step ①: `(z_tau − sqrt(1 − ab)·eps_cons) / sqrt(ab)`.
pub fn denoise_step(
    z_tau: &LatentTensor,
    eps_cons: &LatentTensor,
    tau: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    let ab = schedule.alpha_bar(tau)?;
    if ab <= 0.0 {
        return Err(Error::SingularSchedule {
            t: tau,
            reason: "alpha_bar is 0",
        });
    }
    let root = ab.sqrt();
    z_tau.axpby(1.0 / root, eps_cons, -(1.0 - ab).sqrt() / root)
}

/// Step ②: `sqrt(ab)·z + sqrt(1 − ab)·noise`.
pub fn renoise_step(
    z: &LatentTensor,
    tau: usize,
    noise: &LatentTensor,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor> {
    forward_noise(z, tau, noise, schedule)
}

/// The starting noisy latent shared by every branch.
pub fn initial_latent(seed: u64, like: &LatentTensor) -> LatentTensor {
    gaussian(seed, NoiseStream::Init, like.shape())
}

/// Noise added after step `step`, shared by every branch.
pub fn renoise_noise(seed: u64, step: usize, like: &LatentTensor) -> LatentTensor {
    gaussian(seed, NoiseStream::Renoise(step), like.shape())
}

/// One source-branch update: consistency noise toward `z_src`, then step ①.
pub fn source_update(
    z_tau: &LatentTensor,
    z_src: &LatentTensor,
    tau: usize,
    schedule: &DiffusionSchedule,
) -> Result<(LatentTensor, LatentTensor)> {
    let eps_cons = consistency_noise(z_tau, z_src, tau, schedule)?;
    let z = denoise_step(z_tau, &eps_cons, tau, schedule)?;
    Ok((eps_cons, z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub tau: usize,
    pub z_tau: LatentTensor,
    pub z: LatentTensor,
    pub eps_cons: LatentTensor,
    pub eps_param: LatentTensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_latent(&self) -> Option<&LatentTensor> {
        self.steps.last().map(|s| &s.z)
    }

    /// One JSON record per step; tensors as base64 little-endian `f32`.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            step: usize,
            tau: usize,
            shape: [usize; 3],
            z_tau: &'a str,
            z: &'a str,
            eps_cons: &'a str,
            eps_param: &'a str,
        }
        for s in &self.steps {
            let enc = [&s.z_tau, &s.z, &s.eps_cons, &s.eps_param].map(|t| encode_f32_le(t.data()));
            let record = Record {
                step: s.step,
                tau: s.tau,
                shape: s.z.shape().dims(),
                z_tau: &enc[0],
                z: &enc[1],
                eps_cons: &enc[2],
                eps_param: &enc[3],
            };
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Runs the source branch. `eps_param` is the guided prediction at each
/// step, consumed by the first target branch.
pub fn sample_source<P: NoisePredictor + ?Sized>(
    z_src: &LatentTensor,
    predictor: &P,
    cond_src: &Conditioning,
    config: &SamplerConfig,
) -> Result<Trajectory> {
    let taus = config.timesteps()?;
    let schedule = &config.schedule;
    let mut z_tau = initial_latent(config.seed, z_src);
    let mut out = Trajectory::default();
    for (i, &tau) in taus.iter().enumerate() {
        let eps_param = predictor
            .predict_guided(&z_tau, tau, cond_src, config.guidance)
            .map_err(|e| e.with_context(format!("source branch, step {i}")))?
            .epsilon;
        let (eps_cons, z) = source_update(&z_tau, z_src, tau, schedule)?;
        let next = match taus.get(i + 1) {
            Some(&next_tau) => Some(renoise_step(&z, next_tau, &renoise_noise(config.seed, i, &z), schedule)?),
            None => None,
        };
        let current = std::mem::replace(&mut z_tau, next.clone().unwrap_or_else(|| z.clone()));
        out.steps.push(TrajectoryStep {
            step: i,
            tau,
            z_tau: current,
            z,
            eps_cons,
            eps_param,
        });
    }
    Ok(out)
}
