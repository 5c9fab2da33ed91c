//! Deterministic (η = 0) DDIM over a cumulative-signal schedule.

use crate::backend::ScheduleSpec;
use crate::error::{Result, TryOnError};
use crate::tensor::Latent;

/// `ᾱ_t` for inference steps `t = 0..=T`, with `ᾱ_0 = 1`, plus the model
/// timestep each step maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    model_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(TryOnError::argument("schedule needs at least one step"));
        }
        if model_timesteps.len() != alpha_bar.len() {
            return Err(TryOnError::argument("schedule timestep table has the wrong length"));
        }
        if alpha_bar[0] != 1.0 {
            return Err(TryOnError::argument("schedule must start at alpha_bar = 1"));
        }
        for pair in alpha_bar.windows(2) {
            if !(pair[1] > 0.0 && pair[1] < pair[0]) {
                return Err(TryOnError::argument(format!(
                    "alpha_bar must be strictly decreasing inside (0, 1]: {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(NoiseSchedule {
            alpha_bar,
            model_timesteps,
        })
    }

    /// Inference schedule with `steps` DDIM steps for a backend schedule.
    pub fn new(spec: &ScheduleSpec, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(TryOnError::argument("step count must be at least 1"));
        }
        match *spec {
            ScheduleSpec::LinearAlphaBar {
                alpha_bar_min,
                train_timesteps,
            } => {
                if !(alpha_bar_min > 0.0 && alpha_bar_min < 1.0) {
                    return Err(TryOnError::argument("alpha_bar_min must lie in (0, 1)"));
                }
                let alpha_bar = (0..=steps)
                    .map(|t| 1.0 - (t as f64 / steps as f64) * (1.0 - alpha_bar_min))
                    .collect();
                let last = train_timesteps.saturating_sub(1);
                let model = (0..=steps).map(|t| (t * last + steps / 2) / steps).collect();
                NoiseSchedule::from_alpha_bar(alpha_bar, model)
            }
            ScheduleSpec::ScaledLinear {
                beta_start,
                beta_end,
                train_timesteps,
            } => {
                if train_timesteps < steps {
                    return Err(TryOnError::argument("more inference steps than training steps"));
                }
                let n = train_timesteps;
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                let mut cumprod = Vec::with_capacity(n);
                let mut acc = 1.0;
                for i in 0..n {
                    let s = if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 };
                    acc *= 1.0 - s * s;
                    cumprod.push(acc);
                }
                let ratio = n / steps;
                let mut alpha_bar = vec![1.0];
                let mut model = vec![0];
                for t in 1..=steps {
                    let tau = t * ratio - 1;
                    alpha_bar.push(cumprod[tau]);
                    model.push(tau);
                }
                NoiseSchedule::from_alpha_bar(alpha_bar, model)
            }
        }
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(TryOnError::argument(format!(
                "timestep {t} outside schedule 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Diffusion state `z_t` at inference step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Latent,
    pub t: usize,
}

/// `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`.
pub fn forward_noise(z0: &Latent, t: usize, noise: &Latent, schedule: &NoiseSchedule) -> Result<LatentState> {
    schedule.check(t)?;
    z0.ensure_same_shape(noise, "forward_noise")?;
    let ab = schedule.alpha_bar(t);
    if ab == 1.0 {
        return Ok(LatentState { z: z0.clone(), t });
    }
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(LatentState {
        z: z0.zip_map(noise, |x, e| s * x + n * e)?,
        t,
    })
}

/// One η = 0 DDIM step from `t` to `t − 1`.
pub fn ddim_step(state: &LatentState, eps_hat: &Latent, schedule: &NoiseSchedule) -> Result<LatentState> {
    if state.t == 0 {
        return Err(TryOnError::StepUnderflow);
    }
    schedule.check(state.t)?;
    state.z.ensure_same_shape(eps_hat, "ddim_step")?;
    let ab_t = schedule.alpha_bar(state.t);
    let ab_prev = schedule.alpha_bar(state.t - 1);
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let z = state.z.zip_map(eps_hat, |z, e| {
        let x0 = (z - nt * e) / st;
        sp * x0 + np * e
    })?;
    Ok(LatentState { z, t: state.t - 1 })
}
