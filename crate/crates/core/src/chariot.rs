//! Generative steering: timestep rescheduling and variance-normalized noise mixing.
//!
//! A single scalar `s` in `[0, 1]` moves the operative timestep from the
//! predicted anchor toward the horizon and blends the inversion noise with
//! fresh Gaussian noise, rescaling the blend to a per-sample target energy.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::schedule::per_sample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Use the configured `s` for every sample.
    Fixed,
    /// Draw `s ~ U(0, 1)` independently per sample.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub s: f64,
    pub gamma_max: f64,
    pub t_max: usize,
    pub delta: f64,
    pub sampling_mode: SamplingMode,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            s: 0.6,
            gamma_max: 1.0,
            t_max: 1000,
            delta: 1e-8,
            sampling_mode: SamplingMode::Fixed,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        check_s(self.s)?;
        if !(self.gamma_max > 0.0 && self.gamma_max <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma_max {} not in (0, 1]", self.gamma_max)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument(format!("delta {} must be positive", self.delta)));
        }
        if self.t_max < 1 {
            return Err(Error::InvalidArgument("t_max must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("steering scalar {s} not in [0, 1]")));
    }
    Ok(())
}

/// `t_hat + s * (t_max - t_hat)`, written so both endpoints are exact.
pub fn reschedule(t_hat: f64, s: f64, t_max: usize) -> f64 {
    (1.0 - s) * t_hat + s * t_max as f64
}

/// Batched, differentiable [`reschedule`] with per-sample `s: (B,)`.
pub fn reschedule_tensor(t_hat: &Tensor, s: &Tensor, t_max: usize) -> Result<Tensor> {
    let s = s.to_dtype(t_hat.dtype())?;
    let keep = s.affine(-1.0, 1.0)?;
    Ok((t_hat.mul(&keep)? + (s * t_max as f64)?)?)
}

/// Population standard deviation over all non-batch dimensions, shape `(B,)`.
pub fn per_sample_std(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    let n = x.elem_count() / b.max(1);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("per-sample std needs at least 2 elements, got {n}")));
    }
    let flat = x.reshape((b, n))?;
    let centered = flat.broadcast_sub(&flat.mean_keepdim(1)?)?;
    Ok(centered.sqr()?.mean(1)?.sqrt()?)
}

/// Result of [`mix_noise`].
#[derive(Debug, Clone)]
pub struct MixedNoise {
    pub eps_mix: Tensor,
    /// Per-sample target standard deviation, `(B,)`.
    pub sigma_target: Tensor,
    /// Per-sample standard deviation of the inversion noise, `(B,)`.
    pub inv_std: Tensor,
}

/// Blends `eps_inv` with `eps` and renormalizes each sample to its target energy.
///
/// `s` holds one steering value per sample. The normalizer stays in the graph,
/// so gradients reach `eps_inv` through both the blend and its statistics.
pub fn mix_noise(eps_inv: &Tensor, eps: &Tensor, s: &[f64], cfg: &SteeringConfig) -> Result<MixedNoise> {
    if eps_inv.dims() != eps.dims() {
        return Err(Error::shape(eps_inv.dims(), eps.dims()));
    }
    let b = eps_inv.dim(0)?;
    if s.len() != b {
        return Err(Error::shape(b, s.len()));
    }
    for &v in s {
        check_s(v)?;
    }
    let gamma: Vec<f64> = s.iter().map(|v| v * cfg.gamma_max).collect();
    let keep: Vec<f64> = gamma.iter().map(|g| 1.0 - g).collect();
    let dev = eps_inv.device();
    let dt = eps_inv.dtype();
    let gamma = Tensor::from_vec(gamma, b, dev)?.to_dtype(dt)?;
    let keep = Tensor::from_vec(keep, b, dev)?.to_dtype(dt)?;

    let raw = (per_sample(&keep, eps_inv)?.broadcast_mul(eps_inv)?
        + per_sample(&gamma, eps)?.broadcast_mul(eps)?)?;
    let inv_std = per_sample_std(eps_inv)?;
    let sigma_target = (inv_std.mul(&keep)? + &gamma)?;
    let raw_std = per_sample_std(&raw)?;
    let raw_host = raw_std.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(sample) = raw_host.iter().position(|v| *v == 0.0) {
        return Err(Error::DegenerateNoise { sample });
    }
    let scale = sigma_target.div(&(raw_std + cfg.delta)?)?;
    let eps_mix = per_sample(&scale, &raw)?.broadcast_mul(&raw)?;
    Ok(MixedNoise { eps_mix, sigma_target, inv_std })
}
