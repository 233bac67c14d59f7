//! Pretraining and diagnostics of the toy diffusion prior.

use candle_core::{Device, Tensor};

use super::losses::batch_prompt;
use crate::codec::Codec;
use crate::image::Image;
use crate::nn::layers::{mse, scalar};
use crate::nn::{AdamW, AdamWConfig, ParamStore, Params};
use crate::pipeline::ModelConfig;
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::unet::{Denoiser, NoisePredictor};
use crate::{Error, Result};

/// Noise-prediction training of the prior on reference-encoded clean latents.
pub struct PriorTrainer {
    pub store: ParamStore,
    pub net: Denoiser,
    codec: Codec,
    schedule: NoiseSchedule,
    opt: AdamW,
    pub iteration: u64,
}

impl PriorTrainer {
    pub fn new(config: &ModelConfig, seed: u64, opt: AdamWConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new();
        let net = Denoiser::new(&Params::init(&store, seed, device), config.unet())?;
        Self::from_store(config, store, net, opt)
    }

    /// Resumes from an existing parameter store.
    pub fn resume(config: &ModelConfig, store: ParamStore, opt: AdamWConfig, device: &Device) -> Result<Self> {
        let net = Denoiser::new(&Params::load(&store, device), config.unet())?;
        Self::from_store(config, store, net, opt)
    }

    fn from_store(config: &ModelConfig, store: ParamStore, net: Denoiser, opt: AdamWConfig) -> Result<Self> {
        Ok(Self {
            opt: AdamW::new(&store, opt)?,
            codec: Codec::reference(config.codec, config.image_channels),
            schedule: config.build_schedule()?,
            store,
            net,
            iteration: 0,
        })
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut AdamW {
        &mut self.opt
    }

    /// One step on a `(B, C, H, W)` batch of clean images; returns the loss.
    pub fn step(&mut self, hq: &Tensor, rng: &mut Rng) -> Result<f64> {
        let z0 = self.codec.encode(hq)?;
        let loss = noise_prediction_loss(&self.net, &self.schedule, &z0, rng, None)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { iteration: self.iteration, components: format!("prior={value}") });
        }
        self.opt.step(&loss.backward()?)?;
        self.iteration += 1;
        Ok(value)
    }
}

/// `||eps_net(diffuse(z0, t, eps); t, null) - eps||^2` with `t ~ U{1..T}`
/// unless a fixed `t` is given.
pub fn noise_prediction_loss(
    net: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    rng: &mut Rng,
    fixed_t: Option<f64>,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let t: Vec<f32> = (0..b)
        .map(|_| fixed_t.map(|t| t as f32).unwrap_or_else(|| rng.int_range(1, schedule.t_max()) as f32))
        .collect();
    let t = Tensor::from_vec(t, b, z0.device())?;
    let eps = rng.normal_tensor(z0.shape(), z0.device())?;
    let z_t = schedule.diffuse(z0, &t, &eps)?;
    let pred = net.predict(&z_t, &t, &batch_prompt(net.null_prompt(), b)?)?;
    mse(&pred, &eps)
}

/// Mean noise-prediction error at a fixed timestep over clean images.
pub fn eval_eps_mse(net: &Denoiser, codec: &Codec, schedule: &NoiseSchedule, hq: &Tensor, t: f64, seed: u64) -> Result<f64> {
    let z0 = codec.reference_encode(hq)?;
    let mut rng = Rng::new(seed);
    scalar(&noise_prediction_loss(net, schedule, &z0.detach(), &mut rng, Some(t))?.detach())
}

/// Ancestral sampling from pure noise with `steps` strided steps; latents are
/// clipped to the codec's range at every clean estimate.
pub fn sample_prior(
    net: &Denoiser,
    codec: &Codec,
    schedule: &NoiseSchedule,
    latent_shape: (usize, usize, usize),
    n: usize,
    steps: usize,
    seed: u64,
    device: &Device,
) -> Result<Vec<Image>> {
    let (c, h, w) = latent_shape;
    let t_max = schedule.t_max();
    let steps = steps.clamp(1, t_max);
    let mut rng = Rng::new(seed);
    let mut x = rng.normal_tensor((n, c, h, w), device)?;
    let cond = batch_prompt(&net.null_prompt().detach(), n)?;
    let (lo, hi) = codec.latent_range();
    let knots: Vec<usize> = (0..=steps).map(|i| t_max - i * t_max / steps).collect();
    for pair in knots.windows(2) {
        let (t, prev) = (pair[0], pair[1]);
        let (a_t, b_t) = (schedule.alphas()[t], schedule.betas()[t]);
        let a_prev = schedule.alphas()[prev];
        let (ab_t, ab_prev) = (a_t * a_t, a_prev * a_prev);
        let tt = Tensor::full(t as f32, n, device)?;
        let eps_hat = net.forward(&x, &tt, &cond)?.detach();
        let x0 = ((&x - (eps_hat * b_t)?)? / a_t)?.clamp(lo as f32, hi as f32)?;
        let eps_hat = ((&x - (&x0 * a_t)?)? / b_t)?;
        let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = ((&x0 * a_prev)? + (eps_hat * dir)?)?;
        if sigma > 0.0 {
            next = (next + (rng.normal_tensor(x.shape(), device)? * sigma)?)?;
        }
        x = next.detach();
    }
    Image::batch_from_tensor(&codec.decode(&x)?.clamp(0f32, 1f32)?)
}
