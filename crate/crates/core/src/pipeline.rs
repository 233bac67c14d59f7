//! One-step restoration: encode, anchor, steer, denoise once, decode.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::chariot::{mix_noise, reschedule_tensor, MixedNoise, SteeringConfig};
use crate::codec::{Codec, CodecMode};
use crate::image::Image;
use crate::mine::{Mine, MineConfig};
use crate::nn::Params;
use crate::rng::{derive_seed, Rng};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::unet::{Denoiser, NoisePredictor, UNetConfig};
use crate::{Error, Result};

/// Architecture of every network in the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub sr_factor: usize,
    pub codec: CodecMode,
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub unet_channels: usize,
    pub unet_groups: usize,
    pub d_ctx: usize,
    pub prompt_tokens: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub query_tokens: usize,
    pub depth: usize,
    pub heads: usize,
    pub t_min: f64,
    pub t_max_anchor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            sr_factor: 4,
            codec: CodecMode::StridedConv,
            t_max: 1000,
            schedule: ScheduleKind::default(),
            unet_channels: 32,
            unet_groups: 8,
            d_ctx: 64,
            prompt_tokens: 4,
            patch_size: 2,
            embed_dim: 96,
            query_tokens: 4,
            depth: 4,
            heads: 6,
            t_min: 50.0,
            t_max_anchor: 450.0,
        }
    }
}

impl ModelConfig {
    pub fn latent_channels(&self) -> usize {
        self.codec.latent_channels(self.image_channels)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.codec.scale()
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: self.latent_channels(),
            base_channels: self.unet_channels,
            groups: self.unet_groups,
            time_dim: 64,
            emb_dim: 128,
            d_ctx: self.d_ctx,
            prompt_tokens: self.prompt_tokens,
            t_max: self.t_max,
            schedule: self.schedule,
        }
    }

    pub fn mine(&self) -> MineConfig {
        MineConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            num_query_tokens: self.query_tokens,
            depth: self.depth,
            num_heads: self.heads,
            mlp_ratio: 4,
            d_ctx: self.d_ctx,
            t_min: self.t_min,
            t_max_anchor: self.t_max_anchor,
            latent_channels: self.latent_channels(),
            latent_size: self.latent_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scale = self.codec.scale();
        if self.image_size % (self.sr_factor * scale * 2) != 0 || self.sr_factor == 0 {
            return Err(Error::Config(format!(
                "image size {} incompatible with SR factor {} and codec scale {scale}",
                self.image_size, self.sr_factor
            )));
        }
        if self.unet_channels % self.unet_groups != 0 {
            return Err(Error::Config(format!(
                "unet channels {} not divisible into {} groups",
                self.unet_channels, self.unet_groups
            )));
        }
        self.mine().validate(self.t_max)
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.t_max, self.schedule)
    }
}

/// `c_y + 1_S (x) c_deg`: `(S, d)` and `(B, d)` to `(B, S, d)`.
pub fn combine_conditioning(c_y: &Tensor, c_deg: &Tensor) -> Result<Tensor> {
    let (s, d) = c_y.dims2()?;
    let (b, d2) = c_deg.dims2()?;
    if d != d2 {
        return Err(Error::shape(d, d2));
    }
    Ok(c_y.unsqueeze(0)?.broadcast_add(&c_deg.unsqueeze(1)?)?.reshape((b, s, d))?)
}

/// How the diffusion anchor is chosen.
#[derive(Debug, Clone)]
pub enum Anchor {
    /// Predicted timestep and inversion noise.
    Adaptive,
    /// A constant timestep, with `noise` standing in for the inversion noise.
    Fixed { t: f64, noise: Tensor },
}

/// Every intermediate of one generator pass; tensors stay attached to the graph.
#[derive(Debug, Clone)]
pub struct Forward {
    pub t_hat: Tensor,
    pub t_mix: Tensor,
    pub c_deg: Tensor,
    pub eps_inv: Tensor,
    pub mix: MixedNoise,
    pub z_hat: Tensor,
    /// Decoded prediction before clamping.
    pub x_hat: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub seed: u64,
    pub s: f64,
    pub t_hat: f64,
    pub t_mix: f64,
    pub sigma_target: f64,
    pub eps_inv_std: f64,
}

#[derive(Debug, Clone)]
pub struct RestorationResult {
    pub images: Vec<Image>,
    pub diagnostics: Vec<Diagnostics>,
}

impl RestorationResult {
    pub fn t_hat(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.t_hat).collect()
    }

    pub fn t_mix(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.t_mix).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoreOptions {
    pub s: f64,
    pub seed: u64,
    /// Run even though the model carries no trained weights.
    pub allow_untrained: bool,
    /// Override the anchor with a constant timestep and fresh noise.
    pub fixed_t: Option<f64>,
}

impl RestoreOptions {
    pub fn new(s: f64, seed: u64) -> Self {
        Self { s, seed, allow_untrained: false, fixed_t: None }
    }
}

/// The one-step restorer.
pub struct Restorer<P = Denoiser> {
    pub config: ModelConfig,
    pub codec: Codec,
    pub mine: Mine,
    pub denoiser: P,
    pub schedule: NoiseSchedule,
    pub steering: SteeringConfig,
    pub trained: bool,
    device: Device,
}

impl Restorer<Denoiser> {
    /// Builds the networks from a generator accessor (codec and U-Net) and a
    /// MINE accessor.
    pub fn build(config: ModelConfig, generator: &Params, mine: &Params) -> Result<Self> {
        config.validate()?;
        let codec = Codec::new(&generator.pp("codec"), config.codec, config.image_channels)?;
        let denoiser = Denoiser::new(&generator.pp("unet"), config.unet())?;
        Restorer::with_denoiser(config, codec, Mine::new(mine, config.mine())?, denoiser, generator.device())
    }
}

impl<P: NoisePredictor> Restorer<P> {
    pub fn with_denoiser(config: ModelConfig, codec: Codec, mine: Mine, denoiser: P, device: &Device) -> Result<Self> {
        let schedule = config.build_schedule()?;
        let steering = SteeringConfig { t_max: config.t_max, ..Default::default() };
        Ok(Self { config, codec, mine, denoiser, schedule, steering, trained: false, device: device.clone() })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Bicubic pre-upsampling to the target resolution, clamped to `[0, 1]`.
    pub fn upsample(&self, lq: &[Image]) -> Result<Tensor> {
        let f = self.config.sr_factor;
        let up: Vec<Image> = lq.iter().map(|im| im.resize_bicubic(im.height() * f, im.width() * f).clamp01()).collect();
        Image::batch_to_tensor(&up, &self.device)
    }

    /// Generator pass from an encoded LQ latent with per-sample steering `s`
    /// and fresh Gaussian noise `eps`.
    pub fn forward(&self, z_l: &Tensor, s: &[f64], eps: &Tensor, anchor: &Anchor) -> Result<Forward> {
        let out = self.mine.forward(z_l)?;
        let b = z_l.dim(0)?;
        let (t_hat, eps_inv) = match anchor {
            Anchor::Adaptive => (out.t_hat, out.eps_inv),
            Anchor::Fixed { t, noise } => {
                if *t < 0.0 || *t > self.config.t_max as f64 {
                    return Err(Error::TimestepOutOfRange { value: *t, t_max: self.config.t_max });
                }
                (Tensor::full(*t as f32, b, &self.device)?, noise.clone())
            }
        };
        let s_t = Tensor::from_vec(s.iter().map(|v| *v as f32).collect::<Vec<_>>(), b, &self.device)?;
        let t_mix = reschedule_tensor(&t_hat, &s_t, self.config.t_max)?;
        let mix = mix_noise(&eps_inv, eps, s, &self.steering)?;
        let z_t = self.schedule.diffuse(z_l, &t_mix, &mix.eps_mix)?;
        let cond = combine_conditioning(self.denoiser.null_prompt(), &out.c_deg)?;
        let eps_hat = self.denoiser.predict(&z_t, &t_mix, &cond)?;
        let z_hat = self.schedule.denoise_one_step(&z_t, &eps_hat, &t_mix)?;
        let x_hat = self.codec.decode(&z_hat)?;
        Ok(Forward { t_hat, t_mix, c_deg: out.c_deg, eps_inv, mix, z_hat, x_hat })
    }

    /// Restores a batch of equally sized LQ images with one denoiser call.
    ///
    /// Fresh noise for the whole batch is drawn from `opts.seed`, so results
    /// depend on batch composition but are bit-reproducible for a given batch.
    pub fn restore(&self, lq: &[Image], opts: &RestoreOptions) -> Result<RestorationResult> {
        if !self.trained && !opts.allow_untrained {
            return Err(Error::Untrained);
        }
        crate::chariot::check_s(opts.s)?;
        let z_l = self.codec.encode(&self.upsample(lq)?)?;
        let mut rng = Rng::new(opts.seed);
        let eps = rng.normal_tensor(z_l.shape(), &self.device)?;
        let anchor = match opts.fixed_t {
            None => Anchor::Adaptive,
            Some(t) => Anchor::Fixed {
                t,
                noise: Rng::new(derive_seed(opts.seed, 1)).normal_tensor(z_l.shape(), &self.device)?,
            },
        };
        let s = vec![opts.s; lq.len()];
        let f = self.forward(&z_l, &s, &eps, &anchor)?;
        let images = Image::batch_from_tensor(&f.x_hat.clamp(0f32, 1f32)?)?;
        let host = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        let (t_hat, t_mix, sig) = (host(&f.t_hat)?, host(&f.t_mix)?, host(&f.mix.sigma_target)?);
        let inv_std = host(&f.mix.inv_std)?;
        let diagnostics = (0..lq.len())
            .map(|i| Diagnostics {
                seed: opts.seed,
                s: opts.s,
                t_hat: t_hat[i],
                t_mix: t_mix[i],
                sigma_target: sig[i],
                eps_inv_std: inv_std[i],
            })
            .collect();
        Ok(RestorationResult { images, diagnostics })
    }

    /// Restores in chunks of `batch`, seeding chunk `k` with `derive_seed(seed, k)`.
    pub fn restore_all(&self, lq: &[Image], opts: &RestoreOptions, batch: usize) -> Result<RestorationResult> {
        let mut images = Vec::with_capacity(lq.len());
        let mut diagnostics = Vec::with_capacity(lq.len());
        for (k, chunk) in lq.chunks(batch.max(1)).enumerate() {
            let o = RestoreOptions { seed: derive_seed(opts.seed, k as u64), ..*opts };
            let r = self.restore(chunk, &o)?;
            images.extend(r.images);
            diagnostics.extend(r.diagnostics.into_iter().map(|d| Diagnostics { seed: opts.seed, ..d }));
        }
        Ok(RestorationResult { images, diagnostics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn small_config() -> ModelConfig {
        ModelConfig { depth: 1, ..Default::default() }
    }

    fn model() -> Restorer {
        let dev = Device::Cpu;
        let (g, m) = (ParamStore::new(), ParamStore::new());
        Restorer::build(small_config(), &Params::init(&g, 1, &dev), &Params::init(&m, 2, &dev)).unwrap()
    }

    fn lq_batch(n: usize) -> Vec<Image> {
        (0..n).map(|i| crate::degradation::gen_clean(i as u64, 8)).collect()
    }

    #[test]
    fn conditioning_rows_shift_by_degradation_embedding() {
        let dev = Device::Cpu;
        let mut rng = Rng::new(3);
        let c_y = rng.normal_tensor((4, 6), &dev).unwrap();
        let c_deg = rng.normal_tensor((2, 6), &dev).unwrap();
        let out = combine_conditioning(&c_y, &c_deg).unwrap();
        assert_eq!(out.dims(), &[2, 4, 6]);
        let cy = c_y.to_vec2::<f32>().unwrap();
        let cd = c_deg.to_vec2::<f32>().unwrap();
        let o = out.to_vec3::<f32>().unwrap();
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..6 {
                    assert!((o[b][i][j] - (cy[i][j] + cd[b][j])).abs() < 1e-7);
                }
            }
        }
        let zero = Tensor::zeros((1, 6), DType::F32, &dev).unwrap();
        let same = combine_conditioning(&c_y, &zero).unwrap().squeeze(0).unwrap();
        assert_eq!(same.to_vec2::<f32>().unwrap(), cy);
        let zero_y = Tensor::zeros((4, 6), DType::F32, &dev).unwrap();
        let rows = combine_conditioning(&zero_y, &c_deg).unwrap().to_vec3::<f32>().unwrap();
        assert!(rows[1].iter().all(|r| r == &cd[1]));
        assert!(combine_conditioning(&c_y, &Tensor::zeros((1, 5), DType::F32, &dev).unwrap()).is_err());
    }

    #[test]
    fn untrained_model_needs_flag() {
        let m = model();
        let lq = lq_batch(2);
        assert!(matches!(m.restore(&lq, &RestoreOptions::new(0.0, 1)), Err(Error::Untrained)));
        let opts = RestoreOptions { allow_untrained: true, ..RestoreOptions::new(0.3, 1) };
        let r = m.restore(&lq, &opts).unwrap();
        assert_eq!(r.images.len(), 2);
        assert_eq!((r.images[0].height(), r.images[0].width()), (32, 32));
        assert!(r.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn restoration_is_seed_deterministic() {
        let m = model();
        let lq = lq_batch(3);
        let opts = RestoreOptions { allow_untrained: true, ..RestoreOptions::new(0.6, 42) };
        let a = m.restore(&lq, &opts).unwrap();
        let b = m.restore(&lq, &opts).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.diagnostics, b.diagnostics);
        let c = m.restore(&lq, &RestoreOptions { seed: 43, ..opts }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn steering_endpoints_in_diagnostics() {
        let m = model();
        let lq = lq_batch(2);
        let base = RestoreOptions { allow_untrained: true, ..RestoreOptions::new(0.0, 5) };
        let r0 = m.restore(&lq, &base).unwrap();
        assert_eq!(r0.t_hat(), r0.t_mix());
        let r1 = m.restore(&lq, &RestoreOptions { s: 1.0, ..base }).unwrap();
        assert!(r1.t_mix().iter().all(|t| *t == 1000.0));
        let fixed = m.restore(&lq, &RestoreOptions { fixed_t: Some(150.0), ..base }).unwrap();
        assert!(fixed.t_hat().iter().all(|t| *t == 150.0));
        assert!(m.restore(&lq, &RestoreOptions { s: 1.5, ..base }).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { image_size: 36, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { t_max_anchor: 2000.0, ..Default::default() }.validate().is_err());
        let c = ModelConfig { codec: CodecMode::Identity, ..Default::default() };
        assert_eq!((c.latent_channels(), c.latent_size()), (3, 32));
    }
}
