//! Small conditional U-Net noise predictor.
//!
//! The network body `F` is read as a velocity: the noise estimate is
//! `beta_t * z_t + alpha_t * F`, so the implied clean latent
//! `alpha_t * z_t - beta_t * F` stays bounded at large `t`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::nn::layers::{silu, timestep_embedding, upsample2_nhwc, Conv3x3, Down2, GroupNorm, Linear};
use crate::nn::{Init, Params};
use crate::schedule::{per_sample, NoiseSchedule, ScheduleKind};
use crate::{Error, Result};

/// Anything that predicts the noise in a latent: the U-Net, or a test oracle.
pub trait NoisePredictor {
    /// Noise estimate for `z_t: (B, C, H, W)` at timesteps `t: (B,)` under
    /// conditioning `cond: (B, S, d_ctx)`.
    fn predict(&self, z_t: &Tensor, t: &Tensor, cond: &Tensor) -> Result<Tensor>;

    /// Learned null-prompt embedding, `(S, d_ctx)`.
    fn null_prompt(&self) -> &Tensor;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub d_ctx: usize,
    pub prompt_tokens: usize,
    pub t_max: usize,
    pub schedule: ScheduleKind,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 12,
            base_channels: 32,
            groups: 8,
            time_dim: 64,
            emb_dim: 128,
            d_ctx: 64,
            prompt_tokens: 4,
            t_max: 1000,
            schedule: ScheduleKind::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    film: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new(p: &Params, in_ch: usize, out_ch: usize, cfg: &UNetConfig) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), in_ch, cfg.groups)?,
            conv1: Conv3x3::new(&p.pp("conv1"), in_ch, out_ch)?,
            film: Linear::zeroed(&p.pp("film"), cfg.emb_dim, 2 * out_ch)?,
            norm2: GroupNorm::new(&p.pp("norm2"), out_ch, cfg.groups)?,
            conv2: Conv3x3::new(&p.pp("conv2"), out_ch, out_ch)?,
            skip: if in_ch == out_ch { None } else { Some(Linear::new(&p.pp("skip"), in_ch, out_ch)?) },
        })
    }

    /// `x: (B, H, W, C)`, `emb: (B, E)` already activated.
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let (b, _, _, c) = h.dims4()?;
        let ss = self.film.forward(emb)?.reshape((b, 1, 1, 2 * c))?;
        let scale = ss.narrow(3, 0, c)?;
        let shift = ss.narrow(3, c, c)?;
        let h = self.norm2.forward(&h)?.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        let h = self.conv2.forward(&silu(&h)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Two-level U-Net with FiLM conditioning on timestep and prompt embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: UNetConfig,
    schedule: NoiseSchedule,
    null_prompt: Tensor,
    t_fc1: Linear,
    t_fc2: Linear,
    cond_proj: Linear,
    conv_in: Conv3x3,
    block1: ResBlock,
    down: Down2,
    block2: ResBlock,
    mid: ResBlock,
    up2: ResBlock,
    up_conv: Conv3x3,
    up1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
}

impl Denoiser {
    pub fn new(p: &Params, cfg: UNetConfig) -> Result<Self> {
        let b = cfg.base_channels;
        let c = cfg.latent_channels;
        Ok(Self {
            null_prompt: p.get("null_prompt", (cfg.prompt_tokens, cfg.d_ctx), Init::Normal(0.02))?,
            t_fc1: Linear::new(&p.pp("time.fc1"), cfg.time_dim, cfg.emb_dim)?,
            t_fc2: Linear::new(&p.pp("time.fc2"), cfg.emb_dim, cfg.emb_dim)?,
            cond_proj: Linear::new(&p.pp("cond_proj"), cfg.d_ctx, cfg.emb_dim)?,
            conv_in: Conv3x3::new(&p.pp("conv_in"), c, b)?,
            block1: ResBlock::new(&p.pp("block1"), b, b, &cfg)?,
            down: Down2::new(&p.pp("down"), b, 2 * b)?,
            block2: ResBlock::new(&p.pp("block2"), 2 * b, 2 * b, &cfg)?,
            mid: ResBlock::new(&p.pp("mid"), 2 * b, 2 * b, &cfg)?,
            up2: ResBlock::new(&p.pp("up2"), 4 * b, 2 * b, &cfg)?,
            up_conv: Conv3x3::new(&p.pp("up_conv"), 2 * b, b)?,
            up1: ResBlock::new(&p.pp("up1"), 2 * b, b, &cfg)?,
            norm_out: GroupNorm::new(&p.pp("norm_out"), b, cfg.groups)?,
            conv_out: Conv3x3::with_init(&p.pp("conv_out"), b, c, Init::Zeros)?,
            schedule: NoiseSchedule::build(cfg.t_max, cfg.schedule)?,
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    fn embedding(&self, t: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, s, d) = cond.dims3()?;
        if d != self.cfg.d_ctx || t.dims() != [b] {
            return Err(Error::shape(format!("(B,), (B, S, {})", self.cfg.d_ctx), (t.dims(), (b, s, d))));
        }
        let temb = timestep_embedding(t, self.cfg.time_dim)?;
        let temb = self.t_fc2.forward(&silu(&self.t_fc1.forward(&temb)?)?)?;
        let cemb = self.cond_proj.forward(&cond.mean(1)?)?;
        silu(&(temb + cemb)?)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.cfg.latent_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("({}, even, even)", self.cfg.latent_channels), (c, h, w)));
        }
        Ok(())
    }

    /// Encoder activations used by the perceptual proxy, each `(B, H, W, C)`.
    pub fn features(&self, z: &Tensor, t: &Tensor, cond: &Tensor) -> Result<Vec<Tensor>> {
        self.check_latent(z)?;
        let emb = self.embedding(t, cond)?;
        let x = z.permute((0, 2, 3, 1))?;
        let h0 = self.conv_in.forward(&x)?;
        let h1 = self.block1.forward(&h0, &emb)?;
        let h2 = self.block2.forward(&self.down.forward(&h1)?, &emb)?;
        Ok(vec![h0, h1, h2])
    }

    /// Raw network output `F`.
    pub fn forward(&self, z: &Tensor, t: &Tensor, cond: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let emb = self.embedding(t, cond)?;
        let x = z.permute((0, 2, 3, 1))?;
        let h0 = self.conv_in.forward(&x)?;
        let h1 = self.block1.forward(&h0, &emb)?;
        let h2 = self.block2.forward(&self.down.forward(&h1)?, &emb)?;
        let m = self.mid.forward(&h2, &emb)?;
        let u2 = self.up2.forward(&Tensor::cat(&[m, h2], D::Minus1)?, &emb)?;
        let u = self.up_conv.forward(&upsample2_nhwc(&u2)?)?;
        let u1 = self.up1.forward(&Tensor::cat(&[u, h1], D::Minus1)?, &emb)?;
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&u1)?)?)?;
        Ok(out.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, t: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let f = self.forward(z_t, t, cond)?;
        let (alpha, beta) = self.schedule.interp_tensor(t)?;
        Ok((per_sample(&beta, z_t)?.broadcast_mul(z_t)? + per_sample(&alpha, &f)?.broadcast_mul(&f)?)?)
    }

    fn null_prompt(&self) -> &Tensor {
        &self.null_prompt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::Rng;
    use candle_core::{DType, Device};

    fn setup() -> (ParamStore, Denoiser) {
        let store = ParamStore::new();
        let net = Denoiser::new(&Params::init(&store, 11, &Device::Cpu), UNetConfig::default()).unwrap();
        (store, net)
    }

    #[test]
    fn shapes_and_parameter_budget() {
        let (store, net) = setup();
        assert!(store.num_elements() <= 2_000_000, "{}", store.num_elements());
        let mut rng = Rng::new(1);
        let z = rng.normal_tensor((2, 12, 16, 16), &Device::Cpu).unwrap();
        let t = Tensor::new(&[10f32, 700.5], &Device::Cpu).unwrap();
        let cond = net.null_prompt().unsqueeze(0).unwrap().repeat((2, 1, 1)).unwrap();
        assert_eq!(net.forward(&z, &t, &cond).unwrap().dims(), z.dims());
        let f = net.features(&z, &t, &cond).unwrap();
        assert_eq!(f[0].dims(), &[2, 16, 16, 32]);
        assert_eq!(f[2].dims(), &[2, 8, 8, 64]);
        let bad = rng.normal_tensor((2, 3, 16, 16), &Device::Cpu).unwrap();
        assert!(net.forward(&bad, &t, &cond).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient_after_output_layer_moves() {
        let (store, net) = setup();
        // the zero-initialised output conv blocks gradient to everything upstream
        store.get("conv_out.weight").unwrap().set(&Tensor::full(0.01f32, (9 * 32, 12), &Device::Cpu).unwrap()).unwrap();
        for (name, var) in store.vars() {
            if name.ends_with("film.weight") {
                var.set(&Tensor::full(0.01f32, var.shape(), &Device::Cpu).unwrap()).unwrap();
            }
        }
        let mut rng = Rng::new(2);
        let z = rng.normal_tensor((2, 12, 8, 8), &Device::Cpu).unwrap();
        let t = Tensor::new(&[3f32, 400.], &Device::Cpu).unwrap();
        let cond = net.null_prompt().unsqueeze(0).unwrap().repeat((2, 1, 1)).unwrap();
        let loss = net.forward(&z, &t, &cond).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
            let n = g.to_dtype(DType::F64).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(n > 0.0, "zero gradient for {name}");
        }
    }
}
