//! Objective terms of one-step distillation.

use candle_core::{DType, Tensor};

use super::discriminator::Discriminator;
use crate::codec::Codec;
use crate::nn::layers::mse;
use crate::schedule::{per_sample, NoiseSchedule};
use crate::unet::{Denoiser, NoisePredictor};
use crate::{Error, Result};

/// Broadcasts a `(S, d)` prompt embedding over a batch.
pub fn batch_prompt(prompt: &Tensor, b: usize) -> Result<Tensor> {
    let (s, d) = prompt.dims2()?;
    Ok(prompt.unsqueeze(0)?.broadcast_as((b, s, d))?.contiguous()?)
}

/// Hinge discriminator loss `E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]`.
pub fn disc_hinge(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = real.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let f = fake.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// Generator adversarial loss `-E[D(fake)]`.
pub fn gen_adversarial(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

/// `(L_D, L_G)` for given score maps.
pub fn gan_losses_from_scores(real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((disc_hinge(real, fake)?, gen_adversarial(fake)?))
}

/// `(L_D, L_G)` for a discriminator; the real latent is detached first.
pub fn gan_losses(d: &Discriminator, z_real: &Tensor, z_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    gan_losses_from_scores(&d.forward(&z_real.detach())?, &d.forward(z_fake)?)
}

/// LPIPS-style distance between the prior's encoder activations of two
/// images, evaluated at the clean timestep under the prior's null prompt.
/// Each activation vector is unit-normalized over channels; squared
/// differences are summed over channels, averaged over positions and summed
/// over layers. Shape `(B,)`.
pub fn perceptual_proxy(prior: &Denoiser, codec: &Codec, x_hat: &Tensor, x_ref: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x_ref.dims() {
        return Err(Error::shape(x_ref.dims(), x_hat.dims()));
    }
    let b = x_hat.dim(0)?;
    let t = Tensor::zeros(b, DType::F32, x_hat.device())?;
    let cond = batch_prompt(&prior.null_prompt().detach(), b)?;
    let fa = prior.features(&codec.reference_encode(x_hat)?, &t, &cond)?;
    let fb = prior.features(&codec.reference_encode(&x_ref.detach())?, &t, &cond)?;
    let mut total = Tensor::zeros(b, x_hat.dtype(), x_hat.device())?;
    for (a, r) in fa.iter().zip(&fb) {
        let d = (unit_channels(a)? - unit_channels(&r.detach())?)?.sqr()?.sum_keepdim(3)?;
        total = (total + d.flatten_from(1)?.mean(1)?)?;
    }
    Ok(total)
}

/// Normalizes `(B, H, W, C)` activations to unit length over channels.
fn unit_channels(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(3)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Per-sample mean squared error, shape `(B,)`.
pub fn mse_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok((a - b)?.sqr()?.flatten_from(1)?.mean(1)?)
}

/// Batch mean of `v`, optionally weighted per sample.
fn weighted_mean(v: &Tensor, w: Option<&Tensor>) -> Result<Tensor> {
    Ok(match w {
        None => v.mean_all()?,
        Some(w) => v.mul(&w.detach().to_dtype(v.dtype())?)?.mean_all()?,
    })
}

/// Per-sample data-loss weight `min(1, SNR(t_mix) / SNR(t_hat))`.
///
/// Samples steered towards pure noise decode through a `1 / alpha` gain, so
/// their pixel error would otherwise dominate the batch.
pub fn snr_weights(schedule: &NoiseSchedule, t_hat: &[f64], t_mix: &[f64]) -> Result<Vec<f64>> {
    let snr = |t: f64| -> Result<f64> {
        let (a, b) = schedule.interp(t)?;
        Ok(a * a / (b * b).max(f64::MIN_POSITIVE))
    };
    t_hat.iter().zip(t_mix).map(|(&th, &tm)| Ok((snr(tm)? / snr(th)?).min(1.0))).collect()
}

#[derive(Debug, Clone)]
pub struct DataLoss {
    pub l2: Tensor,
    pub perc: Tensor,
    pub total: Tensor,
}

/// `L2 + lambda * perc`.
pub fn combine_data_loss(l2: &Tensor, perc: &Tensor, lambda_lpips: f64) -> Result<Tensor> {
    Ok((l2 + (perc * lambda_lpips)?)?)
}

/// `L2 + lambda * perc`, each averaged over the batch with optional
/// per-sample `weights` of shape `(B,)`.
pub fn data_loss(
    prior: &Denoiser,
    codec: &Codec,
    x_hat: &Tensor,
    x: &Tensor,
    lambda_lpips: f64,
    weights: Option<&Tensor>,
) -> Result<DataLoss> {
    // measured on the [-1, 1] image range
    let l2 = weighted_mean(&(mse_per_sample(x_hat, x)? * 4.0)?, weights)?;
    let perc = weighted_mean(&perceptual_proxy(prior, codec, x_hat, x)?, weights)?;
    let total = combine_data_loss(&l2, &perc, lambda_lpips)?;
    Ok(DataLoss { l2, perc, total })
}

/// Random draws for one score-distillation evaluation.
#[derive(Debug, Clone)]
pub struct DiffusionDraw {
    /// Integer timesteps in `[0.02 T, 0.98 T]`, shape `(B,)`.
    pub t: Tensor,
    pub eps: Tensor,
}

impl DiffusionDraw {
    pub fn sample(rng: &mut crate::rng::Rng, like: &Tensor, t_max: usize) -> Result<Self> {
        let b = like.dim(0)?;
        let (lo, hi) = draw_range(t_max);
        let t: Vec<f32> = (0..b).map(|_| rng.int_range(lo, hi) as f32).collect();
        Ok(Self {
            t: Tensor::from_vec(t, b, like.device())?,
            eps: rng.normal_tensor(like.shape(), like.device())?,
        })
    }
}

/// Inclusive timestep range of score-distillation draws. The ends are left
/// out because the normalized gap is ill-conditioned there.
pub fn draw_range(t_max: usize) -> (usize, usize) {
    let lo = ((t_max as f64 * 0.02).round() as usize).max(1);
    let hi = ((t_max as f64 * 0.98).round() as usize).max(lo);
    (lo, hi)
}

#[derive(Debug, Clone)]
pub struct VsdTerms {
    /// Scalar whose gradient with respect to the generated latent is the
    /// score-distillation gradient.
    pub surrogate: Tensor,
    /// Regularizer prediction on the detached noisy latent; still attached to
    /// the regularizer's parameters.
    pub ft_pred: Tensor,
}

/// Score distillation between a frozen prior and a finetuned regularizer.
///
/// Both networks see a detached copy of `z_t` and their predictions are
/// turned into clean-latent estimates. The gap `x0_ft - x0_pre` is divided
/// per sample by `mean |z_hat - x0_pre|`, and the surrogate is
/// `mean(sg(gap) * z_hat)`, so the gradient reaching `z_hat` is the
/// normalized gap over `numel`.
pub fn vsd_loss(
    z_hat: &Tensor,
    prior: &dyn NoisePredictor,
    ft: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    draw: &DiffusionDraw,
) -> Result<VsdTerms> {
    let b = z_hat.dim(0)?;
    let z_in = schedule.diffuse(&z_hat.detach(), &draw.t, &draw.eps)?;
    let pre = prior.predict(&z_in, &draw.t, &batch_prompt(&prior.null_prompt().detach(), b)?)?;
    let ft_pred = ft.predict(&z_in, &draw.t, &batch_prompt(ft.null_prompt(), b)?)?;
    let x0_pre = schedule.denoise_one_step(&z_in, &pre.detach(), &draw.t)?;
    let x0_ft = schedule.denoise_one_step(&z_in, &ft_pred.detach(), &draw.t)?;
    let scale = (z_hat.detach() - &x0_pre)?.abs()?.flatten_from(1)?.mean(1)?.affine(1.0, VSD_SCALE_FLOOR)?;
    let gap = (x0_ft - x0_pre)?.broadcast_div(&per_sample(&scale, z_hat)?)?;
    let surrogate = gap.mul(z_hat)?.mean_all()?;
    Ok(VsdTerms { surrogate, ft_pred })
}

const VSD_SCALE_FLOOR: f64 = 1e-6;

/// Noise-prediction loss of the regularizer on a detached generated latent.
pub fn diff_loss(ft: &dyn NoisePredictor, z_hat: &Tensor, schedule: &NoiseSchedule, draw: &DiffusionDraw) -> Result<Tensor> {
    let b = z_hat.dim(0)?;
    let z_t = schedule.diffuse(&z_hat.detach(), &draw.t, &draw.eps)?;
    let pred = ft.predict(&z_t, &draw.t, &batch_prompt(ft.null_prompt(), b)?)?;
    mse(&pred, &draw.eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::scalar;
    use crate::nn::{ParamStore, Params};
    use crate::rng::Rng;
    use crate::schedule::ScheduleKind;
    use candle_core::{Device, Var};

    fn full(v: f32, shape: (usize, usize, usize)) -> Tensor {
        Tensor::full(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn hinge_arithmetic() {
        let s = (2, 4, 4);
        let (d, _) = gan_losses_from_scores(&full(1.0, s), &full(-1.0, s)).unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
        let (d, g) = gan_losses_from_scores(&full(0.0, s), &full(0.0, s)).unwrap();
        assert_eq!((scalar(&d).unwrap(), scalar(&g).unwrap()), (2.0, 0.0));
        let (d, g) = gan_losses_from_scores(&full(-0.5, s), &full(0.5, s)).unwrap();
        assert_eq!((scalar(&d).unwrap(), scalar(&g).unwrap()), (3.0, -0.5));
    }

    #[test]
    fn perceptual_proxy_is_zero_on_matches_and_grows_with_noise() {
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let prior = Denoiser::new(&Params::init(&store, 6, &dev), crate::unet::UNetConfig::default()).unwrap();
        let codec = Codec::reference(crate::codec::CodecMode::StridedConv, 3);
        let mut rng = Rng::new(8);
        let x = rng.normal_tensor((2, 3, 32, 32), &dev).unwrap().affine(0.2, 0.5).unwrap();
        let noise = rng.normal_tensor((2, 3, 32, 32), &dev).unwrap();
        let d = |a: f64| -> Vec<f32> {
            let y = (&x + (&noise * a).unwrap()).unwrap();
            perceptual_proxy(&prior, &codec, &y, &x).unwrap().to_vec1().unwrap()
        };
        assert_eq!(d(0.0), vec![0.0, 0.0]);
        let (small, large) = (d(0.02), d(0.2));
        for i in 0..2 {
            assert!(small[i] > 0.0 && small[i] < large[i], "{small:?} {large:?}");
        }
    }

    #[test]
    fn draws_avoid_the_schedule_ends() {
        assert_eq!(draw_range(1000), (20, 980));
        assert_eq!(draw_range(10), (1, 10));
        let mut rng = Rng::new(4);
        let z = Tensor::zeros((64, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let t: Vec<f32> = DiffusionDraw::sample(&mut rng, &z, 1000).unwrap().t.to_vec1().unwrap();
        assert!(t.iter().all(|v| (20.0..=980.0).contains(v)));
    }

    #[test]
    fn data_loss_combination() {
        let dev = Device::Cpu;
        let l2 = Tensor::new(0.01f64, &dev).unwrap();
        let perc = Tensor::new(0.05f64, &dev).unwrap();
        assert!((scalar(&combine_data_loss(&l2, &perc, 2.0).unwrap()).unwrap() - 0.11).abs() < 1e-15);
        assert_eq!(scalar(&combine_data_loss(&l2, &perc, 0.0).unwrap()).unwrap(), 0.01);
    }

    /// Constant-output noise predictor.
    struct ConstPredictor {
        value: Tensor,
        prompt: Tensor,
    }

    impl NoisePredictor for ConstPredictor {
        fn predict(&self, z_t: &Tensor, _t: &Tensor, _c: &Tensor) -> Result<Tensor> {
            Ok(self.value.broadcast_as(z_t.shape())?.contiguous()?)
        }
        fn null_prompt(&self) -> &Tensor {
            &self.prompt
        }
    }

    fn konst(v: Tensor) -> ConstPredictor {
        ConstPredictor { value: v, prompt: Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap() }
    }

    #[test]
    fn vsd_gradient_is_normalized_clean_estimate_gap() {
        let dev = Device::Cpu;
        let schedule = NoiseSchedule::build(1000, ScheduleKind::default()).unwrap();
        let mut rng = Rng::new(3);
        let z = Var::from_tensor(&rng.normal_tensor((2, 1, 2, 2), &dev).unwrap().to_dtype(DType::F64).unwrap()).unwrap();
        let pre_v = rng.normal_tensor((1, 1, 2, 2), &dev).unwrap().to_dtype(DType::F64).unwrap();
        let ft_v = rng.normal_tensor((1, 1, 2, 2), &dev).unwrap().to_dtype(DType::F64).unwrap();
        let draw = DiffusionDraw {
            t: Tensor::new(&[137f64, 802.], &dev).unwrap(),
            eps: rng.normal_tensor((2, 1, 2, 2), &dev).unwrap().to_dtype(DType::F64).unwrap(),
        };
        let (pre, ft) = (konst(pre_v.clone()), konst(ft_v.clone()));
        let terms = vsd_loss(z.as_tensor(), &pre, &ft, &schedule, &draw).unwrap();
        let grad = terms.surrogate.backward().unwrap().get(z.as_tensor()).unwrap().clone();
        let n = 8.0;
        let g: Vec<f64> = grad.flatten_all().unwrap().to_vec1().unwrap();
        let zv: Vec<f64> = z.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let ev: Vec<f64> = draw.eps.flatten_all().unwrap().to_vec1().unwrap();
        let pv: Vec<f64> = pre_v.flatten_all().unwrap().to_vec1().unwrap();
        let fv: Vec<f64> = ft_v.flatten_all().unwrap().to_vec1().unwrap();
        for b in 0..2 {
            let k = [137, 802][b];
            let (a, s) = (schedule.alphas()[k], schedule.betas()[k]);
            let x0 = |i: usize, e: f64| (a * zv[b * 4 + i] + s * ev[b * 4 + i] - s * e) / a;
            let scale = (0..4).map(|i| (zv[b * 4 + i] - x0(i, pv[i])).abs()).sum::<f64>() / 4.0 + VSD_SCALE_FLOOR;
            for i in 0..4 {
                let expect = (x0(i, fv[i]) - x0(i, pv[i])) / scale / n;
                assert!((g[b * 4 + i] - expect).abs() < 1e-12 * expect.abs().max(1.0), "{} vs {expect}", g[b * 4 + i]);
                // descent moves towards the prior's estimate
                assert_eq!(expect.signum(), (pv[i] - fv[i]).signum());
            }
        }
    }

    #[test]
    fn vsd_vanishes_for_identical_networks() {
        let dev = Device::Cpu;
        let store = ParamStore::new();
        let net = Denoiser::new(&Params::init(&store, 4, &dev), crate::unet::UNetConfig::default()).unwrap();
        store.get("conv_out.weight").unwrap().set(&(Rng::new(1).normal_tensor((9 * 32, 12), &dev).unwrap() * 0.05).unwrap()).unwrap();
        let copy = store.deep_copy().unwrap();
        let twin = Denoiser::new(&Params::load(&copy, &dev), crate::unet::UNetConfig::default()).unwrap();
        let schedule = NoiseSchedule::build(1000, ScheduleKind::default()).unwrap();
        let mut rng = Rng::new(2);
        let z = Var::from_tensor(&rng.normal_tensor((2, 12, 16, 16), &dev).unwrap()).unwrap();
        let draw = DiffusionDraw::sample(&mut rng, z.as_tensor(), 1000).unwrap();
        let terms = vsd_loss(z.as_tensor(), &net, &twin, &schedule, &draw).unwrap();
        let g = terms.surrogate.backward().unwrap().get(z.as_tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(g.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn diff_loss_baselines_and_isolation() {
        let dev = Device::Cpu;
        let schedule = NoiseSchedule::build(1000, ScheduleKind::default()).unwrap();
        let mut rng = Rng::new(5);
        let z = Var::from_tensor(&rng.normal_tensor((4, 2, 8, 8), &dev).unwrap().to_dtype(DType::F64).unwrap()).unwrap();
        let draw = DiffusionDraw::sample(&mut rng, z.as_tensor(), 1000).unwrap();
        let draw = DiffusionDraw { t: draw.t.to_dtype(DType::F64).unwrap(), eps: draw.eps.to_dtype(DType::F64).unwrap() };
        let oracle = konst(draw.eps.clone());
        assert_eq!(scalar(&diff_loss(&oracle, z.as_tensor(), &schedule, &draw).unwrap()).unwrap(), 0.0);
        let zero = konst(Tensor::zeros((1, 2, 8, 8), DType::F64, &dev).unwrap());
        let l = diff_loss(&zero, z.as_tensor(), &schedule, &draw).unwrap();
        assert!((scalar(&l).unwrap() - 1.0).abs() < 0.15);
        assert!(l.backward().unwrap().get(z.as_tensor()).is_none());
    }
}
