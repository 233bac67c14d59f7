//! Property checks that need no trained model, plus the oracle denoiser used
//! to verify the inversion algebra end to end.

use std::cell::{Cell, RefCell};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};

use crate::chariot::{mix_noise, per_sample_std, reschedule, SteeringConfig};
use crate::codec::Codec;
use crate::degradation::{gen_clean, make_pair, CleanSource, Severity};
use crate::image::Image;
use crate::mine::Mine;
use crate::nn::layers::scalar;
use crate::nn::{ParamStore, Params};
use crate::pipeline::{ModelConfig, RestoreOptions, Restorer};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::training::losses::gan_losses_from_scores;
use crate::unet::NoisePredictor;
use crate::{Error, Result};

/// Returns the noise that maps `z_t` back onto a stored anchor latent:
/// `(z_t - alpha_t z_anchor) / beta_t`. A one-step restorer using it
/// reproduces the anchor exactly, whatever the steering.
pub struct OracleDenoiser {
    schedule: NoiseSchedule,
    anchor: RefCell<Option<Tensor>>,
    calls: Cell<usize>,
    prompt: Tensor,
}

impl OracleDenoiser {
    pub fn new(config: &ModelConfig, device: &Device) -> Result<Self> {
        Ok(Self {
            schedule: config.build_schedule()?,
            anchor: RefCell::new(None),
            calls: Cell::new(0),
            prompt: Tensor::zeros((config.prompt_tokens, config.d_ctx), DType::F32, device)?,
        })
    }

    pub fn set_anchor(&self, z: Tensor) {
        *self.anchor.borrow_mut() = Some(z);
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl NoisePredictor for OracleDenoiser {
    fn predict(&self, z_t: &Tensor, t: &Tensor, _cond: &Tensor) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        let anchor = self.anchor.borrow();
        let z = anchor.as_ref().ok_or_else(|| Error::InvalidArgument("oracle denoiser has no anchor".into()))?;
        let (a, b) = self.schedule.interp_tensor(t)?;
        let a = crate::schedule::per_sample(&a, z_t)?;
        let b = crate::schedule::per_sample(&b, z_t)?;
        Ok(((z_t - z.broadcast_mul(&a)?)?.broadcast_div(&b))?)
    }

    fn null_prompt(&self) -> &Tensor {
        &self.prompt
    }
}

/// Restorer around an untrained codec and MINE with the oracle denoiser.
pub fn oracle_restorer(config: ModelConfig, seed: u64, device: &Device) -> Result<Restorer<OracleDenoiser>> {
    let (g, m) = (ParamStore::new(), ParamStore::new());
    let codec = Codec::new(&Params::init(&g, seed, device).pp("codec"), config.codec, config.image_channels)?;
    let mine = Mine::new(&Params::init(&m, seed ^ 1, device), config.mine())?;
    let oracle = OracleDenoiser::new(&config, device)?;
    let mut r = Restorer::with_denoiser(config, codec, mine, oracle, device)?;
    r.trained = true;
    Ok(r)
}

/// Max abs deviation of `restore(lq, s)` from `decode(encode(upsample(lq)))`.
pub fn oracle_inversion_error(r: &Restorer<OracleDenoiser>, lq: &[Image], s: f64, seed: u64) -> Result<f64> {
    let z_l = r.codec.encode(&r.upsample(lq)?)?;
    let expected = r.codec.decode(&z_l)?.clamp(0f32, 1f32)?;
    r.denoiser.set_anchor(z_l);
    let out = r.restore(lq, &RestoreOptions::new(s, seed))?;
    let got = Image::batch_to_tensor(&out.images, r.device())?;
    scalar(&(got - expected)?.abs()?.flatten_all()?.max(0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type Check = fn() -> Result<(bool, String)>;

fn check_schedule() -> Result<(bool, String)> {
    let s = NoiseSchedule::build(1000, Default::default())?;
    let mut worst = 0f64;
    for t in 0..=1000 {
        worst = worst.max((s.alphas()[t].powi(2) + s.betas()[t].powi(2) - 1.0).abs());
    }
    let mono = s.alphas().windows(2).all(|w| w[1] < w[0]) && s.betas().windows(2).all(|w| w[1] > w[0]);
    let (a, b) = s.interp(100.5)?;
    let mid = ((s.alphas()[100] + s.alphas()[101]) / 2.0 - a).abs() + ((s.betas()[100] + s.betas()[101]) / 2.0 - b).abs();
    let knots = (0..=1000).step_by(50).all(|t| s.interp(t as f64).map(|c| c == (s.alphas()[t], s.betas()[t])).unwrap_or(false));
    let ok = worst < 1e-6 && mono && mid < 1e-15 && knots && s.alphas()[0] == 1.0 && s.betas()[0] == 0.0;
    Ok((ok, format!("VP residual {worst:.1e}, monotone {mono}, exact knots {knots}")))
}

fn check_steering() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let cfg = SteeringConfig::default();
    let mut rng = Rng::new(11);
    let inv = (rng.normal_tensor((4, 12, 8, 8), &dev)? * 0.4)?;
    let eps = rng.normal_tensor((4, 12, 8, 8), &dev)?;
    let m0 = mix_noise(&inv, &eps, &[0.0; 4], &cfg)?;
    let rel = scalar(&((&m0.eps_mix - &inv)?.abs()?.flatten_all()?.max(0)? / scalar(&inv.abs()?.flatten_all()?.max(0)?)?)?)?;
    let m1 = mix_noise(&inv, &eps, &[1.0; 4], &cfg)?;
    let std1 = per_sample_std(&m1.eps_mix)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let unit = std1.iter().all(|v| (v - 1.0).abs() < 1e-5);
    let ends = reschedule(123.4, 0.0, 1000) == 123.4 && reschedule(123.4, 1.0, 1000) == 1000.0;
    let mut worst = 0f64;
    for k in 0..50 {
        let s: Vec<f64> = (0..4).map(|i| 0.05 + 0.9 * ((k * 4 + i) as f64 / 200.0)).collect();
        let inv = (rng.normal_tensor((4, 12, 8, 8), &dev)? * rng.uniform_range(0.05, 2.0))?;
        let eps = rng.normal_tensor((4, 12, 8, 8), &dev)?;
        let m = mix_noise(&inv, &eps, &s, &cfg)?;
        let d = (per_sample_std(&m.eps_mix)? - &m.sigma_target)?.abs()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        worst = d.iter().copied().fold(worst, f64::max);
    }
    let ok = rel < 1e-6 && unit && ends && worst < 1e-5;
    Ok((ok, format!("s=0 rel dev {rel:.1e}, s=1 unit std {unit}, endpoints {ends}, normalization error {worst:.1e}")))
}

fn check_timestep_bounds() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let cfg = ModelConfig::default();
    let store = ParamStore::new();
    let mine = Mine::new(&Params::init(&store, 5, &dev), cfg.mine())?;
    let mut rng = Rng::new(6);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..4 {
        let z = (rng.normal_tensor((32, cfg.latent_channels(), cfg.latent_size(), cfg.latent_size()), &dev)? * 3.0)?;
        let t = mine.forward(&z)?.t_hat.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for v in t {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo > cfg.t_min && hi < cfg.t_max_anchor, format!("t_hat in [{lo:.3}, {hi:.3}] over 128 inputs")))
}

fn check_oracle_inversion() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let r = oracle_restorer(ModelConfig::default(), 3, &dev)?;
    let src = CleanSource::Procedural { size: 32 };
    let lq: Vec<Image> = (0..8).map(|i| make_pair(&src, Severity::Mixed, 9, i).map(|p| p.lq)).collect::<Result<_>>()?;
    let mut worst = 0f64;
    for s in [0.0, 0.3, 0.6, 0.9, 1.0] {
        worst = worst.max(oracle_inversion_error(&r, &lq, s, 4)?);
    }
    Ok((worst < 1e-4, format!("max abs error {worst:.2e}")))
}

fn check_hinge() -> Result<(bool, String)> {
    let dev = Device::Cpu;
    let full = |v: f32| Tensor::full(v, (2, 4, 4), &dev);
    let cases = [(1.0, -1.0, 0.0, None), (0.0, 0.0, 2.0, Some(0.0)), (-0.5, 0.5, 3.0, Some(-0.5))];
    for (real, fake, ld, lg) in cases {
        let (d, g) = gan_losses_from_scores(&full(real)?, &full(fake)?)?;
        if scalar(&d)? != ld || lg.is_some_and(|lg| scalar(&g).map(|g| g != lg).unwrap_or(true)) {
            return Ok((false, format!("D(real)={real}, D(fake)={fake} gave L_D={}", scalar(&d)?)));
        }
    }
    Ok((true, "three hinge cases exact".into()))
}

fn check_metrics() -> Result<(bool, String)> {
    let x = gen_clean(1, 32);
    let p = crate::metrics::psnr(&x, &x)?;
    let s = crate::metrics::ssim(&x, &x)?;
    let h = crate::metrics::hf_energy_ratio(&x.gaussian_blur(1.0), &x)?;
    Ok((p == crate::metrics::PSNR_CAP && (s - 1.0).abs() < 1e-12 && h < 1.0, format!("psnr {p}, ssim {s:.6}, blurred hf ratio {h:.3}")))
}

fn check_determinism() -> Result<(bool, String)> {
    let src = CleanSource::Procedural { size: 32 };
    let a = make_pair(&src, Severity::Mixed, 21, 3)?;
    let b = make_pair(&src, Severity::Mixed, 21, 3)?;
    let c = make_pair(&src, Severity::Mixed, 21, 4)?;
    Ok((a.hq == b.hq && a.lq == b.lq && a.hq != c.hq, "pair synthesis reproducible under seed".into()))
}

pub const CHECKS: [(&str, Check); 7] = [
    ("schedule", check_schedule),
    ("steering", check_steering),
    ("timestep-bounds", check_timestep_bounds),
    ("oracle-inversion", check_oracle_inversion),
    ("hinge-loss", check_hinge),
    ("metrics", check_metrics),
    ("determinism", check_determinism),
];

/// Runs every check; errors count as failures.
pub fn run() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
        })
        .collect()
}
