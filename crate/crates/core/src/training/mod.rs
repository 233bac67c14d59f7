//! Prior pretraining and one-step distillation.
//!
//! Distillation updates four parameter groups per step: the generator (codec
//! encoder and one-step U-Net) together with MINE on the total objective, the
//! discriminator on the hinge loss, and the finetuned regularizer on its
//! noise-prediction loss. The pretrained prior is only ever read.

pub mod discriminator;
pub mod losses;
pub mod prior;

use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::chariot::SamplingMode;
use crate::degradation::{make_pair, CleanSource, Pair, Severity};
use crate::image::Image;
use crate::nn::layers::scalar;
use crate::nn::{AdamW, AdamWConfig, ParamStore, Params};
use crate::pipeline::{Anchor, ModelConfig, Restorer};
use crate::rng::{derive_seed, Rng};
use crate::unet::Denoiser;
use crate::{Error, Result};

pub use discriminator::Discriminator;
pub use losses::{data_loss, diff_loss, gan_losses, vsd_loss, DiffusionDraw};
pub use prior::{eval_eps_mse, sample_prior, PriorTrainer};

/// Random streams derived from the run seed.
pub mod streams {
    pub const PRETRAIN_DATA: u64 = 1;
    pub const DISTILL_DATA: u64 = 2;
    pub const EVAL_DATA: u64 = 3;
    pub const PRETRAIN_NOISE: u64 = 4;
    pub const DISTILL_NOISE: u64 = 5;
    pub const INIT: u64 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_lpips: f64,
    pub lambda_vsd: f64,
    pub lambda_adv: f64,
    pub lr_mine: f64,
    pub lr_rest: f64,
    pub lr_prior: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip per optimizer; `0` disables clipping.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub pretrain_iters: u64,
    pub distill_iters: u64,
    pub seed: u64,
    pub disc_width: usize,
    pub severity: Severity,
    /// How `s` is chosen per training sample.
    pub steer_mode: SamplingMode,
    /// Steering value used when `steer_mode` is fixed.
    pub steer_s: f64,
    /// Down-weight the data loss of samples steered towards pure noise.
    pub snr_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_lpips: 2.0,
            lambda_vsd: 1.0,
            lambda_adv: 0.1,
            lr_mine: 1e-4,
            lr_rest: 5e-5,
            lr_prior: 5e-4,
            weight_decay: 1e-2,
            max_grad_norm: 1.0,
            batch_size: 4,
            pretrain_iters: 2000,
            distill_iters: 2000,
            seed: 0,
            disc_width: 32,
            severity: Severity::Mixed,
            steer_mode: SamplingMode::Uniform,
            steer_s: 0.0,
            snr_weighting: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_lpips", self.lambda_lpips), ("lambda_vsd", self.lambda_vsd), ("lambda_adv", self.lambda_adv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("lr_mine", self.lr_mine), ("lr_rest", self.lr_rest), ("lr_prior", self.lr_prior)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.steer_s) {
            return Err(Error::Config(format!("steer_s {} not in [0, 1]", self.steer_s)));
        }
        if let Severity::Fixed(v) = self.severity {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("severity {v} not in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
            ..Default::default()
        }
    }
}

/// Deterministic batch number `step` of a data stream.
pub fn training_batch(source: &CleanSource, severity: Severity, seed: u64, stream: u64, step: u64, batch: usize) -> Result<Vec<Pair>> {
    let root = derive_seed(seed, stream);
    (0..batch as u64).map(|k| make_pair(source, severity, root, step * batch as u64 + k)).collect()
}

/// Held-out pairs, disjoint from the training streams.
pub fn eval_pairs(source: &CleanSource, severity: Severity, seed: u64, count: usize) -> Result<Vec<Pair>> {
    training_batch(source, severity, seed, streams::EVAL_DATA, 0, count)
}

pub fn hq_tensor(pairs: &[Pair], device: &Device) -> Result<Tensor> {
    let hq: Vec<Image> = pairs.iter().map(|p| p.hq.clone()).collect();
    Image::batch_to_tensor(&hq, device)
}

/// Pretrains the prior; `on_step` sees `(iteration, loss)`.
pub fn pretrain_prior(
    model: &ModelConfig,
    cfg: &TrainConfig,
    source: &CleanSource,
    device: &Device,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<PriorTrainer> {
    let mut trainer = PriorTrainer::new(model, derive_seed(cfg.seed, streams::INIT), cfg.optimizer(cfg.lr_prior), device)?;
    continue_pretraining(&mut trainer, cfg, source, device, cfg.pretrain_iters, &mut on_step)?;
    Ok(trainer)
}

pub fn continue_pretraining(
    trainer: &mut PriorTrainer,
    cfg: &TrainConfig,
    source: &CleanSource,
    device: &Device,
    until: u64,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<()> {
    while trainer.iteration < until {
        let it = trainer.iteration;
        let pairs = training_batch(source, cfg.severity, cfg.seed, streams::PRETRAIN_DATA, it, cfg.batch_size)?;
        let mut rng = Rng::new(derive_seed(derive_seed(cfg.seed, streams::PRETRAIN_NOISE), it));
        let loss = trainer.step(&hq_tensor(&pairs, device)?, &mut rng)?;
        on_step(it, loss)?;
    }
    Ok(())
}

/// Loss components of one distillation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l2: f64,
    pub perc: f64,
    pub vsd: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub diff: f64,
}

impl StepLosses {
    pub const NAMES: [&'static str; 6] = ["l2", "perc", "vsd", "gan_g", "gan_d", "diff"];

    pub fn values(&self) -> [f64; 6] {
        [self.l2, self.perc, self.vsd, self.gan_g, self.gan_d, self.diff]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

impl std::fmt::Display for StepLosses {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = Self::NAMES.iter().zip(self.values()).map(|(n, v)| format!("{n}={v:.6}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Gradient norm of one loss per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupNorms {
    pub generator: f64,
    pub mine: f64,
    pub prior: f64,
    pub regularizer: f64,
    pub discriminator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradAudit {
    pub total: GroupNorms,
    pub disc: GroupNorms,
    pub diff: GroupNorms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub losses: StepLosses,
    pub audit: GradAudit,
    pub t_hat: Vec<f64>,
}

/// The five parameter groups.
#[derive(Debug, Clone)]
pub struct Groups {
    pub generator: ParamStore,
    pub mine: ParamStore,
    pub prior: ParamStore,
    pub regularizer: ParamStore,
    pub discriminator: ParamStore,
}

impl Groups {
    pub const NAMES: [&'static str; 5] = ["generator", "mine", "prior", "regularizer", "discriminator"];

    pub fn get(&self, name: &str) -> Option<&ParamStore> {
        match name {
            "generator" => Some(&self.generator),
            "mine" => Some(&self.mine),
            "prior" => Some(&self.prior),
            "regularizer" => Some(&self.regularizer),
            "discriminator" => Some(&self.discriminator),
            _ => None,
        }
    }

    fn norms(&self, grads: &GradStore) -> Result<GroupNorms> {
        Ok(GroupNorms {
            generator: self.generator.grad_norm(grads)?,
            mine: self.mine.grad_norm(grads)?,
            prior: self.prior.grad_norm(grads)?,
            regularizer: self.regularizer.grad_norm(grads)?,
            discriminator: self.discriminator.grad_norm(grads)?,
        })
    }
}

/// Copies every tensor of `src` into `dst` under `prefix`.
fn copy_into(src: &ParamStore, dst: &ParamStore, prefix: &str) -> Result<()> {
    for (name, var) in src.vars() {
        let target = dst
            .get(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {prefix}{name}")))?;
        target.set(var.as_tensor())?;
    }
    Ok(())
}

/// Optimizers of the four trained groups.
pub struct Optimizers {
    pub generator: AdamW,
    pub mine: AdamW,
    pub regularizer: AdamW,
    pub discriminator: AdamW,
}

impl Optimizers {
    pub fn new(groups: &Groups, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            generator: AdamW::new(&groups.generator, cfg.optimizer(cfg.lr_rest))?,
            mine: AdamW::new(&groups.mine, cfg.optimizer(cfg.lr_mine))?,
            regularizer: AdamW::new(&groups.regularizer, cfg.optimizer(cfg.lr_rest))?,
            discriminator: AdamW::new(&groups.discriminator, cfg.optimizer(cfg.lr_rest))?,
        })
    }

    pub fn named(&self) -> [(&'static str, &AdamW); 4] {
        [
            ("generator", &self.generator),
            ("mine", &self.mine),
            ("regularizer", &self.regularizer),
            ("discriminator", &self.discriminator),
        ]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut AdamW> {
        match name {
            "generator" => Some(&mut self.generator),
            "mine" => Some(&mut self.mine),
            "regularizer" => Some(&mut self.regularizer),
            "discriminator" => Some(&mut self.discriminator),
            _ => None,
        }
    }
}

/// Everything mutated by distillation.
pub struct TrainState {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub groups: Groups,
    pub restorer: Restorer,
    prior: Denoiser,
    regularizer: Denoiser,
    disc: Discriminator,
    disc_frozen: Discriminator,
    pub optimizers: Optimizers,
    pub iteration: u64,
    source: CleanSource,
    device: Device,
}

impl TrainState {
    /// Fresh distillation state: the one-step U-Net and the regularizer both
    /// start as copies of the pretrained prior.
    pub fn new(model: ModelConfig, config: TrainConfig, prior: ParamStore, source: CleanSource, device: &Device) -> Result<Self> {
        config.validate()?;
        let init = derive_seed(config.seed, streams::INIT);
        let generator = ParamStore::new();
        let mine = ParamStore::new();
        let discriminator = ParamStore::new();
        Restorer::build(model, &Params::init(&generator, derive_seed(init, 1), device), &Params::init(&mine, derive_seed(init, 2), device))?;
        Discriminator::new(&Params::init(&discriminator, derive_seed(init, 3), device), model.latent_channels(), config.disc_width)?;
        copy_into(&prior, &generator, "unet.")?;
        let regularizer = prior.deep_copy()?;
        let groups = Groups { generator, mine, prior, regularizer, discriminator };
        Self::from_groups(model, config, groups, 0, source, device)
    }

    /// Rebuilds a state around existing parameter groups (e.g. from a checkpoint).
    pub fn from_groups(model: ModelConfig, config: TrainConfig, groups: Groups, iteration: u64, source: CleanSource, device: &Device) -> Result<Self> {
        config.validate()?;
        let restorer = Restorer::build(model, &Params::load(&groups.generator, device), &Params::load(&groups.mine, device))?;
        let prior = Denoiser::new(&Params::load(&groups.prior, device).frozen(), model.unet())?;
        let regularizer = Denoiser::new(&Params::load(&groups.regularizer, device), model.unet())?;
        let disc = Discriminator::new(&Params::load(&groups.discriminator, device), model.latent_channels(), config.disc_width)?;
        let disc_frozen = Discriminator::new(&Params::load(&groups.discriminator, device).frozen(), model.latent_channels(), config.disc_width)?;
        let optimizers = Optimizers::new(&groups, &config)?;
        Ok(Self {
            model,
            config,
            groups,
            restorer,
            prior,
            regularizer,
            disc,
            disc_frozen,
            optimizers,
            iteration,
            source,
            device: device.clone(),
        })
    }

    pub fn source(&self) -> &CleanSource {
        &self.source
    }

    pub fn prior_net(&self) -> &Denoiser {
        &self.prior
    }

    /// Runs one step on the next batch of the distillation stream.
    pub fn step(&mut self) -> Result<StepReport> {
        let c = &self.config;
        let pairs = training_batch(&self.source, c.severity, c.seed, streams::DISTILL_DATA, self.iteration, c.batch_size)?;
        let mut rng = Rng::new(derive_seed(derive_seed(c.seed, streams::DISTILL_NOISE), self.iteration));
        self.step_on(&pairs, &mut rng)
    }

    /// One step on explicit pairs.
    pub fn step_on(&mut self, pairs: &[Pair], rng: &mut Rng) -> Result<StepReport> {
        let cfg = self.config;
        let r = &self.restorer;
        let b = pairs.len();
        let x_h = hq_tensor(pairs, &self.device)?;
        let lq: Vec<Image> = pairs.iter().map(|p| p.lq.clone()).collect();
        let z_l = r.codec.encode(&r.upsample(&lq)?)?;

        let s: Vec<f64> = match cfg.steer_mode {
            SamplingMode::Uniform => (0..b).map(|_| rng.uniform()).collect(),
            SamplingMode::Fixed => vec![cfg.steer_s; b],
        };
        let eps = rng.normal_tensor(z_l.shape(), &self.device)?;
        let fwd = r.forward(&z_l, &s, &eps, &Anchor::Adaptive)?;

        let weights = match cfg.snr_weighting {
            true => {
                let host = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
                let w = losses::snr_weights(&r.schedule, &host(&fwd.t_hat)?, &host(&fwd.t_mix)?)?;
                Some(Tensor::from_vec(w, b, &self.device)?)
            }
            false => None,
        };
        let data = data_loss(&self.prior, &r.codec, &fwd.x_hat, &x_h, cfg.lambda_lpips, weights.as_ref())?;
        let z_h = r.codec.encode(&x_h)?.detach();
        let gan_g = losses::gen_adversarial(&self.disc_frozen.forward(&fwd.z_hat)?)?;
        let draw = DiffusionDraw::sample(rng, &fwd.z_hat, self.model.t_max)?;
        let vsd = vsd_loss(&fwd.z_hat, &self.prior, &self.regularizer, &r.schedule, &draw)?;
        let total = ((&data.total + (&vsd.surrogate * cfg.lambda_vsd)?)? + (&gan_g * cfg.lambda_adv)?)?;

        let gan_d = losses::disc_hinge(&self.disc.forward(&z_h)?, &self.disc.forward(&fwd.z_hat.detach())?)?;
        let diff = crate::nn::layers::mse(&vsd.ft_pred, &draw.eps)?;

        let losses = StepLosses {
            l2: scalar(&data.l2)?,
            perc: scalar(&data.perc)?,
            vsd: scalar(&vsd.surrogate)?,
            gan_g: scalar(&gan_g)?,
            gan_d: scalar(&gan_d)?,
            diff: scalar(&diff)?,
        };
        if !losses.all_finite() {
            return Err(Error::NonFinite { iteration: self.iteration, components: losses.to_string() });
        }

        let g_total = total.backward()?;
        let g_disc = gan_d.backward()?;
        let g_diff = diff.backward()?;
        let audit = GradAudit {
            total: self.groups.norms(&g_total)?,
            disc: self.groups.norms(&g_disc)?,
            diff: self.groups.norms(&g_diff)?,
        };

        self.optimizers.discriminator.step(&g_disc)?;
        self.optimizers.generator.step(&g_total)?;
        self.optimizers.mine.step(&g_total)?;
        self.optimizers.regularizer.step(&g_diff)?;

        let t_hat = fwd.t_hat.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let report = StepReport { iteration: self.iteration, losses, audit, t_hat };
        self.iteration += 1;
        Ok(report)
    }

    /// Runs until `until` iterations have been taken.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        while self.iteration < until {
            let report = self.step()?;
            on_step(&report)?;
        }
        Ok(())
    }

    /// The trained restorer, sharing this state's parameters.
    pub fn restorer(&self) -> Result<Restorer> {
        let mut r = Restorer::build(
            self.model,
            &Params::load(&self.groups.generator, &self.device),
            &Params::load(&self.groups.mine, &self.device),
        )?;
        r.trained = true;
        Ok(r)
    }
}

/// Per-step CSV log of the loss components.
pub struct LossLog {
    out: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub fn header() -> String {
        format!("iteration,{}", StepLosses::NAMES.join(","))
    }

    pub fn create(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        let mut out = std::io::BufWriter::new(file);
        if !append || !exists {
            writeln!(out, "{}", Self::header())?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, report: &StepReport) -> Result<()> {
        let vals: Vec<String> = report.losses.values().iter().map(|v| format!("{v:e}")).collect();
        writeln!(self.out, "{},{}", report.iteration, vals.join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
