//! Flat run configuration with file and command-line overrides.
//!
//! A config file is a flat TOML table whose keys are the field names of
//! [`RunConfig`]. Values are layered defaults < file < `key=value` overrides,
//! and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chariot::{SamplingMode, SteeringConfig};
use crate::codec::CodecMode;
use crate::degradation::Severity;
use crate::pipeline::ModelConfig;
use crate::schedule::ScheduleKind;
use crate::training::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub image_size: usize,
    pub image_channels: usize,
    pub sr_factor: usize,
    /// `strided_conv` or `identity`.
    pub codec: String,
    pub t_max: usize,
    /// Only `linear` is available.
    pub schedule: String,
    pub beta_start: f64,
    pub beta_end: f64,
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

    pub lambda_lpips: f64,
    pub lambda_vsd: f64,
    pub lambda_adv: f64,
    pub lr_mine: f64,
    pub lr_rest: f64,
    pub lr_prior: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub pretrain_iters: u64,
    pub distill_iters: u64,
    pub disc_width: usize,
    /// `mixed` or a fixed level in `[0, 1]`.
    pub severity: String,
    /// `uniform` or `fixed`; how `s` is drawn during distillation.
    pub train_steer_mode: String,
    pub train_steer_s: f64,
    pub snr_weighting: bool,

    /// Default steering for restoration.
    pub s: f64,
    pub gamma_max: f64,
    pub delta: f64,

    pub eval_images: usize,
    pub eval_batch: usize,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let st = SteeringConfig::default();
        let ScheduleKind::Linear { beta_start, beta_end } = m.schedule;
        Self {
            seed: t.seed,
            image_size: m.image_size,
            image_channels: m.image_channels,
            sr_factor: m.sr_factor,
            codec: m.codec.id().into(),
            t_max: m.t_max,
            schedule: m.schedule.id().into(),
            beta_start,
            beta_end,
            unet_channels: m.unet_channels,
            unet_groups: m.unet_groups,
            d_ctx: m.d_ctx,
            prompt_tokens: m.prompt_tokens,
            patch_size: m.patch_size,
            embed_dim: m.embed_dim,
            query_tokens: m.query_tokens,
            depth: m.depth,
            heads: m.heads,
            t_min: m.t_min,
            t_max_anchor: m.t_max_anchor,
            lambda_lpips: t.lambda_lpips,
            lambda_vsd: t.lambda_vsd,
            lambda_adv: t.lambda_adv,
            lr_mine: t.lr_mine,
            lr_rest: t.lr_rest,
            lr_prior: t.lr_prior,
            weight_decay: t.weight_decay,
            max_grad_norm: t.max_grad_norm,
            batch_size: t.batch_size,
            pretrain_iters: t.pretrain_iters,
            distill_iters: t.distill_iters,
            disc_width: t.disc_width,
            severity: "mixed".into(),
            train_steer_mode: "uniform".into(),
            train_steer_s: t.steer_s,
            snr_weighting: t.snr_weighting,
            s: st.s,
            gamma_max: st.gamma_max,
            delta: st.delta,
            eval_images: 64,
            eval_batch: 16,
            checkpoint_every: 500,
        }
    }
}

fn parse_severity(s: &str) -> Result<Severity> {
    if s.eq_ignore_ascii_case("mixed") {
        return Ok(Severity::Mixed);
    }
    s.parse::<f64>()
        .map(Severity::Fixed)
        .map_err(|_| Error::Config(format!("severity must be `mixed` or a number, got `{s}`")))
}

fn parse_mode(s: &str) -> Result<SamplingMode> {
    match s {
        "uniform" => Ok(SamplingMode::Uniform),
        "fixed" => Ok(SamplingMode::Fixed),
        _ => Err(Error::Config(format!("train_steer_mode must be `uniform` or `fixed`, got `{s}`"))),
    }
}

impl RunConfig {
    /// Layers an optional TOML file and `key=value` overrides over the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let file_table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in file_table {
                merge(&mut table, &k, v)?;
            }
        }
        for item in overrides {
            let (k, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let (k, raw) = (k.trim(), raw.trim());
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            merge(&mut table, k, value)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?.validate()?;
        self.train()?.validate()?;
        self.steering()?.validate()?;
        if self.eval_batch == 0 || self.eval_images == 0 {
            return Err(Error::Config("eval_images and eval_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let schedule = match ScheduleKind::parse(&self.schedule)? {
            ScheduleKind::Linear { .. } => ScheduleKind::Linear { beta_start: self.beta_start, beta_end: self.beta_end },
        };
        Ok(ModelConfig {
            image_size: self.image_size,
            image_channels: self.image_channels,
            sr_factor: self.sr_factor,
            codec: CodecMode::parse(&self.codec)?,
            t_max: self.t_max,
            schedule,
            unet_channels: self.unet_channels,
            unet_groups: self.unet_groups,
            d_ctx: self.d_ctx,
            prompt_tokens: self.prompt_tokens,
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            query_tokens: self.query_tokens,
            depth: self.depth,
            heads: self.heads,
            t_min: self.t_min,
            t_max_anchor: self.t_max_anchor,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lambda_lpips: self.lambda_lpips,
            lambda_vsd: self.lambda_vsd,
            lambda_adv: self.lambda_adv,
            lr_mine: self.lr_mine,
            lr_rest: self.lr_rest,
            lr_prior: self.lr_prior,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            batch_size: self.batch_size,
            pretrain_iters: self.pretrain_iters,
            distill_iters: self.distill_iters,
            seed: self.seed,
            disc_width: self.disc_width,
            severity: parse_severity(&self.severity)?,
            steer_mode: parse_mode(&self.train_steer_mode)?,
            steer_s: self.train_steer_s,
            snr_weighting: self.snr_weighting,
        })
    }

    pub fn steering(&self) -> Result<SteeringConfig> {
        Ok(SteeringConfig {
            s: self.s,
            gamma_max: self.gamma_max,
            t_max: self.t_max,
            delta: self.delta,
            ..Default::default()
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&serde_json::to_value(self).expect("config serializes")).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Fingerprint restricted to the fields that shape the networks, so that
    /// checkpoints stay loadable when only training knobs change.
    pub fn model_fingerprint(&self) -> Result<String> {
        let json = serde_json::to_string(&serde_json::to_value(self.model()?)?)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }
}

/// Inserts `value` at `key`, coercing integers to floats and scalars to
/// strings where the existing field demands it.
fn merge(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    use toml::Value as V;
    let slot = table
        .get_mut(key)
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    let value = match (&*slot, value) {
        (V::Float(_), V::Integer(i)) => V::Float(i as f64),
        (V::String(_), V::Integer(i)) => V::String(i.to_string()),
        (V::String(_), V::Float(f)) => V::String(f.to_string()),
        (_, v) => v,
    };
    if std::mem::discriminant(&*slot) != std::mem::discriminant(&value) {
        return Err(Error::Config(format!("config key `{key}` expects a {}, got {value}", slot.type_str())));
    }
    *slot = value;
    Ok(())
}
