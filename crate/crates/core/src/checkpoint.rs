//! Checkpoints: a safetensors container of named `f32` arrays plus one JSON
//! metadata entry.
//!
//! Parameters are stored as `<group>/<param>` and optimizer moments as
//! `opt/<group>/m/<param>` and `opt/<group>/v/<param>`. The metadata entry
//! `idas` holds a [`CheckpointMeta`].

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::degradation::CleanSource;
use crate::nn::{ParamStore, Params};
use crate::pipeline::Restorer;
use crate::training::{Groups, PriorTrainer, TrainState};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "idas";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Distill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub kind: String,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    pub iteration: u64,
    pub seed: u64,
    pub config_fingerprint: String,
    pub model_fingerprint: String,
    pub schedule: ScheduleMeta,
    pub optimizer_steps: BTreeMap<String, u64>,
    pub config: RunConfig,
}

impl CheckpointMeta {
    pub fn new(config: &RunConfig, stage: Stage, iteration: u64) -> Result<Self> {
        Ok(Self {
            format_version: FORMAT_VERSION,
            stage,
            iteration,
            seed: config.seed,
            config_fingerprint: config.fingerprint(),
            model_fingerprint: config.model_fingerprint()?,
            schedule: ScheduleMeta {
                kind: config.schedule.clone(),
                t_max: config.t_max,
                beta_start: config.beta_start,
                beta_end: config.beta_end,
            },
            optimizer_steps: BTreeMap::new(),
            config: config.clone(),
        })
    }
}

pub type Moments = Vec<(String, Tensor, Tensor)>;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub groups: BTreeMap<String, ParamStore>,
    pub moments: BTreeMap<String, Moments>,
}

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() }
}

fn to_bytes(t: &Tensor) -> Result<(Vec<usize>, Vec<u8>)> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((t.dims().to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self { meta, groups: BTreeMap::new(), moments: BTreeMap::new() }
    }

    pub fn with_group(mut self, name: &str, store: &ParamStore) -> Self {
        self.groups.insert(name.to_string(), store.clone());
        self
    }

    pub fn with_optimizer(mut self, name: &str, opt: &crate::nn::AdamW) -> Self {
        self.meta.optimizer_steps.insert(name.to_string(), opt.steps_taken());
        self.moments.insert(name.to_string(), opt.moments());
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups.get(name).ok_or_else(|| Error::Checkpoint {
            path: PathBuf::new(),
            reason: format!("checkpoint has no `{name}` group (stage {:?})", self.meta.stage),
        })
    }

    /// Restores optimizer `name` if the checkpoint carries its state.
    pub fn restore_optimizer(&self, name: &str, opt: &mut crate::nn::AdamW) -> Result<()> {
        if let (Some(step), Some(m)) = (self.meta.optimizer_steps.get(name), self.moments.get(name)) {
            opt.restore(*step, m)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (g, store) in &self.groups {
            for (name, t) in store.to_tensors() {
                let (shape, bytes) = to_bytes(&t)?;
                arrays.push((format!("{g}/{name}"), shape, bytes));
            }
        }
        for (g, moments) in &self.moments {
            for (name, m, v) in moments {
                for (kind, t) in [("m", m), ("v", v)] {
                    let (shape, bytes) = to_bytes(t)?;
                    arrays.push((format!("opt/{g}/{kind}/{name}"), shape, bytes));
                }
            }
        }
        let views = arrays
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::InvalidArgument(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    /// Writes atomically and returns the SHA-256 of the written bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| ckpt_err(path, e))?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.set_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| ckpt_err(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| ckpt_err(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
        Self::from_bytes(&bytes, device).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => ckpt_err(path, reason),
            other => ckpt_err(path, other),
        })
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let bad = |r: String| Error::Checkpoint { path: PathBuf::new(), reason: r };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing metadata block".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(format!("bad metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", meta.format_version)));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut params: BTreeMap<String, Vec<(String, Tensor)>> = BTreeMap::new();
        let mut mom: BTreeMap<String, BTreeMap<String, [Option<Tensor>; 2]>> = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name}: expected f32, found {:?}", view.dtype())));
            }
            let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(data, view.shape(), device)?;
            match name.split_once('/') {
                Some(("opt", rest)) => {
                    let mut it = rest.splitn(3, '/');
                    let (g, kind, p) = match (it.next(), it.next(), it.next()) {
                        (Some(g), Some(k), Some(p)) => (g, k, p),
                        _ => return Err(bad(format!("malformed optimizer entry `{name}`"))),
                    };
                    let slot = mom.entry(g.into()).or_default().entry(p.into()).or_default();
                    match kind {
                        "m" => slot[0] = Some(t),
                        "v" => slot[1] = Some(t),
                        _ => return Err(bad(format!("malformed optimizer entry `{name}`"))),
                    }
                }
                Some((g, p)) => params.entry(g.into()).or_default().push((p.into(), t)),
                None => return Err(bad(format!("entry `{name}` has no group"))),
            }
        }
        let groups = params
            .into_iter()
            .map(|(g, items)| Ok((g, ParamStore::from_tensors(items)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let moments = mom
            .into_iter()
            .map(|(g, slots)| {
                let v = slots
                    .into_iter()
                    .map(|(p, [m, v])| match (m, v) {
                        (Some(m), Some(v)) => Ok((p, m, v)),
                        _ => Err(bad(format!("optimizer state for {g}/{p} is incomplete"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((g, v))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self { meta, groups, moments })
    }

    /// Errors unless `config` matches the checkpoint's configuration or
    /// `force` is set; returns a warning line when forced through a mismatch.
    pub fn check_config(&self, config: &RunConfig, force: bool) -> Result<Option<String>> {
        let requested = config.fingerprint();
        if requested == self.meta.config_fingerprint {
            return Ok(None);
        }
        let msg = format!(
            "config fingerprint {} differs from checkpoint fingerprint {}",
            &requested[..12],
            &self.meta.config_fingerprint[..12.min(self.meta.config_fingerprint.len())]
        );
        if !force {
            return Err(Error::FingerprintMismatch { checkpoint: self.meta.config_fingerprint.clone(), requested });
        }
        if config.model_fingerprint()? != self.meta.model_fingerprint {
            return Err(Error::Config(format!("{msg}; network shapes differ, cannot proceed even with --force")));
        }
        Ok(Some(msg))
    }
}

impl Checkpoint {
    /// Snapshot of a prior-pretraining run.
    pub fn from_prior(config: &RunConfig, trainer: &PriorTrainer) -> Result<Self> {
        Ok(Self::new(CheckpointMeta::new(config, Stage::Pretrain, trainer.iteration)?)
            .with_group("prior", &trainer.store)
            .with_optimizer("prior", trainer.optimizer()))
    }

    /// Resumes prior pretraining.
    pub fn prior_trainer(&self, config: &RunConfig, device: &Device) -> Result<PriorTrainer> {
        let train = config.train()?;
        let mut t = PriorTrainer::resume(&config.model()?, self.group("prior")?.deep_copy()?, train.optimizer(train.lr_prior), device)?;
        self.restore_optimizer("prior", t.optimizer_mut())?;
        t.iteration = self.meta.iteration;
        Ok(t)
    }

    /// Snapshot of a distillation run.
    pub fn from_state(config: &RunConfig, state: &TrainState) -> Result<Self> {
        let mut ck = Self::new(CheckpointMeta::new(config, Stage::Distill, state.iteration)?);
        for name in Groups::NAMES {
            if let Some(store) = state.groups.get(name) {
                ck = ck.with_group(name, store);
            }
        }
        for (name, opt) in state.optimizers.named() {
            ck = ck.with_optimizer(name, opt);
        }
        Ok(ck)
    }

    /// Resumes distillation.
    pub fn train_state(&self, config: &RunConfig, source: CleanSource, device: &Device) -> Result<TrainState> {
        let copy = |n: &str| -> Result<ParamStore> { self.group(n)?.deep_copy() };
        let groups = Groups {
            generator: copy("generator")?,
            mine: copy("mine")?,
            prior: copy("prior")?,
            regularizer: copy("regularizer")?,
            discriminator: copy("discriminator")?,
        };
        let mut state = TrainState::from_groups(config.model()?, config.train()?, groups, self.meta.iteration, source, device)?;
        for name in Groups::NAMES {
            if let Some(opt) = state.optimizers.get_mut(name) {
                self.restore_optimizer(name, opt)?;
            }
        }
        Ok(state)
    }

    /// The restorer stored in a distillation checkpoint.
    pub fn restorer(&self, device: &Device) -> Result<Restorer> {
        if self.meta.stage != Stage::Distill {
            return Err(Error::Untrained);
        }
        let model = self.meta.config.model()?;
        let mut r = Restorer::build(model, &Params::load(self.group("generator")?, device), &Params::load(self.group("mine")?, device))?;
        r.steering = self.meta.config.steering()?;
        r.trained = true;
        Ok(r)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamW, AdamWConfig, Init, Params};

    fn store(seed: u64) -> ParamStore {
        let s = ParamStore::new();
        let p = Params::init(&s, seed, &Device::Cpu);
        p.get("a.weight", (3, 4), Init::Normal(1.0)).unwrap();
        p.get("b", 5, Init::Ones).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let (g, d) = (store(1), store(2));
        let mut opt = AdamW::new(&g, AdamWConfig::default()).unwrap();
        let loss = g.get("a.weight").unwrap().as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let cfg = RunConfig::default();
        let ck = Checkpoint::new(CheckpointMeta::new(&cfg, Stage::Distill, 7).unwrap())
            .with_group("generator", &g)
            .with_group("discriminator", &d)
            .with_optimizer("generator", &opt);
        let hash = ck.save(&path).unwrap();
        assert_eq!(hash, file_hash(&path).unwrap());
        let back = Checkpoint::load(&path, &Device::Cpu).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.group("generator").unwrap().fingerprint().unwrap(), g.fingerprint().unwrap());
        assert_eq!(back.group("discriminator").unwrap().fingerprint().unwrap(), d.fingerprint().unwrap());
        assert!(back.group("prior").is_err());
        let mut opt2 = AdamW::new(&back.groups["generator"], AdamWConfig::default()).unwrap();
        back.restore_optimizer("generator", &mut opt2).unwrap();
        assert_eq!(opt2.steps_taken(), 1);
        for ((n1, m1, v1), (n2, m2, v2)) in opt.moments().iter().zip(opt2.moments().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(m1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), m2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
            assert_eq!(v1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), v2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        assert_eq!(ck.save(&path).unwrap(), hash);
    }

    #[test]
    fn fingerprint_gate() {
        let cfg = RunConfig::default();
        let ck = Checkpoint::new(CheckpointMeta::new(&cfg, Stage::Pretrain, 0).unwrap());
        assert_eq!(ck.check_config(&cfg, false).unwrap(), None);
        let other = RunConfig { seed: 5, ..cfg.clone() };
        assert!(matches!(ck.check_config(&other, false), Err(Error::FingerprintMismatch { .. })));
        assert!(ck.check_config(&other, true).unwrap().is_some());
        let shape = RunConfig { depth: 2, ..cfg };
        assert!(ck.check_config(&shape, true).is_err());
    }

    #[test]
    fn corrupt_files_are_checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path, &Device::Cpu), Err(Error::Checkpoint { .. })));
        assert!(matches!(Checkpoint::load(&dir.path().join("missing"), &Device::Cpu), Err(Error::Checkpoint { .. })));
    }
}
