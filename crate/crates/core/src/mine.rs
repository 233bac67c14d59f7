//! Inversion-noise estimator: a small transformer over latent patches plus
//! learnable query tokens.
//!
//! The spatial tokens are projected back to a noise map with the latent's
//! shape; the query tokens are pooled and routed to two heads, one producing a
//! bounded continuous timestep and one a degradation embedding.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{sigmoid, silu, sincos_2d, Attention, LayerNorm, Linear};
use crate::nn::{Init, Params};
use crate::{Error, Result};

/// Margin that keeps the sigmoid strictly inside `(0, 1)` in single precision.
const SIGMOID_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_query_tokens: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub d_ctx: usize,
    pub t_min: f64,
    pub t_max_anchor: f64,
    pub latent_channels: usize,
    pub latent_size: usize,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            embed_dim: 96,
            num_query_tokens: 4,
            depth: 4,
            num_heads: 6,
            mlp_ratio: 4,
            d_ctx: 64,
            t_min: 50.0,
            t_max_anchor: 450.0,
            latent_channels: 12,
            latent_size: 16,
        }
    }
}

impl MineConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim % self.num_heads != 0 {
            return fail(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads));
        }
        if self.embed_dim % 4 != 0 {
            return fail(format!("embed_dim {} must be a multiple of 4", self.embed_dim));
        }
        if self.patch_size == 0 || self.latent_size % self.patch_size != 0 {
            return fail(format!("latent size {} not divisible by patch {}", self.latent_size, self.patch_size));
        }
        if self.num_query_tokens == 0 || self.depth == 0 {
            return fail("need at least one query token and one block".into());
        }
        if !(0.0 <= self.t_min && self.t_min < self.t_max_anchor && self.t_max_anchor < t_max as f64) {
            return fail(format!(
                "timestep bounds must satisfy 0 <= {} < {} < {t_max}",
                self.t_min, self.t_max_anchor
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.latent_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// `(B, C, H, W) -> (B, N, p*p*C)`; tokens row-major over the patch grid,
/// features ordered `(py, px, c)`.
pub fn patchify(z: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = z.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("spatial dims divisible by {p}"), (h, w)));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(z.reshape(vec![b, c, gh, p, gw, p])?
        .permute(vec![0, 2, 4, 3, 5, 1])?
        .reshape((b, gh * gw, p * p * c))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, f) = tokens.dims3()?;
    let (gh, gw) = (h / p, w / p);
    if n != gh * gw || f != p * p * c {
        return Err(Error::shape((gh * gw, p * p * c), (n, f)));
    }
    Ok(tokens
        .reshape(vec![b, gh, gw, p, p, c])?
        .permute(vec![0, 5, 1, 3, 2, 4])?
        .reshape((b, c, h, w))?)
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(p: &Params, cfg: &MineConfig) -> Result<Self> {
        let e = cfg.embed_dim;
        Ok(Self {
            ln1: LayerNorm::new(&p.pp("ln1"), e)?,
            attn: Attention::new(&p.pp("attn"), e, cfg.num_heads)?,
            ln2: LayerNorm::new(&p.pp("ln2"), e)?,
            fc1: Linear::new(&p.pp("fc1"), e, cfg.mlp_ratio * e)?,
            fc2: Linear::new(&p.pp("fc2"), cfg.mlp_ratio * e, e)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc2.forward(&silu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), in_dim, in_dim)?,
            fc2: Linear::zeroed(&p.pp("fc2"), in_dim, out_dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&silu(&self.fc1.forward(x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    /// `(B,)`, strictly inside `(t_min, t_max_anchor)`.
    pub t_hat: Tensor,
    /// `(B, d_ctx)`.
    pub c_deg: Tensor,
    /// Same shape as the input latent.
    pub eps_inv: Tensor,
}

#[derive(Debug, Clone)]
pub struct Mine {
    cfg: MineConfig,
    patch_embed: Linear,
    pos: Tensor,
    queries: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    eps_head: Linear,
    t_head: Mlp,
    cond_head: Mlp,
}

impl Mine {
    pub fn new(p: &Params, cfg: MineConfig) -> Result<Self> {
        let e = cfg.embed_dim;
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.latent_channels;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(&p.pp(format!("blocks.{i}")), &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::new(&p.pp("patch_embed"), patch_dim, e)?,
            pos: sincos_2d(cfg.grid(), cfg.grid(), e, p.device())?,
            queries: p.get("queries", (cfg.num_query_tokens, e), Init::Normal(0.02))?,
            blocks,
            norm: LayerNorm::new(&p.pp("norm"), e)?,
            eps_head: Linear::with_init(&p.pp("eps_head"), e, patch_dim, Init::Normal(0.1 / (e as f64).sqrt()))?,
            t_head: Mlp::new(&p.pp("t_head"), e, 1)?,
            cond_head: Mlp::new(&p.pp("cond_head"), e, cfg.d_ctx)?,
            cfg,
        })
    }

    pub fn config(&self) -> &MineConfig {
        &self.cfg
    }

    /// Token sequence after the final norm: `K` query rows, then `N` spatial rows.
    fn encode(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        let cfg = &self.cfg;
        if c != cfg.latent_channels || h != cfg.latent_size || w != cfg.latent_size {
            return Err(Error::shape((cfg.latent_channels, cfg.latent_size, cfg.latent_size), (c, h, w)));
        }
        let tokens = self.patch_embed.forward(&patchify(z, cfg.patch_size)?)?.broadcast_add(&self.pos)?;
        let q = self.queries.unsqueeze(0)?.broadcast_as((b, cfg.num_query_tokens, cfg.embed_dim))?;
        let mut x = Tensor::cat(&[&q.contiguous()?, &tokens], 1)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    /// Splits the final sequence into the three outputs.
    fn decouple(&self, seq: &Tensor) -> Result<MineOutput> {
        let cfg = &self.cfg;
        let k = cfg.num_query_tokens;
        let n = cfg.num_patches();
        let b = seq.dim(0)?;
        let tau = seq.narrow(1, 0, k)?.mean(1)?;
        let spatial = seq.narrow(1, k, n)?;
        let eps_inv = unpatchify(
            &self.eps_head.forward(&spatial)?,
            cfg.patch_size,
            cfg.latent_channels,
            cfg.latent_size,
            cfg.latent_size,
        )?;
        let gate = sigmoid(&self.t_head.forward(&tau)?)?.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)?;
        let t_hat = gate.affine(cfg.t_max_anchor - cfg.t_min, cfg.t_min)?.reshape(b)?;
        let c_deg = self.cond_head.forward(&tau)?;
        Ok(MineOutput { t_hat, c_deg, eps_inv })
    }

    pub fn forward(&self, z_l: &Tensor) -> Result<MineOutput> {
        self.decouple(&self.encode(z_l)?)
    }
}

/// `t_min + (t_max - t_min) * sigmoid(logit)` with the same interior margin as the network.
pub fn bounded_timestep(logit: f64, t_min: f64, t_max: f64) -> f64 {
    let g = (1.0 / (1.0 + (-logit).exp())).clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN);
    t_min + (t_max - t_min) * g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::Rng;
    use candle_core::{DType, Device, IndexOp};

    fn net(seed: u64) -> (ParamStore, Mine) {
        let store = ParamStore::new();
        let m = Mine::new(&Params::init(&store, seed, &Device::Cpu), MineConfig::default()).unwrap();
        (store, m)
    }

    fn randomize_heads(store: &ParamStore) {
        let mut rng = Rng::new(99);
        for (name, var) in store.vars() {
            if name.contains("_head.fc2") {
                var.set(&(rng.normal_tensor(var.shape(), &Device::Cpu).unwrap() * 0.5).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn token_counts() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 3, 8, 8), DType::F32, &dev).unwrap();
        assert_eq!(patchify(&z, 2).unwrap().dims(), &[1, 16, 12]);
        let z = Tensor::zeros((1, 3, 2, 2), DType::F32, &dev).unwrap();
        assert_eq!(patchify(&z, 2).unwrap().dims(), &[1, 1, 12]);
        assert!(patchify(&Tensor::zeros((1, 3, 5, 4), DType::F32, &dev).unwrap(), 2).is_err());
    }

    #[test]
    fn patch_layout_round_trips_tagged_indices() {
        let dev = Device::Cpu;
        let (c, h, w) = (3, 4, 6);
        let z = Tensor::arange(0f32, (2 * c * h * w) as f32, &dev).unwrap().reshape((2, c, h, w)).unwrap();
        let tokens = patchify(&z, 2).unwrap();
        // token (gy=1, gx=2) of sample 1: first feature is pixel (c=0, y=2, x=4)
        let expect = (c * h * w + 2 * w + 4) as f32;
        assert_eq!(tokens.i((1, 5, 0)).unwrap().to_scalar::<f32>().unwrap(), expect);
        // feature order (py, px, c): index 1 is channel 1 of the same pixel
        assert_eq!(tokens.i((1, 5, 1)).unwrap().to_scalar::<f32>().unwrap(), expect + (h * w) as f32);
        let back = unpatchify(&tokens, 2, c, h, w).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), z.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn zeroed_heads_give_midpoint_and_zero_embedding() {
        let (_, m) = net(1);
        let z = Rng::new(3).normal_tensor((3, 12, 16, 16), &Device::Cpu).unwrap();
        let out = m.forward(&z).unwrap();
        assert_eq!(out.t_hat.to_vec1::<f32>().unwrap(), vec![250.0; 3]);
        assert_eq!(out.c_deg.dims(), &[3, 64]);
        assert_eq!(out.c_deg.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(out.eps_inv.dims(), z.dims());
    }

    #[test]
    fn timestep_head_limits() {
        assert_eq!(bounded_timestep(0.0, 50.0, 450.0), 250.0);
        let expect = 50.0 + 400.0 / (1.0 + 4f64.exp());
        assert!((bounded_timestep(-4.0, 50.0, 450.0) - expect).abs() < 1e-12);
        assert!((bounded_timestep(-4.0, 50.0, 450.0) - 57.19).abs() < 5e-3);
        let top = bounded_timestep(1e3, 50.0, 450.0);
        assert!(top < 450.0 && top > 449.99);
        assert!(bounded_timestep(-1e3, 50.0, 450.0) > 50.0);
    }

    #[test]
    fn bounds_hold_for_extreme_inputs() {
        let (store, m) = net(2);
        randomize_heads(&store);
        let mut rng = Rng::new(4);
        for scale in [1.0, 100.0, 1e4] {
            let z = (rng.normal_tensor((4, 12, 16, 16), &Device::Cpu).unwrap() * scale).unwrap();
            for t in m.forward(&z).unwrap().t_hat.to_vec1::<f32>().unwrap() {
                assert!(t > 50.0 && t < 450.0, "{t}");
            }
        }
    }

    #[test]
    fn outputs_are_decoupled() {
        let (store, m) = net(5);
        randomize_heads(&store);
        let z = Rng::new(6).normal_tensor((2, 12, 16, 16), &Device::Cpu).unwrap();
        let seq = m.encode(&z).unwrap();
        let k = m.config().num_query_tokens;
        let n = m.config().num_patches();
        let base = m.decouple(&seq).unwrap();

        let no_queries = Tensor::cat(&[&seq.narrow(1, 0, k).unwrap().zeros_like().unwrap(), &seq.narrow(1, k, n).unwrap()], 1).unwrap();
        let a = m.decouple(&no_queries).unwrap();
        let diff = (a.eps_inv - &base.eps_inv).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);

        let no_spatial = Tensor::cat(&[&seq.narrow(1, 0, k).unwrap(), &seq.narrow(1, k, n).unwrap().zeros_like().unwrap()], 1).unwrap();
        let b = m.decouple(&no_spatial).unwrap();
        assert_eq!(b.t_hat.to_vec1::<f32>().unwrap(), base.t_hat.to_vec1::<f32>().unwrap());
        assert_ne!(a.t_hat.to_vec1::<f32>().unwrap(), base.t_hat.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn every_parameter_is_reachable() {
        let (store, m) = net(7);
        randomize_heads(&store);
        let z = Rng::new(8).normal_tensor((2, 12, 16, 16), &Device::Cpu).unwrap();
        let out = m.forward(&z).unwrap();
        let loss = (out.t_hat.sum_all().unwrap() + out.c_deg.sqr().unwrap().sum_all().unwrap() + out.eps_inv.sqr().unwrap().sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.vars() {
            assert!(grads.get(var.as_tensor()).is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = MineConfig::default();
        assert!(c.validate(1000).is_ok());
        c.num_heads = 5;
        assert!(c.validate(1000).is_err());
        let c = MineConfig { t_max_anchor: 1200.0, ..Default::default() };
        assert!(c.validate(1000).is_err());
        let c = MineConfig { latent_size: 15, ..Default::default() };
        assert!(c.validate(1000).is_err());
    }
}
