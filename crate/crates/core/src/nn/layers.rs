//! Differentiable building blocks.
//!
//! Convolutional layers work on channels-last `(B, H, W, C)` tensors and are
//! expressed as shifted views followed by one matrix product, which keeps both
//! passes on the dense GEMM path.

use candle_core::{DType, Tensor, D};

use super::params::{Init, Params};
use crate::{Error, Result};

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Applies a matrix product over the last dimension of an arbitrary-rank tensor.
fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims();
    let last = *dims.last().ok_or_else(|| Error::shape("rank >= 1", dims))?;
    let rows = x.elem_count() / last;
    let y = x.reshape((rows, last))?.matmul(w)?;
    let mut out = dims.to_vec();
    *out.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, Init::Normal(1.0 / (in_dim as f64).sqrt()))
    }

    pub fn zeroed(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, Init::Zeros)
    }

    pub fn with_init(p: &Params, in_dim: usize, out_dim: usize, init: Init) -> Result<Self> {
        Self::with_inits(p, in_dim, out_dim, init, Init::Zeros)
    }

    pub fn with_inits(p: &Params, in_dim: usize, out_dim: usize, weight: Init, bias: Init) -> Result<Self> {
        let weight = p.get("weight", (in_dim, out_dim), weight)?;
        let bias = Some(p.get("bias", out_dim, bias)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(p: &Params, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = p.get("weight", (in_dim, out_dim), Init::Normal(1.0 / (in_dim as f64).sqrt()))?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1, channels-last.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    weight: Tensor,
    bias: Tensor,
    in_ch: usize,
}

impl Conv3x3 {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize) -> Result<Self> {
        let std = 1.0 / ((9 * in_ch) as f64).sqrt();
        Self::with_init(p, in_ch, out_ch, Init::Normal(std))
    }

    pub fn with_init(p: &Params, in_ch: usize, out_ch: usize, init: Init) -> Result<Self> {
        let weight = p.get("weight", (9 * in_ch, out_ch), init)?;
        let bias = p.get("bias", out_ch, Init::Zeros)?;
        Ok(Self { weight, bias, in_ch })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::shape(self.in_ch, c));
        }
        let xp = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                taps.push(xp.narrow(1, dy, h)?.narrow(2, dx, w)?);
            }
        }
        let cols = Tensor::cat(&taps, 3)?.reshape((b * h * w, 9 * c))?;
        let y = cols.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, h, w, ()))?)
    }
}

/// `(B, H, W, C) -> (B, H/2, W/2, 4C)`; channel order `(dy, dx, c)`.
pub fn space_to_depth_nhwc(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("even spatial dims", (h, w)));
    }
    Ok(x
        .reshape(vec![b, h / 2, 2, w / 2, 2, c])?
        .permute(vec![0, 1, 3, 2, 4, 5])?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// Nearest-neighbour x2 upsampling, channels-last.
pub fn upsample2_nhwc(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape(vec![b, h, 1, w, 1, c])?
        .broadcast_as(vec![b, h, 2, w, 2, c])?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Stride-2 downsampling: space-to-depth followed by a learned channel mix,
/// i.e. a 2x2 convolution with stride 2.
#[derive(Debug, Clone)]
pub struct Down2 {
    proj: Linear,
}

impl Down2 {
    pub fn new(p: &Params, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(p, 4 * in_ch, out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&space_to_depth_nhwc(x)?)
    }
}

/// Group normalization over channels-last feature maps.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(p: &Params, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: p.get("gamma", channels, Init::Ones)?,
            beta: p.get("beta", channels, Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        // one contiguous row per (sample, group)
        let xg = x.reshape((b, h * w, g, c / g))?.transpose(1, 2)?.contiguous()?.reshape((b, g, ()))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, g, h * w, c / g))?.transpose(1, 2)?.reshape((b, h, w, c))?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.get("gamma", dim, Init::Ones)?,
            beta: p.get("beta", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Sinusoidal embedding of a per-sample (possibly fractional) timestep.
///
/// `t` has shape `(B,)`; output is `(B, dim)` laid out as `[cos | sin]`.
/// Differentiable in `t`.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width {dim} must be even")));
    }
    let half = dim / 2;
    let freqs: Vec<f32> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() as f32)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.cos()?, args.sin()?], 1)?)
}

/// Fixed 2D sinusoidal position table of shape `(gh * gw, dim)`, row-major over the grid.
pub fn sincos_2d(gh: usize, gw: usize, dim: usize, device: &candle_core::Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::InvalidArgument(format!("position width {dim} must be a multiple of 4")));
    }
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            for (pos, _) in [(y as f64, 0), (x as f64, 1)] {
                for i in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    data.push((pos * freq).sin() as f32);
                }
                for i in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    data.push((pos * freq).cos() as f32);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (gh * gw, dim), device)?)
}

/// Pre-norm multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &Params, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&p.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, e) = x.dims3()?;
        let hd = e / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(vec![b, l, 3, self.heads, hd])?
            .permute(vec![2, 0, 3, 1, 4])?;
        let q = qkv.get(0)?.contiguous()?.reshape((b * self.heads, l, hd))?;
        let k = qkv.get(1)?.contiguous()?.reshape((b * self.heads, l, hd))?;
        let v = qkv.get(2)?.contiguous()?.reshape((b * self.heads, l, hd))?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = softmax_last(&att)?;
        let y = att
            .matmul(&v)?
            .reshape((b, self.heads, l, hd))?
            .transpose(1, 2)?
            .reshape((b, l, e))?;
        self.proj.forward(&y)
    }
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
