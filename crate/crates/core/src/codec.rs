//! Toy image codec standing in for a pretrained autoencoder.
//!
//! In `StridedConv` mode the encoder is a learnable stride-2 patch projection
//! initialised to the affine map `z = 2 * space_to_depth(x) - 1`, and the
//! decoder is the fixed inverse of that initial map.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::layers::{space_to_depth_nhwc, Linear};
use crate::nn::{Init, Params};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    Identity,
    StridedConv,
}

impl CodecMode {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "identity" => Ok(Self::Identity),
            "strided_conv" | "strided-conv" | "conv" => Ok(Self::StridedConv),
            other => Err(Error::InvalidArgument(format!("unknown codec mode `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            CodecMode::Identity => "identity",
            CodecMode::StridedConv => "strided_conv",
        }
    }

    pub fn scale(&self) -> usize {
        match self {
            CodecMode::Identity => 1,
            CodecMode::StridedConv => 2,
        }
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.scale() * self.scale()
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    mode: CodecMode,
    channels: usize,
    proj: Option<Linear>,
}

impl Codec {
    pub fn new(p: &Params, mode: CodecMode, channels: usize) -> Result<Self> {
        let proj = match mode {
            CodecMode::Identity => None,
            CodecMode::StridedConv => {
                let n = 4 * channels;
                Some(Linear::with_inits(&p.pp("encoder"), n, n, Init::Eye(2.0), Init::Const(-1.0))?)
            }
        };
        Ok(Self { mode, channels, proj })
    }

    /// A codec with the fixed reference encoder and no parameters.
    pub fn reference(mode: CodecMode, channels: usize) -> Self {
        Self { mode, channels, proj: None }
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn latent_channels(&self) -> usize {
        self.mode.latent_channels(self.channels)
    }

    /// `(B, C, H, W)` image in `[0, 1]` to latent `(B, C * s^2, H / s, W / s)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(self.channels, c));
        }
        let lo = x.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = x.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::InvalidArgument(format!("image values [{lo}, {hi}] outside [0, 1]")));
        }
        match &self.proj {
            None => self.reference_encode(x),
            Some(proj) => {
                let z = proj.forward(&space_to_depth_nhwc(&x.permute((0, 2, 3, 1))?)?)?;
                Ok(z.permute((0, 3, 1, 2))?.contiguous()?)
            }
        }
    }

    /// Encoding with the initial, fixed encoder map. Exact inverse of [`Codec::decode`].
    pub fn reference_encode(&self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            CodecMode::Identity => Ok(x.clone()),
            CodecMode::StridedConv => {
                let z = space_to_depth_nhwc(&x.permute((0, 2, 3, 1))?)?.affine(2.0, -1.0)?;
                Ok(z.permute((0, 3, 1, 2))?.contiguous()?)
            }
        }
    }

    /// Range of latents produced by the reference encoder.
    pub fn latent_range(&self) -> (f64, f64) {
        match self.mode {
            CodecMode::Identity => (0.0, 1.0),
            CodecMode::StridedConv => (-1.0, 1.0),
        }
    }

    /// Latent to image; no clamping.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self.mode {
            CodecMode::Identity => Ok(z.clone()),
            CodecMode::StridedConv => {
                let (b, c4, h, w) = z.dims4()?;
                if c4 != 4 * self.channels {
                    return Err(Error::shape(4 * self.channels, c4));
                }
                let c = self.channels;
                let x = z
                    .affine(0.5, 0.5)?
                    .reshape(vec![b, 2, 2, c, h, w])?
                    .permute(vec![0, 3, 4, 1, 5, 2])?
                    .reshape((b, c, 2 * h, 2 * w))?;
                Ok(x)
            }
        }
    }
}
