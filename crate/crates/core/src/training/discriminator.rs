use candle_core::Tensor;

use crate::nn::layers::{Conv3x3, Down2, Linear};
use crate::nn::Params;
use crate::Result;

fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// Latent patch discriminator producing one score per `2x2` latent patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    conv_in: Conv3x3,
    down: Down2,
    conv: Conv3x3,
    head: Linear,
}

impl Discriminator {
    pub fn new(p: &Params, latent_channels: usize, width: usize) -> Result<Self> {
        Ok(Self {
            conv_in: Conv3x3::new(&p.pp("conv_in"), latent_channels, width)?,
            down: Down2::new(&p.pp("down"), width, 2 * width)?,
            conv: Conv3x3::new(&p.pp("conv"), 2 * width, 2 * width)?,
            head: Linear::new(&p.pp("head"), 2 * width, 1)?,
        })
    }

    /// `(B, C, H, W)` latent to a `(B, H/2, W/2)` score map.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let x = z.permute((0, 2, 3, 1))?;
        let h = leaky_relu(&self.conv_in.forward(&x)?)?;
        let h = leaky_relu(&self.down.forward(&h)?)?;
        let h = leaky_relu(&self.conv.forward(&h)?)?;
        Ok(self.head.forward(&h)?.squeeze(3)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn produces_patch_scores() {
        let store = ParamStore::new();
        let d = Discriminator::new(&Params::init(&store, 0, &Device::Cpu), 12, 32).unwrap();
        let z = Tensor::zeros((3, 12, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&z).unwrap().dims(), &[3, 8, 8]);
    }
}
