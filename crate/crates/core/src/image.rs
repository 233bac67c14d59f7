//! Planar float images and the resampling filters used by the degradation chain.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

/// A `C x H x W` image with `f32` samples, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(channels * height * width, data.len()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { data: self.data.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation over all samples.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?)
    }

    /// Stacks equally sized images into a `(B, C, H, W)` tensor.
    pub fn batch_to_tensor(images: &[Image], device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let dims = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.channels, im.height, im.width) != dims {
                return Err(Error::shape(dims, (im.channels, im.height, im.width)));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), dims.0, dims.1, dims.2), device)?)
    }

    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat.chunks(c * h * w).take(b).map(|d| Image { channels: c, height: h, width: w, data: d.to_vec() }).collect())
    }

    /// Loads a PNG as RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Ok(Self::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
    }

    /// Writes an 8-bit PNG; samples are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let px = |c: usize, y: u32, x: u32| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| image::Luma([px(0, y, x)])).save(path)?,
            3 => image::RgbImage::from_fn(w, h, |x, y| image::Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])).save(path)?,
            c => return Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        }
        Ok(())
    }

    /// Square center crop followed by a bicubic resize to `size x size`.
    pub fn center_crop_resize(&self, size: usize) -> Self {
        let side = self.height.min(self.width);
        let (oy, ox) = ((self.height - side) / 2, (self.width - side) / 2);
        let crop = Self::from_fn(self.channels, side, side, |c, y, x| self.get(c, y + oy, x + ox));
        if side == size {
            crop
        } else {
            crop.resize_bicubic(size, size)
        }
    }

    /// Separable Gaussian blur with reflected borders; `sigma <= 0` is a no-op.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        let horiz = self.convolve_axis(&k, radius, true);
        horiz.convolve_axis(&k, radius, false)
    }

    fn convolve_axis(&self, k: &[f64], radius: isize, horizontal: bool) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let off = j as isize - radius;
                let (yy, xx) = if horizontal {
                    (y as isize, reflect(x as isize + off, w))
                } else {
                    (reflect(y as isize + off, h), x as isize)
                };
                acc += kv * self.get(c, yy as usize, xx as usize) as f64;
            }
            acc as f32
        })
    }

    /// Bicubic resampling (Keys kernel, `a = -0.5`) with antialiasing on
    /// downscale, pixel-center aligned, replicated borders.
    pub fn resize_bicubic(&self, out_h: usize, out_w: usize) -> Self {
        let wy = resample_weights(self.height, out_h);
        let wx = resample_weights(self.width, out_w);
        let mut tmp = Image::zeros(self.channels, self.height, out_w);
        for c in 0..self.channels {
            for y in 0..self.height {
                for (x, taps) in wx.iter().enumerate() {
                    let v: f64 = taps.iter().map(|(i, wt)| wt * self.get(c, y, *i) as f64).sum();
                    tmp.set(c, y, x, v as f32);
                }
            }
        }
        let mut out = Image::zeros(self.channels, out_h, out_w);
        for c in 0..self.channels {
            for (y, taps) in wy.iter().enumerate() {
                for x in 0..out_w {
                    let v: f64 = taps.iter().map(|(i, wt)| wt * tmp.get(c, *i, x) as f64).sum();
                    out.set(c, y, x, v as f32);
                }
            }
        }
        out
    }
}

fn reflect(i: isize, n: isize) -> isize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

pub(crate) fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(source index, weight)` for each output position.
fn resample_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = cubic((center - i as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, n_in as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Bicubic upsampling of a `(B, C, H, W)` tensor by an integer factor.
pub fn upsample_batch(t: &Tensor, factor: usize) -> Result<Tensor> {
    let images = Image::batch_from_tensor(t)?;
    let up: Vec<Image> = images.iter().map(|im| im.resize_bicubic(im.height * factor, im.width * factor)).collect();
    Image::batch_to_tensor(&up, t.device())
}
