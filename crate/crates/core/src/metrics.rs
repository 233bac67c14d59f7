//! Fidelity and sharpness metrics on `[0, 1]` images, plus small statistics
//! used by the analysis experiments.

use crate::image::Image;
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn same_dims(x: &Image, y: &Image) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape(x.dims(), y.dims()));
    }
    Ok(())
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    let n = x.data().len() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// Single-channel view: luminance for RGB, the channel itself otherwise.
fn gray(x: &Image) -> Vec<f64> {
    let (c, h, w) = x.dims();
    let plane = h * w;
    let d = x.data();
    match c {
        3 => (0..plane).map(|i| LUMA[0] * d[i] as f64 + LUMA[1] * d[plane + i] as f64 + LUMA[2] * d[2 * plane + i] as f64).collect(),
        _ => (0..plane).map(|i| (0..c).map(|k| d[k * plane + i] as f64).sum::<f64>() / c as f64).collect(),
    }
}

/// Mean SSIM over all `8x8` windows (stride 1) of the luminance.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    let (_, h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let (gx, gy) = (gray(x), gray(y));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + SSIM_WINDOW {
                for j in c..c + SSIM_WINDOW {
                    let (a, b) = (gx[i * w + j], gy[i * w + j]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Sum of squared 4-neighbour Laplacian responses over interior pixels.
pub fn laplacian_energy(x: &Image) -> f64 {
    let (c, h, w) = x.dims();
    let mut e = 0.0;
    for k in 0..c {
        for i in 1..h.saturating_sub(1) {
            for j in 1..w.saturating_sub(1) {
                let v = 4.0 * x.get(k, i, j) as f64
                    - x.get(k, i - 1, j) as f64
                    - x.get(k, i + 1, j) as f64
                    - x.get(k, i, j - 1) as f64
                    - x.get(k, i, j + 1) as f64;
                e += v * v;
            }
        }
    }
    e
}

/// High-frequency energy of `x` relative to `reference`.
pub fn hf_energy_ratio(x: &Image, reference: &Image) -> Result<f64> {
    same_dims(x, reference)?;
    let denom = laplacian_energy(reference);
    if denom <= 0.0 {
        return Err(Error::InvalidArgument("reference has no high-frequency energy".into()));
    }
    Ok(laplacian_energy(x) / denom)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS statistic needs two non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs two equal-length samples of size >= 2, got {} and {}", x.len(), y.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant sample".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into the
/// edge bins.
pub fn histogram(v: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins.max(1)];
    let n = out.len();
    for x in v {
        let k = ((x - lo) / (hi - lo) * n as f64).floor();
        out[(k.max(0.0) as usize).min(n - 1)] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::gen_clean;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn add_noise(x: &Image, sigma: f64, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v += (sigma * rng.normal()) as f32);
        out
    }

    fn checkerboard(size: usize) -> Image {
        Image::from_fn(1, size, size, |_, y, x| ((x + y) % 2) as f32)
    }

    #[test]
    fn psnr_examples() {
        let x = gen_clean(1, 16);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let z = Image::zeros(1, 4, 4);
        let o = z.map(|_| 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        let t = z.map(|_| 0.1);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_examples() {
        let x = gen_clean(2, 32);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let cb = checkerboard(16);
        assert!(ssim(&cb, &cb.map(|v| 1.0 - v)).unwrap() < 0.0);
        let flat = Image::from_fn(3, 16, 16, |_, _, _| 0.5);
        let noisy = add_noise(&flat, 1e-3, 3);
        assert!(ssim(&flat, &noisy).unwrap() > 0.99);
        assert!(ssim(&Image::zeros(1, 7, 16), &Image::zeros(1, 7, 16)).is_err());
    }

    #[test]
    fn hf_energy_examples() {
        let x = gen_clean(4, 32);
        assert!((hf_energy_ratio(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(hf_energy_ratio(&x.gaussian_blur(1.0), &x).unwrap() < 1.0);
        let noisy = add_noise(&x, 0.05, 5);
        assert!(hf_energy_ratio(&noisy, &x).unwrap() > 1.0);
        let flat = Image::from_fn(3, 8, 8, |_, _, _| 0.3);
        assert!(hf_energy_ratio(&flat, &flat).is_err());
    }

    #[test]
    fn ks_and_spearman_oracles() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert!((ks_statistic(&[0.0, 2.0], &[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let v = [50.5, 100.0, 449.9, 250.0, 10.0, 500.0];
        let h = histogram(&v, 50.0, 450.0, 8);
        assert_eq!(h.iter().sum::<usize>(), v.len());
        assert_eq!(h[0], 2);
        assert_eq!(h[7], 2);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(a in 0u64..1000, b in 0u64..1000) {
            let (x, y) = (gen_clean(a, 16), gen_clean(b, 16));
            prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
            let s = ssim(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
