//! Procedural clean images and a blur, resize, noise, quantize degradation chain.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

/// Renders a procedural RGB image of gradients, shapes and band-limited texture.
pub fn gen_clean(seed: u64, size: usize) -> Image {
    let mut rng = Rng::new(derive_seed(seed, 0x636c_6561_6e));
    let n = size as f64;
    let color = |rng: &mut Rng| [rng.uniform(), rng.uniform(), rng.uniform()];

    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = vec![[0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (((x as f64 / n - 0.5) * dx + (y as f64 / n - 0.5) * dy) * std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[y * size + x][c] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }

    let shapes = rng.int_range(0, 6);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let kind = rng.int_range(0, 3);
        let (cx, cy) = (rng.uniform_range(0.1, 0.9) * n, rng.uniform_range(0.1, 0.9) * n);
        let r = rng.uniform_range(0.08, 0.35) * n;
        let aspect = rng.uniform_range(0.4, 1.0);
        let rot = rng.uniform_range(0.0, std::f64::consts::PI);
        let period = rng.uniform_range(2.5, 6.0);
        let inside = |px: f64, py: f64| -> bool {
            let (ux, uy) = (px - cx, py - cy);
            let (rx, ry) = (ux * rot.cos() + uy * rot.sin(), -ux * rot.sin() + uy * rot.cos());
            match kind {
                0 => (rx / r).powi(2) + (ry / (r * aspect)).powi(2) <= 1.0,
                1 => rx.abs() <= r && ry.abs() <= r * aspect,
                2 => ry >= -r * aspect && ry <= r * aspect && rx.abs() <= (r * aspect - ry) * 0.5 / aspect,
                _ => rx.abs() <= r && ry.abs() <= r && (rx / period).floor() as i64 % 2 == 0,
            }
        };
        for y in 0..size {
            for x in 0..size {
                // 2x2 supersampled coverage for soft but crisp edges
                let mut cover = 0.0;
                for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    if inside(x as f64 + sx, y as f64 + sy) {
                        cover += 0.25;
                    }
                }
                if cover > 0.0 {
                    let p = &mut img[y * size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - cover) + col[c] * cover;
                    }
                }
            }
        }
    }

    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.uniform_range(1.0, 7.0) * std::f64::consts::TAU / n;
            let th = rng.uniform_range(0.0, std::f64::consts::TAU);
            (f * th.cos(), f * th.sin(), rng.uniform_range(0.0, std::f64::consts::TAU), rng.uniform())
        })
        .collect();
    let tex_amp = rng.uniform_range(0.0, 0.12);
    let contrast = rng.uniform_range(0.15, 1.3);
    let mut mean = [0f64; 3];
    for p in &img {
        for c in 0..3 {
            mean[c] += p[c] / (size * size) as f64;
        }
    }
    Image::from_fn(3, size, size, |c, y, x| {
        let tex: f64 = waves
            .iter()
            .map(|(fx, fy, ph, w)| w * (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum::<f64>()
            / 3.0;
        let v = img[y * size + x][c] + tex_amp * tex;
        (mean[c] + contrast * (v - mean[c])).clamp(0.0, 1.0) as f32
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub blur_sigma: f64,
    pub downscale: usize,
    /// Standard deviation of additive noise in `[0, 1]` intensity units.
    pub noise_sigma: f64,
    pub quant_levels: u32,
    pub severity: Option<f64>,
}

impl DegradationSpec {
    pub const BLUR_RANGE: (f64, f64) = (0.2, 3.0);
    pub const NOISE_RANGE: (f64, f64) = (0.0, 0.1);
    pub const QUANT_LEVELS: u32 = 32;

    /// Selects linearly within each parameter range; `0` is mildest, `1` harshest.
    pub fn from_severity(severity: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} not in [0, 1]")));
        }
        let lerp = |(lo, hi): (f64, f64)| lo + (hi - lo) * severity;
        Ok(Self {
            blur_sigma: lerp(Self::BLUR_RANGE),
            downscale: 4,
            noise_sigma: lerp(Self::NOISE_RANGE),
            quant_levels: Self::QUANT_LEVELS,
            severity: Some(severity),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.downscale == 0 || self.quant_levels < 2 || self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("invalid degradation spec {self:?}")));
        }
        Ok(())
    }
}

/// Blur, bicubic downscale, clipped Gaussian noise, then uniform quantization.
pub fn degrade(x: &Image, spec: &DegradationSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    let f = spec.downscale;
    if x.height() % f != 0 || x.width() % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image not divisible by downscale factor {f}",
            x.height(),
            x.width()
        )));
    }
    let small = x.gaussian_blur(spec.blur_sigma).resize_bicubic(x.height() / f, x.width() / f);
    let mut rng = Rng::new(derive_seed(seed, 0x6465_6772));
    let mut out = small;
    if spec.noise_sigma > 0.0 {
        let noise = rng.normal_vec(out.data().len());
        for (v, n) in out.data_mut().iter_mut().zip(noise) {
            *v += spec.noise_sigma as f32 * n;
        }
    }
    let q = (spec.quant_levels - 1) as f32;
    Ok(out.map(|v| (v.clamp(0.0, 1.0) * q).round() / q))
}

/// A clean/degraded training pair.
#[derive(Debug, Clone)]
pub struct Pair {
    pub hq: Image,
    pub lq: Image,
    pub spec: DegradationSpec,
    pub seed: u64,
}

/// Where clean images come from.
#[derive(Debug, Clone)]
pub enum CleanSource {
    Procedural { size: usize },
    /// PNG files, center-cropped and resized to `size`; cycled by index.
    Directory { images: Vec<Image> },
}

impl CleanSource {
    pub fn from_dir(dir: &Path, size: usize) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!("no PNG files in {}", dir.display())));
        }
        let images = paths
            .iter()
            .map(|p| Ok(Image::load_png(p)?.center_crop_resize(size)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Directory { images })
    }

    pub fn image(&self, seed: u64) -> Image {
        match self {
            CleanSource::Procedural { size } => gen_clean(seed, *size),
            CleanSource::Directory { images } => images[(seed % images.len() as u64) as usize].clone(),
        }
    }
}

/// Severity used when synthesizing a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Fixed(f64),
    /// Drawn uniformly in `[0, 1]` per pair.
    Mixed,
}

/// Deterministically synthesizes pair number `index` of the stream rooted at `seed`.
pub fn make_pair(source: &CleanSource, severity: Severity, seed: u64, index: u64) -> Result<Pair> {
    let pair_seed = derive_seed(seed, index);
    let hq = source.image(pair_seed);
    let sev = match severity {
        Severity::Fixed(v) => v,
        Severity::Mixed => Rng::new(derive_seed(pair_seed, 0x7365_76)).uniform(),
    };
    let spec = DegradationSpec::from_severity(sev)?;
    let lq = degrade(&hq, &spec, pair_seed)?;
    Ok(Pair { hq, lq, spec, seed: pair_seed })
}

pub fn make_pairs(source: &CleanSource, severity: Severity, seed: u64, range: std::ops::Range<u64>) -> Result<Vec<Pair>> {
    range.map(|i| make_pair(source, severity, seed, i)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub hq: String,
    pub lq: String,
    pub seed: u64,
    pub spec: DegradationSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub config_fingerprint: String,
    pub pairs: Vec<ManifestEntry>,
}

/// Writes `hq/NNNN.png`, `lq/NNNN.png` and `manifest.json` under `out`.
pub fn write_dataset(out: &Path, pairs: &[Pair], seed: u64, size: usize, fingerprint: &str) -> Result<Manifest> {
    std::fs::create_dir_all(out.join("hq"))?;
    std::fs::create_dir_all(out.join("lq"))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{i:04}.png");
        p.hq.save_png(&out.join("hq").join(&name))?;
        p.lq.save_png(&out.join("lq").join(&name))?;
        entries.push(ManifestEntry {
            index: i,
            hq: format!("hq/{name}"),
            lq: format!("lq/{name}"),
            seed: p.seed,
            spec: p.spec,
        });
    }
    let manifest = Manifest { seed, size, config_fingerprint: fingerprint.to_string(), pairs: entries };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Pair>)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let pairs = manifest
        .pairs
        .iter()
        .map(|e| {
            Ok(Pair {
                hq: Image::load_png(&dir.join(&e.hq))?,
                lq: Image::load_png(&dir.join(&e.lq))?,
                spec: e.spec,
                seed: e.seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}
