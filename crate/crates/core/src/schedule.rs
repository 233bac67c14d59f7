//! Variance-preserving noise schedule, forward diffusion and one-step denoising.
//!
//! Tables are indexed by integer timesteps `0..=t_max` where `t = 0` is the
//! clean latent (`alpha = 1`, `beta = 0`). Fractional timesteps are served by
//! piecewise-linear interpolation of each coefficient, which keeps the
//! coefficients differentiable with respect to a predicted timestep.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Generator of the per-step variance sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// DDPM linear variance sequence from `beta_start` to `beta_end`.
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleKind {
    /// Parses a schedule identifier; only `linear` is known.
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "linear" => Ok(Self::default()),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            ScheduleKind::Linear { .. } => "linear",
        }
    }

    fn variances(&self, t_max: usize) -> Vec<f64> {
        match *self {
            ScheduleKind::Linear { beta_start, beta_end } => (0..t_max)
                .map(|k| {
                    if t_max == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * k as f64 / (t_max - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

/// Coefficients at a continuous timestep together with their slopes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
    pub d_alpha: f64,
    pub d_beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    kind: ScheduleKind,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(t_max: usize, kind: ScheduleKind) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::InvalidArgument("t_max must be at least 1".into()));
        }
        let ScheduleKind::Linear { beta_start, beta_end } = kind;
        if !(beta_start > 0.0 && beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "variance endpoints must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut beta = Vec::with_capacity(t_max + 1);
        alpha.push(1.0);
        beta.push(0.0);
        let mut alpha_bar = 1.0f64;
        for b in kind.variances(t_max) {
            alpha_bar *= 1.0 - b;
            alpha.push(alpha_bar.sqrt());
            beta.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self { t_max, kind, alpha, beta })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    fn check(&self, t: f64) -> Result<()> {
        if !(t.is_finite() && (0.0..=self.t_max as f64).contains(&t)) {
            return Err(Error::TimestepOutOfRange { value: t, t_max: self.t_max });
        }
        Ok(())
    }

    /// Index of the segment `[lo, lo + 1]` used for `t`. Integer knots take the
    /// segment to their right, except `t_max` which takes the one to its left.
    fn segment(&self, t: f64) -> usize {
        (t.floor() as usize).min(self.t_max - 1)
    }

    /// Interpolated `(alpha_t, beta_t)`; exact table entries at integer `t`.
    pub fn interp(&self, t: f64) -> Result<(f64, f64)> {
        let c = self.interp_slope(t)?;
        Ok((c.alpha, c.beta))
    }

    pub fn interp_slope(&self, t: f64) -> Result<Coeffs> {
        self.check(t)?;
        let lo = self.segment(t);
        let f = t - lo as f64;
        let (a0, a1) = (self.alpha[lo], self.alpha[lo + 1]);
        let (b0, b1) = (self.beta[lo], self.beta[lo + 1]);
        Ok(Coeffs {
            alpha: (1.0 - f) * a0 + f * a1,
            beta: (1.0 - f) * b0 + f * b1,
            d_alpha: a1 - a0,
            d_beta: b1 - b0,
        })
    }

    /// Differentiable interpolation for a batch of timesteps `t: (B,)`.
    ///
    /// Returns `(alpha, beta)`, each `(B,)` in the dtype of `t`. Gradients flow
    /// into `t` through the interpolation weight.
    pub fn interp_tensor(&self, t: &Tensor) -> Result<(Tensor, Tensor)> {
        if t.rank() != 1 {
            return Err(Error::shape("(B,)", t.dims()));
        }
        let values = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let n = values.len();
        let (mut lo_t, mut a0, mut a1, mut b0, mut b1) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for &v in &values {
            self.check(v)?;
            let lo = self.segment(v);
            lo_t.push(lo as f64);
            a0.push(self.alpha[lo]);
            a1.push(self.alpha[lo + 1]);
            b0.push(self.beta[lo]);
            b1.push(self.beta[lo + 1]);
        }
        let dev = t.device();
        let mk = |v: Vec<f64>| -> Result<Tensor> { Ok(Tensor::from_vec(v, n, dev)?.to_dtype(t.dtype())?) };
        let frac = t.sub(&mk(lo_t)?)?;
        let keep = frac.affine(-1.0, 1.0)?;
        let alpha = (keep.mul(&mk(a0)?)? + frac.mul(&mk(a1)?)?)?;
        let beta = (keep.mul(&mk(b0)?)? + frac.mul(&mk(b1)?)?)?;
        Ok((alpha, beta))
    }

    /// `alpha_t * z0 + beta_t * eps` with per-sample timesteps `t: (B,)`.
    pub fn diffuse(&self, z0: &Tensor, t: &Tensor, eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::shape(z0.dims(), eps.dims()));
        }
        check_batch(z0, t)?;
        let (alpha, beta) = self.interp_tensor(t)?;
        Ok((per_sample(&alpha, z0)?.broadcast_mul(z0)? + per_sample(&beta, eps)?.broadcast_mul(eps)?)?)
    }

    /// Single-step estimate of the clean latent, `(z_t - beta_t * eps_hat) / alpha_t`.
    pub fn denoise_one_step(&self, z_t: &Tensor, eps_hat: &Tensor, t: &Tensor) -> Result<Tensor> {
        if z_t.dims() != eps_hat.dims() {
            return Err(Error::shape(z_t.dims(), eps_hat.dims()));
        }
        check_batch(z_t, t)?;
        let (alpha, beta) = self.interp_tensor(t)?;
        let smallest = alpha.to_dtype(DType::F64)?.min_all()?.to_scalar::<f64>()?;
        if smallest < 1e-8 {
            return Err(Error::VanishingSignal { alpha: smallest });
        }
        let num = (z_t - per_sample(&beta, eps_hat)?.broadcast_mul(eps_hat)?)?;
        Ok(num.broadcast_div(&per_sample(&alpha, z_t)?)?)
    }

    /// Scalar-timestep convenience wrapper around [`NoiseSchedule::diffuse`].
    pub fn diffuse_at(&self, z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        let tt = Tensor::full(t, z0.dim(0)?, z0.device())?.to_dtype(z0.dtype())?;
        self.diffuse(z0, &tt, eps)
    }

    pub fn denoise_at(&self, z_t: &Tensor, eps_hat: &Tensor, t: f64) -> Result<Tensor> {
        let tt = Tensor::full(t, z_t.dim(0)?, z_t.device())?.to_dtype(z_t.dtype())?;
        self.denoise_one_step(z_t, eps_hat, &tt)
    }
}

fn check_batch(x: &Tensor, t: &Tensor) -> Result<()> {
    if t.rank() != 1 || t.dim(0)? != x.dim(0)? {
        return Err(Error::shape(format!("({},)", x.dim(0)?), t.dims()));
    }
    Ok(())
}

/// Reshapes a `(B,)` coefficient so it broadcasts against `like`.
pub(crate) fn per_sample(coef: &Tensor, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1usize; like.rank()];
    shape[0] = coef.dim(0)?;
    Ok(coef.reshape(shape)?.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::build(1000, ScheduleKind::default()).unwrap()
    }

    fn vec_of(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn clean_boundary_and_vp_identity() {
        let s = default_schedule();
        assert_eq!(s.alphas()[0], 1.0);
        assert_eq!(s.betas()[0], 0.0);
        for t in [1, 500, 1000] {
            let (a, b) = (s.alphas()[t], s.betas()[t]);
            assert!((a * a + b * b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn short_schedule_is_strictly_monotone() {
        let s = NoiseSchedule::build(10, ScheduleKind::default()).unwrap();
        assert_eq!(s.alphas().len(), 11);
        for w in s.alphas().windows(2) {
            assert!(w[1] < w[0]);
        }
        for w in s.betas().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::build(0, ScheduleKind::default()).is_err());
        assert!(ScheduleKind::parse("cosine").is_err());
        assert_eq!(ScheduleKind::parse("linear").unwrap(), ScheduleKind::default());
        let s = default_schedule();
        assert!(matches!(s.interp(-0.5), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(s.interp(1000.01), Err(Error::TimestepOutOfRange { .. })));
        assert!(s.interp(f64::NAN).is_err());
    }

    #[test]
    fn knots_are_exact_and_midpoints_average() {
        let s = default_schedule();
        assert_eq!(s.interp(100.0).unwrap(), (s.alphas()[100], s.betas()[100]));
        assert_eq!(s.interp(1000.0).unwrap(), (s.alphas()[1000], s.betas()[1000]));
        let (a, b) = s.interp(100.5).unwrap();
        assert!((a - (s.alphas()[100] + s.alphas()[101]) / 2.0).abs() < 1e-15);
        assert!((b - (s.betas()[100] + s.betas()[101]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn slope_matches_central_difference() {
        let s = default_schedule();
        let h = 1e-3;
        let c = s.interp_slope(100.25).unwrap();
        let fd = (s.interp(100.25 + h).unwrap().0 - s.interp(100.25 - h).unwrap().0) / (2.0 * h);
        assert!(((c.d_alpha - fd) / fd).abs() < 1e-4);
    }

    #[test]
    fn knot_derivative_is_one_sided() {
        let s = default_schedule();
        let right = s.interp_slope(100.0).unwrap().d_alpha;
        assert_eq!(right, s.alphas()[101] - s.alphas()[100]);
        let last = s.interp_slope(1000.0).unwrap().d_alpha;
        assert_eq!(last, s.alphas()[1000] - s.alphas()[999]);
    }

    #[test]
    fn diffuse_boundaries() {
        let dev = Device::Cpu;
        let s = default_schedule();
        let mut rng = Rng::new(1);
        let z0 = rng.normal_tensor((2, 3, 4, 4), &dev).unwrap();
        let eps = rng.normal_tensor((2, 3, 4, 4), &dev).unwrap();
        assert_eq!(vec_of(&s.diffuse_at(&z0, 0.0, &eps).unwrap()), vec_of(&z0));
        let zero = z0.zeros_like().unwrap();
        let out = s.diffuse_at(&zero, 321.0, &eps).unwrap();
        let b = s.betas()[321];
        for (o, e) in vec_of(&out).iter().zip(vec_of(&eps)) {
            assert!((o - b * e).abs() < 1e-6);
        }
    }

    #[test]
    fn diffuse_at_horizon_matches_direct_product() {
        // independent recomputation of alpha_bar from the raw variance sequence
        let mut alpha_bar = 1.0f64;
        for k in 0..1000 {
            alpha_bar *= 1.0 - (1e-4 + (2e-2 - 1e-4) * k as f64 / 999.0);
        }
        let (a_ref, b_ref) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
        let dev = Device::Cpu;
        let s = default_schedule();
        let mut rng = Rng::new(2);
        let z0 = rng.normal_tensor((1, 3, 4, 4), &dev).unwrap();
        let eps = rng.normal_tensor((1, 3, 4, 4), &dev).unwrap();
        let out = vec_of(&s.diffuse_at(&z0, 1000.0, &eps).unwrap());
        for ((o, z), e) in out.iter().zip(vec_of(&z0)).zip(vec_of(&eps)) {
            assert!((o - (a_ref * z + b_ref * e)).abs() < 1e-2);
        }
    }

    #[test]
    fn denoise_inverts_diffuse_with_oracle_noise() {
        let dev = Device::Cpu;
        let s = default_schedule();
        let mut rng = Rng::new(3);
        let z0 = rng.normal_tensor((2, 3, 4, 4), &dev).unwrap().to_dtype(DType::F64).unwrap();
        let eps = rng.normal_tensor((2, 3, 4, 4), &dev).unwrap().to_dtype(DType::F64).unwrap();
        for t in [0.5, 17.0, 250.75, 999.9] {
            let zt = s.diffuse_at(&z0, t, &eps).unwrap();
            let back = vec_of(&s.denoise_at(&zt, &eps, t).unwrap());
            for (r, z) in back.iter().zip(vec_of(&z0)) {
                assert!((r - z).abs() <= 1e-5 * z.abs().max(1.0), "t={t}: {r} vs {z}");
            }
        }
        let zt = rng.normal_tensor((1, 3, 2, 2), &dev).unwrap().to_dtype(DType::F64).unwrap();
        let out = s.denoise_at(&zt, &zt.zeros_like().unwrap(), 40.0).unwrap();
        let a = s.alphas()[40];
        for (o, z) in vec_of(&out).iter().zip(vec_of(&zt)) {
            assert!((o - z / a).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_interpolation_gradient_matches_finite_difference() {
        let dev = Device::Cpu;
        let s = default_schedule();
        let t = Var::from_tensor(&Tensor::new(&[100.25f64, 733.6], &dev).unwrap()).unwrap();
        let (a, b) = s.interp_tensor(t.as_tensor()).unwrap();
        let grads = (a.sum_all().unwrap() + b.sum_all().unwrap()).unwrap().backward().unwrap();
        let g = vec_of(grads.get(t.as_tensor()).unwrap());
        for (i, tv) in [100.25f64, 733.6].iter().enumerate() {
            let h = 1e-3;
            let f = |x: f64| {
                let (a, b) = s.interp(x).unwrap();
                a + b
            };
            let fd = (f(tv + h) - f(tv - h)) / (2.0 * h);
            assert!(((g[i] - fd) / fd).abs() < 1e-4, "{} vs {fd}", g[i]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dev = Device::Cpu;
        let s = default_schedule();
        let z = Tensor::zeros((2, 3, 4, 4), DType::F32, &dev).unwrap();
        let e = Tensor::zeros((2, 3, 4, 2), DType::F32, &dev).unwrap();
        assert!(matches!(s.diffuse_at(&z, 3.0, &e), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn fractional_vp_deviation_is_small(t in 0.0f64..1000.0) {
            let (a, b) = default_schedule().interp(t).unwrap();
            prop_assert!((a * a + b * b - 1.0).abs() < 1e-3);
        }

        #[test]
        fn monotone_within_unit_interval(k in 0usize..999, f1 in 0.0f64..1.0, f2 in 0.0f64..1.0) {
            let s = default_schedule();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let (a_lo, b_lo) = s.interp(k as f64 + lo).unwrap();
            let (a_hi, b_hi) = s.interp(k as f64 + hi).unwrap();
            prop_assert!(a_hi <= a_lo && b_hi >= b_lo);
        }

        #[test]
        fn oracle_inversion_identity(t in 0.01f64..1000.0, seed in 0u64..1000) {
            let dev = Device::Cpu;
            let s = default_schedule();
            let mut rng = Rng::new(seed);
            let z0 = rng.normal_tensor((1, 2, 3, 3), &dev).unwrap().to_dtype(DType::F64).unwrap();
            let eps = rng.normal_tensor((1, 2, 3, 3), &dev).unwrap().to_dtype(DType::F64).unwrap();
            let back = s.denoise_at(&s.diffuse_at(&z0, t, &eps).unwrap(), &eps, t).unwrap();
            for (r, z) in vec_of(&back).iter().zip(vec_of(&z0)) {
                prop_assert!((r - z).abs() <= 1e-5 * z.abs().max(1.0));
            }
        }
    }
}
