//! DDPM noise schedule and the closed-form pieces of the ancestral sampler.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math::sqrt;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    // index 0 is the clean boundary, alpha_bar(0) = 1
    alphas_cumprod: Vec<f64>,
}

/// Coefficients of `q(x_prev | x_t, x0)` for a (possibly strided) step `t -> prev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub variance: f64,
}

impl NoiseSchedule {
    /// `num_steps` betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps < 2 {
            return Err(CoreError::InvalidArgument(format!("schedule needs >= 2 steps, got {num_steps}")));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "betas must satisfy 0 < {beta_start} < {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// The default training schedule: 1000 steps from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alphas_cumprod = Vec::with_capacity(betas.len() + 1);
        let mut acc = 1.0f64;
        alphas_cumprod.push(acc);
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Self { betas, alphas_cumprod }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=N`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `t` in `0..=N`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            Err(CoreError::StepOutOfRange {
                step: t,
                max: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn q_sample_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((sqrt(ab), sqrt(1.0 - ab)))
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`, elementwise.
    pub fn q_sample(&self, x0: &[f32], noise: &[f32], t: usize) -> Result<Vec<f32>> {
        if x0.len() != noise.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "x0 has {} values, noise {}",
                x0.len(),
                noise.len()
            )));
        }
        let (a, b) = self.q_sample_coeffs(t)?;
        Ok(x0
            .iter()
            .zip(noise)
            .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
            .collect())
    }

    /// Descending timesteps for a strided sampler, ending at `N / steps`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let n = self.num_steps();
        if steps == 0 || steps > n {
            return Err(CoreError::InvalidArgument(format!("sampling steps {steps} must lie in 1..={n}")));
        }
        Ok((1..=steps).rev().map(|k| k * n / steps).collect())
    }

    /// Posterior coefficients for the step `t -> prev` with `prev < t`.
    pub fn posterior(&self, t: usize, prev: usize) -> Result<Posterior> {
        self.check_step(t)?;
        if prev >= t {
            return Err(CoreError::InvalidArgument(format!("previous step {prev} must precede {t}")));
        }
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(prev);
        let alpha = ab_t / ab_prev;
        let beta = 1.0 - alpha;
        let denom = 1.0 - ab_t;
        Ok(Posterior {
            coef_x0: sqrt(ab_prev) * beta / denom,
            coef_xt: sqrt(alpha) * (1.0 - ab_prev) / denom,
            variance: beta * (1.0 - ab_prev) / denom,
        })
    }

    /// `x0` implied by `x_t` and a noise prediction.
    pub fn predict_x0(&self, x_t: f64, eps: f64, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        (x_t - sqrt(1.0 - ab) * eps) / sqrt(ab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.num_steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let (a, b) = s.q_sample_coeffs(t).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
        assert!(s.beta(1) < s.beta(1000));
    }

    #[test]
    fn q_sample_boundaries() {
        let s = NoiseSchedule::default_linear();
        let x0 = [0.3f32, -0.7, 0.1];
        let noise = [1.0f32, 2.0, -3.0];
        assert_eq!(s.q_sample(&x0, &noise, 0).unwrap(), x0.to_vec());
        let zero = s.q_sample(&[0.0; 3], &noise, 500).unwrap();
        let b = (1.0 - s.alpha_bar(500)).sqrt();
        for (z, e) in zero.iter().zip(noise) {
            assert!((*z as f64 - b * e as f64).abs() < 1e-6);
        }
        assert!(matches!(
            s.q_sample(&x0, &noise, 1001),
            Err(CoreError::StepOutOfRange { step: 1001, max: 1000 })
        ));
    }

    #[test]
    fn final_step_posterior_is_x0() {
        let s = NoiseSchedule::default_linear();
        let p = s.posterior(1, 0).unwrap();
        assert!((p.coef_x0 - 1.0).abs() < 1e-12);
        assert_eq!(p.coef_xt, 0.0);
        assert_eq!(p.variance, 0.0);
    }

    #[test]
    fn strided_timesteps() {
        let s = NoiseSchedule::default_linear();
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(s.sampling_timesteps(0).is_err());
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
    }
}
