//! Cosine noise schedule and the deterministic DDIM update.

use tokensplit_tensor::{Real, Tensor};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal fractions `ᾱ_t` for `t = 0..total`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(total: usize) -> Self {
        let f = |s: f64| {
            let x = (s / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(total);
        let mut prod = 1.0;
        for t in 0..total {
            let beta = (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(MAX_BETA);
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        NoiseSchedule { alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    /// `ᾱ` at timestep `t`; `None` (before the first step) means clean data.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    /// Descending timesteps for a `steps`-step sampler, starting at the
    /// noisiest training timestep.
    pub fn timesteps(&self, steps: usize) -> Vec<usize> {
        let total = self.len();
        (0..steps)
            .rev()
            .map(|i| ((i + 1) * total).div_ceil(steps) - 1)
            .collect()
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε`.
    pub fn add_noise<T: Real>(&self, x0: &Tensor<T>, noise: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(Some(t));
        let (s, n) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(x0.zip_map(noise, "add_noise", |x, e| s * x + n * e)?)
    }

    /// Clean-sample estimate `(z_t - sqrt(1-ᾱ_t)·ε̂) / sqrt(ᾱ_t)`.
    pub fn predict_x0<T: Real>(&self, z: &Tensor<T>, eps: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let ab = self.alpha_bar(Some(t));
        let (s, n) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(z.zip_map(eps, "predict_x0", |z, e| (z - n * e) / s)?)
    }

    /// Deterministic DDIM step (η = 0) from `t` to `t_prev`; `t_prev = None`
    /// steps to clean data.
    pub fn ddim_step<T: Real>(
        &self,
        z: &Tensor<T>,
        eps: &Tensor<T>,
        t: usize,
        t_prev: Option<usize>,
    ) -> Result<Tensor<T>> {
        if t_prev == Some(t) {
            return Ok(z.clone());
        }
        if matches!(t_prev, Some(p) if p > t) {
            return Err(Error::contract(format!(
                "ddim_step needs t_prev < t, got {t_prev:?} >= {t}"
            )));
        }
        let x0 = self.predict_x0(z, eps, t)?;
        let ab = self.alpha_bar(t_prev);
        let (s, n) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        Ok(x0.zip_map(eps, "ddim_step", |x, e| s * x + n * e)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn alpha_bar_decreasing() {
        let s = NoiseSchedule::cosine(200);
        assert!(s.alpha_bar(Some(0)) > 0.99);
        assert!(s.alpha_bar(Some(199)) < 1e-3);
        assert!(s.alpha_bar(Some(199)) > 0.0);
        for t in 1..200 {
            assert!(s.alpha_bar(Some(t)) < s.alpha_bar(Some(t - 1)));
        }
    }

    #[test]
    fn timesteps_descend_from_top() {
        let s = NoiseSchedule::cosine(200);
        let ts = s.timesteps(50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 199);
        assert_eq!(*ts.last().unwrap(), 3);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.timesteps(200), (0..200).rev().collect::<Vec<_>>());
    }

    fn noisy() -> (NoiseSchedule, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let s = NoiseSchedule::cosine(200);
        let mut r = SplitMix64::new(5);
        let x0 = Tensor::from_vec(&[4, 4, 2], r.normals(32)).unwrap();
        let e = Tensor::from_vec(&[4, 4, 2], r.normals(32)).unwrap();
        (s, x0, e, Tensor::zeros(&[1]))
    }

    #[test]
    fn true_noise_recovers_x0() {
        let (s, x0, e, _) = noisy();
        let zt = s.add_noise(&x0, &e, 120).unwrap();
        let z0 = s.ddim_step(&zt, &e, 120, None).unwrap();
        assert!(z0.max_abs_diff(&x0) < 1e-12);
    }

    #[test]
    fn same_timestep_is_identity() {
        let (s, x0, e, _) = noisy();
        let out = s.ddim_step(&x0, &e, 50, Some(50)).unwrap();
        assert!(out.bit_eq(&x0));
    }

    #[test]
    fn renoising_x0_estimate_returns_z() {
        let (s, z, e, _) = noisy();
        let x0 = s.predict_x0(&z, &e, 80).unwrap();
        let back = s.add_noise(&x0, &e, 80).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_forward_step() {
        let (s, z, e, _) = noisy();
        assert!(s.ddim_step(&z, &e, 10, Some(20)).is_err());
    }
}
