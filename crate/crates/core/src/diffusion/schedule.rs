use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Variance schedule. Timesteps are 1-based: step `t` reads index `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps` entries.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid!("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid!("betas must be non-empty and inside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(invalid!("timestep {t} outside 1..={}", self.len()));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`.
pub fn forward_mix<T: Scalar>(z0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(invalid!("alpha_bar {alpha_bar} outside [0, 1]"));
    }
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    forward_mix(z0, eps, sched.alpha_bar(t)?)
}

/// One ancestral step `z_t -> z_{t-1}` with `sigma_t^2 = beta_t`; no noise at `t = 1`.
pub fn ddpm_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    if z_t.shape() != eps_pred.shape() || z_t.shape() != noise.shape() {
        return Err(shape_err!("ddpm_step: {:?}, {:?}, {:?}", z_t.shape(), eps_pred.shape(), noise.shape()));
    }
    let i = sched.check_t(t)?;
    let (beta, alpha, ab) = (sched.betas[i], sched.alphas[i], sched.alpha_bars[i]);
    let inv = T::lit(1.0 / alpha.sqrt());
    let k = T::lit(beta / (1.0 - ab).sqrt());
    let sigma = T::lit(if t > 1 { beta.sqrt() } else { 0.0 });
    let out = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| inv * (z - k * e) + sigma * n)
        .collect();
    Tensor::new(&z_t.shape(), out)
}

/// Posterior mean of `z0` given `z_t` under a per-pixel `N(mu0, var0)` prior.
pub fn gaussian_posterior_mean(z_t: f64, alpha_bar: f64, mu0: f64, var0: f64) -> f64 {
    let a = alpha_bar.sqrt();
    let b2 = 1.0 - alpha_bar;
    let denom = a * a * var0 + b2;
    if denom == 0.0 {
        return mu0;
    }
    mu0 + a * var0 / denom * (z_t - a * mu0)
}

/// Exact `E[eps | z_t]` for Gaussian data.
pub fn analytic_gaussian_eps<T: Scalar>(
    z_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    mu0: f64,
    var0: f64,
) -> Result<Tensor<T>> {
    if !(var0 >= 0.0) {
        return Err(Error::InvalidArgument(format!("prior variance must be >= 0, got {var0}")));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.map(|z| {
        let zf = z.to_f64_lossy();
        T::lit((zf - a * gaussian_posterior_mean(zf, ab, mu0, var0)) / b)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::full(&[1], v)
    }

    #[test]
    fn schedule_tables() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0 - 1e-4]);
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars()[0] >= 0.999);
        assert!(s.alpha_bars()[999] < 0.01);
        for i in 1..1000 {
            assert_eq!(s.alpha_bars()[i], s.alpha_bars()[i - 1] * s.alphas()[i]);
            assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
        }
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(make_schedule(10, 0.02, 0.01).is_err());
        assert!(make_schedule(10, 0.0, 0.01).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_mix_cases() {
        let z0 = scalar(0.5);
        let e = scalar(-1.0);
        assert_eq!(forward_mix(&z0, &e, 1.0).unwrap().data(), &[0.5]);
        assert_eq!(forward_mix(&z0, &e, 0.0).unwrap().data(), &[-1.0]);
        assert!((forward_mix(&z0, &e, 0.64).unwrap().data()[0] + 0.2).abs() < 1e-12);
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        assert!(q_sample(&z0, 0, &e, &s).is_err());
        assert!(q_sample(&z0, 11, &e, &s).is_err());
        let want = s.alpha_bar(10).unwrap().sqrt() * 0.5 - (1.0 - s.alpha_bar(10).unwrap()).sqrt();
        assert!((q_sample(&z0, 10, &e, &s).unwrap().data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn ddpm_step_cases() {
        let tiny = NoiseSchedule::from_betas(vec![1e-12, 1e-12]).unwrap();
        let z = scalar(0.7);
        let out = ddpm_step(&z, &scalar(0.0), 2, &tiny, &scalar(0.0)).unwrap();
        assert!((out.data()[0] - 0.7).abs() <= 1e-6);

        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        // ab[1] = 0.9 * 0.8 = 0.72
        let out = ddpm_step(&scalar(1.0), &scalar(0.5), 2, &s, &scalar(2.0)).unwrap();
        let want = (1.0 - 0.2 / 0.28f64.sqrt() * 0.5) / 0.8f64.sqrt() + 0.2f64.sqrt() * 2.0;
        assert!((out.data()[0] - want).abs() < 1e-12);

        let out = ddpm_step(&scalar(1.0), &scalar(0.0), 2, &s, &scalar(0.0)).unwrap();
        assert_eq!(out.data()[0], 1.0 / 0.8f64.sqrt());
        // no noise at t = 1
        let a = ddpm_step(&scalar(1.0), &scalar(0.3), 1, &s, &scalar(5.0)).unwrap();
        let b = ddpm_step(&scalar(1.0), &scalar(0.3), 1, &s, &scalar(0.0)).unwrap();
        assert_eq!(a, b);
        assert!(ddpm_step(&scalar(1.0), &scalar(0.0), 0, &s, &scalar(0.0)).is_err());
    }

    #[test]
    fn analytic_predictor() {
        assert_eq!(gaussian_posterior_mean(3.0, 0.5, 0.25, 0.0), 0.25);
        let m = gaussian_posterior_mean(1.3, 0.5, 0.0, 1.0);
        assert!((m - 1.3 / 2f64.sqrt()).abs() < 1e-12);
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert!(analytic_gaussian_eps(&scalar(0.0), 5, &s, 0.0, -1.0).is_err());
    }

    #[test]
    fn analytic_predictor_beats_constants() {
        use rand_distr::{Distribution, StandardNormal};
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let (mu0, var0, t) = (0.3f64, 0.5f64, 300);
        let ab = s.alpha_bar(t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut zs = Vec::with_capacity(n);
        let mut es = Vec::with_capacity(n);
        for _ in 0..n {
            let n0: f64 = StandardNormal.sample(&mut rng);
            let x0 = mu0 + var0.sqrt() * n0;
            let e: f64 = StandardNormal.sample(&mut rng);
            zs.push(ab.sqrt() * x0 + (1.0 - ab).sqrt() * e);
            es.push(e);
        }
        let pred = analytic_gaussian_eps(&Tensor::new(&[n], zs).unwrap(), t, &s, mu0, var0).unwrap();
        let mse = |f: &dyn Fn(usize) -> f64| es.iter().enumerate().map(|(i, e)| (e - f(i)).powi(2)).sum::<f64>() / n as f64;
        let analytic = mse(&|i| pred.data()[i]);
        let mean_e = es.iter().sum::<f64>() / n as f64;
        for c in [0.0, mean_e, 0.5, -0.5] {
            assert!(analytic <= mse(&|_| c));
        }
    }
}
