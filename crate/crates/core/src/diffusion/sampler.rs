use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;
use crate::rtdm::BinaryMask;
use crate::scalar::Scalar;

use super::loss::mask_tensor;
use super::model::{denoise_forward, ConditionSet, DenoiserModel};
use super::schedule::{analytic_gaussian_eps, ddpm_step, NoiseSchedule};

/// Anything that predicts the noise in `conds.noisy_latent` at step `t`.
pub trait EpsPredictor<T: Scalar> {
    fn predict_eps(&self, conds: &ConditionSet<T>, t: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> EpsPredictor<T> for DenoiserModel<T> {
    fn predict_eps(&self, conds: &ConditionSet<T>, t: usize) -> Result<Tensor<T>> {
        denoise_forward(self, conds, t)
    }
}

/// Closed-form predictor for per-pixel `N(mu0, var0)` data; ignores the conditions.
#[derive(Clone, Debug)]
pub struct AnalyticGaussian {
    pub sched: NoiseSchedule,
    pub mu0: f64,
    pub var0: f64,
}

impl<T: Scalar> EpsPredictor<T> for AnalyticGaussian {
    fn predict_eps(&self, conds: &ConditionSet<T>, t: usize) -> Result<Tensor<T>> {
        analytic_gaussian_eps(&conds.noisy_latent, t, &self.sched, self.mu0, self.var0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    #[default]
    Even,
    Odd,
}

/// Window in which texture-sparse latents are held still on every other step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaSamplerConfig {
    pub t_lo: usize,
    pub t_hi: usize,
    /// Parity of `t_hi - t` on which the selective update runs.
    pub parity: Parity,
    pub enabled: bool,
}

impl Default for TaSamplerConfig {
    fn default() -> Self {
        Self { t_lo: 100, t_hi: 500, parity: Parity::Even, enabled: true }
    }
}

impl TaSamplerConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.t_lo < self.t_hi && self.t_hi <= steps) {
            return Err(Error::Config(format!(
                "sampling window [{}, {}] must satisfy 0 <= t_lo < t_hi <= {steps}",
                self.t_lo, self.t_hi
            )));
        }
        Ok(())
    }

    /// Whether step `t` performs the rich-only update.
    pub fn is_selective(&self, t: usize) -> bool {
        if !self.enabled || t < self.t_lo || t > self.t_hi {
            return false;
        }
        let even = (self.t_hi - t).is_multiple_of(2);
        even == (self.parity == Parity::Even)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Global,
    Selective,
}

/// What the observer sees after every step.
pub struct StepEvent<'a, T: Scalar> {
    pub t: usize,
    pub kind: StepKind,
    pub before: &'a Tensor<T>,
    pub after: &'a Tensor<T>,
    pub mask: &'a Tensor<T>,
}

/// Ancestral sampling from `t = T` down to 1 with the texture-aware schedule.
/// Noise is drawn on every step, so runs with the same seed stay aligned
/// whatever the mask. The result is clamped to `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn sample<T: Scalar, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    lr_cond: &Tensor<T>,
    rtdm: &[BinaryMask],
    sched: &NoiseSchedule,
    ta: &TaSamplerConfig,
    seed: u64,
    observer: &mut dyn FnMut(&StepEvent<'_, T>),
) -> Result<Tensor<T>> {
    if ta.enabled {
        ta.validate(sched.len())?;
    }
    let shape = lr_cond.shape();
    if shape[1] != 1 {
        return Err(shape_err!("lr condition must have one channel, got {shape:?}"));
    }
    let mask = mask_tensor::<T>(rtdm, shape[0])?;
    if mask.shape()[2..] != shape[2..] {
        return Err(shape_err!("mask {:?} vs latent {:?}", mask.shape(), shape));
    }
    let dims = [shape[0], shape[1], shape[2], shape[3]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conds = ConditionSet::new(lr_cond.clone(), Tensor::randn(&dims, 1.0, &mut rng), rtdm.to_vec());
    let hw = shape[2] * shape[3];
    for t in (1..=sched.len()).rev() {
        let eps = model.predict_eps(&conds, t)?;
        let noise = Tensor::randn(&dims, 1.0, &mut rng);
        let stepped = ddpm_step(&conds.noisy_latent, &eps, t, sched, &noise)?;
        let kind = if ta.is_selective(t) { StepKind::Selective } else { StepKind::Global };
        let next = match kind {
            StepKind::Global => stepped,
            StepKind::Selective => {
                let md = mask.data();
                let per_item = mask.shape()[0] != 1;
                let cur = conds.noisy_latent.data();
                let data = stepped
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let m = md[if per_item { i } else { i % hw }];
                        if m > T::zero() {
                            s
                        } else {
                            cur[i]
                        }
                    })
                    .collect();
                Tensor::new(&dims, data)?
            }
        };
        if !next.is_finite() {
            return Err(Error::Numeric(format!("non-finite latent at step {t}")));
        }
        observer(&StepEvent { t, kind, before: &conds.noisy_latent, after: &next, mask: &mask });
        conds.noisy_latent = next;
    }
    Ok(conds.noisy_latent.map(|v| v.max(-T::one()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::rtdm::Resolution;

    /// Cheap deterministic predictor that still depends on the state.
    struct Damped;
    impl EpsPredictor<f64> for Damped {
        fn predict_eps(&self, c: &ConditionSet<f64>, t: usize) -> Result<Tensor<f64>> {
            Ok(c.noisy_latent.map(|z| 0.5 * z + 1e-3 * t as f64))
        }
    }

    fn run(mask: BinaryMask, ta: TaSamplerConfig, obs: &mut dyn FnMut(&StepEvent<'_, f64>)) -> Tensor<f64> {
        let s = make_schedule(60, 1e-4, 0.02).unwrap();
        let lr = Tensor::zeros(&[1, 1, 4, 4]);
        sample(&Damped, &lr, &[mask], &s, &ta, 11, obs).unwrap()
    }

    #[test]
    fn parity_schedule() {
        let ta = TaSamplerConfig { t_lo: 10, t_hi: 20, parity: Parity::Even, enabled: true };
        assert!(ta.is_selective(20) && !ta.is_selective(19) && ta.is_selective(10));
        assert!(!ta.is_selective(21) && !ta.is_selective(8));
        let odd = TaSamplerConfig { parity: Parity::Odd, ..ta };
        assert!(odd.is_selective(19) && !odd.is_selective(20));
        assert!(!TaSamplerConfig { enabled: false, ..ta }.is_selective(20));
        assert!(TaSamplerConfig { t_lo: 5, t_hi: 5, ..ta }.validate(60).is_err());
        assert!(TaSamplerConfig { t_lo: 5, t_hi: 61, ..ta }.validate(60).is_err());
    }

    #[test]
    fn bypass_and_all_ones_match_plain() {
        let win = TaSamplerConfig { t_lo: 10, t_hi: 40, ..Default::default() };
        let z = BinaryMask::zeros(4, 4, Resolution::Latent);
        let o = BinaryMask::ones(4, 4, Resolution::Latent);
        let plain = run(z.clone(), TaSamplerConfig { enabled: false, ..win }, &mut |_| {});
        assert_eq!(run(o, win, &mut |_| {}), plain);
        assert_ne!(run(z, win, &mut |_| {}), plain);
    }

    #[test]
    fn sparse_latents_hold_on_selective_steps() {
        let win = TaSamplerConfig { t_lo: 10, t_hi: 40, ..Default::default() };
        let mut m = BinaryMask::zeros(4, 4, Resolution::Latent);
        m.set(0, 0, true);
        m.set(2, 3, true);
        let mut selective = 0;
        run(m.clone(), win, &mut |e| {
            if e.kind == StepKind::Selective {
                selective += 1;
                for i in 0..16 {
                    if m.data()[i] == 0 {
                        assert_eq!(e.after.data()[i].to_bits(), e.before.data()[i].to_bits());
                    }
                }
                assert_ne!(e.after.data()[0], e.before.data()[0]);
            }
        });
        assert_eq!(selective, 16);
    }
}
