use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imagecore::Image;
use crate::nn::{adam_step, AdamConfig, Graph, OptimizerState, Tensor};
use crate::rtdm::BinaryMask;
use crate::scalar::Scalar;

use super::latent::{encode_latent, lr_condition};
use super::loss::{mask_tensor, split_mse, tadl_loss_graph};
use super::model::{ConditionSet, DenoiserModel, FreezePreset};
use super::schedule::{q_sample, NoiseSchedule};

/// One training pair at latent resolution.
#[derive(Clone, Debug)]
pub struct TrainExample<T: Scalar = f32> {
    pub z0: Tensor<T>,
    pub lr_cond: Tensor<T>,
    pub mask: BinaryMask,
}

impl<T: Scalar> TrainExample<T> {
    pub fn from_images(hr: &Image<T>, lr: &Image<T>, mask: BinaryMask) -> Result<Self> {
        let z0 = encode_latent(hr)?;
        let [_, _, h, w] = z0.shape();
        if mask.dims() != (h, w) {
            return Err(shape_err!("mask {:?} vs latent {:?}", mask.dims(), (h, w)));
        }
        Ok(Self { lr_cond: lr_condition(lr, h, w)?, z0, mask })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Texture-weighted loss.
    #[default]
    Tadl,
    /// Unweighted mean squared error.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha_w: f64,
    pub loss: LossKind,
    pub freeze_preset: FreezePreset,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            learning_rate: 1e-3,
            alpha_w: 1.0,
            loss: LossKind::Tadl,
            freeze_preset: FreezePreset::None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.alpha_w >= 0.0) {
            return Err(Error::Config(format!("alpha_w must be >= 0, got {}", self.alpha_w)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub t: usize,
    pub loss: f64,
    pub masked_loss: f64,
    pub unmasked_loss: f64,
}

/// Trains with one shared timestep per step; returns the per-step log.
pub fn train<T: Scalar>(
    model: &mut DenoiserModel<T>,
    data: &[TrainExample<T>],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let shape = first.z0.shape();
    if data.iter().any(|d| d.z0.shape() != shape || d.lr_cond.shape() != shape) {
        return Err(shape_err!("training examples must share one latent shape"));
    }
    cfg.freeze_preset.apply(&mut model.params);
    let mut opt = OptimizerState::new(AdamConfig { lr: cfg.learning_rate, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;
    let [_, _, h, w] = shape;
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..data.len())).collect();
        let t = rng.gen_range(1..=sched.len());
        let eps = Tensor::randn(&[b, 1, h, w], 1.0, &mut rng);
        let z0 = Tensor::stack(&idx.iter().map(|&i| data[i].z0.clone()).collect::<Vec<_>>())?;
        let lr = Tensor::stack(&idx.iter().map(|&i| data[i].lr_cond.clone()).collect::<Vec<_>>())?;
        let masks: Vec<BinaryMask> = idx.iter().map(|&i| data[i].mask.clone()).collect();
        let zt = q_sample(&z0, t, &eps, sched)?;
        let conds = ConditionSet::new(lr, zt, masks);
        let mask_t = mask_tensor::<T>(&conds.rtdm, b)?;

        let mut g = Graph::new();
        let fw = model.forward_graph(&mut g, &model.params, &conds, &[t], true)?;
        let ev = g.constant(eps.clone());
        let loss = match cfg.loss {
            LossKind::Tadl => tadl_loss_graph(&mut g, ev, fw.eps, &mask_t, cfg.alpha_w)?,
            LossKind::Mse => {
                let d = g.sub(ev, fw.eps)?;
                let s = g.square(d);
                g.mean(s)
            }
        };
        let value = g.scalar(loss).to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at step {step} (t = {t})")));
        }
        let (masked_loss, unmasked_loss) = split_mse(&eps, g.value(fw.eps), &mask_t)?;
        let grads = g.backward(loss)?;
        model.params.zero_grad();
        model.params.accumulate(&g, &grads)?;
        adam_step(&mut model.params, &mut opt)?;
        log.push(LossRecord { step, t, loss: value, masked_loss, unmasked_loss });
    }
    model.params.zero_grad();
    Ok(log)
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in log {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|rec| rec.map_err(|e| csv_err(path, e))).collect()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

/// Trailing-window mean used to compare early and late training loss.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
