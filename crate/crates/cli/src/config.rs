//! TOML run configuration. Every field except the top-level `seed` has a
//! default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use texadiff::degrade::{derive_seed, DegradeConfig, SceneDistribution};
use texadiff::diffusion::{
    FreezePreset, LossKind, ModelConfig, NoiseSchedule, Parity, ScheduleConfig, TaSamplerConfig, TrainConfig,
};
use texadiff::predictor::{PredictorConfig, PredictorTrainConfig};
use texadiff::rtdm::RtdmConfig;
use texadiff::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub rtdm: RtdmConfig,
    #[serde(default)]
    pub degrade: DegradeSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub predictor: PredictorSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSection {
    pub n_scenes: usize,
    pub scene_size: usize,
    pub scale: usize,
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub checker_periods: Vec<usize>,
    pub stripe_periods: Vec<usize>,
    pub amplitude_range: [f64; 2],
}

impl Default for DegradeSection {
    fn default() -> Self {
        let d = DegradeConfig::default();
        let s = SceneDistribution::default();
        Self {
            n_scenes: 40,
            scene_size: s.size,
            scale: d.scale,
            blur_sigma_range: d.blur_sigma_range,
            noise_sigma_range: d.noise_sigma_range,
            checker_periods: s.checker_periods,
            stripe_periods: s.stripe_periods,
            amplitude_range: s.amplitude_range,
        }
    }
}

impl DegradeSection {
    pub fn degrade_config(&self) -> DegradeConfig {
        DegradeConfig {
            blur_sigma_range: self.blur_sigma_range,
            scale: self.scale,
            noise_sigma_range: self.noise_sigma_range,
            seed: 0,
        }
    }

    pub fn distribution(&self) -> SceneDistribution {
        SceneDistribution {
            size: self.scene_size,
            checker_periods: self.checker_periods.clone(),
            stripe_periods: self.stripe_periods.clone(),
            amplitude_range: self.amplitude_range,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha_w: f64,
    pub loss: LossKind,
    pub freeze_preset: FreezePreset,
    /// Trailing dataset scenes kept out of training.
    pub holdout: usize,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            alpha_w: t.alpha_w,
            loss: t.loss,
            freeze_preset: t.freeze_preset,
            holdout: 0,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub ta: bool,
    pub t_lo: usize,
    pub t_hi: usize,
    pub parity: Parity,
    pub tau: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        let ta = TaSamplerConfig::default();
        Self { ta: ta.enabled, t_lo: ta.t_lo, t_hi: ta.t_hi, parity: ta.parity, tau: 0.40 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub width: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let t = PredictorTrainConfig::default();
        Self { width: PredictorConfig::default().width, steps: t.steps, learning_rate: t.learning_rate }
    }
}

/// Independent RNG streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    ModelInit,
    Train,
    PredictorInit,
    PredictorTrain,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Defaults with the given seed, for commands run without `--config`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            rtdm: RtdmConfig::default(),
            degrade: DegradeSection::default(),
            train: TrainSection::default(),
            sample: SampleSection::default(),
            predictor: PredictorSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rtdm.validate()?;
        self.degrade.degrade_config().validate()?;
        self.degrade.distribution().validate()?;
        self.train.model.validate()?;
        self.train_config().validate()?;
        let sched = self.schedule().map_err(|e| Error::Config(format!("train.schedule: {e}")))?;
        if self.sample.ta {
            self.ta_config().validate(sched.len())?;
        }
        if self.degrade.scale != self.rtdm.scale {
            return Err(Error::Config(format!(
                "degrade.scale ({}) and rtdm.scale ({}) must agree",
                self.degrade.scale, self.rtdm.scale
            )));
        }
        if !self.degrade.scene_size.is_multiple_of(self.degrade.scale) {
            return Err(Error::Config(format!(
                "degrade.scene_size ({}) must be divisible by degrade.scale ({})",
                self.degrade.scene_size, self.degrade.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.sample.tau) {
            return Err(Error::Config(format!("sample.tau must lie in [0, 1], got {}", self.sample.tau)));
        }
        Ok(())
    }

    pub fn stream_seed(&self, s: Stream) -> u64 {
        derive_seed(self.seed, u64::MAX - s as u64)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            alpha_w: t.alpha_w,
            loss: t.loss,
            freeze_preset: t.freeze_preset,
            seed: self.stream_seed(Stream::Train),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.train.schedule.build()
    }

    pub fn ta_config(&self) -> TaSamplerConfig {
        let s = &self.sample;
        TaSamplerConfig { t_lo: s.t_lo, t_hi: s.t_hi, parity: s.parity, enabled: s.ta }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig { width: self.predictor.width, scale: self.rtdm.scale }
    }

    pub fn predictor_train_config(&self) -> PredictorTrainConfig {
        PredictorTrainConfig {
            steps: self.predictor.steps,
            learning_rate: self.predictor.learning_rate,
            seed: self.stream_seed(Stream::PredictorTrain),
        }
    }
}
