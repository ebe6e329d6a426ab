use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{timestep_embedding, Conv, Graph, Init, Norm, ParameterSet, ResBlock, Tensor, Var};
use crate::rtdm::BinaryMask;
use crate::scalar::Scalar;

use super::control::{ControlInputs, MiniControlBranch};
use super::loss::mask_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub time_dim: usize,
    pub control_width: usize,
    pub groups: usize,
    pub control_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 32, time_dim: 32, control_width: 16, groups: 8, control_groups: 4 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(self.groups.max(1)) || self.groups == 0 {
            return Err(Error::Config(format!("width {} must be a positive multiple of groups {}", self.width, self.groups)));
        }
        if self.control_width == 0 || self.control_groups == 0 || !self.control_width.is_multiple_of(self.control_groups) {
            return Err(Error::Config("control width must be a positive multiple of control groups".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_dim must be even, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Conditions for one denoiser call. All tensors are `[N, 1, h, w]` at latent
/// resolution; `rtdm` holds one mask per batch item or a single shared mask.
#[derive(Clone, Debug)]
pub struct ConditionSet<T: Scalar = f32> {
    pub lr_cond: Tensor<T>,
    pub noisy_latent: Tensor<T>,
    pub rtdm: Vec<BinaryMask>,
    /// Text conditioning slot; the toy backbone has no cross-attention.
    pub prompt_slot: Option<String>,
}

impl<T: Scalar> ConditionSet<T> {
    pub fn new(lr_cond: Tensor<T>, noisy_latent: Tensor<T>, rtdm: Vec<BinaryMask>) -> Self {
        Self { lr_cond, noisy_latent, rtdm, prompt_slot: None }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.noisy_latent.shape();
        if s[1] != 1 {
            return Err(shape_err!("latent must have one channel, got {:?}", s));
        }
        if self.lr_cond.shape() != s {
            return Err(shape_err!("lr condition {:?} vs latent {:?}", self.lr_cond.shape(), s));
        }
        if self.rtdm.len() != 1 && self.rtdm.len() != s[0] {
            return Err(shape_err!("{} masks for a batch of {}", self.rtdm.len(), s[0]));
        }
        for m in &self.rtdm {
            if m.dims() != (s[2], s[3]) {
                return Err(shape_err!("rtdm {:?} vs latent {:?}", m.dims(), (s[2], s[3])));
            }
        }
        Ok(())
    }

    pub fn mask_tensor(&self) -> Result<Tensor<T>> {
        mask_tensor(&self.rtdm, self.noisy_latent.shape()[0])
    }
}

/// Which parameters training may update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePreset {
    #[default]
    None,
    /// Backbone frozen except the first down block and all up blocks.
    Paper,
}

impl std::str::FromStr for FreezePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown freeze preset {s:?}; expected none or paper"))),
        }
    }
}

pub const PAPER_FROZEN_PREFIXES: [&str; 5] =
    ["backbone.time.", "backbone.conv_in.", "backbone.down2.", "backbone.mid.", "backbone.out."];

impl FreezePreset {
    /// Adds the preset's freezes; existing freezes are kept.
    pub fn apply<T: Scalar>(self, params: &mut ParameterSet<T>) {
        if self == Self::Paper {
            for p in PAPER_FROZEN_PREFIXES {
                params.freeze_prefix(p);
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    time_fc1: Conv,
    time_fc2: Conv,
    conv_in: Conv,
    down1: ResBlock,
    down1_pool: Conv,
    down2: ResBlock,
    down2_pool: Conv,
    mid1: ResBlock,
    mid2: ResBlock,
    up2_conv: Conv,
    up2: ResBlock,
    up1_conv: Conv,
    up1: ResBlock,
    out_norm: Norm,
    out_conv: Conv,
    time_dim: usize,
}

impl Backbone {
    fn new<T: Scalar, R: Rng>(init: &mut Init<T, R>, cfg: &ModelConfig) -> Self {
        let (w, g) = (cfg.width, cfg.groups);
        let td = 2 * cfg.time_dim;
        let rb = |init: &mut Init<T, R>, name: &str, cin| ResBlock::new(init, name, cin, w, Some(td), g);
        Self {
            time_fc1: Conv::new(init, "backbone.time.fc1", cfg.time_dim, td, 1, 1),
            time_fc2: Conv::new(init, "backbone.time.fc2", td, td, 1, 1),
            conv_in: Conv::new(init, "backbone.conv_in", 1, w, 3, 1),
            down1: rb(init, "backbone.down1.res", w),
            down1_pool: Conv::new(init, "backbone.down1.down", w, w, 3, 2),
            down2: rb(init, "backbone.down2.res", w),
            down2_pool: Conv::new(init, "backbone.down2.down", w, w, 3, 2),
            mid1: rb(init, "backbone.mid.res1", w),
            mid2: rb(init, "backbone.mid.res2", w),
            up2_conv: Conv::new(init, "backbone.up2.conv", w, w, 3, 1),
            up2: rb(init, "backbone.up2.res", 2 * w),
            up1_conv: Conv::new(init, "backbone.up1.conv", w, w, 3, 1),
            up1: rb(init, "backbone.up1.res", 2 * w),
            out_norm: Norm::new(init, "backbone.out.norm", w, g),
            out_conv: Conv::new(init, "backbone.out.conv", w, 1, 3, 1),
            time_dim: cfg.time_dim,
        }
    }

    fn time_embedding<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, ts: &[usize]) -> Result<Var> {
        let e = g.constant(timestep_embedding(ts, self.time_dim)?);
        let h = self.time_fc1.forward(g, ps, e)?;
        let h = g.silu(h);
        self.time_fc2.forward(g, ps, h)
    }
}

/// Small U-Net epsilon predictor with a control branch injected after its first block.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParameterSet<T>,
    backbone: Backbone,
    control: MiniControlBranch,
}

/// Graph handles of one forward pass.
pub struct ForwardVars {
    pub eps: Var,
    pub main_after_first: Var,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut init = Init { params: &mut params, rng: &mut rng };
        let backbone = Backbone::new(&mut init, &cfg);
        let control =
            MiniControlBranch::new(&mut init, "control", cfg.control_width, cfg.width, 2 * cfg.time_dim, cfg.control_groups);
        Ok(Self { cfg, params, backbone, control })
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.count("backbone.")
    }

    pub fn control_param_count(&self) -> usize {
        self.params.count("control.")
    }

    /// Records a forward pass; `with_control = false` runs the bare backbone.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        ps: &ParameterSet<T>,
        conds: &ConditionSet<T>,
        ts: &[usize],
        with_control: bool,
    ) -> Result<ForwardVars> {
        conds.validate()?;
        let [n, _, h, w] = conds.noisy_latent.shape();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(shape_err!("latent {h}x{w} must be divisible by 4"));
        }
        if ts.len() != n && ts.len() != 1 {
            return Err(invalid!("{} timesteps for a batch of {n}", ts.len()));
        }
        let ts: Vec<usize> = if ts.len() == n { ts.to_vec() } else { vec![ts[0]; n] };
        let b = &self.backbone;
        let temb = b.time_embedding(g, ps, &ts)?;
        let z = g.constant(conds.noisy_latent.clone());
        let h0 = b.conv_in.forward(g, ps, z)?;
        let mut h1 = b.down1.forward(g, ps, h0, Some(temb))?;
        if with_control {
            let lr = g.constant(conds.lr_cond.clone());
            let rtdm = g.constant(conds.mask_tensor()?);
            let inj = self.control.forward(g, ps, &ControlInputs { lr, latent: z, rtdm, temb, main: h1 })?;
            h1 = g.add(h1, inj)?;
        }
        let main_after_first = h1;
        let d1 = b.down1_pool.forward(g, ps, h1)?;
        let h2 = b.down2.forward(g, ps, d1, Some(temb))?;
        let d2 = b.down2_pool.forward(g, ps, h2)?;
        let m = b.mid1.forward(g, ps, d2, Some(temb))?;
        let m = b.mid2.forward(g, ps, m, Some(temb))?;
        let u = g.upsample_nearest(m, 2)?;
        let u = b.up2_conv.forward(g, ps, u)?;
        let u = g.concat(u, h2)?;
        let u = b.up2.forward(g, ps, u, Some(temb))?;
        let u = g.upsample_nearest(u, 2)?;
        let u = b.up1_conv.forward(g, ps, u)?;
        let u = g.concat(u, h1)?;
        let u = b.up1.forward(g, ps, u, Some(temb))?;
        let o = b.out_norm.forward(g, ps, u)?;
        let o = g.silu(o);
        let eps = b.out_conv.forward(g, ps, o)?;
        Ok(ForwardVars { eps, main_after_first })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.load(path)
    }
}

/// Predicted noise for the given conditions and timestep.
pub fn denoise_forward<T: Scalar>(model: &DenoiserModel<T>, conds: &ConditionSet<T>, t: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, &model.params, conds, &[t], true)?;
    Ok(g.value(out.eps).detached())
}
