//! Texture-map regressor used when no HR reference exists: separate LR and
//! PSR encoders, per-scale sigmoid gates, and a two-scale decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::train::csv_err;
use crate::error::{shape_err, Error, Result};
use crate::imagecore::{resize, to_grayscale, Image, ResizeMode};
use crate::metrics::mask_accuracy;
use crate::nn::{adam_step, AdamConfig, Conv, Graph, Init, OptimizerState, ParameterSet, Tensor, Var};
use crate::rtdm::{mask_from_map, BinaryMask, RtdmConfig, TextureMap};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub width: usize,
    /// LR-to-PSR size ratio.
    pub scale: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { width: 16, scale: 4 }
    }
}

/// `g * f_lr + (1 - g) * f_psr` with `g = sigmoid(gate(concat(f_lr, f_psr)))`.
pub fn gated_fuse<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, gate: &Conv, f_lr: Var, f_psr: Var) -> Result<Var> {
    if g.shape(f_lr) != g.shape(f_psr) {
        return Err(shape_err!("gated fusion of {:?} and {:?}", g.shape(f_lr), g.shape(f_psr)));
    }
    let both = g.concat(f_lr, f_psr)?;
    let logits = gate.forward(g, ps, both)?;
    let gv = g.sigmoid(logits);
    let neg = g.scale(gv, -T::one());
    let inv = g.add_scalar(neg, T::one());
    let a = g.mul(gv, f_lr)?;
    let b = g.mul(inv, f_psr)?;
    g.add(a, b)
}

#[derive(Clone, Debug)]
struct Branch {
    c1: Conv,
    c2: Conv,
    down: Conv,
    c3: Conv,
}

impl Branch {
    fn new<T: Scalar, R: Rng>(init: &mut Init<T, R>, name: &str, w: usize) -> Self {
        Self {
            c1: Conv::new(init, &format!("{name}.c1"), 1, w, 3, 1),
            c2: Conv::new(init, &format!("{name}.c2"), w, w, 3, 1),
            down: Conv::new(init, &format!("{name}.down"), w, w, 3, 2),
            c3: Conv::new(init, &format!("{name}.c3"), w, w, 3, 1),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.c1.forward(g, ps, x)?;
        let h = g.silu(h);
        let h = self.c2.forward(g, ps, h)?;
        let f1 = g.silu(h);
        let h = self.down.forward(g, ps, f1)?;
        let h = g.silu(h);
        let h = self.c3.forward(g, ps, h)?;
        let f2 = g.silu(h);
        Ok((f1, f2))
    }
}

#[derive(Clone, Debug)]
pub struct PredictorModel<T: Scalar = f32> {
    pub cfg: PredictorConfig,
    pub params: ParameterSet<T>,
    lr_branch: Branch,
    psr_branch: Branch,
    pub gates: [Conv; 2],
    dec2: Conv,
    up: Conv,
    dec1: Conv,
    pub head: Conv,
}

impl<T: Scalar> PredictorModel<T> {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        if cfg.width == 0 || cfg.scale == 0 {
            return Err(Error::Config("predictor width and scale must be positive".into()));
        }
        let w = cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let mut init = Init { params: &mut params, rng: &mut rng };
        let lr_branch = Branch::new(&mut init, "lr", w);
        let psr_branch = Branch::new(&mut init, "psr", w);
        let gates = [Conv::new(&mut init, "gate1", 2 * w, w, 1, 1), Conv::new(&mut init, "gate2", 2 * w, w, 1, 1)];
        let dec2 = Conv::new(&mut init, "dec2", w, w, 3, 1);
        let up = Conv::new(&mut init, "up", w, w, 3, 1);
        let dec1 = Conv::new(&mut init, "dec1", 2 * w, w, 3, 1);
        let head = Conv::zeroed(&mut init, "head", w, 1, 1);
        Ok(Self { cfg, params, lr_branch, psr_branch, gates, dec2, up, dec1, head })
    }

    /// Network inputs: luma minus one half, LR bicubic-upsampled to PSR size.
    pub fn inputs(&self, lr: &Image<T>, psr: &Image<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = psr.dims();
        if lr.height() * self.cfg.scale != h || lr.width() * self.cfg.scale != w {
            return Err(shape_err!("psr {:?} is not {}x lr {:?}", psr.dims(), self.cfg.scale, lr.dims()));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("psr {h}x{w} must have even dims"));
        }
        let half = T::lit(0.5);
        let prep = |img: &Image<T>| Tensor::new(&[1, 1, h, w], img.data().iter().map(|&v| v - half).collect());
        let up = resize(&to_grayscale(lr), h, w, ResizeMode::Bicubic)?.clamp01();
        Ok((prep(&up)?, prep(&to_grayscale(psr))?))
    }

    /// Records the forward pass and returns the `[N, 1, H, W]` map in `[0, 1]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, lr: Var, psr: Var) -> Result<Var> {
        let (l1, l2) = self.lr_branch.forward(g, ps, lr)?;
        let (p1, p2) = self.psr_branch.forward(g, ps, psr)?;
        let f1 = gated_fuse(g, ps, &self.gates[0], l1, p1)?;
        let f2 = gated_fuse(g, ps, &self.gates[1], l2, p2)?;
        let d = self.dec2.forward(g, ps, f2)?;
        let d = g.silu(d);
        let d = g.upsample_nearest(d, 2)?;
        let d = self.up.forward(g, ps, d)?;
        let d = g.silu(d);
        let d = g.concat(d, f1)?;
        let d = self.dec1.forward(g, ps, d)?;
        let d = g.silu(d);
        let o = self.head.forward(g, ps, d)?;
        Ok(g.sigmoid(o))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.params.load(path)
    }
}

/// Continuous texture map at PSR resolution.
pub fn predict_rtdm<T: Scalar>(model: &PredictorModel<T>, lr: &Image<T>, psr: &Image<T>) -> Result<TextureMap<T>> {
    let (a, b) = model.inputs(lr, psr)?;
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let out = model.forward_graph(&mut g, &model.params, av, bv)?;
    let (h, w) = psr.dims();
    TextureMap::new(h, w, g.value(out).data().to_vec())
}

/// Thresholds a predicted map through the estimation pipeline's clean-up and pooling.
pub fn binarize_prediction<T: Scalar>(map: &TextureMap<T>, tau: f64, cfg: &RtdmConfig) -> Result<BinaryMask> {
    mask_from_map(map, tau, cfg)
}

/// Percentage of latent pixels on which two masks agree.
pub fn rtdm_accuracy(pred: &BinaryMask, oracle: &BinaryMask) -> Result<f64> {
    mask_accuracy(pred, oracle)
}

#[derive(Clone, Debug)]
pub struct PredictorExample<T: Scalar = f32> {
    pub lr: Image<T>,
    pub psr: Image<T>,
    pub target: TextureMap<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self { steps: 300, learning_rate: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorLossRecord {
    pub step: usize,
    pub scene: usize,
    pub loss: f64,
}

fn l1_graph<T: Scalar>(
    model: &PredictorModel<T>,
    g: &mut Graph<T>,
    ex: &PredictorExample<T>,
) -> Result<Var> {
    let (a, b) = model.inputs(&ex.lr, &ex.psr)?;
    if ex.target.dims() != ex.psr.dims() {
        return Err(shape_err!("target {:?} vs psr {:?}", ex.target.dims(), ex.psr.dims()));
    }
    let (h, w) = ex.psr.dims();
    let (av, bv) = (g.constant(a), g.constant(b));
    let pred = model.forward_graph(g, &model.params, av, bv)?;
    let target = g.constant(Tensor::new(&[1, 1, h, w], ex.target.data().to_vec())?);
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// L1 loss of the current model on every example, in order.
pub fn scene_losses<T: Scalar>(model: &PredictorModel<T>, data: &[PredictorExample<T>]) -> Result<Vec<f64>> {
    data.iter()
        .map(|ex| {
            let mut g = Graph::new();
            let l = l1_graph(model, &mut g, ex)?;
            Ok(g.scalar(l).to_f64_lossy())
        })
        .collect()
}

/// One uniformly drawn scene per step, L1 against the estimated map.
pub fn train_predictor<T: Scalar>(
    model: &mut PredictorModel<T>,
    data: &[PredictorExample<T>],
    cfg: &PredictorTrainConfig,
) -> Result<Vec<PredictorLossRecord>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty predictor training set".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("predictor learning_rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(AdamConfig { lr: cfg.learning_rate, ..Default::default() });
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let scene = rng.gen_range(0..data.len());
        let mut g = Graph::new();
        let l = l1_graph(model, &mut g, &data[scene])?;
        let loss = g.scalar(l).to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite predictor loss at step {step}")));
        }
        let grads = g.backward(l)?;
        model.params.zero_grad();
        model.params.accumulate(&g, &grads)?;
        adam_step(&mut model.params, &mut opt)?;
        log.push(PredictorLossRecord { step, scene, loss });
    }
    model.params.zero_grad();
    Ok(log)
}

pub fn write_predictor_log(path: impl AsRef<std::path::Path>, log: &[PredictorLossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in log {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
