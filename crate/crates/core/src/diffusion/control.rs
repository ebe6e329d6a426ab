use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::{Conv, Graph, Init, ParameterSet, ResBlock, Tensor, Var};
use crate::scalar::Scalar;

pub const CROSS_NORM_EPS: f64 = 1e-5;

/// Standardizes `control` per channel over space, then gives it the spatial
/// mean and standard deviation of `main`.
pub fn cross_normalize_graph<T: Scalar>(g: &mut Graph<T>, control: Var, main: Var) -> Result<Var> {
    if g.shape(control) != g.shape(main) {
        return Err(shape_err!("cross normalization of {:?} against {:?}", g.shape(control), g.shape(main)));
    }
    let mu_c = g.mean_spatial(control);
    let dc = g.sub(control, mu_c)?;
    let sq = g.square(dc);
    let var_c = g.mean_spatial(sq);
    let var_c = g.add_scalar(var_c, T::lit(CROSS_NORM_EPS));
    let std_c = g.sqrt(var_c);
    let unit = g.div(dc, std_c)?;

    let mu_m = g.mean_spatial(main);
    let dm = g.sub(main, mu_m)?;
    let sq = g.square(dm);
    let var_m = g.mean_spatial(sq);
    let std_m = g.sqrt(var_m);
    let scaled = g.mul(unit, std_m)?;
    g.add(scaled, mu_m)
}

pub fn cross_normalize<T: Scalar>(control: &Tensor<T>, main: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let c = g.constant(control.clone());
    let m = g.constant(main.clone());
    let out = cross_normalize_graph(&mut g, c, m)?;
    Ok(g.value(out).detached())
}

/// Spatial feature transform: `(1 + gamma(r)) * feat + beta(r)` with
/// zero-initialized `gamma` and `beta` heads.
#[derive(Clone, Debug)]
pub struct SftLayer {
    pub hidden: Conv,
    pub gamma: Conv,
    pub beta: Conv,
}

impl SftLayer {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<T, R>, name: &str, cond_ch: usize, feat_ch: usize) -> Self {
        Self {
            hidden: Conv::new(init, &format!("{name}.hidden"), cond_ch, cond_ch, 3, 1),
            gamma: Conv::zeroed(init, &format!("{name}.gamma"), cond_ch, feat_ch, 1),
            beta: Conv::zeroed(init, &format!("{name}.beta"), cond_ch, feat_ch, 1),
        }
    }

    /// Returns `(gamma, beta)` maps, `gamma` already including the `1 +`.
    pub fn modulation<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, cond: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, ps, cond)?;
        let h = g.silu(h);
        let gm = self.gamma.forward(g, ps, h)?;
        let gm = g.add_scalar(gm, T::one());
        let bt = self.beta.forward(g, ps, h)?;
        Ok((gm, bt))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, feat: Var, cond: Var) -> Result<Var> {
        let (fs, cs) = (g.shape(feat), g.shape(cond));
        if fs[0] != cs[0] || fs[2..] != cs[2..] {
            return Err(shape_err!("sft condition {cs:?} not aligned with features {fs:?}"));
        }
        let (gm, bt) = self.modulation(g, ps, cond)?;
        if g.shape(gm) != fs {
            return Err(shape_err!("sft produces {:?} for features {fs:?}", g.shape(gm)));
        }
        let scaled = g.mul(gm, feat)?;
        g.add(scaled, bt)
    }
}

pub fn sft_inject<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, layer: &SftLayer, feat: Var, cond: Var) -> Result<Var> {
    layer.forward(g, ps, feat, cond)
}

/// Lightweight control branch producing an additive residual for the
/// backbone features after its first block.
#[derive(Clone, Debug)]
pub struct MiniControlBranch {
    lr_encoder: [Conv; 2],
    latent_encoder: [Conv; 2],
    fuse: Conv,
    time_block: ResBlock,
    rtdm_encoder: Conv,
    pub sft: SftLayer,
    proj: Conv,
    pub zero_out: Conv,
}

pub struct ControlInputs {
    pub lr: Var,
    pub latent: Var,
    pub rtdm: Var,
    pub temb: Var,
    pub main: Var,
}

impl MiniControlBranch {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        width: usize,
        main_width: usize,
        temb_dim: usize,
        groups: usize,
    ) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            lr_encoder: [Conv::new(init, &n("lr_enc1"), 1, width, 3, 1), Conv::new(init, &n("lr_enc2"), width, width, 3, 1)],
            latent_encoder: [
                Conv::new(init, &n("latent_enc1"), 1, width, 3, 1),
                Conv::new(init, &n("latent_enc2"), width, width, 3, 1),
            ],
            fuse: Conv::new(init, &n("fuse"), 2 * width, width, 1, 1),
            time_block: ResBlock::new(init, &n("time_block"), width, width, Some(temb_dim), groups),
            rtdm_encoder: Conv::new(init, &n("rtdm_enc"), 1, width, 3, 1),
            sft: SftLayer::new(init, &n("sft"), width, width),
            proj: Conv::new(init, &n("proj"), width, main_width, 1, 1),
            zero_out: Conv::zeroed(init, &n("zero_out"), main_width, main_width, 1),
        }
    }

    fn encode<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, convs: &[Conv; 2], x: Var) -> Result<Var> {
        let h = convs[0].forward(g, ps, x)?;
        let h = g.silu(h);
        convs[1].forward(g, ps, h)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, inp: &ControlInputs) -> Result<Var> {
        let l = Self::encode(g, ps, &self.lr_encoder, inp.lr)?;
        let z = Self::encode(g, ps, &self.latent_encoder, inp.latent)?;
        let f = g.concat(l, z)?;
        let f = self.fuse.forward(g, ps, f)?;
        let f = self.time_block.forward(g, ps, f, Some(inp.temb))?;
        let r = self.rtdm_encoder.forward(g, ps, inp.rtdm)?;
        let r = g.silu(r);
        let f = self.sft.forward(g, ps, f, r)?;
        let c = self.proj.forward(g, ps, f)?;
        let c = cross_normalize_graph(g, c, inp.main)?;
        self.zero_out.forward(g, ps, c)
    }
}
