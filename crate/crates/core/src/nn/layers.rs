use rand::Rng;

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::{Init, ParameterSet};
use super::tensor::Tensor;

/// Sinusoidal embedding `[sin(t f_i) | cos(t f_i)]` with `f_i` geometric
/// from 1 down to 1/10000. Returns `[N, dim, 1, 1]` for `N = ts.len()`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid!("embedding dim must be even and positive, got {dim}"));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        }
    };
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend((0..half).map(|i| T::lit((t as f64 * freq(i)).sin())));
        data.extend((0..half).map(|i| T::lit((t as f64 * freq(i)).cos())));
    }
    Tensor::new(&[ts.len(), dim, 1, 1], data)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k x k` convolution with "same" padding for odd `k`.
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<T, R>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let c = Self::names(name, stride, k);
        init.normal(&c.weight, &[cout, cin, k, k], cin * k * k);
        init.zeros(&c.bias, &[cout]);
        c
    }

    /// Same layout with every weight set to zero.
    pub fn zeroed<T: Scalar, R: Rng>(init: &mut Init<T, R>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let c = Self::names(name, 1, k);
        init.zeros(&c.weight, &[cout, cin, k, k]);
        init.zeros(&c.bias, &[cout]);
        c
    }

    fn names(name: &str, stride: usize, k: usize) -> Self {
        Self { weight: format!("{name}.w"), bias: format!("{name}.b"), stride, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, &self.weight)?;
        let b = g.param(ps, &self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl Norm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<T, R>, name: &str, channels: usize, groups: usize) -> Self {
        let n = Self { gamma: format!("{name}.gamma"), beta: format!("{name}.beta"), groups };
        init.ones(&n.gamma, &[channels]);
        init.zeros(&n.beta, &[channels]);
        n
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, x: Var) -> Result<Var> {
        let gm = g.param(ps, &self.gamma)?;
        let bt = g.param(ps, &self.beta)?;
        g.group_norm(x, gm, bt, self.groups)
    }
}

/// Pre-activation residual block with an optional timestep projection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Option<Conv>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
        groups: usize,
    ) -> Self {
        Self {
            norm1: Norm::new(init, &format!("{name}.norm1"), cin, groups),
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, 1),
            time: temb_dim.map(|d| Conv::new(init, &format!("{name}.time"), d, cout, 1, 1)),
            norm2: Norm::new(init, &format!("{name}.norm2"), cout, groups),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(init, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParameterSet<T>, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, ps, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, ps, h)?;
        if let (Some(tp), Some(te)) = (&self.time, temb) {
            let a = g.silu(te);
            let e = tp.forward(g, ps, a)?;
            h = g.add(h, e)?;
        }
        let h = self.norm2.forward(g, ps, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, ps, x)?,
            None => x,
        };
        g.add(s, h)
    }
}
