//! Tape-based reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse. Graphs are cheap and meant to be rebuilt per step.

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

use super::params::ParameterSet;
use super::tensor::{numel, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Act(Var, Activation),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Upsample(Var, usize),
    AvgPool(Var, usize),
    Concat(Var, Var),
    MeanSpatial(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<String>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn strides(s: Shape) -> [usize; 4] {
    [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1]
}

fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

fn bstrides(s: Shape, out: Shape) -> [usize; 4] {
    let mut st = strides(s);
    for d in 0..4 {
        if s[d] == 1 && out[d] != 1 {
            st[d] = 0;
        }
    }
    st
}

/// Calls `f(out_index, a_index, b_index)` over a broadcast iteration space.
fn for_each_bcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut oi = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ab = n * sa[0] + c * sa[1] + y * sa[2];
                let bb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out[3] {
                    f(oi, ab + x * sa[3], bb + x * sb[3]);
                    oi += 1;
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn act_fwd<T: Scalar>(x: T, k: Activation) -> T {
    match k {
        Activation::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Activation::Silu => x * sigmoid(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Unfolds one batch item `[C, H, W]` into a `[C*k*k, Ho*Wo]` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut col = vec![T::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(col: &[T], dx: &mut [T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += col[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_out_dim(i: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || i + 2 * pad < k {
        return Err(shape_err!("conv kernel {k} does not fit input {i} with padding {pad}"));
    }
    Ok((i + 2 * pad - k) / stride + 1)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients flow into it only if `requires_grad` is set.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t.detached(), op: Op::Leaf, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t.detached(), op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter; frozen parameters get no gradient.
    pub fn param(&mut self, ps: &ParameterSet<T>, name: &str) -> Result<Var> {
        let t = ps.get(name).ok_or_else(|| invalid!("unknown parameter {name}"))?;
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: !ps.is_frozen(name),
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![T::zero(); numel(&out)];
        for_each_bcast(out, bstrides(sa, out), bstrides(sb, out), |o, i, j| data[o] = f(da[i], db[j]));
        let t = Tensor::new(&out, data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x + k);
        self.push(t, Op::Shift(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a).map(|x| act_fwd(x, kind));
        self.push(t, Op::Act(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()).sqrt());
        self.push(t, Op::Sqrt(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.abs());
        self.push(t, Op::Abs(a), &[a])
    }

    /// Cross-correlation of `x [N, Cin, H, W]` with `w [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 {
            return Err(shape_err!("conv weight {:?} does not match input {:?}", self.shape(w), self.shape(x)));
        }
        if let Some(b) = b {
            if numel(&self.shape(b)) != cout {
                return Err(shape_err!("conv bias {:?} for {cout} output channels", self.shape(b)));
            }
        }
        let ho = conv_out_dim(h, k, stride, pad)?;
        let wo = conv_out_dim(wd, k, stride, pad)?;
        let (kk, hw) = (cin * k * k, ho * wo);
        let mut out = vec![T::zero(); n * cout * hw];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let direct = k == 1 && stride == 1 && pad == 0;
        for i in 0..n {
            let xi = &xd[i * cin * h * wd..(i + 1) * cin * h * wd];
            let owned;
            let col: &[T] = if direct {
                xi
            } else {
                owned = im2col(xi, cin, h, wd, k, stride, pad, ho, wo);
                &owned
            };
            let dst = &mut out[i * cout * hw..(i + 1) * cout * hw];
            T::gemm(cout, kk, hw, T::one(), wdata, kk as isize, 1, col, hw as isize, 1, T::zero(), dst, hw as isize, 1);
            if let Some(b) = b {
                let bd = self.nodes[b.0].value.data();
                for co in 0..cout {
                    dst[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let t = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, &ins))
    }

    /// Group normalization with per-channel affine `gamma`, `beta` of `C` elements.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("{c} channels not divisible into {groups} groups"));
        }
        if numel(&self.shape(gamma)) != c || numel(&self.shape(beta)) != c {
            return Err(shape_err!("group norm affine must have {c} elements"));
        }
        let cg = c / groups;
        let m = cg * h * w;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for i in 0..n {
            for g in 0..groups {
                let base = (i * c + g * cg) * h * w;
                let seg = &xd[base..base + m];
                let mean = seg.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / m as f64;
                let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                let (mt, rt) = (T::lit(mean), T::lit(rstd));
                for j in 0..m {
                    let ch = g * cg + j / (h * w);
                    out[base + j] = (seg[j] - mt) * rt * gd[ch] + bd[ch];
                }
                means.push(mt);
                rstds.push(rt);
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, &[x, gamma, beta]))
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(invalid!("upsample factor must be positive"));
        }
        let [n, c, h, w] = self.shape(x);
        let xd = self.value(x).data();
        let (ho, wo) = (h * f, w * f);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                let row = &plane[(y / f) * w..(y / f + 1) * w];
                for x in 0..wo {
                    out.push(row[x / f]);
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::Upsample(x, f), &[x]))
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(shape_err!("{h}x{w} not divisible by pool factor {f}"));
        }
        let (ho, wo) = (h / f, w / f);
        let xd = self.value(x).data();
        let inv = T::lit(1.0 / (f * f) as f64);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    out[p * ho * wo + (y / f) * wo + x / f] += xd[p * h * w + y * w + x] * inv;
                }
            }
        }
        let t = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool(x, f), &[x]))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([n, ca, h, w], sb) = (self.shape(a), self.shape(b));
        if sb[0] != n || sb[2] != h || sb[3] != w {
            return Err(shape_err!("concat {:?} with {sb:?}", self.shape(a)));
        }
        let cb = sb[1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * h * w..(i + 1) * ca * h * w]);
            out.extend_from_slice(&db[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(t, Op::Concat(a, b), &[a, b]))
    }

    /// Per-channel spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let xd = self.value(x).data();
        // offset by the first element so constant planes reproduce exactly
        let out = (0..n * c)
            .map(|p| {
                let s = &xd[p * hw..(p + 1) * hw];
                s[0] + s.iter().map(|&v| v - s[0]).sum::<T>() / T::lit(hw as f64)
            })
            .collect();
        let t = Tensor::new(&[n, c, 1, 1], out).expect("shape");
        self.push(t, Op::MeanSpatial(x), &[x])
    }

    /// Mean over every element.
    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / d.len() as f64;
        self.push(Tensor::full(&[1], T::lit(s)), Op::Mean(x), &[x])
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!("backward root must be a scalar, got {:?}", self.shape(root)));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else { continue };
            self.backprop(node, &g, &mut slots);
            slots[idx] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn acc<'s>(&self, slots: &'s mut [Option<Vec<T>>], v: Var) -> Option<&'s mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(slots[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn reduce_into(&self, slots: &mut [Option<Vec<T>>], v: Var, out: Shape, f: impl Fn(usize, usize) -> T) {
        let s = self.shape(v);
        let st = bstrides(s, out);
        if let Some(dst) = self.acc(slots, v) {
            for_each_bcast(out, st, st, |o, i, _| dst[i] += f(o, i));
        }
    }

    fn backprop(&self, node: &Node<T>, g: &[T], slots: &mut [Option<Vec<T>>]) {
        let out = node.value.shape();
        let y = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.reduce_into(slots, a, out, |o, _| g[o]);
                self.reduce_into(slots, b, out, |o, _| g[o]);
            }
            Op::Sub(a, b) => {
                self.reduce_into(slots, a, out, |o, _| g[o]);
                self.reduce_into(slots, b, out, |o, _| -g[o]);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (sa, sb) = (bstrides(self.shape(a), out), bstrides(self.shape(b), out));
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if let Some(dst) = self.acc(slots, a) {
                    for_each_bcast(out, sa, sb, |o, i, j| {
                        dst[i] += if is_div { g[o] / db[j] } else { g[o] * db[j] }
                    });
                }
                if let Some(dst) = self.acc(slots, b) {
                    for_each_bcast(out, sa, sb, |o, i, j| {
                        dst[j] += if is_div { -g[o] * da[i] / (db[j] * db[j]) } else { g[o] * da[i] }
                    });
                }
            }
            Op::Scale(a, k) => self.unary(slots, a, g, |gi, _, _| gi * k),
            Op::Shift(a) => self.unary(slots, a, g, |gi, _, _| gi),
            Op::Act(a, kind) => {
                let x = self.value(a).data();
                let dst = match self.acc(slots, a) {
                    Some(d) => d,
                    None => return,
                };
                for i in 0..g.len() {
                    dst[i] += g[i]
                        * match kind {
                            Activation::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Activation::Silu => {
                                let s = sigmoid(x[i]);
                                s + x[i] * s * (T::one() - s)
                            }
                            Activation::Sigmoid => y[i] * (T::one() - y[i]),
                        };
                }
            }
            Op::Square(a) => {
                let x = self.value(a).data();
                self.unary(slots, a, g, |gi, i, _| gi * (x[i] + x[i]))
            }
            Op::Sqrt(a) => self.unary(slots, a, g, |gi, i, _| {
                if y[i] > T::zero() {
                    gi * T::lit(0.5) / y[i]
                } else {
                    T::zero()
                }
            }),
            Op::Abs(a) => {
                let x = self.value(a).data();
                self.unary(slots, a, g, |gi, i, _| {
                    if x[i] > T::zero() {
                        gi
                    } else if x[i] < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(slots, g, out, x, w, b, stride, pad),
            Op::GroupNorm { x, gamma, beta, groups, ref mean, ref rstd } => {
                let [n, c, h, wd] = self.shape(x);
                let (cg, hw) = (c / groups, h * wd);
                let m = cg * hw;
                let xd = self.value(x).data();
                let gd = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];
                for i in 0..n {
                    for gr in 0..groups {
                        let base = (i * c + gr * cg) * hw;
                        let (mu, rs) = (mean[i * groups + gr], rstd[i * groups + gr]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..m {
                            let ch = gr * cg + j / hw;
                            let xh = (xd[base + j] - mu) * rs;
                            let dxh = g[base + j] * gd[ch];
                            s1 += dxh;
                            s2 += dxh * xh;
                            dgamma[ch] += g[base + j] * xh;
                            dbeta[ch] += g[base + j];
                        }
                        let inv_m = T::lit(1.0 / m as f64);
                        let (m1, m2) = (s1 * inv_m, s2 * inv_m);
                        for j in 0..m {
                            let ch = gr * cg + j / hw;
                            let xh = (xd[base + j] - mu) * rs;
                            dx[base + j] = rs * (g[base + j] * gd[ch] - m1 - xh * m2);
                        }
                    }
                }
                for (v, d) in [(x, dx), (gamma, dgamma), (beta, dbeta)] {
                    if let Some(dst) = self.acc(slots, v) {
                        dst.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Upsample(a, f) => {
                let [_, _, h, w] = self.shape(a);
                let (ho, wo) = (out[2], out[3]);
                if let Some(dst) = self.acc(slots, a) {
                    for p in 0..out[0] * out[1] {
                        for yy in 0..ho {
                            for xx in 0..wo {
                                dst[p * h * w + (yy / f) * w + xx / f] += g[p * ho * wo + yy * wo + xx];
                            }
                        }
                    }
                }
            }
            Op::AvgPool(a, f) => {
                let [_, _, h, w] = self.shape(a);
                let (ho, wo) = (out[2], out[3]);
                let inv = T::lit(1.0 / (f * f) as f64);
                if let Some(dst) = self.acc(slots, a) {
                    for p in 0..out[0] * out[1] {
                        for yy in 0..h {
                            for xx in 0..w {
                                dst[p * h * w + yy * w + xx] += g[p * ho * wo + (yy / f) * wo + xx / f] * inv;
                            }
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let [n, _, h, w] = out;
                let (ca, cb) = (self.shape(a)[1], self.shape(b)[1]);
                let ct = ca + cb;
                if let Some(dst) = self.acc(slots, a) {
                    for i in 0..n {
                        let src = &g[i * ct * h * w..(i * ct + ca) * h * w];
                        dst[i * ca * h * w..(i + 1) * ca * h * w].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
                if let Some(dst) = self.acc(slots, b) {
                    for i in 0..n {
                        let src = &g[(i * ct + ca) * h * w..(i + 1) * ct * h * w];
                        dst[i * cb * h * w..(i + 1) * cb * h * w].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::MeanSpatial(a) => {
                let [_, _, h, w] = self.shape(a);
                let hw = h * w;
                let inv = T::lit(1.0 / hw as f64);
                self.unary(slots, a, g, |_, i, _| g[i / hw] * inv)
            }
            Op::Mean(a) => {
                let k = g[0] / T::lit(self.value(a).numel() as f64);
                self.unary(slots, a, g, |_, _, _| k)
            }
        }
    }

    /// Adds `f(g_i, i, _)` into the input gradient; `g` is indexed by the
    /// input's element index when shapes differ (callers handle that).
    fn unary(&self, slots: &mut [Option<Vec<T>>], a: Var, g: &[T], f: impl Fn(T, usize, ()) -> T) {
        let n = self.value(a).numel();
        if let Some(dst) = self.acc(slots, a) {
            for i in 0..n {
                let gi = if g.len() == n { g[i] } else { T::zero() };
                dst[i] += f(gi, i, ());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, slots: &mut [Option<Vec<T>>], g: &[T], out: Shape, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, _, k, _] = self.shape(w);
        let (ho, wo) = (out[2], out[3]);
        let (kk, hw) = (cin * k * k, ho * wo);
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let direct = k == 1 && stride == 1 && pad == 0;
        let need_w = self.nodes[w.0].needs_grad;
        let need_x = self.nodes[x.0].needs_grad;
        let mut dw = vec![T::zero(); cout * kk];
        let mut dx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        for i in 0..n {
            let gi = &g[i * cout * hw..(i + 1) * cout * hw];
            if need_w {
                let xi = &xd[i * cin * h * wd..(i + 1) * cin * h * wd];
                let owned;
                let col: &[T] = if direct {
                    xi
                } else {
                    owned = im2col(xi, cin, h, wd, k, stride, pad, ho, wo);
                    &owned
                };
                T::gemm(cout, hw, kk, T::one(), gi, hw as isize, 1, col, 1, hw as isize, T::one(), &mut dw, kk as isize, 1);
            }
            if need_x {
                let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
                if direct {
                    T::gemm(kk, cout, hw, T::one(), wdata, 1, kk as isize, gi, hw as isize, 1, T::one(), dxi, hw as isize, 1);
                } else {
                    let mut dcol = vec![T::zero(); kk * hw];
                    T::gemm(kk, cout, hw, T::one(), wdata, 1, kk as isize, gi, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                    col2im_add(&dcol, dxi, cin, h, wd, k, stride, pad, ho, wo);
                }
            }
        }
        if need_w {
            if let Some(dst) = self.acc(slots, w) {
                dst.iter_mut().zip(dw).for_each(|(a, b)| *a += b);
            }
        }
        if need_x {
            if let Some(dst) = self.acc(slots, x) {
                dst.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
            }
        }
        if let Some(b) = b {
            if let Some(dst) = self.acc(slots, b) {
                for i in 0..n {
                    for co in 0..cout {
                        dst[co] += g[(i * cout + co) * hw..(i * cout + co + 1) * hw].iter().copied().sum::<T>();
                    }
                }
            }
        }
    }

    /// Named-parameter gradients of a finished backward pass.
    pub fn param_grads<'a>(&'a self, grads: &'a Grads<T>) -> impl Iterator<Item = (&'a str, &'a [T])> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| {
            let name = n.param.as_deref()?;
            Some((name, grads.slots[i].as_deref()?))
        })
    }
}
