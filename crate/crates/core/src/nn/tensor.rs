use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// `[batch, channels, height, width]`; lower-rank tensors are left-padded with ones.
pub type Shape = [usize; 4];

pub(crate) fn pad_shape(dims: &[usize]) -> Result<Shape> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(shape_err!("tensors have 1 to 4 dims, got {}", dims.len()));
    }
    let mut s = [1; 4];
    s[4 - dims.len()..].copy_from_slice(dims);
    Ok(s)
}

pub(crate) fn numel(s: &Shape) -> usize {
    s.iter().product()
}

/// Dense NCHW tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = pad_shape(dims)?;
        if numel(&shape) != data.len() {
            return Err(shape_err!("shape {dims:?} needs {} values, got {}", numel(&shape), data.len()));
        }
        Ok(Self { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let shape = pad_shape(dims).expect("valid rank");
        Self { shape, data: vec![v; numel(&shape)], grad: None, requires_grad: false }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let shape = pad_shape(dims).expect("valid rank");
        Self { shape, data: (0..numel(&shape)).map(&mut f).collect(), grad: None, requires_grad: false }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err!("gradient length {} vs tensor {}", g.len(), self.data.len()));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn set_grad(&mut self, g: Vec<T>) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err!("gradient length {} vs tensor {}", g.len(), self.data.len()));
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let shape = pad_shape(dims)?;
        if numel(&shape) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None, requires_grad: false }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            grad: None,
            requires_grad: false,
        })
    }

    /// Value without the gradient slot.
    pub fn detached(&self) -> Self {
        Self { shape: self.shape, data: self.data.clone(), grad: None, requires_grad: false }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            grad: None,
            requires_grad: self.requires_grad,
        }
    }

    /// Batch item `n` as its own `[1, C, H, W]` tensor.
    pub fn item(&self, n: usize) -> Tensor<T> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("empty stack".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(shape_err!("stack: {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_pad_left() {
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), [1, 1, 2, 3]);
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_slot_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[3]);
        assert!(t.accumulate_grad(&[1.0, 2.0]).is_err());
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 2.0, 3.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn stack_and_item() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 1, 2], |i| i as f32);
        let b = a.map(|v| v + 10.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 2]);
        assert_eq!(s.item(1), b);
    }
}
