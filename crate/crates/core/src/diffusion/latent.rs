//! Pixel latents: luma area-downsampled by 8 and mapped to `[-1, 1]`.

use crate::error::{shape_err, Result};
use crate::imagecore::{resize, to_grayscale, Image, ResizeMode};
use crate::nn::Tensor;
use crate::scalar::Scalar;

pub const LATENT_FACTOR: usize = 8;

fn to_signed<T: Scalar>(img: &Image<T>) -> Result<Tensor<T>> {
    let (h, w) = img.dims();
    let two = T::lit(2.0);
    Tensor::new(&[1, 1, h, w], img.data().iter().map(|&v| two * v - T::one()).collect())
}

/// Latent of an HR image, `[1, 1, H/8, W/8]`.
pub fn encode_latent<T: Scalar>(hr: &Image<T>) -> Result<Tensor<T>> {
    let (h, w) = hr.dims();
    if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
        return Err(shape_err!("image {h}x{w} not divisible by {LATENT_FACTOR}"));
    }
    let g = to_grayscale(hr);
    to_signed(&resize(&g, h / LATENT_FACTOR, w / LATENT_FACTOR, ResizeMode::Area)?)
}

/// LR image resampled to the latent grid, same value mapping as latents.
pub fn lr_condition<T: Scalar>(lr: &Image<T>, latent_h: usize, latent_w: usize) -> Result<Tensor<T>> {
    let g = to_grayscale(lr);
    let (h, w) = g.dims();
    let mode = if h >= latent_h && w >= latent_w { ResizeMode::Area } else { ResizeMode::Bilinear };
    to_signed(&resize(&g, latent_h, latent_w, mode)?.clamp01())
}

/// Batch item `index` of a latent tensor as an image upsampled by 8.
pub fn decode_latent<T: Scalar>(z: &Tensor<T>, index: usize) -> Result<Image<T>> {
    let [n, c, h, w] = z.shape();
    if index >= n || c != 1 {
        return Err(shape_err!("cannot decode item {index} of {:?}", z.shape()));
    }
    let half = T::lit(0.5);
    let data = z.data()[index * h * w..(index + 1) * h * w].iter().map(|&v| ((v + T::one()) * half).max(T::zero()).min(T::one())).collect();
    let small = Image::new(h, w, 1, data)?;
    Ok(resize(&small, h * LATENT_FACTOR, w * LATENT_FACTOR, ResizeMode::Bicubic)?.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_round_trip() {
        let hr = Image::<f64>::filled(32, 16, 1, 0.25);
        let z = encode_latent(&hr).unwrap();
        assert_eq!(z.shape(), [1, 1, 4, 2]);
        assert!(z.data().iter().all(|&v| (v + 0.5).abs() < 1e-12));
        let back = decode_latent(&z, 0).unwrap();
        assert_eq!(back.dims(), (32, 16));
        assert!(back.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!(encode_latent(&Image::<f64>::filled(12, 16, 1, 0.0)).is_err());
    }

    #[test]
    fn latent_is_block_mean() {
        let hr = Image::<f64>::from_fn(16, 16, 1, |y, x, _| ((y / 8) * 2 + x / 8) as f64 / 4.0);
        let z = encode_latent(&hr).unwrap();
        let want: Vec<f64> = [0.0, 0.25, 0.5, 0.75].iter().map(|v| 2.0 * v - 1.0).collect();
        for (a, b) in z.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let lr = Image::<f64>::from_fn(4, 4, 1, |y, x, _| ((y / 2) * 2 + x / 2) as f64 / 4.0);
        let c = lr_condition(&lr, 2, 2).unwrap();
        for (a, b) in c.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
