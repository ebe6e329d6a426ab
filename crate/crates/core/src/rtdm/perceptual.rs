//! Per-pixel perceptual divergence maps.
//!
//! The built-in provider is a fixed filter bank: at each of a few dyadic
//! scales it compares horizontal/vertical central differences and the
//! 4-neighbour Laplacian of the two images, takes the L2 distance of the
//! feature vectors, brings every scale back to full resolution, averages and
//! divides by a saturation constant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TextureMap;
use crate::error::{shape_err, Result};
use crate::imagecore::{reflect_index, resize, to_grayscale, Image, ResizeMode};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterBank {
    pub scales: usize,
    pub saturation: f64,
}

impl Default for FilterBank {
    fn default() -> Self {
        Self {
            scales: 3,
            saturation: 0.5,
        }
    }
}

/// Source of the perceptual divergence term.
#[derive(Clone, Debug)]
pub enum PerceptualProvider<T: Scalar = f32> {
    FilterBank(FilterBank),
    /// A map computed elsewhere, returned after clamping to `[0, 1]`.
    External(TextureMap<T>),
}

impl<T: Scalar> Default for PerceptualProvider<T> {
    fn default() -> Self {
        PerceptualProvider::FilterBank(FilterBank::default())
    }
}

impl<T: Scalar> PerceptualProvider<T> {
    /// Loads an external map from a TNSR file with dims `[H, W]`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(PerceptualProvider::External(TextureMap::load(path)?))
    }
}

fn features(p: &[f64], h: usize, w: usize) -> [Vec<f64>; 3] {
    let at = |y: isize, x: isize| p[reflect_index(y, h) * w + reflect_index(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut lap = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let c = at(y, x);
            let (l, r, u, d) = (at(y, x - 1), at(y, x + 1), at(y - 1, x), at(y + 1, x));
            gx[i] = 0.5 * (r - l);
            gy[i] = 0.5 * (d - u);
            lap[i] = l + r + u + d - 4.0 * c;
        }
    }
    [gx, gy, lap]
}

pub(crate) fn filter_bank_map<T: Scalar>(
    psr: &Image<T>,
    hr: &Image<T>,
    bank: &FilterBank,
) -> Result<TextureMap<T>> {
    let a = to_grayscale(psr);
    let b = to_grayscale(hr);
    let (h, w) = a.dims();
    let scales = bank.scales.max(1);
    let mut acc = vec![0.0; h * w];
    for s in 0..scales {
        let f = 1usize << s;
        let (sh, sw) = (h.div_ceil(f).max(1), w.div_ceil(f).max(1));
        let sa = resize(&a, sh, sw, ResizeMode::Area)?;
        let sb = resize(&b, sh, sw, ResizeMode::Area)?;
        let fa = features(&sa.plane_f64(0), sh, sw);
        let fb = features(&sb.plane_f64(0), sh, sw);
        let dist: Vec<f64> = (0..sh * sw)
            .map(|i| (0..3).map(|k| (fa[k][i] - fb[k][i]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let dist_img = Image::<f64>::from_planes_f64(sh, sw, &[dist]);
        let up = resize(&dist_img, h, w, ResizeMode::Bilinear)?;
        for (a, d) in acc.iter_mut().zip(up.data()) {
            *a += d;
        }
    }
    let data = acc
        .iter()
        .map(|v| T::lit((v / scales as f64 / bank.saturation).clamp(0.0, 1.0)))
        .collect();
    TextureMap::new(h, w, data)
}

/// Spatial perceptual divergence, higher where the two images disagree more.
pub fn perceptual_map<T: Scalar>(
    psr: &Image<T>,
    hr: &Image<T>,
    provider: &PerceptualProvider<T>,
) -> Result<TextureMap<T>> {
    if psr.dims() != hr.dims() {
        return Err(shape_err!("psr {:?} vs hr {:?}", psr.dims(), hr.dims()));
    }
    match provider {
        PerceptualProvider::FilterBank(bank) => filter_bank_map(psr, hr, bank),
        PerceptualProvider::External(map) => {
            if map.dims() != hr.dims() {
                return Err(shape_err!(
                    "external perceptual map {:?} does not match image {:?}",
                    map.dims(),
                    hr.dims()
                ));
            }
            Ok(map.clamped())
        }
    }
}
