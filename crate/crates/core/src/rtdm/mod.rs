//! Relative texture density maps.
//!
//! From a preliminary reconstruction and its high-resolution reference the
//! pipeline builds a contrast-consistency map and a perceptual divergence
//! map, multiplies the consistency by the inverted divergence, thresholds
//! the product (low values mark lost texture), cleans the mask with an
//! opening plus small-component removal and max-pools it to latent
//! resolution.

mod morphology;
mod perceptual;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use morphology::{dilate, erode, label_components, remove_small_components};
pub use perceptual::{perceptual_map, FilterBank, PerceptualProvider};

use crate::error::{invalid, shape_err, Error, Result};
use crate::imagecore::{gaussian_window_stats, to_grayscale, Image};
use crate::scalar::Scalar;
use crate::tnsr;

/// Continuous single-channel map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureMap<T = f32> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> TextureMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} map needs {} values, got {}", height * width, data.len()));
        }
        if data.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(invalid!("texture map values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    /// Skips the range check; callers clamp afterwards.
    pub(crate) fn new_unchecked(height: usize, width: usize, data: Vec<T>) -> Self {
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.iter().map(|v| v.max(T::zero()).min(T::one())).collect(),
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn to_image(&self) -> Image<T> {
        Image::new(self.height, self.width, 1, self.data.clone()).expect("map dims are consistent")
    }

    pub fn from_image(img: &Image<T>) -> Result<Self> {
        Ok(Self::new_unchecked(img.height(), img.width(), to_grayscale(img).into_data()).clamped())
    }

    /// TNSR with dims `[H, W]`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tnsr::write_tensor(
            path,
            &[self.height, self.width],
            self.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (dims, data) = tnsr::read_tensor(path)?;
        let (h, w) = match dims[..] {
            [h, w] => (h, w),
            [1, h, w] | [1, 1, h, w] => (h, w),
            _ => return Err(Error::format(path, format!("expected a 2-D map, got dims {dims:?}"))),
        };
        Ok(Self::new_unchecked(h, w, data.into_iter().map(|v| T::lit(v as f64)).collect()).clamped())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Pixel,
    Latent,
}

/// Strictly binary mask; `1` marks texture-rich locations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    resolution: Resolution,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>, resolution: Resolution) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{height}x{width} mask needs {} values, got {}", height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid!("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data, resolution })
    }

    pub fn zeros(height: usize, width: usize, resolution: Resolution) -> Self {
        Self { height, width, data: vec![0; height * width], resolution }
    }

    pub fn ones(height: usize, width: usize, resolution: Resolution) -> Self {
        Self { height, width, data: vec![1; height * width], resolution }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len().max(1) as f64
    }

    pub fn inverted(&self) -> Self {
        Self {
            data: self.data.iter().map(|&v| 1 - v).collect(),
            ..self.clone()
        }
    }

    /// `self <= other` pointwise.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    /// Nearest-neighbour expansion back to pixel resolution.
    pub fn upsample_nearest(&self, factor: usize) -> BinaryMask {
        let (h, w) = (self.height * factor, self.width * factor);
        let data = (0..h * w)
            .map(|i| self.data[(i / w / factor) * self.width + (i % w) / factor])
            .collect();
        BinaryMask { height: h, width: w, data, resolution: Resolution::Pixel }
    }

    pub fn to_image<T: Scalar>(&self) -> Image<T> {
        Image::new(self.height, self.width, 1, self.data.iter().map(|&v| T::lit(v as f64)).collect())
            .expect("mask dims are consistent")
    }

    /// Thresholds a gray image at one half; used for PNG mask previews.
    pub fn from_image<T: Scalar>(img: &Image<T>, resolution: Resolution) -> Self {
        let g = to_grayscale(img);
        let data = g.data().iter().map(|v| (v.to_f64_lossy() >= 0.5) as u8).collect();
        BinaryMask { height: g.height(), width: g.width(), data, resolution }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        tnsr::write_tensor(path, &[self.height, self.width], self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn load(path: impl AsRef<Path>, resolution: Resolution) -> Result<Self> {
        let path = path.as_ref();
        let (dims, data) = tnsr::read_tensor(path)?;
        let (h, w) = match dims[..] {
            [h, w] => (h, w),
            [1, h, w] | [1, 1, h, w] => (h, w),
            _ => return Err(Error::format(path, format!("expected a 2-D mask, got dims {dims:?}"))),
        };
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::format(path, "mask payload is not binary"));
        }
        Self::new(h, w, data.iter().map(|&v| v as u8).collect(), resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RtdmConfig {
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub window: usize,
    pub sigma: f64,
    pub c2: f64,
    pub morph_radius: usize,
    /// Minimum component area at 512x512; scaled with image area.
    pub min_component_area: usize,
    pub pool_factor: usize,
    /// LR-to-HR upscaling factor.
    pub scale: usize,
    pub perceptual: FilterBank,
}

impl Default for RtdmConfig {
    fn default() -> Self {
        Self {
            tau_lo: 0.35,
            tau_hi: 0.40,
            window: 11,
            sigma: 1.5,
            c2: 0.03 * 0.03,
            morph_radius: 1,
            min_component_area: 64,
            pool_factor: 8,
            scale: 4,
            perceptual: FilterBank::default(),
        }
    }
}

impl RtdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_lo && self.tau_lo <= self.tau_hi && self.tau_hi <= 1.0) {
            return Err(Error::Config(format!(
                "rtdm.tau_lo/tau_hi must satisfy 0 <= lo <= hi <= 1, got {} / {}",
                self.tau_lo, self.tau_hi
            )));
        }
        if self.pool_factor == 0 || self.min_component_area == 0 || self.scale == 0 {
            return Err(Error::Config("rtdm.pool_factor, min_component_area and scale must be >= 1".into()));
        }
        if self.window.is_multiple_of(2) || !(self.sigma > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::Config("rtdm.window must be odd, sigma and c2 positive".into()));
        }
        Ok(())
    }

    /// Component-area threshold for an `h x w` field.
    pub fn effective_min_area(&self, h: usize, w: usize) -> usize {
        let scaled = self.min_component_area as f64 * (h * w) as f64 / (512.0 * 512.0);
        (scaled.round() as usize).max(1)
    }
}

fn same_dims<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("image dims differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Contrast-consistency map `(2 sx sy + C2) / (sx^2 + sy^2 + C2)`.
pub fn cct_map<T: Scalar>(psr: &Image<T>, hr: &Image<T>, cfg: &RtdmConfig) -> Result<TextureMap<T>> {
    same_dims(psr, hr)?;
    let a = to_grayscale(psr);
    let b = to_grayscale(hr);
    let s = gaussian_window_stats(&a, &b, cfg.window, cfg.sigma)?;
    let c2 = T::lit(cfg.c2);
    let two = T::lit(2.0);
    let data = s
        .var_a
        .iter()
        .zip(&s.var_b)
        .map(|(&va, &vb)| {
            let v = (two * va.sqrt() * vb.sqrt() + c2) / (va + vb + c2);
            v.max(T::zero()).min(T::one())
        })
        .collect();
    Ok(TextureMap::new_unchecked(s.height, s.width, data))
}

/// `(1 - M_SL) * M_CCT`.
pub fn combine<T: Scalar>(m_sl: &TextureMap<T>, m_cct: &TextureMap<T>) -> Result<TextureMap<T>> {
    if m_sl.dims() != m_cct.dims() {
        return Err(shape_err!("map dims differ: {:?} vs {:?}", m_sl.dims(), m_cct.dims()));
    }
    let data = m_sl
        .data
        .iter()
        .zip(&m_cct.data)
        .map(|(&sl, &c)| ((T::one() - sl) * c).max(T::zero()).min(T::one()))
        .collect();
    Ok(TextureMap::new_unchecked(m_sl.height, m_sl.width, data))
}

/// 1 where `M <= tau` (inclusive).
pub fn binarize<T: Scalar>(m: &TextureMap<T>, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid!("tau must lie in [0, 1], got {tau}"));
    }
    let tau = T::lit(tau);
    let data = m.data.iter().map(|&v| (v <= tau) as u8).collect();
    Ok(BinaryMask { height: m.height, width: m.width, data, resolution: Resolution::Pixel })
}

/// Uniform threshold from `[tau_lo, tau_hi]`.
pub fn sample_tau<R: Rng + ?Sized>(cfg: &RtdmConfig, rng: &mut R) -> f64 {
    if cfg.tau_lo == cfg.tau_hi {
        return cfg.tau_lo;
    }
    rng.gen_range(cfg.tau_lo..=cfg.tau_hi)
}

/// Opening by a square element followed by small-component removal.
pub fn postprocess(mask: &BinaryMask, cfg: &RtdmConfig) -> Result<BinaryMask> {
    if mask.resolution != Resolution::Pixel {
        return Err(invalid!("post-processing applies to pixel-resolution masks"));
    }
    let (h, w) = mask.dims();
    let r = cfg.morph_radius;
    let opened = dilate(&erode(&mask.data, h, w, r), h, w, r);
    let data = remove_small_components(&opened, h, w, cfg.effective_min_area(h, w));
    Ok(BinaryMask { height: h, width: w, data, resolution: Resolution::Pixel })
}

/// Block max-pooling to latent resolution.
pub fn downsample_pool(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("mask {h}x{w} is not divisible by pool factor {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut data = vec![0u8; oh * ow];
    for y in 0..h {
        for x in 0..w {
            let o = (y / factor) * ow + x / factor;
            data[o] |= mask.data[y * w + x];
        }
    }
    Ok(BinaryMask { height: oh, width: ow, data, resolution: Resolution::Latent })
}

/// Thresholded, cleaned and pooled mask from a continuous map.
pub fn mask_from_map<T: Scalar>(map: &TextureMap<T>, tau: f64, cfg: &RtdmConfig) -> Result<BinaryMask> {
    downsample_pool(&postprocess(&binarize(map, tau)?, cfg)?, cfg.pool_factor)
}

#[derive(Clone, Debug)]
pub struct RtdmEstimate<T: Scalar = f32> {
    pub psr: Image<T>,
    pub map: TextureMap<T>,
    pub pixel_mask: BinaryMask,
    pub mask: BinaryMask,
}

/// Full HR-based estimation: PSR (bicubic unless overridden), combined map
/// and the latent-resolution mask.
pub fn estimate_rtdm<T: Scalar>(
    lr: &Image<T>,
    hr: &Image<T>,
    cfg: &RtdmConfig,
    tau: f64,
    provider: &PerceptualProvider<T>,
    psr_override: Option<&Image<T>>,
) -> Result<RtdmEstimate<T>> {
    cfg.validate()?;
    let (h, w) = hr.dims();
    if h % cfg.pool_factor != 0 || w % cfg.pool_factor != 0 {
        return Err(shape_err!("hr {h}x{w} must be divisible by {}", cfg.pool_factor));
    }
    if lr.height() * cfg.scale != h || lr.width() * cfg.scale != w {
        return Err(shape_err!(
            "lr {:?} x{} does not match hr {:?}",
            lr.dims(),
            cfg.scale,
            hr.dims()
        ));
    }
    let psr = match psr_override {
        Some(p) => {
            same_dims(&to_grayscale(p), &to_grayscale(hr))?;
            p.clone()
        }
        None => crate::degrade::make_psr(lr, cfg.scale)?,
    };
    let m_cct = cct_map(&psr, hr, cfg)?;
    let m_sl = perceptual_map(&psr, hr, provider)?;
    let map = combine(&m_sl, &m_cct)?;
    let pixel_mask = postprocess(&binarize(&map, tau)?, cfg)?;
    let mask = downsample_pool(&pixel_mask, cfg.pool_factor)?;
    Ok(RtdmEstimate { psr, map, pixel_mask, mask })
}
