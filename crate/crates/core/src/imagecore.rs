//! Dense float images and the windowed filters used by the texture map
//! pipeline and the metrics.

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Row-major `height x width x channels` image with samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid!("images carry 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{}x{}x{} image needs {} samples, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image samples must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        assert!(channels == 1 || channels == 3);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.max(T::zero()).min(T::one()))
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Extracts one channel as a grayscale image.
    pub fn plane(&self, c: usize) -> Image<T> {
        assert!(c < self.channels);
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub(crate) fn plane_f64(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .map(|v| v.to_f64_lossy())
            .collect()
    }

    pub(crate) fn from_planes_f64(height: usize, width: usize, planes: &[Vec<f64>]) -> Self {
        let channels = planes.len();
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height * width {
            for p in planes {
                data.push(T::lit(p[i]));
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn same_dims(&self, other: &Image<T>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

fn map_image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Reads an 8-bit grayscale or RGB PNG; samples become `byte / 255`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| map_image_error(path, e))?;
    let (channels, w, h, bytes) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.width(), buf.height(), buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.width(), buf.height(), buf.into_raw()),
        other => {
            return Err(Error::format(
                path,
                format!("only 8-bit gray or RGB is supported, found {:?}", other.color()),
            ))
        }
    };
    let data = bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
    Image::new(h as usize, w as usize, channels, data)
}

pub fn to_u8(img: &Image<impl Scalar>) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes an 8-bit PNG (gray or RGB by channel count).
pub fn save_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &to_u8(img),
        img.width() as u32,
        img.height() as u32,
        color,
        ImageFormat::Png,
    )
    .map_err(|e| map_image_error(path, e))
}

/// ITU-R 601 luma; identity for single-channel input.
pub fn to_grayscale<T: Scalar>(img: &Image<T>) -> Image<T> {
    if img.channels() == 1 {
        return img.clone();
    }
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| (wr * p[0] + wg * p[1] + wb * p[2]).max(T::zero()).min(T::one()))
        .collect();
    Image {
        height: img.height(),
        width: img.width(),
        channels: 1,
        data,
    }
}

/// Half-sample symmetric extension: `.. b a | a b c .. y z | z y ..`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable correlation with a symmetric kernel and reflect borders.
pub(crate) fn filter_separable(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * row[reflect_index(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, &wk) in kernel.iter().enumerate() {
            let src = reflect_index(y as isize + k as isize - r, h);
            let src_row = &tmp[src * w..(src + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Per-pixel Gaussian-weighted first and second moments of two aligned planes.
#[derive(Clone, Debug)]
pub struct LocalStats<T = f32> {
    pub height: usize,
    pub width: usize,
    pub mu_a: Vec<T>,
    pub mu_b: Vec<T>,
    pub var_a: Vec<T>,
    pub var_b: Vec<T>,
    pub cov_ab: Vec<T>,
}

pub fn gaussian_window_stats<T: Scalar>(
    a: &Image<T>,
    b: &Image<T>,
    window: usize,
    sigma: f64,
) -> Result<LocalStats<T>> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(shape_err!("window statistics need single-channel planes"));
    }
    if a.dims() != b.dims() {
        return Err(shape_err!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    if window.is_multiple_of(2) || window == 0 {
        return Err(invalid!("window must be odd, got {window}"));
    }
    if !(sigma > 0.0) {
        return Err(invalid!("window sigma must be positive"));
    }
    let (h, w) = a.dims();
    let kernel = gaussian_kernel_1d(window, sigma);
    // Centering on the plane mean keeps E[x^2] - mu^2 free of cancellation
    // and makes constant planes come out with exactly zero variance.
    let center = |mut p: Vec<f64>| {
        let m = p.iter().sum::<f64>() / p.len() as f64;
        p.iter_mut().for_each(|v| *v -= m);
        (p, m)
    };
    let (pa, ma) = center(a.plane_f64(0));
    let (pb, mb) = center(b.plane_f64(0));
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_separable(&pa, h, w, &kernel);
    let mu_b = filter_separable(&pb, h, w, &kernel);
    let e_aa = filter_separable(&sq(&pa, &pa), h, w, &kernel);
    let e_bb = filter_separable(&sq(&pb, &pb), h, w, &kernel);
    let e_ab = filter_separable(&sq(&pa, &pb), h, w, &kernel);

    let n = h * w;
    let mut stats = LocalStats {
        height: h,
        width: w,
        mu_a: Vec::with_capacity(n),
        mu_b: Vec::with_capacity(n),
        var_a: Vec::with_capacity(n),
        var_b: Vec::with_capacity(n),
        cov_ab: Vec::with_capacity(n),
    };
    for i in 0..n {
        let va = (e_aa[i] - mu_a[i] * mu_a[i]).max(0.0);
        let vb = (e_bb[i] - mu_b[i] * mu_b[i]).max(0.0);
        let bound = (va * vb).sqrt();
        let cov = (e_ab[i] - mu_a[i] * mu_b[i]).clamp(-bound, bound);
        stats.mu_a.push(T::lit(mu_a[i] + ma));
        stats.mu_b.push(T::lit(mu_b[i] + mb));
        stats.var_a.push(T::lit(va));
        stats.var_b.push(T::lit(vb));
        stats.cov_ab.push(T::lit(cov));
    }
    Ok(stats)
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, reflect borders.
pub fn gaussian_blur<T: Scalar>(img: &Image<T>, sigma: f64) -> Result<Image<T>> {
    if !(sigma > 0.0) {
        return Err(invalid!("blur sigma must be positive, got {sigma}"));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel_1d(2 * radius + 1, sigma);
    let (h, w) = img.dims();
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| filter_separable(&img.plane_f64(c), h, w, &kernel))
        .collect();
    Ok(Image::from_planes_f64(h, w, &planes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
    Bicubic,
    Area,
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps for each output index along one axis.
fn axis_weights(n_in: usize, n_out: usize, mode: ResizeMode) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let clamp = |i: isize| i.clamp(0, n_in as isize - 1) as usize;
    (0..n_out)
        .map(|o| {
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut push = |idx: usize, wt: f64| {
                if wt == 0.0 {
                    return;
                }
                if let Some(t) = taps.iter_mut().find(|t| t.0 == idx) {
                    t.1 += wt;
                } else {
                    taps.push((idx, wt));
                }
            };
            match mode {
                ResizeMode::Nearest => {
                    let src = (((o as f64) + 0.5) * scale).floor() as usize;
                    push(src.min(n_in - 1), 1.0);
                }
                ResizeMode::Bilinear => {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = src.floor() as isize;
                    let f = src - i0 as f64;
                    push(clamp(i0), 1.0 - f);
                    push(clamp(i0 + 1), f);
                }
                ResizeMode::Bicubic => {
                    let src = (o as f64 + 0.5) * scale - 0.5;
                    let i0 = src.floor() as isize;
                    let f = src - i0 as f64;
                    for k in -1..=2isize {
                        push(clamp(i0 + k), cubic(f - k as f64));
                    }
                }
                ResizeMode::Area => {
                    let lo = o as f64 * scale;
                    let hi = (o + 1) as f64 * scale;
                    let mut i = lo.floor() as usize;
                    while (i as f64) < hi && i < n_in {
                        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                        push(i, overlap / scale);
                        i += 1;
                    }
                }
            }
            taps
        })
        .collect()
}

pub fn resize<T: Scalar>(
    img: &Image<T>,
    new_h: usize,
    new_w: usize,
    mode: ResizeMode,
) -> Result<Image<T>> {
    if new_h == 0 || new_w == 0 {
        return Err(invalid!("resize target must be non-empty, got {new_h}x{new_w}"));
    }
    let (h, w) = img.dims();
    if (h, w) == (new_h, new_w) {
        return Ok(img.clone());
    }
    let wy = axis_weights(h, new_h, mode);
    let wx = axis_weights(w, new_w, mode);
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| {
            let p = img.plane_f64(c);
            let mut tmp = vec![0.0; h * new_w];
            for y in 0..h {
                for (x, taps) in wx.iter().enumerate() {
                    tmp[y * new_w + x] = taps.iter().map(|&(i, wt)| wt * p[y * w + i]).sum();
                }
            }
            let mut out = vec![0.0; new_h * new_w];
            for (y, taps) in wy.iter().enumerate() {
                for &(i, wt) in taps {
                    let src = &tmp[i * new_w..(i + 1) * new_w];
                    for (d, s) in out[y * new_w..(y + 1) * new_w].iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
            out
        })
        .collect();
    Ok(Image::from_planes_f64(new_h, new_w, &planes))
}
