//! Full-reference image metrics and binary-mask agreement scores.

use serde::{Serialize, Serializer};

use crate::error::{shape_err, Result};
use crate::imagecore::{gaussian_window_stats, to_grayscale, Image};
use crate::rtdm::BinaryMask;
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR in dB for unit dynamic range, averaged jointly over all channels.
/// Identical images give `f64::INFINITY`.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(shape_err!(
            "psnr inputs differ: {:?}x{} vs {:?}x{}",
            a.dims(),
            a.channels(),
            b.dims(),
            b.channels()
        ));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Per-pixel SSIM index on the luma planes.
pub fn ssim_map<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(shape_err!("ssim inputs differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let ga = to_grayscale(a).cast::<f64>();
    let gb = to_grayscale(b).cast::<f64>();
    let s = gaussian_window_stats(&ga, &gb, SSIM_WINDOW, SSIM_SIGMA)?;
    Ok((0..s.mu_a.len())
        .map(|i| {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            let lum = (2.0 * (ma * mb) + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
            let cs = (2.0 * s.cov_ab[i] + SSIM_C2) / (s.var_a[i] + s.var_b[i] + SSIM_C2);
            lum * cs
        })
        .collect())
}

pub fn ssim<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

fn check_masks(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("mask dims differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Intersection over union; two empty masks agree perfectly.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_masks(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Percentage of agreeing pixels.
pub fn mask_accuracy(pred: &BinaryMask, oracle: &BinaryMask) -> Result<f64> {
    check_masks(pred, oracle)?;
    let same = pred.data().iter().zip(oracle.data()).filter(|(a, b)| a == b).count();
    Ok(100.0 * same as f64 / pred.data().len().max(1) as f64)
}

fn ser_psnr<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_none(),
    }
}

/// Any subset of the metrics; serialized as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "ser_psnr", skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_iou: Option<f64>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
