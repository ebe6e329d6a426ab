//! Synthetic scenes and a first-order degradation pipeline
//! (blur, area downsampling, additive Gaussian noise).

mod store;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use store::{load_dataset, save_dataset, DatasetManifest, SceneRecord, StoredScene};

use crate::error::{invalid, shape_err, Error, Result};
use crate::imagecore::{gaussian_blur, resize, Image, ResizeMode};
use crate::rtdm::{estimate_rtdm, sample_tau, BinaryMask, PerceptualProvider, Resolution, RtdmConfig, TextureMap};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    Checker,
    Stripes,
    NoiseTexture,
    Constant,
    Gradient,
}

impl TextureKind {
    /// Whether the region counts as texture-rich ground truth.
    pub fn is_rich(self) -> bool {
        matches!(self, TextureKind::Checker | TextureKind::Stripes | TextureKind::NoiseTexture)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Rect,
    pub kind: TextureKind,
    /// Mean gray level.
    pub base: f64,
    pub amplitude: f64,
    /// Full cycle length in pixels (checker, stripes).
    pub period: usize,
    /// Stripes run vertically when set.
    #[serde(default)]
    pub vertical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub regions: Vec<Region>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(invalid!("scene size {h}x{w} must be a non-zero multiple of 8"));
        }
        let mut cover = vec![0u8; h * w];
        for r in &self.regions {
            if r.rect.y0 + r.rect.height > h || r.rect.x0 + r.rect.width > w {
                return Err(invalid!("region {:?} leaves the {h}x{w} scene", r.rect));
            }
            if matches!(r.kind, TextureKind::Checker | TextureKind::Stripes) && r.period < 2 {
                return Err(invalid!("periodic textures need period >= 2"));
            }
            for y in r.rect.y0..r.rect.y0 + r.rect.height {
                for x in r.rect.x0..r.rect.x0 + r.rect.width {
                    cover[y * w + x] += 1;
                }
            }
        }
        if cover.iter().any(|&c| c != 1) {
            return Err(invalid!("regions must tile the scene without overlap"));
        }
        Ok(())
    }
}

fn region_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Renders a scene and its ground-truth texture-rich mask.
pub fn synth_scene<T: Scalar>(spec: &SceneSpec) -> Result<(Image<T>, BinaryMask)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut px = vec![0.0f64; h * w];
    let mut rich = vec![0u8; h * w];
    for (idx, r) in spec.regions.iter().enumerate() {
        let mut rng = region_rng(spec.seed, idx);
        let half = r.amplitude / 2.0;
        for y in r.rect.y0..r.rect.y0 + r.rect.height {
            for x in r.rect.x0..r.rect.x0 + r.rect.width {
                let (ly, lx) = (y - r.rect.y0, x - r.rect.x0);
                let v = match r.kind {
                    TextureKind::Constant => r.base,
                    TextureKind::Checker => {
                        let side = (r.period / 2).max(1);
                        if (ly / side + lx / side) % 2 == 0 {
                            r.base + half
                        } else {
                            r.base - half
                        }
                    }
                    TextureKind::Stripes => {
                        let u = if r.vertical { lx } else { ly };
                        r.base + half * (std::f64::consts::TAU * u as f64 / r.period as f64).sin()
                    }
                    TextureKind::NoiseTexture => r.base + r.amplitude * (rng.gen::<f64>() - 0.5),
                    TextureKind::Gradient => {
                        let f = if r.rect.width > 1 { lx as f64 / (r.rect.width - 1) as f64 } else { 0.5 };
                        r.base - half + r.amplitude * f
                    }
                };
                px[y * w + x] = v.clamp(0.0, 1.0);
                rich[y * w + x] = r.kind.is_rich() as u8;
            }
        }
    }
    let img = Image::from_planes_f64(h, w, &[px]);
    Ok((img, BinaryMask::new(h, w, rich, Resolution::Pixel)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub blur_sigma_range: [f64; 2],
    pub scale: usize,
    pub noise_sigma_range: [f64; 2],
    pub seed: u64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.4, 1.6],
            scale: 4,
            noise_sigma_range: [0.0, 0.04],
            seed: 0,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ok(self.blur_sigma_range) || !ok(self.noise_sigma_range) || self.scale == 0 {
            return Err(Error::Config("degrade ranges must be non-negative and ordered, scale >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters drawn for one degradation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeDraw {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

pub fn degrade_with_draw<T: Scalar>(hr: &Image<T>, cfg: &DegradeConfig) -> Result<(Image<T>, DegradeDraw)> {
    cfg.validate()?;
    let (h, w) = hr.dims();
    if h % cfg.scale != 0 || w % cfg.scale != 0 {
        return Err(shape_err!("hr {h}x{w} not divisible by scale {}", cfg.scale));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blur_sigma = draw(cfg.blur_sigma_range, &mut rng);
    let noise_sigma = draw(cfg.noise_sigma_range, &mut rng);
    let blurred = if blur_sigma > 0.0 { gaussian_blur(hr, blur_sigma)? } else { hr.clone() };
    let small = resize(&blurred, h / cfg.scale, w / cfg.scale, ResizeMode::Area)?;
    let lr = if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid!("{e}"))?;
        let (lh, lw) = small.dims();
        Image::from_fn(lh, lw, small.channels(), |y, x, c| {
            T::lit((small.get(y, x, c).to_f64_lossy() + normal.sample(&mut rng)).clamp(0.0, 1.0))
        })
    } else {
        small.clamp01()
    };
    Ok((lr, DegradeDraw { blur_sigma, noise_sigma }))
}

/// Blur, area-downsample and add noise; deterministic in `cfg.seed`.
pub fn degrade<T: Scalar>(hr: &Image<T>, cfg: &DegradeConfig) -> Result<Image<T>> {
    Ok(degrade_with_draw(hr, cfg)?.0)
}

/// Preliminary super-resolution stand-in: bicubic upsampling.
pub fn make_psr<T: Scalar>(lr: &Image<T>, scale: usize) -> Result<Image<T>> {
    if scale == 0 {
        return Err(invalid!("scale must be >= 1"));
    }
    Ok(resize(lr, lr.height() * scale, lr.width() * scale, ResizeMode::Bicubic)?.clamp01())
}

/// Random layouts mixing texture-rich and texture-sparse regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneDistribution {
    pub size: usize,
    pub checker_periods: Vec<usize>,
    pub stripe_periods: Vec<usize>,
    pub amplitude_range: [f64; 2],
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            size: 128,
            checker_periods: vec![2, 4, 6],
            stripe_periods: vec![3, 4, 5],
            amplitude_range: [0.35, 0.7],
        }
    }
}

impl SceneDistribution {
    pub fn with_size(size: usize) -> Self {
        Self { size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(8) {
            return Err(Error::Config(format!("scene size must be a multiple of 8 and at least 16, got {}", self.size)));
        }
        let periods_ok = |p: &[usize]| !p.is_empty() && p.iter().all(|&v| v > 0);
        if !periods_ok(&self.checker_periods) || !periods_ok(&self.stripe_periods) {
            return Err(Error::Config("texture periods must be non-empty and positive".into()));
        }
        let [a, b] = self.amplitude_range;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("amplitude_range must be ordered within [0, 1], got [{a}, {b}]")));
        }
        Ok(())
    }

    fn region(&self, rect: Rect, rich: bool, rng: &mut impl Rng) -> Region {
        if rich {
            let kind = [TextureKind::Checker, TextureKind::Stripes, TextureKind::NoiseTexture][rng.gen_range(0..3)];
            let period = match kind {
                TextureKind::Checker => self.checker_periods[rng.gen_range(0..self.checker_periods.len())],
                TextureKind::Stripes => self.stripe_periods[rng.gen_range(0..self.stripe_periods.len())],
                _ => 2,
            };
            Region {
                rect,
                kind,
                base: rng.gen_range(0.35..0.65),
                amplitude: draw(self.amplitude_range, rng),
                period,
                vertical: rng.gen(),
            }
        } else if rng.gen_bool(0.5) {
            Region { rect, kind: TextureKind::Constant, base: rng.gen_range(0.1..0.9), amplitude: 0.0, period: 2, vertical: false }
        } else {
            Region {
                rect,
                kind: TextureKind::Gradient,
                base: rng.gen_range(0.3..0.7),
                amplitude: rng.gen_range(0.1..0.4),
                period: 2,
                vertical: false,
            }
        }
    }

    /// Halves or quadrants on a 16-pixel grid; always at least one rich and
    /// one sparse region.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> SceneSpec {
        let n = self.size;
        let cut = |rng: &mut R| {
            let cells = n / 16;
            if cells < 2 {
                n / 2
            } else {
                16 * rng.gen_range((cells / 4).max(1)..=(3 * cells / 4).min(cells - 1))
            }
        };
        let layout = rng.gen_range(0..3);
        let rects: Vec<Rect> = match layout {
            0 => {
                let c = cut(rng);
                vec![Rect { y0: 0, x0: 0, height: n, width: c }, Rect { y0: 0, x0: c, height: n, width: n - c }]
            }
            1 => {
                let c = cut(rng);
                vec![Rect { y0: 0, x0: 0, height: c, width: n }, Rect { y0: c, x0: 0, height: n - c, width: n }]
            }
            _ => {
                let (cy, cx) = (cut(rng), cut(rng));
                vec![
                    Rect { y0: 0, x0: 0, height: cy, width: cx },
                    Rect { y0: 0, x0: cx, height: cy, width: n - cx },
                    Rect { y0: cy, x0: 0, height: n - cy, width: cx },
                    Rect { y0: cy, x0: cx, height: n - cy, width: n - cx },
                ]
            }
        };
        let mut rich: Vec<bool> = rects.iter().map(|_| rng.gen()).collect();
        if rich.iter().all(|&r| r) || rich.iter().all(|&r| !r) {
            let flip = rng.gen_range(0..rich.len());
            rich[flip] = !rich[flip];
        }
        let regions = rects.into_iter().zip(rich).map(|(r, is_rich)| self.region(r, is_rich, rng)).collect();
        SceneSpec { height: n, width: n, regions, seed: rng.gen() }
    }
}

/// SplitMix64 finalizer; decorrelates per-scene seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One fully processed training/evaluation tuple.
#[derive(Clone, Debug)]
pub struct SceneTuple<T: Scalar = f32> {
    pub index: usize,
    pub seed: u64,
    pub spec: SceneSpec,
    pub tau: f64,
    pub draw: DegradeDraw,
    pub hr: Image<T>,
    pub lr: Image<T>,
    pub psr: Image<T>,
    pub map: TextureMap<T>,
    pub mask: BinaryMask,
    pub region_mask: BinaryMask,
}

/// Builds a single tuple from its per-scene seed.
pub fn build_scene<T: Scalar>(
    index: usize,
    seed: u64,
    dist: &SceneDistribution,
    degrade_cfg: &DegradeConfig,
    rtdm_cfg: &RtdmConfig,
) -> Result<SceneTuple<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = dist.sample(&mut rng);
    let tau = sample_tau(rtdm_cfg, &mut rng);
    let dcfg = DegradeConfig { seed: rng.gen(), ..degrade_cfg.clone() };
    let (hr, region_mask) = synth_scene::<T>(&spec)?;
    let (lr, draw) = degrade_with_draw(&hr, &dcfg)?;
    let rcfg = RtdmConfig { scale: dcfg.scale, ..rtdm_cfg.clone() };
    let provider = PerceptualProvider::FilterBank(rcfg.perceptual);
    let est = estimate_rtdm(&lr, &hr, &rcfg, tau, &provider, None)?;
    Ok(SceneTuple {
        index,
        seed,
        spec,
        tau,
        draw,
        hr,
        lr,
        psr: est.psr,
        map: est.map,
        mask: est.mask,
        region_mask,
    })
}

/// `n_scenes` tuples, reproducible from `master_seed`.
pub fn build_dataset<T: Scalar>(
    n_scenes: usize,
    dist: &SceneDistribution,
    degrade_cfg: &DegradeConfig,
    rtdm_cfg: &RtdmConfig,
    master_seed: u64,
) -> Result<Vec<SceneTuple<T>>> {
    (0..n_scenes)
        .map(|i| build_scene(i, derive_seed(master_seed, i as u64), dist, degrade_cfg, rtdm_cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mask_iou;

    fn spec_of(kinds: &[(TextureKind, Rect)]) -> SceneSpec {
        SceneSpec {
            height: 32,
            width: 32,
            regions: kinds
                .iter()
                .map(|&(kind, rect)| Region { rect, kind, base: 0.5, amplitude: 0.5, period: 4, vertical: false })
                .collect(),
            seed: 7,
        }
    }

    const FULL: Rect = Rect { y0: 0, x0: 0, height: 32, width: 32 };
    const LEFT: Rect = Rect { y0: 0, x0: 0, height: 32, width: 16 };
    const RIGHT: Rect = Rect { y0: 0, x0: 16, height: 32, width: 16 };

    #[test]
    fn region_masks_follow_kinds() {
        let (_, m) = synth_scene::<f32>(&spec_of(&[(TextureKind::Constant, FULL)])).unwrap();
        assert_eq!(m.count_ones(), 0);
        let (_, m) = synth_scene::<f32>(&spec_of(&[(TextureKind::Checker, FULL)])).unwrap();
        assert_eq!(m.count_ones(), 1024);
        let (img, m) = synth_scene::<f32>(&spec_of(&[(TextureKind::Checker, LEFT), (TextureKind::Constant, RIGHT)])).unwrap();
        assert_eq!(m.foreground_fraction(), 0.5);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn overlapping_or_gappy_layouts_are_rejected() {
        assert!(synth_scene::<f32>(&spec_of(&[(TextureKind::Constant, LEFT)])).is_err());
        assert!(synth_scene::<f32>(&spec_of(&[(TextureKind::Constant, FULL), (TextureKind::Constant, LEFT)])).is_err());
    }

    #[test]
    fn degrade_constant_without_blur_or_noise() {
        let hr = Image::<f32>::filled(16, 16, 1, 0.3);
        let cfg = DegradeConfig { blur_sigma_range: [0.0, 0.0], noise_sigma_range: [0.0, 0.0], ..Default::default() };
        let lr = degrade(&hr, &cfg).unwrap();
        assert_eq!(lr.dims(), (4, 4));
        assert!(lr.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert!(degrade(&Image::<f32>::filled(10, 16, 1, 0.3), &cfg).is_err());
    }

    #[test]
    fn degrade_without_noise_matches_composed_oracle() {
        let (hr, _) = synth_scene::<f64>(&spec_of(&[(TextureKind::Checker, LEFT), (TextureKind::Gradient, RIGHT)])).unwrap();
        let cfg = DegradeConfig { blur_sigma_range: [1.1, 1.1], noise_sigma_range: [0.0, 0.0], ..Default::default() };
        let lr = degrade(&hr, &cfg).unwrap();
        let oracle = resize(&gaussian_blur(&hr, 1.1).unwrap(), 8, 8, ResizeMode::Area).unwrap();
        for (a, b) in lr.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn degrade_noise_statistics() {
        let hr = Image::<f64>::filled(256, 256, 1, 0.5);
        let cfg = DegradeConfig { blur_sigma_range: [0.0, 0.0], noise_sigma_range: [0.04, 0.04], seed: 3, ..Default::default() };
        let lr = degrade(&hr, &cfg).unwrap();
        assert_eq!(lr.dims(), (64, 64));
        let n = lr.data().len() as f64;
        let var = lr.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / n;
        assert!((0.03..=0.05).contains(&var.sqrt()), "{}", var.sqrt());
    }

    #[test]
    fn degrade_seeds() {
        let hr = Image::<f32>::filled(32, 32, 1, 0.5);
        let base = DegradeConfig { noise_sigma_range: [0.02, 0.02], ..Default::default() };
        let outs: Vec<Image<f32>> = (0..10).map(|s| degrade(&hr, &DegradeConfig { seed: s, ..base.clone() }).unwrap()).collect();
        assert_eq!(outs[0], degrade(&hr, &DegradeConfig { seed: 0, ..base.clone() }).unwrap());
        for i in 1..10 {
            let diff = outs[i].data().iter().zip(outs[0].data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn psr_is_bicubic_upsample() {
        let lr = Image::<f64>::filled(5, 6, 1, 0.42);
        let psr = make_psr(&lr, 4).unwrap();
        assert_eq!(psr.dims(), (20, 24));
        assert!(psr.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
        let smooth = Image::<f64>::from_fn(16, 16, 1, |y, x, _| 0.5 + 0.3 * ((y as f64) * 0.3).sin() * ((x as f64) * 0.2).cos());
        let back = resize(&make_psr(&smooth, 4).unwrap(), 16, 16, ResizeMode::Area).unwrap();
        let mae = back.data().iter().zip(smooth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 256.0;
        assert!(mae <= 0.02, "{mae}");
    }

    #[test]
    fn dataset_is_reproducible() {
        let dist = SceneDistribution::with_size(64);
        let d = DegradeConfig::default();
        let r = RtdmConfig::default();
        assert!(build_dataset::<f32>(0, &dist, &d, &r, 1).unwrap().is_empty());
        let a = build_dataset::<f32>(3, &dist, &d, &r, 9).unwrap();
        let b = build_dataset::<f32>(3, &dist, &d, &r, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.hr, y.hr);
            assert_eq!(x.lr, y.lr);
            assert_eq!(x.map, y.map);
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.tau, y.tau);
            assert!((0.35..=0.40).contains(&x.tau));
        }
        for s in &a {
            s.spec.validate().unwrap();
            let kinds: Vec<bool> = s.spec.regions.iter().map(|r| r.kind.is_rich()).collect();
            assert!(kinds.contains(&true) && kinds.contains(&false));
            assert_eq!(s.mask.dims(), (8, 8));
            assert!(mask_iou(&s.mask.upsample_nearest(8), &s.region_mask).unwrap() >= 0.0);
        }
    }
}
