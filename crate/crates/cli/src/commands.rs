use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use texadiff::degrade::{build_dataset, load_dataset, make_psr, save_dataset, StoredScene};
use texadiff::diffusion::{
    decode_latent, lr_condition, sample as run_sampler, train as train_denoiser, write_loss_log, DenoiserModel,
    FreezePreset, StepKind, TrainExample, LATENT_FACTOR,
};
use texadiff::imagecore::{load_image, save_image, Image};
use texadiff::metrics::{mask_accuracy, mask_iou, psnr, ssim, MetricReport};
use texadiff::nn::Tensor;
use texadiff::predictor::{
    binarize_prediction, predict_rtdm, train_predictor as fit_predictor, write_predictor_log, PredictorExample,
    PredictorModel,
};
use texadiff::rtdm::{estimate_rtdm, BinaryMask, PerceptualProvider, Resolution, RtdmConfig};
use texadiff::tnsr::write_tensor;
use texadiff::Error;

use crate::config::{RunConfig, Stream};
use crate::CliError;

type CmdResult = Result<(), CliError>;

fn load_config(path: Option<&Path>, seed: u64) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_seed(seed),
    })
}

/// `foo.tnsr` -> `foo<suffix>.<ext>` next to it.
fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn save_mask_with_preview(mask: &BinaryMask, path: &Path) -> Result<(), Error> {
    mask.save(path)?;
    save_image(&mask.to_image::<f32>(), sibling(path, "", "png"))
}

#[derive(Args, Debug)]
pub struct RtdmArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long)]
    hr: PathBuf,
    #[arg(long)]
    psr: Option<PathBuf>,
    #[arg(long)]
    tau: f64,
    #[arg(long)]
    out_map: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn rtdm_estimate(a: &RtdmArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref(), 0)?;
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(Error::InvalidArgument(format!("--tau must lie in [0, 1], got {}", a.tau)).into());
    }
    let lr: Image<f32> = load_image(&a.lr)?;
    let hr: Image<f32> = load_image(&a.hr)?;
    let psr: Option<Image<f32>> = a.psr.as_ref().map(load_image).transpose()?;
    let provider = PerceptualProvider::FilterBank(cfg.rtdm.perceptual);
    let est = estimate_rtdm(&lr, &hr, &cfg.rtdm, a.tau, &provider, psr.as_ref())?;
    est.map.save(&a.out_map)?;
    save_mask_with_preview(&est.mask, &a.out_mask)?;
    println!("foreground fraction: {:.3}", est.mask.foreground_fraction());
    Ok(())
}

pub fn dataset(config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let dist = cfg.degrade.distribution();
    let dcfg = cfg.degrade.degrade_config();
    let scenes = build_dataset::<f32>(cfg.degrade.n_scenes, &dist, &dcfg, &cfg.rtdm, cfg.seed)?;
    save_dataset(out, &scenes, cfg.seed, &dist, &dcfg, &cfg.rtdm)?;
    let fg = scenes.iter().map(|s| s.mask.foreground_fraction()).sum::<f64>() / scenes.len().max(1) as f64;
    println!("wrote {} scenes to {} (mean mask fraction {fg:.3})", scenes.len(), out.display());
    Ok(())
}

/// Scenes used for fitting: everything except the trailing hold-out.
fn training_split(scenes: &[StoredScene<f32>], holdout: usize) -> Result<&[StoredScene<f32>], Error> {
    if holdout >= scenes.len() {
        return Err(Error::Config(format!("train.holdout = {holdout} leaves no training scenes out of {}", scenes.len())));
    }
    Ok(&scenes[..scenes.len() - holdout])
}

pub fn train(config: &Path, dataset_dir: &Path, out: &Path, preset: Option<FreezePreset>) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let (_, scenes) = load_dataset::<f32>(dataset_dir)?;
    let data = training_split(&scenes, cfg.train.holdout)?
        .iter()
        .map(|s| TrainExample::from_images(&s.hr, &s.lr, s.mask.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tcfg = cfg.train_config();
    if let Some(p) = preset {
        tcfg.freeze_preset = p;
    }
    let sched = cfg.schedule()?;
    let mut model = DenoiserModel::<f32>::new(cfg.train.model, cfg.stream_seed(Stream::ModelInit))?;
    tcfg.freeze_preset.apply(&mut model.params);
    let before = model.params.frozen_snapshot();
    let log = train_denoiser(&mut model, &data, &sched, &tcfg)?;
    let after = model.params.frozen_snapshot();
    if before != after {
        return Err(Error::InvalidArgument("a frozen parameter changed during training".into()).into());
    }
    model.save(out)?;
    let log_path = sibling(out, "", "csv");
    write_loss_log(&log_path, &log)?;
    let last = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} scenes; final loss {last:.5}; {} frozen tensors unchanged; log {}",
        log.len(),
        data.len(),
        before.len(),
        log_path.display()
    );
    Ok(())
}

pub fn train_predictor(config: &Path, dataset_dir: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let (_, scenes) = load_dataset::<f32>(dataset_dir)?;
    let data: Vec<PredictorExample<f32>> = training_split(&scenes, cfg.train.holdout)?
        .iter()
        .map(|s| PredictorExample { lr: s.lr.clone(), psr: s.psr.clone(), target: s.map.clone() })
        .collect();
    let mut model = PredictorModel::<f32>::new(cfg.predictor_config(), cfg.stream_seed(Stream::PredictorInit))?;
    let log = fit_predictor(&mut model, &data, &cfg.predictor_train_config())?;
    model.save(out)?;
    let log_path = sibling(out, "", "csv");
    write_predictor_log(&log_path, &log)?;
    println!("trained predictor {} steps on {} scenes; log {}", log.len(), data.len(), log_path.display());
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Predicted,
    Oracle,
    Ones,
    Zeros,
    Inverted,
    File(PathBuf),
}

impl FromStr for MaskSource {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "predicted" => Self::Predicted,
            "oracle" => Self::Oracle,
            "ones" => Self::Ones,
            "zeros" => Self::Zeros,
            "inverted" => Self::Inverted,
            path => Self::File(PathBuf::from(path)),
        })
    }
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn parse_window(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let lo = a.trim().parse().map_err(|_| format!("bad window start {a:?}"))?;
    let hi = b.trim().parse().map_err(|_| format!("bad window end {b:?}"))?;
    Ok((lo, hi))
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lr: PathBuf,
    /// predicted, oracle, ones, zeros, inverted, or a latent mask TNSR file.
    #[arg(long)]
    mask: MaskSource,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_on_off)]
    ta: Option<bool>,
    #[arg(long, value_parser = parse_window)]
    window: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// HR reference for the oracle (and inverted) mask.
    #[arg(long)]
    hr: Option<PathBuf>,
    /// PSR image for mask estimation; bicubic upsampling of the LR otherwise.
    #[arg(long)]
    psr: Option<PathBuf>,
    /// Predictor checkpoint for the predicted (and inverted) mask.
    #[arg(long)]
    predictor: Option<PathBuf>,
}

fn oracle_mask(a: &SampleArgs, cfg: &RtdmConfig, lr: &Image<f32>, psr: Option<&Image<f32>>, tau: f64) -> Result<BinaryMask, CliError> {
    let hr_path = a.hr.as_ref().ok_or_else(|| CliError::Usage("--mask oracle needs --hr".into()))?;
    let hr: Image<f32> = load_image(hr_path)?;
    let provider = PerceptualProvider::FilterBank(cfg.perceptual);
    Ok(estimate_rtdm(lr, &hr, cfg, tau, &provider, psr)?.mask)
}

fn predicted_mask(a: &SampleArgs, cfg: &RunConfig, lr: &Image<f32>, psr: Option<&Image<f32>>, tau: f64) -> Result<BinaryMask, CliError> {
    let ckpt = a.predictor.as_ref().ok_or_else(|| CliError::Usage("--mask predicted needs --predictor".into()))?;
    let mut model = PredictorModel::<f32>::new(cfg.predictor_config(), 0)?;
    model.load(ckpt)?;
    let psr = match psr {
        Some(p) => p.clone(),
        None => make_psr(lr, cfg.rtdm.scale)?,
    };
    let map = predict_rtdm(&model, lr, &psr)?;
    Ok(binarize_prediction(&map, tau, &cfg.rtdm)?)
}

pub fn sample(a: &SampleArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref(), a.seed)?;
    if let Some(on) = a.ta {
        cfg.sample.ta = on;
    }
    if let Some((lo, hi)) = a.window {
        cfg.sample.t_lo = lo;
        cfg.sample.t_hi = hi;
    }
    let tau = a.tau.unwrap_or(cfg.sample.tau);
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("--tau must lie in [0, 1], got {tau}")).into());
    }
    let sched = cfg.schedule()?;
    let ta = cfg.ta_config();
    if ta.enabled {
        ta.validate(sched.len())?;
    }

    let lr: Image<f32> = load_image(&a.lr)?;
    let scale = cfg.rtdm.scale;
    let (hh, hw) = (lr.height() * scale, lr.width() * scale);
    if hh % LATENT_FACTOR != 0 || hw % LATENT_FACTOR != 0 {
        return Err(Error::Shape(format!("lr {:?} x{scale} is not divisible by {LATENT_FACTOR}", lr.dims())).into());
    }
    let (lh, lw) = (hh / LATENT_FACTOR, hw / LATENT_FACTOR);
    let psr: Option<Image<f32>> = a.psr.as_ref().map(load_image).transpose()?;

    let mask = match &a.mask {
        MaskSource::Ones => BinaryMask::ones(lh, lw, Resolution::Latent),
        MaskSource::Zeros => BinaryMask::zeros(lh, lw, Resolution::Latent),
        MaskSource::Oracle => oracle_mask(a, &cfg.rtdm, &lr, psr.as_ref(), tau)?,
        MaskSource::Predicted => predicted_mask(a, &cfg, &lr, psr.as_ref(), tau)?,
        MaskSource::Inverted => match (&a.hr, &a.predictor) {
            (Some(_), _) => oracle_mask(a, &cfg.rtdm, &lr, psr.as_ref(), tau)?.inverted(),
            (None, Some(_)) => predicted_mask(a, &cfg, &lr, psr.as_ref(), tau)?.inverted(),
            (None, None) => return Err(CliError::Usage("--mask inverted needs --hr or --predictor".into())),
        },
        MaskSource::File(p) => {
            let m = BinaryMask::load(p, Resolution::Latent)?;
            if m.dims() != (lh, lw) {
                return Err(Error::Shape(format!("mask {} is {:?}, latent grid is {:?}", p.display(), m.dims(), (lh, lw))).into());
            }
            m
        }
    };

    let mut model = DenoiserModel::<f32>::new(cfg.train.model, 0)?;
    model.load(&a.ckpt)?;
    let cond: Tensor<f32> = lr_condition(&lr, lh, lw)?;
    let mut violations = 0usize;
    let mut selective = 0usize;
    let z = run_sampler(&model, &cond, std::slice::from_ref(&mask), &sched, &ta, a.seed, &mut |ev| {
        if ev.kind == StepKind::Selective {
            selective += 1;
            let (m, b, n) = (ev.mask.data(), ev.before.data(), ev.after.data());
            violations += (0..n.len()).filter(|&i| m[i] == 0.0 && b[i].to_bits() != n[i].to_bits()).count();
        }
    })?;
    if violations > 0 {
        return Err(Error::InvalidArgument(format!("{violations} sparse latents moved during selective steps")).into());
    }

    let sr = decode_latent(&z, 0)?;
    save_image(&sr, &a.out)?;
    write_tensor(sibling(&a.out, "", "tnsr"), &[lh, lw], z.data().to_vec())?;
    save_mask_with_preview(&mask, &sibling(&a.out, "_mask", "tnsr"))?;
    println!(
        "sampled {}x{} ({} steps, {selective} selective); mask fraction {:.3}",
        sr.height(),
        sr.width(),
        sched.len(),
        mask.foreground_fraction()
    );
    Ok(())
}

fn load_mask(path: &Path) -> Result<BinaryMask, Error> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img: Image<f32> = load_image(path)?;
        Ok(BinaryMask::from_image(&img, Resolution::Latent))
    } else {
        BinaryMask::load(path, Resolution::Latent)
    }
}

pub fn eval(pred: &Path, reference: &Path, masks: Option<(&Path, &Path)>) -> CmdResult {
    let a: Image<f32> = load_image(pred)?;
    let b: Image<f32> = load_image(reference)?;
    let mut report = MetricReport { psnr: Some(psnr(&a, &b)?), ssim: Some(ssim(&a, &b)?), ..Default::default() };
    if let Some((mp, mr)) = masks {
        let (p, r) = (load_mask(mp)?, load_mask(mr)?);
        report.mask_accuracy = Some(mask_accuracy(&p, &r)?);
        report.mask_iou = Some(mask_iou(&p, &r)?);
    }
    println!("{}", report.to_json_line());
    Ok(())
}
