//! Acceptance checks. One line per criterion; exits non-zero if any fails.
//!
//! Extra arguments act as substring filters on criterion names, e.g.
//! `cargo test -p texadiff-cli --test acceptance -- freeze`.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texadiff::degrade::{build_dataset, DegradeConfig, SceneDistribution, SceneTuple};
use texadiff::diffusion::{
    cross_normalize_graph, ddpm_step, decode_latent, denoise_forward, make_schedule, sample, sft_inject, tadl_loss,
    tadl_loss_graph, mask_tensor, mse, AnalyticGaussian, ConditionSet, DenoiserModel, ModelConfig, NoiseSchedule,
    Parity, SftLayer, StepKind, TaSamplerConfig, TrainConfig, TrainExample,
};
use texadiff::imagecore::{to_grayscale, Image};
use texadiff::metrics::{mask_iou, psnr};
use texadiff::nn::{grad_check, Graph, Init, ParameterSet, Tensor};
use texadiff::predictor::{
    binarize_prediction, predict_rtdm, rtdm_accuracy, train_predictor, PredictorConfig, PredictorExample,
    PredictorModel, PredictorTrainConfig,
};
use texadiff::rtdm::{binarize, cct_map, downsample_pool, mask_from_map, postprocess, BinaryMask, Resolution, RtdmConfig, TextureMap};

type Check = fn() -> Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: Check,
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

const CRITERIA: &[Criterion] = &[
    Criterion { name: "loss_identities", budget: secs(1), run: loss_identities },
    Criterion { name: "cct_matches_naive_oracle", budget: secs(5), run: cct_matches_naive_oracle },
    Criterion { name: "mask_pipeline_properties", budget: secs(5), run: mask_pipeline_properties },
    Criterion { name: "freeze_contract", budget: secs(10), run: freeze_contract },
    Criterion { name: "gradient_verification", budget: secs(30), run: gradient_verification },
    Criterion { name: "analytic_sampler_statistics", budget: secs(10), run: analytic_sampler_statistics },
    Criterion { name: "rtdm_tracks_texture", budget: secs(60), run: rtdm_tracks_texture },
    Criterion { name: "zeros_mask_psnr_not_below_ones", budget: secs(30 * 60), run: zeros_mask_psnr_not_below_ones },
    Criterion { name: "predictor_beats_majority_class", budget: secs(15 * 60), run: predictor_beats_majority_class },
    Criterion { name: "cli_end_to_end_determinism", budget: secs(120), run: cli_end_to_end_determinism },
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = (c.run)();
        let took = t0.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:<34} {:>8.2}s / {:>5}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn loss_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let shape = [1 + i % 3, 1, 8, 8];
        let eps = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
        let pred = Tensor::<f32>::randn(&shape, 1.0 + i as f64 * 0.1, &mut rng);
        let base = mse(&eps, &pred).map_err(e2s)?;
        for alpha in [0.0, 0.5, 1.0] {
            let zeros = Tensor::<f32>::zeros(&shape);
            let ones = Tensor::<f32>::full(&shape, 1.0);
            let dz = (tadl_loss(&eps, &pred, &zeros, alpha).map_err(e2s)? - base).abs();
            let d1 = (tadl_loss(&eps, &pred, &ones, alpha).map_err(e2s)? - (1.0 + alpha) * base).abs();
            worst = worst.max(dz).max(d1);
        }
    }
    ensure(worst <= 1e-7, || format!("max deviation {worst:e} > 1e-7"))?;
    Ok(format!("60 cases, max deviation {worst:e}"))
}

/// Per-pixel windowed statistics with two-pass variances and mirrored borders.
fn naive_cct(a: &Image<f64>, b: &Image<f64>, window: usize, sigma: f64, c2: f64) -> Vec<f64> {
    let (h, w) = a.dims();
    let r = (window / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - 1 - i };
        }
        i as usize
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let taps: Vec<(f64, f64, f64)> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| {
                    let wt = k[(dy + r) as usize] * k[(dx + r) as usize] / (ks * ks);
                    let (sy, sx) = (mirror(y + dy, h), mirror(x + dx, w));
                    (wt, a.get(sy, sx, 0), b.get(sy, sx, 0))
                })
                .collect();
            let ma: f64 = taps.iter().map(|t| t.0 * t.1).sum();
            let mb: f64 = taps.iter().map(|t| t.0 * t.2).sum();
            let va: f64 = taps.iter().map(|t| t.0 * (t.1 - ma).powi(2)).sum();
            let vb: f64 = taps.iter().map(|t| t.0 * (t.2 - mb).powi(2)).sum();
            let v = (2.0 * va.sqrt() * vb.sqrt() + c2) / (va + vb + c2);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

fn cct_matches_naive_oracle() -> Result<String, String> {
    let cfg = RtdmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let hr = Image::<f64>::from_fn(24, 24, 1, |_, _, _| rng.gen());
        let psr = if i % 2 == 0 {
            Image::<f64>::from_fn(24, 24, 1, |_, _, _| rng.gen())
        } else {
            let jitter: Vec<f64> = (0..576).map(|_| rng.gen_range(-0.1..0.1)).collect();
            Image::from_fn(24, 24, 1, |y, x, _| (0.5 * hr.get(y, x, 0) + 0.25 + jitter[y * 24 + x]).clamp(0.0, 1.0))
        };
        let got = cct_map(&psr, &hr, &cfg).map_err(e2s)?;
        let want = naive_cct(&psr, &hr, cfg.window, cfg.sigma, cfg.c2);
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e} > 1e-6"))?;
    Ok(format!("10 pairs, max deviation {worst:e}"))
}

/// Blocky random mask with pixel noise, so opening keeps something.
fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let cell = [2usize, 4, 8][rng.gen_range(0..3)];
    let density = rng.gen_range(0.1..0.9);
    let cells: Vec<bool> = (0..(h / cell + 1) * (w / cell + 1)).map(|_| rng.gen_bool(density)).collect();
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let v = cells[(y / cell) * (w / cell + 1) + x / cell];
            (v ^ rng.gen_bool(0.05)) as u8
        })
        .collect();
    BinaryMask::new(h, w, data, Resolution::Pixel).unwrap()
}

fn mask_pipeline_properties() -> Result<String, String> {
    let cfg = RtdmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let taus = [0.0, 0.35, 0.40, 1.0];

    let scenes = build_dataset::<f64>(4, &SceneDistribution::with_size(64), &DegradeConfig::default(), &cfg, 8)
        .map_err(e2s)?;
    let mut maps: Vec<TextureMap<f64>> = scenes.into_iter().map(|s| s.map).collect();
    for _ in 0..4 {
        let d: Vec<f64> = (0..64 * 64).map(|_| rng.gen()).collect();
        maps.push(TextureMap::new(64, 64, d).map_err(e2s)?);
    }
    for (mi, m) in maps.iter().enumerate() {
        for pair in taus.windows(2) {
            let (lo, hi) = (binarize(m, pair[0]).map_err(e2s)?, binarize(m, pair[1]).map_err(e2s)?);
            ensure(lo.is_subset_of(&hi), || format!("map {mi}: binarize not monotone at {pair:?}"))?;
            let (lo, hi) = (mask_from_map(m, pair[0], &cfg).map_err(e2s)?, mask_from_map(m, pair[1], &cfg).map_err(e2s)?);
            ensure(lo.is_subset_of(&hi), || format!("map {mi}: latent mask not monotone at {pair:?}"))?;
        }
    }

    for i in 0..20 {
        let (h, w) = (8 * rng.gen_range(2..7), 8 * rng.gen_range(2..7));
        let m = random_mask(&mut rng, h, w);
        let pooled = downsample_pool(&m, 8).map_err(e2s)?;
        for oy in 0..h / 8 {
            for ox in 0..w / 8 {
                let any = (0..8).any(|dy| (0..8).any(|dx| m.get(oy * 8 + dy, ox * 8 + dx) == 1));
                ensure(pooled.get(oy, ox) == any as u8, || format!("mask {i}: pool mismatch at ({oy}, {ox})"))?;
            }
        }
        let once = postprocess(&m, &cfg).map_err(e2s)?;
        let twice = postprocess(&once, &cfg).map_err(e2s)?;
        ensure(once == twice, || format!("mask {i}: postprocess not idempotent"))?;
    }
    Ok(format!("{} maps x {} thresholds; 20 masks pooled and post-processed", maps.len(), taus.len()))
}

/// Untrained denoiser with its zero-initialized heads perturbed, so the
/// mask actually reaches the output.
fn active_model(seed: u64) -> Result<DenoiserModel<f32>, String> {
    let mut m = DenoiserModel::<f32>::new(ModelConfig::default(), seed).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in m.params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            let noise = Tensor::<f32>::randn(&[t.numel()], 0.1, &mut rng);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    Ok(m)
}

type Trajectory = Vec<Vec<u32>>;

/// Plain ancestral DDPM written against the step primitive only, drawing
/// noise in the same order as the sampler.
fn plain_ddpm(model: &DenoiserModel<f32>, lr: &Tensor<f32>, mask: &BinaryMask, sched: &NoiseSchedule, seed: u64) -> Result<Trajectory, String> {
    let dims = lr.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::<f32>::randn(&dims, 1.0, &mut rng);
    let mut traj = Vec::new();
    for t in (1..=sched.len()).rev() {
        let conds = ConditionSet::new(lr.clone(), z.clone(), vec![mask.clone()]);
        let eps = denoise_forward(model, &conds, t).map_err(e2s)?;
        let noise = Tensor::<f32>::randn(&dims, 1.0, &mut rng);
        z = ddpm_step(&z, &eps, t, sched, &noise).map_err(e2s)?;
        traj.push(z.data().iter().map(|v| v.to_bits()).collect());
    }
    Ok(traj)
}

fn run_sampler(
    model: &DenoiserModel<f32>,
    lr: &Tensor<f32>,
    mask: &BinaryMask,
    sched: &NoiseSchedule,
    ta: &TaSamplerConfig,
    seed: u64,
) -> Result<(Trajectory, Vec<(usize, StepKind, bool)>), String> {
    let mut traj = Vec::new();
    let mut steps = Vec::new();
    sample(model, lr, std::slice::from_ref(mask), sched, ta, seed, &mut |ev| {
        traj.push(ev.after.data().iter().map(|v| v.to_bits()).collect());
        let m = ev.mask.data();
        let frozen = (0..m.len()).all(|i| m[i] != 0.0 || ev.before.data()[i].to_bits() == ev.after.data()[i].to_bits());
        steps.push((ev.t, ev.kind, frozen));
    })
    .map_err(e2s)?;
    Ok((traj, steps))
}

fn freeze_contract() -> Result<String, String> {
    let sched = make_schedule(200, 1e-4, 0.02).map_err(e2s)?;
    let model = active_model(4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let lr = Tensor::<f32>::from_fn(&[1, 1, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let zeros = BinaryMask::zeros(16, 16, Resolution::Latent);
    let ones = BinaryMask::ones(16, 16, Resolution::Latent);
    let (t_lo, t_hi) = (40, 120);
    let seed = 99;
    let mut report = Vec::new();
    let mut zero_even = Trajectory::new();
    for parity in [Parity::Even, Parity::Odd] {
        let ta = TaSamplerConfig { t_lo, t_hi, parity, enabled: true };
        let (traj, steps) = run_sampler(&model, &lr, &zeros, &sched, &ta, seed)?;
        if parity == Parity::Even {
            zero_even = traj;
        }
        let mut selective = 0;
        for &(t, kind, frozen) in &steps {
            let inside = (t_lo..=t_hi).contains(&t);
            let want = inside && ((t_hi - t) % 2 == 0) == (parity == Parity::Even);
            ensure((kind == StepKind::Selective) == want, || format!("{parity:?}: step {t} has kind {kind:?}"))?;
            if want {
                selective += 1;
                ensure(frozen, || format!("{parity:?}: sparse latents moved at selective step {t}"))?;
            } else {
                ensure(!frozen, || format!("{parity:?}: latents did not move at global step {t}"))?;
            }
        }
        report.push(format!("{parity:?} {selective} frozen steps"));
    }

    let ta = TaSamplerConfig { t_lo, t_hi, parity: Parity::Even, enabled: true };
    let off = TaSamplerConfig { enabled: false, ..ta };
    let oracle_ones = plain_ddpm(&model, &lr, &ones, &sched, seed)?;
    let (with_ones, _) = run_sampler(&model, &lr, &ones, &sched, &ta, seed)?;
    ensure(with_ones == oracle_ones, || "all-ones trajectory differs from plain DDPM".into())?;
    let (ones_off, _) = run_sampler(&model, &lr, &ones, &sched, &off, seed)?;
    ensure(ones_off == oracle_ones, || "ta-disabled all-ones trajectory differs from plain DDPM".into())?;
    let (zeros_off, _) = run_sampler(&model, &lr, &zeros, &sched, &off, seed)?;
    ensure(zeros_off == plain_ddpm(&model, &lr, &zeros, &sched, seed)?, || {
        "ta-disabled all-zeros trajectory differs from plain DDPM".into()
    })?;
    ensure(zero_even != zeros_off, || "the window had no effect on the all-zeros run".into())?;
    report.push("ones and ta-off bit-identical to plain DDPM".into());
    Ok(report.join("; "))
}

fn perturbed(ps: &mut ParameterSet<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for (_, t) in ps.iter_mut() {
        let n = Tensor::<f64>::randn(&[t.numel()], std, rng);
        t.data_mut().iter_mut().zip(n.data()).for_each(|(a, b)| *a += b);
    }
}

fn squared_error(g: &mut Graph<f64>, y: texadiff::nn::Var, target: &Tensor<f64>) -> Result<texadiff::nn::Var, texadiff::Error> {
    let t = g.constant(target.clone());
    let d = g.sub(y, t)?;
    let s = g.square(d);
    Ok(g.mean(s))
}

fn gradient_verification() -> Result<String, String> {
    let mut worst = [0.0f64; 5];
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);

        let mut ps = ParameterSet::<f64>::new();
        ps.insert("x", Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng));
        ps.insert("w", Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng));
        ps.insert("b", Tensor::randn(&[4], 0.5, &mut rng));
        let stride = 1 + seed as usize % 2;
        let target = Tensor::<f64>::randn(&[2, 4, 6 / stride, 6 / stride], 1.0, &mut rng);
        let e = grad_check(
            |g, ps| {
                let (x, w, b) = (g.param(ps, "x")?, g.param(ps, "w")?, g.param(ps, "b")?);
                let y = g.conv2d(x, w, Some(b), stride, 1)?;
                squared_error(g, y, &target)
            },
            &mut ps,
            1e-6,
            64,
        )
        .map_err(e2s)?;
        worst[0] = worst[0].max(e);

        let mut ps = ParameterSet::<f64>::new();
        ps.insert("x", Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng));
        ps.insert("gamma", Tensor::randn(&[4], 1.0, &mut rng));
        ps.insert("beta", Tensor::randn(&[4], 1.0, &mut rng));
        let target = Tensor::<f64>::randn(&[2, 4, 5, 5], 1.0, &mut rng);
        let e = grad_check(
            |g, ps| {
                let (x, ga, be) = (g.param(ps, "x")?, g.param(ps, "gamma")?, g.param(ps, "beta")?);
                let y = g.group_norm(x, ga, be, 2)?;
                squared_error(g, y, &target)
            },
            &mut ps,
            1e-6,
            64,
        )
        .map_err(e2s)?;
        worst[1] = worst[1].max(e);

        let mut ps = ParameterSet::<f64>::new();
        let layer = SftLayer::new(&mut Init { params: &mut ps, rng: &mut rng }, "sft", 2, 3);
        perturbed(&mut ps, &mut rng, 0.3);
        ps.insert("feat", Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        ps.insert("main", Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng));
        let cond = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let target = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let e = grad_check(
            |g, ps| {
                let (f, c) = (g.param(ps, "feat")?, g.constant(cond.clone()));
                let y = sft_inject(g, ps, &layer, f, c)?;
                squared_error(g, y, &target)
            },
            &mut ps.clone(),
            1e-6,
            32,
        )
        .map_err(e2s)?;
        worst[2] = worst[2].max(e);
        let e = grad_check(
            |g, ps| {
                let (f, m) = (g.param(ps, "feat")?, g.param(ps, "main")?);
                let y = cross_normalize_graph(g, f, m)?;
                squared_error(g, y, &target)
            },
            &mut ps,
            1e-6,
            32,
        )
        .map_err(e2s)?;
        worst[3] = worst[3].max(e);

        let cfg = ModelConfig { width: 8, time_dim: 8, control_width: 4, groups: 2, control_groups: 2 };
        let mut model = DenoiserModel::<f64>::new(cfg, seed).map_err(e2s)?;
        perturbed(&mut model.params, &mut rng, 0.05);
        let lr = Tensor::<f64>::randn(&[2, 1, 8, 8], 0.5, &mut rng);
        let zt = Tensor::<f64>::randn(&[2, 1, 8, 8], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 1, 8, 8], 1.0, &mut rng);
        let masks: Vec<BinaryMask> = (0..2)
            .map(|_| BinaryMask::new(8, 8, (0..64).map(|_| rng.gen_bool(0.5) as u8).collect(), Resolution::Latent).unwrap())
            .collect();
        let mask_t = mask_tensor::<f64>(&masks, 2).map_err(e2s)?;
        let conds = ConditionSet::new(lr, zt, masks);
        let t = 1 + rng.gen_range(0..1000);
        let mut theta = model.params.clone();
        let e = grad_check(
            |g, ps| {
                let fw = model.forward_graph(g, ps, &conds, &[t], true)?;
                let ev = g.constant(eps.clone());
                tadl_loss_graph(g, ev, fw.eps, &mask_t, 1.0)
            },
            &mut theta,
            3e-4,
            4,
        )
        .map_err(e2s)?;
        worst[4] = worst[4].max(e);
    }
    let names = ["conv2d", "group_norm", "sft_inject", "cross_normalize", "tadl pipeline"];
    let detail = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst.iter().all(|&w| w <= 1e-3), || format!("relative error above 1e-3: {detail}"))?;
    Ok(format!("5 seeds; {detail}"))
}

fn analytic_sampler_statistics() -> Result<String, String> {
    let (mu0, var0) = (0.2, 0.04);
    let sched = make_schedule(1000, 1e-4, 0.02).map_err(e2s)?;
    let model = AnalyticGaussian { sched: sched.clone(), mu0, var0 };
    let lr = Tensor::<f64>::zeros(&[1, 1, 16, 32]);
    let mask = BinaryMask::zeros(16, 32, Resolution::Latent);
    let z = sample(&model, &lr, &[mask], &sched, &TaSamplerConfig::disabled(), 2024, &mut |_| {}).map_err(e2s)?;
    let n = z.numel() as f64;
    let mean = z.data().iter().sum::<f64>() / n;
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var0 / n).sqrt();
    let se_var = var0 * (2.0 / (n - 1.0)).sqrt();
    let (zm, zv) = ((mean - mu0) / se_mean, (var - var0) / se_var);
    let detail = format!("n {n}, mean {mean:.4} ({zm:+.2} SE), var {var:.5} ({zv:+.2} SE)");
    ensure(zm.abs() <= 3.0 && zv.abs() <= 3.0, || detail.clone())?;
    Ok(detail)
}

fn rtdm_tracks_texture() -> Result<String, String> {
    let cfg = RtdmConfig::default();
    let scenes = build_dataset::<f32>(50, &SceneDistribution::default(), &DegradeConfig::default(), &cfg, 777)
        .map_err(e2s)?;
    let mut iou_sum = 0.0;
    for s in &scenes {
        let up = s.mask.upsample_nearest(cfg.pool_factor);
        iou_sum += mask_iou(&up, &s.region_mask).map_err(e2s)?;
        let (mut rich, mut nr, mut sparse, mut ns) = (0.0, 0usize, 0.0, 0usize);
        for (&m, &r) in s.map.data().iter().zip(s.region_mask.data()) {
            if r == 1 {
                rich += m as f64;
                nr += 1;
            } else {
                sparse += m as f64;
                ns += 1;
            }
        }
        let (rich, sparse) = (rich / nr as f64, sparse / ns as f64);
        ensure(rich < sparse, || format!("scene {}: mean M rich {rich:.3} >= sparse {sparse:.3}", s.index))?;
    }
    let iou = iou_sum / scenes.len() as f64;
    ensure(iou >= 0.5, || format!("mean IoU {iou:.3} < 0.5"))?;
    Ok(format!("50 scenes, mean IoU {iou:.3}, rich < sparse on all"))
}

fn majority(passes: &[bool]) -> bool {
    2 * passes.iter().filter(|&&p| p).count() > passes.len()
}

const TRAIN_SCENES: usize = 30;
const HELD_OUT: usize = 10;

fn scenes_for(seed: u64) -> Result<Vec<SceneTuple<f32>>, String> {
    build_dataset::<f32>(TRAIN_SCENES + HELD_OUT, &SceneDistribution::default(), &DegradeConfig::default(), &RtdmConfig::default(), 10_000 + seed)
        .map_err(e2s)
}

fn zeros_mask_psnr_not_below_ones() -> Result<String, String> {
    let sched = make_schedule(1000, 1e-4, 0.02).map_err(e2s)?;
    let mut passes = Vec::new();
    let mut detail = Vec::new();
    for seed in 1..=3u64 {
        let scenes = scenes_for(seed)?;
        let data = scenes
            .iter()
            .map(|s| TrainExample::from_images(&s.hr, &s.lr, s.mask.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(e2s)?;
        let mut model = DenoiserModel::<f32>::new(ModelConfig::default(), seed).map_err(e2s)?;
        let tcfg = TrainConfig { steps: 2000, batch_size: 8, seed, ..Default::default() };
        texadiff::diffusion::train(&mut model, &data[..TRAIN_SCENES], &sched, &tcfg).map_err(e2s)?;

        let held = &scenes[TRAIN_SCENES..];
        let lr = Tensor::stack(&data[TRAIN_SCENES..].iter().map(|d| d.lr_cond.clone()).collect::<Vec<_>>()).map_err(e2s)?;
        let (lh, lw) = held[0].mask.dims();
        let mean_psnr = |mask: BinaryMask| -> Result<f64, String> {
            let masks = vec![mask; HELD_OUT];
            let z = sample(&model, &lr, &masks, &sched, &TaSamplerConfig::default(), 50 + seed, &mut |_| {}).map_err(e2s)?;
            let mut acc = 0.0;
            for (i, s) in held.iter().enumerate() {
                acc += psnr(&decode_latent(&z, i).map_err(e2s)?, &to_grayscale(&s.hr)).map_err(e2s)?;
            }
            Ok(acc / HELD_OUT as f64)
        };
        let zeros = mean_psnr(BinaryMask::zeros(lh, lw, Resolution::Latent))?;
        let ones = mean_psnr(BinaryMask::ones(lh, lw, Resolution::Latent))?;
        passes.push(zeros >= ones);
        detail.push(format!("seed {seed}: zeros {zeros:.2} dB vs ones {ones:.2} dB"));
    }
    let d = detail.join("; ");
    ensure(majority(&passes), || d.clone())?;
    Ok(d)
}

fn predictor_beats_majority_class() -> Result<String, String> {
    let tau = 0.40;
    let cfg = RtdmConfig::default();
    let mut passes = Vec::new();
    let mut detail = Vec::new();
    for seed in 1..=3u64 {
        let scenes = scenes_for(100 + seed)?;
        let examples: Vec<PredictorExample<f32>> = scenes[..TRAIN_SCENES]
            .iter()
            .map(|s| PredictorExample { lr: s.lr.clone(), psr: s.psr.clone(), target: s.map.clone() })
            .collect();
        let mut model = PredictorModel::<f32>::new(PredictorConfig::default(), seed).map_err(e2s)?;
        train_predictor(&mut model, &examples, &PredictorTrainConfig { seed, ..Default::default() }).map_err(e2s)?;

        let (mut acc, mut ones, mut total) = (0.0, 0usize, 0usize);
        for s in &scenes[TRAIN_SCENES..] {
            let oracle = mask_from_map(&s.map, tau, &cfg).map_err(e2s)?;
            let pred = binarize_prediction(&predict_rtdm(&model, &s.lr, &s.psr).map_err(e2s)?, tau, &cfg).map_err(e2s)?;
            acc += rtdm_accuracy(&pred, &oracle).map_err(e2s)? / HELD_OUT as f64;
            ones += oracle.count_ones();
            total += oracle.data().len();
        }
        let frac = ones as f64 / total as f64;
        let baseline = 100.0 * frac.max(1.0 - frac);
        passes.push(acc >= baseline + 5.0);
        detail.push(format!("seed {seed}: {acc:.1}% vs majority {baseline:.1}%"));
    }
    let d = detail.join("; ");
    ensure(majority(&passes), || d.clone())?;
    Ok(d)
}

const DETERMINISM_CONFIG: &str = "seed = 17

[degrade]
n_scenes = 3
scene_size = 64

[train]
steps = 10
batch_size = 2
holdout = 1

[train.schedule]
steps = 100

[sample]
t_lo = 20
t_hi = 60
";

fn texadiff(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_texadiff")).args(args).current_dir(cwd).output().map_err(e2s)?;
    if !out.status.success() {
        return Err(format!("texadiff {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn tnsr_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "tnsr") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn cli_end_to_end_determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), DETERMINISM_CONFIG).map_err(e2s)?;
    for run in ["a", "b"] {
        texadiff(&["dataset", "--config", "run.toml", "--out", &format!("ds_{run}")], dir)?;
        texadiff(&["train", "--config", "run.toml", "--dataset", &format!("ds_{run}"), "--out", &format!("ck_{run}.tnsr")], dir)?;
        texadiff(
            &[
                "sample", "--config", "run.toml", "--ckpt", &format!("ck_{run}.tnsr"),
                "--lr", &format!("ds_{run}/scene_0002/lr.png"), "--hr", &format!("ds_{run}/scene_0002/hr.png"),
                "--mask", "oracle", "--ta", "on", "--window", "20:60", "--seed", "5", "--out", &format!("sr_{run}.png"),
            ],
            dir,
        )?;
    }
    let (a, b) = (tnsr_files(&dir.join("ds_a")), tnsr_files(&dir.join("ds_b")));
    ensure(a.len() == 9 && a.len() == b.len(), || format!("expected 9 dataset tensors per run, got {} and {}", a.len(), b.len()))?;
    let mut pairs: Vec<(std::path::PathBuf, std::path::PathBuf)> = a.into_iter().zip(b).collect();
    for f in ["ck_{}.tnsr", "sr_{}.tnsr", "sr_{}_mask.tnsr"] {
        pairs.push((dir.join(f.replace("{}", "a")), dir.join(f.replace("{}", "b"))));
    }
    pairs.push((dir.join("ds_a/manifest.json"), dir.join("ds_b/manifest.json")));
    for (x, y) in &pairs {
        let (bx, by) = (std::fs::read(x).map_err(e2s)?, std::fs::read(y).map_err(e2s)?);
        ensure(bx == by, || format!("{} and {} differ", x.display(), y.display()))?;
    }
    Ok(format!("{} output pairs byte-identical", pairs.len()))
}
