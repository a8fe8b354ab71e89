//! Acceptance checks. Runs with a custom harness and prints one PASS/FAIL
//! line per criterion; exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use promptseg::config::{ModelConfig, PromptBranchConfig, RunConfig};
use promptseg::datamodel::synthetic::{generate, Imbalance, SyntheticSpec};
use promptseg::datamodel::{CaseDescriptor, CaseRecord, DatasetIndex, ModalityRegistry, SampleInstance};
use promptseg::embed_provider::ProviderConfig;
use promptseg::exec::Execution;
use promptseg::inference::{evaluate_cases, predict_boxes};
use promptseg::losses::{self, LossConfig, LossTerms, LossWeights};
use promptseg::mask_decoder::MaskDecoder;
use promptseg::metrics::{aggregate, dsc, nsd, wilcoxon_signed_rank, ScoreTable};
use promptseg::model::SegModel;
use promptseg::sampling::{Sampler, SamplerConfig, Strategy};
use promptseg::trainer::{lr_at, TrainConfig, TrainData, Trainer};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn within_budget(t: Instant, budget: Duration) -> Check {
    let el = t.elapsed();
    ensure!(el <= budget, "took {:.1}s, budget {:.0}s", el.as_secs_f64(), budget.as_secs_f64());
    Ok(format!("{:.1}s", el.as_secs_f64()))
}

fn cpu() -> Device {
    Device::Cpu
}

fn scalar(t: &Tensor) -> Result<f64, String> {
    t.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).map_err(e)
}

fn t64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &cpu()).unwrap()
}

// ---------------------------------------------------------------- losses

fn oracle_bce(p: &[f64], t: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        let p = p.clamp(losses::PROB_EPS, 1.0 - losses::PROB_EPS);
        acc += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    -acc / p.len() as f64
}

fn oracle_dice(p: &[f64], t: &[f64]) -> f64 {
    let (mut inter, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for (&p, &t) in p.iter().zip(t) {
        let p = p.clamp(losses::PROB_EPS, 1.0 - losses::PROB_EPS);
        inter += p * t;
        pp += p * p;
        tt += t * t;
    }
    1.0 - (2.0 * inter + losses::DICE_SMOOTH) / (pp + tt + losses::DICE_SMOOTH)
}

fn loss_oracles() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_bce, mut worst_dice) = (0f64, 0f64);
    for _ in 0..200 {
        let p: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..64).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        let (pt, tt) = (t64(&p, &[1, 8, 8]), t64(&t, &[1, 8, 8]));
        let b = scalar(&losses::bce_loss(&pt, &tt).map_err(e)?)?;
        let d = scalar(&losses::dice_loss(&pt, &tt).map_err(e)?)?;
        worst_bce = worst_bce.max((b - oracle_bce(&p, &t)).abs());
        worst_dice = worst_dice.max((d - oracle_dice(&p, &t)).abs());
    }
    ensure!(worst_bce < 1e-7, "bce off by {worst_bce:e}");
    ensure!(worst_dice < 1e-7, "dice off by {worst_dice:e}");

    let close = |got: f64, want: f64, what: &str| -> Result<(), String> {
        ensure!((got - want).abs() < 1e-6, "{what}: got {got}, want {want}");
        Ok(())
    };
    let iou = |p: &[f64], t: &[f64]| scalar(&losses::iou_loss(&t64(p, &[p.len()]), &t64(t, &[t.len()])).unwrap());
    close(iou(&[0.5, 0.0], &[1.0, 0.0])?, 0.125, "iou pairs")?;
    close(iou(&[0.2], &[0.6])?, 0.16, "iou single")?;

    let uniform = t64(&[0.0; 11], &[1, 11]);
    close(scalar(&losses::modality_cls_loss(&uniform, &[4]).map_err(e)?)?, 11f64.ln(), "mcls uniform")?;
    // log((1 - 1e-7) / (1e-7 / 10)) puts 1 - 1e-7 of the mass on the true class.
    let peak = ((1.0 - 1e-7) / 1e-8f64).ln();
    let mut logits = vec![0.0; 11];
    logits[2] = peak;
    close(scalar(&losses::modality_cls_loss(&t64(&logits, &[1, 11]), &[2]).map_err(e)?)?, 0.0, "mcls peaked")?;

    let eye = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    close(
        scalar(&losses::contrastive_loss(&eye, &eye, 1.0).map_err(e)?)?,
        (1.0 + (-1f64).exp()).ln(),
        "contrastive identity",
    )?;
    let one = t64(&[0.6, 0.8], &[1, 2]);
    close(scalar(&losses::contrastive_loss(&one, &one, 1.0).map_err(e)?)?, 0.0, "contrastive B=1")?;

    let half = t64(&[0.5], &[]);
    let unit = t64(&[1.0], &[]);
    let terms = LossTerms {
        bce: half.clone(),
        dice: half,
        iou: unit.clone(),
        mcls: Some(unit.clone()),
        contrastive: Some(unit),
    };
    let (total, _) = losses::total_loss(&terms, &LossWeights::default()).map_err(e)?;
    close(scalar(&total)?, 2.02, "total loss")?;

    let time = within_budget(t0, Duration::from_secs(10))?;
    Ok(format!("bce max err {worst_bce:.1e}, dice max err {worst_dice:.1e}, {time}"))
}

// ------------------------------------------------------------- gradients

/// Largest relative error between the analytic gradient of `f` at `x` and
/// central differences, over every element.
fn fd_check(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> Result<f64, String> {
    let var = Var::from_tensor(&t64(x, shape)).map_err(e)?;
    let grads = f(var.as_tensor()).backward().map_err(e)?;
    let g = grads
        .get(var.as_tensor())
        .ok_or("no gradient")?
        .flatten_all()
        .and_then(|t| t.to_vec1::<f64>())
        .map_err(e)?;
    let h = 1e-6;
    let mut worst = 0f64;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let num = (scalar(&f(&t64(&xp, shape)))? - scalar(&f(&t64(&xm, shape)))?) / (2.0 * h);
        let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn end_to_end_fd() -> Result<(usize, f64), String> {
    let cfg = ModelConfig::micro();
    let (registry, cases) = generate(&SyntheticSpec {
        modalities: vec!["CT".into(), "MR".into(), "Dermoscopy".into()],
        cases_per_modality: 1,
        ..Default::default()
    })
    .map_err(e)?;
    let model = SegModel::new(cfg.clone(), registry, ProviderConfig::default(), DType::F64).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<SampleInstance> = cases
        .iter()
        .map(|c| SampleInstance::from_case(c, 0, 1, cfg.img_size, 0, &mut rng))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let batch = model.prepare_batch(Execution::Sequential, &samples).map_err(e)?;
    let loss_cfg = LossConfig::default();
    let loss = || -> Result<Tensor, String> {
        let out = model.forward(&batch).map_err(e)?;
        let terms = model.loss_terms(&out, &batch, &loss_cfg).map_err(e)?;
        Ok(losses::total_loss(&terms, &loss_cfg.weights()).map_err(e)?.0)
    };
    let grads = loss()?.backward().map_err(e)?;
    let vars = model.trainable_vars();
    // Candidates with a gradient large enough for a meaningful ratio.
    let mut candidates = Vec::new();
    for (vi, (_, v)) in vars.iter().enumerate() {
        let Some(g) = grads.get(v.as_tensor()) else { continue };
        let g = g.flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(e)?;
        candidates.extend(g.iter().enumerate().filter(|(_, x)| x.abs() > 1e-6).map(|(i, x)| (vi, i, *x)));
    }
    ensure!(candidates.len() >= 20, "only {} parameters with gradient", candidates.len());
    let picks: Vec<_> = (0..24).map(|_| candidates[rng.random_range(0..candidates.len())]).collect();
    let h = 1e-5;
    let mut worst = 0f64;
    for (vi, i, analytic) in picks.iter().copied() {
        let var = &vars[vi].1;
        let orig = var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f64>()).map_err(e)?;
        let shape = var.as_tensor().dims().to_vec();
        let at = |delta: f64| -> Result<f64, String> {
            let mut v = orig.clone();
            v[i] += delta;
            var.set(&t64(&v, &shape)).map_err(e)?;
            scalar(&loss()?)
        };
        let num = (at(h)? - at(-h)?) / (2.0 * h);
        at(0.0)?;
        let rel = (num - analytic).abs() / num.abs().max(analytic.abs());
        worst = worst.max(rel);
    }
    Ok((picks.len(), worst))
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut uni = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let mask: Vec<f64> = uni(72, 0.0, 1.0).iter().map(|v| v.round()).collect();
    let mask_t = t64(&mask, &[2, 6, 6]);
    let probs = uni(72, 0.05, 0.95);
    let mut report = Vec::new();
    let bce = fd_check(&probs, &[2, 6, 6], |p| losses::bce_loss(p, &mask_t).unwrap())?;
    let dice = fd_check(&probs, &[2, 6, 6], |p| losses::dice_loss(p, &mask_t).unwrap())?;
    let iou_t = t64(&uni(5, 0.0, 1.0), &[5]);
    let iou = fd_check(&uni(5, 0.0, 1.0), &[5], |p| losses::iou_loss(p, &iou_t).unwrap())?;
    let mcls = fd_check(&uni(4 * 11, -2.0, 2.0), &[4, 11], |l| {
        losses::modality_cls_loss(l, &[0, 3, 10, 3]).unwrap()
    })?;
    let other = losses::l2_normalize(&t64(&uni(4 * 8, -1.0, 1.0), &[4, 8])).unwrap();
    let con = fd_check(&uni(4 * 8, -1.0, 1.0), &[4, 8], |x| {
        losses::contrastive_loss(&losses::l2_normalize(x).unwrap(), &other, 1.0).unwrap()
    })?;
    for (name, v) in [("bce", bce), ("dice", dice), ("iou", iou), ("mcls", mcls), ("contrastive", con)] {
        ensure!(v < 1e-5, "{name} gradient rel. err {v:e}");
        report.push(format!("{name} {v:.0e}"));
    }
    let (n, worst) = end_to_end_fd()?;
    ensure!(worst < 1e-3, "end-to-end rel. err {worst:e} over {n} parameters");
    let time = within_budget(t0, Duration::from_secs(120))?;
    Ok(format!("{}; end-to-end {n} params max {worst:.1e}; {time}", report.join(", ")))
}

// --------------------------------------------------------------- sampler

fn challenge_index() -> Result<DatasetIndex, String> {
    let (registry, cases) = generate(&SyntheticSpec {
        imbalance: Imbalance::Challenge,
        ..Default::default()
    })
    .map_err(e)?;
    DatasetIndex::from_descriptors(registry, cases.iter().map(|c| CaseDescriptor::from_case(c, None))).map_err(e)
}

fn sampler_suite() -> Check {
    let t0 = Instant::now();
    let index = challenge_index()?;
    let n = index.num_modalities();
    ensure!(n == 11, "{n} modalities");
    let draws = 110_000;
    let count = |strategy: Strategy| -> Result<Vec<usize>, String> {
        let mut s = Sampler::new(&index, SamplerConfig { strategy, seed: 3, ..Default::default() }).map_err(e)?;
        let mut c = vec![0usize; n];
        for _ in 0..draws {
            c[s.draw().map_err(e)?.modality] += 1;
        }
        Ok(c)
    };
    let counts = count(Strategy::Modality)?;
    let expect = draws as f64 / n as f64;
    let worst = counts
        .iter()
        .map(|&c| (c as f64 / draws as f64 - 1.0 / n as f64).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 0.005, "modality frequency off by {worst:.4}");
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).map_err(e)?.cdf(chi2);
    ensure!(p > 0.01, "chi-square p = {p:.4}");

    let slices = index.slice_counts();
    let total: usize = slices.iter().sum();
    let by_slice = count(Strategy::Slice)?;
    let names = index.registry().names();
    let mut ratio = Vec::new();
    for (name, nominal) in [("CT", 0.76), ("MR", 0.13)] {
        let m = names.iter().position(|x| x == name).ok_or("missing modality")?;
        let drawn = by_slice[m] as f64 / draws as f64;
        let share = slices[m] as f64 / total as f64;
        ensure!((drawn - nominal).abs() <= 0.02, "{name} slice draws {drawn:.4} vs {nominal}");
        ensure!((drawn - share).abs() <= 0.02, "{name} slice draws {drawn:.4} vs index share {share:.4}");
        ratio.push(format!("{name} {:.1}%", drawn * 100.0));
    }

    let first = |seed| -> Result<Vec<_>, String> {
        let mut s = Sampler::new(&index, SamplerConfig { seed, ..Default::default() }).map_err(e)?;
        (0..1000).map(|_| s.draw().map_err(e)).collect()
    };
    ensure!(first(9)? == first(9)?, "same seed gave different draws");
    ensure!(first(9)? != first(10)?, "different seeds gave identical draws");
    let time = within_budget(t0, Duration::from_secs(60))?;
    Ok(format!(
        "max freq dev {worst:.4}, chi2 p {p:.3}, slice draws {}, {time}",
        ratio.join(" / ")
    ))
}

// --------------------------------------------------------------- overfit

const OVERFIT_STEPS: usize = 300;

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::toy();
    cfg.prompt = PromptBranchConfig::all();
    cfg.sampling.batch_size = 8;
    cfg.train = TrainConfig {
        lr_override: Some(2e-3),
        grad_clip: Some(1.0),
        flip_prob: 0.0,
        box_jitter: 0,
        ..Default::default()
    };
    cfg
}

fn shifted(case: &CaseRecord, dx: usize) -> Result<(Array3<f32>, Array2<bool>), String> {
    let raw = case.slice(0).map_err(e)?;
    let gt = case.label_mask(0, 1).map_err(e)?;
    let (h, w, c) = raw.dim();
    let mut img = Array3::<f32>::zeros((h, w, c));
    img.slice_mut(s![.., dx.., ..]).assign(&raw.slice(s![.., ..w - dx, ..]));
    let mut m = Array2::from_elem((h, w), false);
    m.slice_mut(s![.., dx..]).assign(&gt.slice(s![.., ..w - dx]));
    Ok((img, m))
}

fn overfit() -> (Check, Option<String>) {
    let run = || -> Result<(String, String), String> {
        let t0 = Instant::now();
        let (registry, cases) = generate(&SyntheticSpec {
            modalities: vec!["CT".into(), "MR".into(), "PET".into()],
            cases_per_modality: 6,
            ..Default::default()
        })
        .map_err(e)?;
        let data = TrainData::from_cases(registry, cases).map_err(e)?;
        let cfg = overfit_config();
        let mut trainer = Trainer::new(&cfg, &data, Execution::Parallel).map_err(e)?;
        let lr = lr_at(0, &trainer.config().train).map_err(e)?;
        let mut losses = Vec::with_capacity(OVERFIT_STEPS);
        for _ in 0..OVERFIT_STEPS {
            losses.push(trainer.step(lr).map_err(e)?.total);
        }
        let cases: Vec<&CaseRecord> = data.all_cases().collect();
        let results = evaluate_cases(&trainer.model, &cases, Execution::Parallel).map_err(e)?;
        let scores: Vec<f64> = results
            .iter()
            .map(|r| dsc(r.item.pred.view(), r.item.gt.view()))
            .collect::<Result<_, _>>()
            .map_err(e)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let correct = results
            .iter()
            .filter(|r| r.modality_pred.as_deref() == Some(r.item.modality.as_str()))
            .count();
        let (first, last) = (losses[0], losses[OVERFIT_STEPS - 1]);
        let tail = losses[OVERFIT_STEPS - 10..].iter().sum::<f64>() / 10.0;

        // Weak equivariance: shift the first slice and its box by 16 px.
        let case = cases[0];
        let base = results
            .iter()
            .find(|r| r.item.case_id == case.case_id)
            .map(|r| dsc(r.item.pred.view(), r.item.gt.view()))
            .transpose()
            .map_err(e)?
            .unwrap_or(0.0);
        let (img, gt) = shifted(case, 16)?;
        let extra = match promptseg::datamodel::tight_box(gt.view()) {
            Some((x0, y0, x1, y1)) => {
                let b = promptseg::datamodel::BoundingBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32)
                    .map_err(e)?;
                let p = predict_boxes(&trainer.model, img.view(), &[b], &case.modality.name).map_err(e)?;
                let moved = dsc(p[0].mask.view(), gt.view()).map_err(e)?;
                let change = (base - moved).abs();
                let verdict = if change < 0.05 { "within" } else { "exceeds" };
                format!("translation by 16 px: DSC {base:.3} -> {moved:.3}, change {change:.3} {verdict} the 0.05 sanity bound (not a pass/fail criterion)")
            }
            None => "translation check skipped: object left the frame".into(),
        };

        let summary = format!(
            "mean DSC {mean:.4} over {}, accuracy {correct}/{}, loss {first:.4} -> {last:.4} ({:.1}x; last-10 mean {tail:.4}), {:.0}s",
            scores.len(),
            results.len(),
            first / last,
            t0.elapsed().as_secs_f64()
        );
        ensure!(mean >= 0.95, "{summary}: DSC below 0.95");
        ensure!(correct == results.len(), "{summary}: classification below 100%");
        ensure!(first / last >= 10.0, "{summary}: loss fell less than 10x");
        ensure!(t0.elapsed() <= Duration::from_secs(15 * 60), "{summary}: over 15 min");
        Ok((summary, extra))
    };
    match run() {
        Ok((s, x)) => (Ok(s), Some(x)),
        Err(err) => (Err(err), None),
    }
}

// -------------------------------------------------------------- ablation

fn lin(i: usize, o: usize) -> usize {
    i * o + o
}

fn mlp(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| lin(w[0], w[1])).sum()
}

fn conv(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}

/// Parameters a branch combination adds on top of plain box prompting,
/// counted from the layer shapes.
fn expected_delta(b: &PromptBranchConfig, cfg: &ModelConfig) -> usize {
    let (d, c, k, g) = (cfg.embed_dim, cfg.num_modalities, cfg.clip_dim, cfg.grid());
    let mut n = 0;
    if b.use_text_clip {
        n += mlp(&[k, d, d]);
    }
    if b.use_modality_embedding {
        n += c * d;
    }
    if b.use_text_clip && b.use_modality_embedding {
        n += mlp(&[2 * d, d, d]);
    }
    if b.use_text_clip || b.use_modality_embedding {
        n += 2 * lin(d, d) + mlp(&[d, d, c]);
    }
    if b.use_image_clip {
        n += mlp(&[k, d, d]);
    }
    if b.use_cnn_encoder {
        let block = conv(d, d, 3) * 2 + conv(d, d, 1);
        n += conv(3, d, 3) + 2 * block;
        n -= d * g * g;
    }
    n
}

fn ablation() -> Check {
    let (registry, cases) = generate(&SyntheticSpec {
        modalities: vec!["CT".into(), "MR".into(), "US".into()],
        cases_per_modality: 1,
        ..Default::default()
    })
    .map_err(e)?;
    let data = TrainData::from_cases(registry, cases).map_err(e)?;
    let rows = PromptBranchConfig::ablation_rows();
    let mut counts = Vec::new();
    let mut base = None;
    for (i, row) in rows.iter().enumerate() {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::micro();
        cfg.prompt = *row;
        cfg.sampling.batch_size = 2;
        cfg.train.lr_override = Some(1e-3);
        let mut t = Trainer::new(&cfg, &data, Execution::Parallel).map_err(e)?;
        let params = t.model.num_params();
        let base = *base.get_or_insert(params);
        let got = params as i64 - base as i64;
        let want = expected_delta(row, t.model.config()) as i64 - expected_delta(&rows[0], t.model.config()) as i64;
        ensure!(got == want, "row {}: parameter delta {got}, expected {want}", i + 1);
        let l = t.step(1e-3).map_err(e)?;
        ensure!(l.total.is_finite(), "row {}: non-finite loss", i + 1);
        ensure!(
            l.mcls.is_some() == row.modality_enabled(),
            "row {}: mcls presence {}",
            i + 1,
            l.mcls.is_some()
        );
        ensure!(
            l.contrastive.is_some() == row.contrastive_enabled(),
            "row {}: contrastive presence {}",
            i + 1,
            l.contrastive.is_some()
        );
        counts.push(format!("{got:+}"));
    }
    Ok(format!("8 rows stepped; parameter deltas [{}]", counts.join(", ")))
}

// -------------------------------------------------------------- schedule

fn schedule() -> Check {
    let cfg = TrainConfig::default();
    let mut want = Vec::new();
    for (lr, n) in [(2e-4, 5), (1.8e-4, 5), (1.62e-4, 5), (1.458e-4, 5), (1.3122e-4, 4), (5e-5, 1)] {
        want.extend(std::iter::repeat_n(lr, n));
    }
    let got: Vec<f64> = (0..cfg.epochs).map(|ep| lr_at(ep, &cfg)).collect::<Result<_, _>>().map_err(e)?;
    ensure!(got == want, "schedule {got:?}");
    Ok(format!("{} epochs match exactly", got.len()))
}

// --------------------------------------------------------------- metrics

/// All-pairs boundary distance NSD.
fn brute_nsd(a: &Array2<bool>, b: &Array2<bool>, tol: f64) -> f64 {
    let (h, w) = a.dim();
    let edge = |m: &Array2<bool>| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !m[[y, x]] {
                    continue;
                }
                let bg = |yy: isize, xx: isize| {
                    yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !m[[yy as usize, xx as usize]]
                };
                let (yi, xi) = (y as isize, x as isize);
                if bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1) {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let (ea, eb) = (edge(a), edge(b));
    let near = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min) <= tol
    };
    let hits = ea.iter().filter(|p| near(p, &eb)).count() + eb.iter().filter(|p| near(p, &ea)).count();
    hits as f64 / (ea.len() + eb.len()) as f64
}

fn square(n: usize, y0: usize, x0: usize, side: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(y, x)| y >= y0 && y < y0 + side && x >= x0 && x < x0 + side)
}

fn metrics_protocol() -> Check {
    let mut table = ScoreTable::default();
    for (i, (d, n)) in [(0.9, 0.95), (0.8, 0.85), (0.7, 0.75)].iter().enumerate() {
        table.push(format!("CT_{i}"), "CT", *d, *n);
    }
    table.push("MR_0", "MR", 0.5, 0.6);
    let agg = aggregate(&table).map_err(e)?;
    // CT: mean 0.8, std sqrt(2/300); MR: 0.5. Overall over modality means.
    let ct = &agg.per_modality["CT"];
    ensure!((ct.dsc.mean - 0.8).abs() < 1e-12 && (ct.dsc.std - (0.02f64 / 3.0).sqrt()).abs() < 1e-12, "CT {ct:?}");
    let o = &agg.overall;
    ensure!((o["dsc"].mean - 0.65).abs() < 1e-12 && (o["dsc"].std - 0.15).abs() < 1e-12, "overall dsc {:?}", o["dsc"]);
    ensure!((o["nsd"].mean - 0.725).abs() < 1e-12 && (o["nsd"].std - 0.125).abs() < 1e-12, "overall nsd {:?}", o["nsd"]);

    let inner = square(40, 15, 15, 10);
    let outer = square(40, 10, 10, 20);
    let mut worst = 0f64;
    for (a, b) in [(&inner, &outer), (&inner, &square(40, 16, 17, 10)), (&outer, &square(40, 9, 12, 21))] {
        for tol in [1.0, 2.0, 3.5] {
            worst = worst.max((nsd(a.view(), b.view(), tol).map_err(e)? - brute_nsd(a, b, tol)).abs());
        }
    }
    ensure!(worst <= 1e-9, "NSD differs from brute force by {worst:e}");
    let dilated = nsd(inner.view(), outer.view(), 2.0).map_err(e)?;

    let w = wilcoxon_signed_rank(&[0.9, 0.8, 0.85, 0.7, 0.95, 0.6], &[0.8, 0.75, 0.7, 0.65, 0.9, 0.4]).map_err(e)?;
    ensure!(w.exact && (w.p_value - 0.03125).abs() < 1e-12, "wilcoxon {w:?}");
    Ok(format!(
        "overall DSC {:.3}±{:.3}; NSD brute-force max diff {worst:.0e} (dilated square {dilated:.3}); Wilcoxon p {}",
        o["dsc"].mean, o["dsc"].std, w.p_value
    ))
}

// --------------------------------------------------------------- decoder

fn decoder_structure() -> Check {
    let dev = cpu();
    let registry = ModalityRegistry::challenge();
    let full = SegModel::new(ModelConfig::default(), registry, ProviderConfig::default(), DType::F32).map_err(e)?;
    ensure!(
        full.decoder().classifier_in_dim() == Some(256),
        "classifier input width {:?}",
        full.decoder().classifier_in_dim()
    );
    let wide = Tensor::zeros((1, 512), DType::F32, &dev).map_err(e)?;
    ensure!(full.decoder().classify(&wide).is_err(), "classifier accepted a 512-wide input");

    let cfg = ModelConfig::toy();
    let (registry, cases) = generate(&SyntheticSpec {
        modalities: vec!["CT".into(), "MR".into(), "XRay".into()],
        cases_per_modality: 1,
        ..Default::default()
    })
    .map_err(e)?;
    let model = SegModel::new(cfg.clone(), registry, ProviderConfig::default(), DType::F32).map_err(e)?;
    let d = cfg.embed_dim;
    let store = model.store();
    let zeros = Tensor::zeros((d, d), DType::F32, &dev).map_err(e)?;
    store.set("mask_decoder.film_w.weight", &zeros).map_err(e)?;
    store.set("mask_decoder.film_w.bias", &Tensor::ones(d, DType::F32, &dev).map_err(e)?).map_err(e)?;
    store.set("mask_decoder.film_b.weight", &zeros).map_err(e)?;
    store.set("mask_decoder.film_b.bias", &Tensor::zeros(d, DType::F32, &dev).map_err(e)?).map_err(e)?;
    let m = Tensor::randn(0f32, 1.0, (2, d), &dev).map_err(e)?;
    let grid = Tensor::randn(0f32, 1.0, (2, d, cfg.grid(), cfg.grid()), &dev).map_err(e)?;
    let film = model.decoder().film(&m).map_err(e)?;
    let same = MaskDecoder::modulate(&grid, &film).map_err(e)?;
    let diff = scalar(&(same - &grid).and_then(|t| t.abs()).and_then(|t| t.max_all()).map_err(e)?)?;
    ensure!(diff == 0.0, "FiLM identity off by {diff:e}");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<SampleInstance> = cases
        .iter()
        .map(|c| SampleInstance::from_case(c, 0, 1, cfg.img_size, 0, &mut rng))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let batch = model.prepare_batch(Execution::Sequential, &samples).map_err(e)?;
    let out = model.forward(&batch).map_err(e)?;
    let side = 4 * cfg.grid();
    ensure!(out.decoder.mask_logits.dims() == [3, side, side], "mask logits {:?}", out.decoder.mask_logits.dims());
    let (dc, sc) = out.prompts.contrastive.as_ref().ok_or("no contrastive pair")?;
    let mut worst = 0f64;
    for f in [dc, sc] {
        let norms = f.sqr().and_then(|t| t.sum(D::Minus1)).and_then(|t| t.sqrt()).map_err(e)?;
        for n in norms.to_vec1::<f32>().map_err(e)? {
            worst = worst.max((f64::from(n) - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "contrastive row norm off by {worst:e}");
    Ok(format!("FiLM identity exact, classifier width 256, mask {side}x{side} for G={}, max norm dev {worst:.1e}", cfg.grid()))
}

fn main() {
    // Optional name filters, e.g. `cargo test --test acceptance -- overfit`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut failed = 0;
    let checks: [(&str, &dyn Fn() -> Check); 8] = [
        ("loss oracles", &loss_oracles),
        ("gradients", &gradients),
        ("sampler", &sampler_suite),
        ("overfit", &|| {
            let (r, x) = overfit();
            if let Some(x) = x {
                println!("info  {x}");
            }
            r
        }),
        ("ablation wiring", &ablation),
        ("schedule", &schedule),
        ("metrics protocol", &metrics_protocol),
        ("decoder structure", &decoder_structure),
    ];
    for (name, check) in checks {
        if !wanted(name) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS  {name:<18} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<18} {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
