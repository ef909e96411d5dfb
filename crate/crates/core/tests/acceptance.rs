//! Acceptance gate. Prints one PASS/FAIL line per criterion (indented detail
//! lines follow) and exits non-zero when any gating criterion fails.
//!
//! `UNSHADOW_ACCEPTANCE_ONLY=C1,C3` restricts the run to the listed criteria;
//! the others are reported as SKIP.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, LN_2};
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twofloat::TwoFloat;

use unshadow::augmentation::{
    bank_from_masks, illumination_levels, illumination_variants, inpaint_shadow, standard_augment, AugmentationConfig,
    MaskBank,
};
use unshadow::datasets::synthetic::{toy_triplets, ToySpec};
use unshadow::datasets::{DatasetSplit, Layout, ShadowTriplet, SplitName};
use unshadow::evaluation::{
    evaluate, evaluate_triplets, psnr, ssim, EvalConfig, GroundTruthEcho, PipelineRemover, RegionMetrics, Summary,
    PSNR_CAP,
};
use unshadow::imaging::{adjust_brightness, embed_region, extract_region, ImageTensor, ShadowMask};
use unshadow::losses::{self, LossWeights, NceBatch};
use unshadow::networks::{CriticSpec, GeneratorSpec, LayerEmbeddings, NetworkConfig, PerceptualExtractor};
use unshadow::training::{
    fit, lr_schedule, perceptual_extractor, FitOptions, Mode, RunConfig, TrainConfig, Trainer,
};

type T2 = TwoFloat;

const ORACLE_TOL: f64 = 1e-6;
const EXTRACTOR_TOL: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-3;
const SPOT_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
const AUG_DRAWS: usize = 1000;
const TOY_STEPS: u64 = 800;

struct Check {
    name: String,
    ok: bool,
    detail: String,
}

fn check(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        ok,
        detail: detail.into(),
    }
}

type Outcome = Result<Vec<Check>, String>;

// ---------------------------------------------------------------------------
// helpers

fn cpu() -> Device {
    Device::Cpu
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &cpu()).unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    losses::value(t).unwrap()
}

fn t2(x: f64) -> T2 {
    T2::from(x)
}

fn hi(x: T2) -> f64 {
    x.hi() + x.lo()
}

fn t2_sum(xs: impl IntoIterator<Item = T2>) -> T2 {
    xs.into_iter().fold(t2(0.0), |a, b| a + b)
}

fn tiny_extractor(seed: u64) -> PerceptualExtractor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PerceptualExtractor::random(0.125, &mut rng, &cpu())
        .unwrap()
        .with_dtype(DType::F64)
        .unwrap()
}

// ---------------------------------------------------------------------------
// extended-precision oracles (row-major flat buffers)

fn oracle_info_nce(q: &[f64], p: &[f64], neg: &[f64], n: usize, m: usize, d: usize, tau: f64) -> T2 {
    let dot = |a: &[f64], b: &[f64]| t2_sum(a.iter().zip(b).map(|(x, y)| t2(*x) * t2(*y)));
    let mut total = t2(0.0);
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        let pos = dot(qi, &p[i * d..(i + 1) * d]) / t2(tau);
        let mut z = pos.exp();
        for j in 0..m {
            z += (dot(qi, &neg[j * d..(j + 1) * d]) / t2(tau)).exp();
        }
        total += z.ln() - pos;
    }
    total / t2(n as f64)
}

fn oracle_masked_l1(a: &[f64], b: &[f64], mask: &[f64], c: usize) -> T2 {
    let hw = mask.len();
    let mut num = t2(0.0);
    for ch in 0..c {
        for k in 0..hw {
            num += (t2(a[ch * hw + k]) - t2(b[ch * hw + k])).abs() * t2(mask[k]);
        }
    }
    let support: f64 = mask.iter().sum();
    num / t2(support * c as f64)
}

fn oracle_mean_sq_from_one(s: &[f64]) -> T2 {
    t2_sum(s.iter().map(|v| {
        let d = t2(1.0) - t2(*v);
        d * d
    })) / t2(s.len() as f64)
}

fn oracle_mean_sq(s: &[f64]) -> T2 {
    t2_sum(s.iter().map(|v| t2(*v) * t2(*v))) / t2(s.len() as f64)
}

fn oracle_pixel(a: &[f64], b: &[f64]) -> T2 {
    t2_sum(a.iter().zip(b).map(|(x, y)| (t2(*x) - t2(*y)).abs())) / t2(a.len() as f64)
}

/// Per-pixel RGB angle, zero where either vector vanishes; `N×3×H×W` with N = 1.
fn oracle_color(p: &[f64], g: &[f64], hw: usize) -> T2 {
    let mut total = t2(0.0);
    for k in 0..hw {
        let (mut dot, mut sp, mut sg) = (t2(0.0), t2(0.0), t2(0.0));
        for c in 0..3 {
            let (a, b) = (t2(p[c * hw + k]), t2(g[c * hw + k]));
            dot += a * b;
            sp += a * a;
            sg += b * b;
        }
        if sp.hi() == 0.0 || sg.hi() == 0.0 {
            continue;
        }
        let mut cos = dot / (sp.sqrt() * sg.sqrt());
        if cos > t2(1.0) {
            cos = t2(1.0);
        }
        if cos < t2(-1.0) {
            cos = t2(-1.0);
        }
        total += cos.acos();
    }
    total / t2(hw as f64)
}

/// `C×C` Gram of one `C×H×W` feature map divided by `C·H·W`.
fn oracle_gram(f: &[f64], c: usize, hw: usize) -> Vec<T2> {
    let mut g = vec![t2(0.0); c * c];
    for i in 0..c {
        for j in 0..c {
            let s = t2_sum((0..hw).map(|k| t2(f[i * hw + k]) * t2(f[j * hw + k])));
            g[i * c + j] = s / t2((c * hw) as f64);
        }
    }
    g
}

fn feature_dims(t: &Tensor) -> (usize, usize) {
    let (_, c, h, w) = t.dims4().unwrap();
    (c, h * w)
}

fn oracle_style(fp: &[Tensor; 2], fg: &[Tensor; 2]) -> T2 {
    let mut total = t2(0.0);
    for (a, b) in fp.iter().zip(fg) {
        let (c, hw) = feature_dims(a);
        let ga = oracle_gram(&values(a), c, hw);
        let gb = oracle_gram(&values(b), c, hw);
        total += t2_sum(ga.iter().zip(&gb).map(|(x, y)| (*x - *y) * (*x - *y)));
    }
    total * t2(0.5)
}

fn oracle_perceptual(fp: &[Tensor; 2], fg: &[Tensor; 2]) -> T2 {
    let mut total = t2(0.0);
    for (a, b) in fp.iter().zip(fg) {
        let (va, vb) = (values(a), values(b));
        total += t2_sum(va.iter().zip(&vb).map(|(x, y)| (t2(*x) - t2(*y)) * (t2(*x) - t2(*y)))) / t2(va.len() as f64);
    }
    total * t2(0.5)
}

fn compare(name: &str, got: f64, want: T2, tol: f64) -> Check {
    let err = (got - hi(want)).abs();
    check(name, err <= tol, format!("got {got:.12e}, oracle {:.12e}, |d| {err:.2e} (tol {tol:.0e})", hi(want)))
}

// ---------------------------------------------------------------------------
// C1

fn c1_loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut out = Vec::new();
    let tau = losses::DEFAULT_TAU;

    let (n, m, d) = (3, 5, 4);
    let (q, p, ng) = (uniform(&mut rng, n * d, -1.0, 1.0), uniform(&mut rng, n * d, -1.0, 1.0), uniform(&mut rng, m * d, -1.0, 1.0));
    let got = losses::info_nce(&NceBatch {
        query: &tensor(&q, &[n, d]),
        positive: &tensor(&p, &[n, d]),
        negatives: &tensor(&ng, &[m, d]),
        tau,
    })
    .map_err(|e| e.to_string())?;
    out.push(compare("info_nce", scalar(&got), oracle_info_nce(&q, &p, &ng, n, m, d, tau), ORACLE_TOL));

    // Two layers with different sizes.
    let dims = [(0usize, 2usize, 3usize, 6usize), (3, 3, 4, 4)];
    let mut maps: [BTreeMap<usize, Tensor>; 3] = Default::default();
    let mut want = t2(0.0);
    for &(id, n, m, d) in &dims {
        let (q, p, ng) = (uniform(&mut rng, n * d, -1.0, 1.0), uniform(&mut rng, n * d, -1.0, 1.0), uniform(&mut rng, m * d, -1.0, 1.0));
        maps[0].insert(id, tensor(&q, &[n, d]));
        maps[1].insert(id, tensor(&p, &[n, d]));
        maps[2].insert(id, tensor(&ng, &[m, d]));
        want += oracle_info_nce(&q, &p, &ng, n, m, d, tau);
    }
    let [f, b, s] = maps;
    let got = losses::layerwise_nce(&LayerEmbeddings(f), &LayerEmbeddings(b), &LayerEmbeddings(s), tau).map_err(|e| e.to_string())?;
    out.push(compare("layerwise_nce", scalar(&got), want, ORACLE_TOL));

    let (h, w) = (4, 4);
    let mask: Vec<f64> = (0..h * w).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mask = if mask.iter().all(|v| *v == 0.0) { vec![1.0; h * w] } else { mask };
    let a = uniform(&mut rng, 3 * h * w, 0.0, 1.0);
    let bb = uniform(&mut rng, 3 * h * w, 0.0, 1.0);
    let mt = tensor(&mask, &[1, 1, h, w]);
    let got = losses::identity_loss(&tensor(&a, &[1, 3, h, w]), &tensor(&bb, &[1, 3, h, w]), &mt).map_err(|e| e.to_string())?;
    out.push(compare("identity", scalar(&got), oracle_masked_l1(&a, &bb, &mask, 3), ORACLE_TOL));
    let got = losses::illumination_loss(&tensor(&bb, &[1, 3, h, w]), &tensor(&a, &[1, 3, h, w]), &mt).map_err(|e| e.to_string())?;
    out.push(compare("illumination", scalar(&got), oracle_masked_l1(&bb, &a, &mask, 3), ORACLE_TOL));

    let sc = uniform(&mut rng, 36, -0.5, 1.5);
    let got = losses::critic_distill_loss(&tensor(&sc, &[1, 1, 6, 6])).map_err(|e| e.to_string())?;
    out.push(compare("critic_distill", scalar(&got), oracle_mean_sq_from_one(&sc), ORACLE_TOL));

    let fake = uniform(&mut rng, 16, -0.5, 1.5);
    let r1 = uniform(&mut rng, 16, -0.5, 1.5);
    let r2 = uniform(&mut rng, 48, -0.5, 1.5);
    let (gen, crit) = losses::adversarial_losses(
        &tensor(&fake, &[1, 1, 4, 4]),
        &[&tensor(&r1, &[1, 1, 4, 4]), &tensor(&r2, &[3, 1, 4, 4])],
    )
    .map_err(|e| e.to_string())?;
    out.push(compare("adversarial (generator)", scalar(&gen), oracle_mean_sq_from_one(&fake), ORACLE_TOL));
    let want = oracle_mean_sq(&fake) + (oracle_mean_sq_from_one(&r1) + oracle_mean_sq_from_one(&r2)) / t2(2.0);
    out.push(compare("adversarial (critic)", scalar(&crit), want, ORACLE_TOL));

    let (h, w) = (4, 5);
    let pa = uniform(&mut rng, 3 * h * w, 0.0, 1.0);
    let pb = uniform(&mut rng, 3 * h * w, 0.0, 1.0);
    let got = losses::pixel_loss(&tensor(&pa, &[1, 3, h, w]), &tensor(&pb, &[1, 3, h, w])).map_err(|e| e.to_string())?;
    out.push(compare("pixel", scalar(&got), oracle_pixel(&pa, &pb), ORACLE_TOL));

    // One black pixel on each side.
    let (mut ca, mut cb) = (pa.clone(), pb.clone());
    for c in 0..3 {
        ca[c * h * w + 2] = 0.0;
        cb[c * h * w + 7] = 0.0;
    }
    let got = losses::color_loss(&tensor(&ca, &[1, 3, h, w]), &tensor(&cb, &[1, 3, h, w])).map_err(|e| e.to_string())?;
    out.push(compare("color", scalar(&got), oracle_color(&ca, &cb, h * w), ORACLE_TOL));

    let feats = uniform(&mut rng, 64, -1.0, 1.0);
    let got = values(&losses::gram(&tensor(&feats, &[1, 4, 4, 4])).map_err(|e| e.to_string())?);
    let want = oracle_gram(&feats, 4, 16);
    let worst = got.iter().zip(&want).map(|(g, w)| (g - hi(*w)).abs()).fold(0.0, f64::max);
    out.push(check("gram", worst <= ORACLE_TOL, format!("max |d| {worst:.2e} over 16 entries (tol {ORACLE_TOL:.0e})")));

    // The extractor needs 16x16 inputs; its features feed the oracles as given.
    let vgg = tiny_extractor(3);
    let side = 16;
    let ia = uniform(&mut rng, 3 * side * side, 0.0, 1.0);
    let ib = uniform(&mut rng, 3 * side * side, 0.0, 1.0);
    let (ta, tb) = (tensor(&ia, &[1, 3, side, side]), tensor(&ib, &[1, 3, side, side]));
    let fa = vgg.features(&ta).map_err(|e| e.to_string())?;
    let fb = vgg.features(&tb).map_err(|e| e.to_string())?;
    let style = oracle_style(&fa, &fb);
    let got = losses::style_loss(&vgg, &ta, &tb).map_err(|e| e.to_string())?;
    out.push(compare("style", scalar(&got), style, EXTRACTOR_TOL));
    let got = losses::refinement_perceptual(&vgg, &ta, &tb).map_err(|e| e.to_string())?;
    out.push(compare("perceptual", scalar(&got), oracle_perceptual(&fa, &fb), EXTRACTOR_TOL));

    let wts = LossWeights::default();
    let got = losses::supervised_total(&vgg, &ta, &tb, &wts).map_err(|e| e.to_string())?;
    let want = oracle_pixel(&ia, &ib) * t2(wts.pixel) + oracle_color(&ia, &ib, side * side) * t2(wts.color) + style * t2(wts.style);
    out.push(compare("supervised_total", scalar(&got), want, EXTRACTOR_TOL));
    Ok(out)
}

// ---------------------------------------------------------------------------
// C2

/// Relative error between the analytic gradient of `f` and central finite
/// differences, worst over all inputs.
fn grad_error(inputs: &[(Vec<f64>, Vec<usize>)], f: &dyn Fn(&[Tensor]) -> unshadow::Result<Tensor>) -> Result<f64, String> {
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(v, s)| Var::from_tensor(&tensor(v, s)).unwrap())
        .collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = f(&ts).map_err(|e| e.to_string())?;
    let grads = loss.backward().map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, (v, shape)) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[i].as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; v.len()],
        };
        let mut numeric = Vec::with_capacity(v.len());
        for k in 0..v.len() {
            let eval = |delta: f64| -> Result<f64, String> {
                let mut plain: Vec<Tensor> = inputs.iter().map(|(v, s)| tensor(v, s)).collect();
                let mut bumped = v.clone();
                bumped[k] += delta;
                plain[i] = tensor(&bumped, shape);
                Ok(scalar(&f(&plain).map_err(|e| e.to_string())?))
            };
            numeric.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

fn c2_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let tau = losses::DEFAULT_TAU;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<(Vec<f64>, Vec<usize>)>, f: &dyn Fn(&[Tensor]) -> unshadow::Result<Tensor>| -> Result<(), String> {
        let e = grad_error(&inputs, f)?;
        out.push(check(name, e <= GRAD_TOL, format!("relative error {e:.2e} (tol {GRAD_TOL:.0e})")));
        Ok(())
    };

    let nce_in = vec![
        (uniform(&mut rng, 12, -1.0, 1.0), vec![3, 4]),
        (uniform(&mut rng, 12, -1.0, 1.0), vec![3, 4]),
        (uniform(&mut rng, 20, -1.0, 1.0), vec![5, 4]),
    ];
    run("info_nce", nce_in.clone(), &|t| {
        losses::info_nce(&NceBatch {
            query: &t[0],
            positive: &t[1],
            negatives: &t[2],
            tau,
        })
    })?;
    let mut lw = nce_in.clone();
    lw.extend([
        (uniform(&mut rng, 12, -1.0, 1.0), vec![2, 6]),
        (uniform(&mut rng, 12, -1.0, 1.0), vec![2, 6]),
        (uniform(&mut rng, 18, -1.0, 1.0), vec![3, 6]),
    ]);
    run("layerwise_nce", lw, &|t| {
        let emb = |a: &Tensor, b: &Tensor| LayerEmbeddings(BTreeMap::from([(1, a.clone()), (4, b.clone())]));
        losses::layerwise_nce(&emb(&t[0], &t[3]), &emb(&t[1], &t[4]), &emb(&t[2], &t[5]), tau)
    })?;

    // Differences kept away from the |x| kink.
    let a = uniform(&mut rng, 48, 0.0, 1.0);
    let b: Vec<f64> = a
        .iter()
        .map(|v| v + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.05..0.3))
        .collect();
    let mask: Vec<f64> = (0..16).map(|k| if k % 3 == 0 { 0.0 } else { 1.0 }).collect();
    let mt = tensor(&mask, &[1, 1, 4, 4]);
    let l1_in = vec![(a.clone(), vec![1, 3, 4, 4]), (b.clone(), vec![1, 3, 4, 4])];
    run("identity", l1_in.clone(), &|t| losses::identity_loss(&t[0], &t[1], &mt))?;
    run("illumination", l1_in.clone(), &|t| losses::illumination_loss(&t[0], &t[1], &mt))?;
    run("pixel", l1_in, &|t| losses::pixel_loss(&t[0], &t[1]))?;

    run("critic_distill", vec![(uniform(&mut rng, 36, -0.5, 1.5), vec![1, 1, 6, 6])], &|t| {
        losses::critic_distill_loss(&t[0])
    })?;
    let adv_in = vec![
        (uniform(&mut rng, 16, -0.5, 1.5), vec![1, 1, 4, 4]),
        (uniform(&mut rng, 16, -0.5, 1.5), vec![1, 1, 4, 4]),
        (uniform(&mut rng, 48, -0.5, 1.5), vec![3, 1, 4, 4]),
    ];
    run("adversarial (generator)", adv_in.clone(), &|t| Ok(losses::adversarial_losses(&t[0], &[&t[1], &t[2]])?.0))?;
    run("adversarial (critic)", adv_in, &|t| Ok(losses::adversarial_losses(&t[0], &[&t[1], &t[2]])?.1))?;

    let col = vec![(uniform(&mut rng, 60, 0.05, 1.0), vec![1, 3, 4, 5]), (uniform(&mut rng, 60, 0.05, 1.0), vec![1, 3, 4, 5])];
    run("color", col, &|t| losses::color_loss(&t[0], &t[1]))?;

    let weights = tensor(&uniform(&mut rng, 16, -1.0, 1.0), &[1, 4, 4]);
    run("gram", vec![(uniform(&mut rng, 64, -1.0, 1.0), vec![1, 4, 4, 4])], &|t| {
        Ok((losses::gram(&t[0])? * &weights)?.sum_all()?)
    })?;

    let vgg = tiny_extractor(4);
    let gt = tensor(&uniform(&mut rng, 768, 0.05, 0.95), &[1, 3, 16, 16]);
    let img = vec![(uniform(&mut rng, 768, 0.05, 0.95), vec![1, 3, 16, 16])];
    run("style", img.clone(), &|t| losses::style_loss(&vgg, &t[0], &gt))?;
    run("perceptual", img.clone(), &|t| losses::refinement_perceptual(&vgg, &t[0], &gt))?;
    run("supervised_total", img, &|t| losses::supervised_total(&vgg, &t[0], &gt, &LossWeights::default()))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// C3

fn c3_spot_values() -> Outcome {
    let mut out = Vec::new();
    let q = tensor(&[0.3, -0.2, 0.5], &[1, 3]);
    let p = tensor(&[0.1, 0.4, 0.2], &[1, 3]);
    // A single negative identical to the positive.
    let n = p.clone();
    let got = scalar(
        &losses::info_nce(&NceBatch {
            query: &q,
            positive: &p,
            negatives: &n,
            tau: losses::DEFAULT_TAU,
        })
        .map_err(|e| e.to_string())?,
    );
    out.push(check("info_nce symmetric = ln 2", (got - LN_2).abs() <= SPOT_TOL, format!("{got:.12}")));

    let red = tensor(&[1.0, 0.0, 0.0], &[1, 3, 1, 1]);
    let green = tensor(&[0.0, 1.0, 0.0], &[1, 3, 1, 1]);
    let got = scalar(&losses::color_loss(&red, &green).map_err(|e| e.to_string())?);
    out.push(check("color orthogonal = pi/2", (got - FRAC_PI_2).abs() <= SPOT_TOL, format!("{got:.12}")));

    // 64 of 100 pixels off by 0.125 (exact in f32): MSE = 0.64 / 64 = 0.01.
    let a = ImageTensor::filled(10, 10, [0.5; 3]);
    let b = ImageTensor::from_fn(10, 10, |y, x, _| if y * 10 + x < 64 { 0.625 } else { 0.5 });
    let got = psnr(&a, &b).map_err(|e| e.to_string())?;
    out.push(check("psnr(MSE = 0.01) = 20 dB", (got - 20.0).abs() <= SPOT_TOL, format!("{got:.9} dB")));

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let noise: Vec<f32> = (0..24 * 24 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = ImageTensor::from_fn(24, 24, |y, x, c| noise[(y * 24 + x) * 3 + c]);
    let got = ssim(&x, &x).map_err(|e| e.to_string())?;
    out.push(check("ssim(x, x) = 1", (got - 1.0).abs() <= SPOT_TOL, format!("{got:.12}")));

    let cfg = TrainConfig::default();
    let lr = |e: f64| lr_schedule(e, &cfg).unwrap();
    let ok = lr(0.0) == 1e-4 && lr(75.0) == 1e-4 && lr(200.0) == 0.0 && lr(74.0) == 1e-4 && lr(76.0) < 1e-4;
    out.push(check(
        "lr_schedule knee",
        ok,
        format!("lr(0) {:e}, lr(75) {:e}, lr(76) {:e}, lr(200) {:e}", lr(0.0), lr(75.0), lr(76.0), lr(200.0)),
    ));
    let mid = lr(137.5);
    out.push(check("lr_schedule linear decay", (mid - 5e-5).abs() <= 1e-12, format!("lr(137.5) {mid:e}")));
    Ok(out)
}

// ---------------------------------------------------------------------------
// C4

fn bits(img: &ndarray::Array3<f32>) -> Vec<u32> {
    img.iter().map(|v| v.to_bits()).collect()
}

fn c4_embedding_algebra() -> Outcome {
    let strategy = (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (
            Just((h, w)),
            prop::collection::vec(0.0f32..=1.0, h * w * 3),
            prop::collection::vec(0.0f32..=1.0, h * w * 3),
            prop::collection::vec(any::<bool>(), h * w),
        )
    });
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 512,
        ..ProptestConfig::default()
    });
    let cases = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |((h, w), s, r, m)| {
        cases.set(cases.get() + 1);
        let img = |v: Vec<f32>| ImageTensor::new(ndarray::Array3::from_shape_vec((h, w, 3), v).unwrap()).unwrap();
        let (s, r) = (img(s), img(r));
        let mask = ShadowMask::from_fn(h, w, |y, x| m[y * w + x]);
        let zeros = ShadowMask::zeros(h, w);
        let ones = ShadowMask::ones(h, w);

        let round = embed_region(&s, &mask, &extract_region(&s, &mask).unwrap()).unwrap();
        prop_assert_eq!(bits(round.data()), bits(s.data()), "embed(S, M, extract(S, M)) != S");

        let z = embed_region(&s, &zeros, &extract_region(&r, &zeros).unwrap()).unwrap();
        prop_assert_eq!(bits(z.data()), bits(s.data()), "all-zero mask changed S");
        prop_assert!(extract_region(&s, &zeros).unwrap().data().iter().all(|v| v.to_bits() == 0));

        let o = embed_region(&s, &ones, &extract_region(&r, &ones).unwrap()).unwrap();
        prop_assert_eq!(bits(o.data()), bits(r.data()), "all-one mask did not replace S");
        prop_assert_eq!(bits(extract_region(&s, &ones).unwrap().data()), bits(s.data()));

        let mixed = embed_region(&s, &mask, &extract_region(&r, &mask).unwrap()).unwrap();
        prop_assert_eq!(
            bits(extract_region(&mixed, &mask).unwrap().data()),
            bits(extract_region(&r, &mask).unwrap().data())
        );
        prop_assert_eq!(
            bits(extract_region(&mixed, &mask.inverted()).unwrap().data()),
            bits(extract_region(&s, &mask.inverted()).unwrap().data())
        );
        Ok(())
    });
    Ok(vec![check(
        "embed/extract identities (bitwise)",
        result.is_ok(),
        match result {
            Ok(()) => format!("{} generated cases", cases.get()),
            Err(e) => e.to_string(),
        },
    )])
}

// ---------------------------------------------------------------------------
// C5

fn mean_over(image: &ImageTensor, mask: &ShadowMask) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ((y, x, _), v) in image.data().indexed_iter() {
        if mask.get(y, x) {
            sum += *v as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn c5_augmentation() -> Outcome {
    let mut out = Vec::new();
    let data = toy_triplets(&ToySpec::default());

    let cfg = AugmentationConfig {
        scale_range: (1.0, 1.0),
        photometric_prob: 0.0,
        ..AugmentationConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut flips = 0;
    for k in 0..AUG_DRAWS {
        let t = &data[k % data.len()];
        let aug = standard_augment(t, &cfg, &mut rng).map_err(|e| e.to_string())?;
        if aug.mask != t.mask && aug.mask == t.mask.flip_horizontal() {
            flips += 1;
        }
    }
    let rate = flips as f64 / AUG_DRAWS as f64;
    out.push(check(
        "flip rate in [0.25, 0.35]",
        (0.25..=0.35).contains(&rate),
        format!("{flips}/{AUG_DRAWS} = {rate:.3} (flip_prob {})", cfg.flip_prob),
    ));

    // Mirrored toy masks land outside the shadow band, so transplants fit.
    let bank: MaskBank = bank_from_masks(data.iter().map(|t| t.mask.flip_horizontal()).collect::<Vec<_>>().iter());
    let cfg = AugmentationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    let (mut inpainted, mut worst, mut inside) = (0usize, 0.0f64, 0usize);
    for k in 0..AUG_DRAWS {
        let t = &data[k % data.len()];
        let aug = inpaint_shadow(t, &bank, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let added = ShadowMask::from_fn(64, 64, |y, x| aug.mask.get(y, x) && !t.mask.get(y, x));
        let Some(got) = mean_over(&aug.shadow, &added) else { continue };
        let estimate = mean_over(&t.shadow, &t.mask).expect("toy shadows are non-empty");
        inpainted += 1;
        let dev = (got / estimate - 1.0).abs();
        worst = worst.max(dev);
        if got >= estimate * (1.0 - cfg.inpaint_jitter) - 1e-3 && got <= estimate * (1.0 + cfg.inpaint_jitter) + 1e-3 {
            inside += 1;
        }
    }
    out.push(check(
        "inpainted mean within +-5% of shadow mean",
        inpainted > AUG_DRAWS / 2 && inside == inpainted,
        format!("{inside}/{inpainted} inpainted draws inside the band, worst relative deviation {worst:.4}"),
    ));

    let t = &data[0];
    let region = extract_region(&t.shadow, &t.mask).map_err(|e| e.to_string())?;
    let base = region.support_mean().expect("non-empty");
    let mut ok = true;
    let mut detail = Vec::new();
    for mu in [5.0, 50.0, 75.0] {
        let levels = illumination_levels(mu);
        ok &= levels == [mu - 5.0, mu, mu + 5.0];
        let variants = illumination_variants(&region, mu).map_err(|e| e.to_string())?;
        let mut recovered = Vec::new();
        for (v, level) in variants.iter().zip(levels) {
            let direct = adjust_brightness(&region, level).map_err(|e| e.to_string())?;
            ok &= bits(v.data()) == bits(direct.data());
            let oracle = region.data().mapv(|x| (x as f64 * (1.0 + level / 100.0)).clamp(0.0, 1.0));
            ok &= v.data().iter().zip(oracle.iter()).all(|(a, b)| (*a as f64 - b).abs() <= 1e-6);
            let got = 100.0 * (v.support_mean().expect("non-empty") / base - 1.0);
            ok &= (got - level).abs() <= 1e-4;
            recovered.push(format!("{got:.4}"));
        }
        detail.push(format!("mu {mu}: [{}]", recovered.join(", ")));
    }
    out.push(check("illumination_variants levels {mu-5, mu, mu+5}", ok, detail.join("; ")));
    Ok(out)
}

// ---------------------------------------------------------------------------
// C6

fn toy_generator(base: usize) -> GeneratorSpec {
    GeneratorSpec {
        base_channels: base,
        depth: 3,
        dense_blocks_per_stage: 1,
        dense_layers: 2,
        skip_connections: true,
    }
}

fn toy_run(mode: Mode) -> RunConfig {
    let g = toy_generator(8);
    let epochs = (TOY_STEPS / 8) as usize;
    RunConfig {
        train: TrainConfig {
            mode,
            epochs,
            decay_start_epoch: epochs / 2,
            lr_base: 1e-3,
            train_resolution: 64,
            crop_size: 40,
            seed: 11,
            curriculum: false,
            inpaint: false,
            augment: false,
            checkpoint_every: epochs,
            max_steps: Some(TOY_STEPS),
            supervised_mu: 0.0,
            // Gram magnitudes of the narrow random extractor are far larger than
            // those of pretrained VGG16; the full-size style weight diverges here.
            supervised_weights: LossWeights {
                style: 1.0,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        },
        augment: AugmentationConfig::default(),
        networks: NetworkConfig {
            deshadower: g.clone(),
            illumination: g.clone(),
            refiner: g,
            critic: CriticSpec {
                num_layers: 3,
                base_channels: 8,
            },
            projection_hidden: 64,
            projection_dim: 64,
            nce_locations: 64,
            perceptual_width: 0.125,
            perceptual_random: true,
        },
    }
}

fn shadow_error(trainer: &Trainer, data: &[ShadowTriplet], bypass_refine: bool) -> Result<f64, String> {
    let remover = PipelineRemover {
        networks: trainer.networks(),
        bypass_refine,
    };
    let report = evaluate_triplets(&remover, data.iter().cloned().map(Ok), &EvalConfig::default()).map_err(|e| e.to_string())?;
    report.summary.shadow.rmse_lab.ok_or_else(|| "no shadow pixels".to_string())
}

struct ToyResult {
    before: f64,
    after: f64,
    input: f64,
    bypass_after: f64,
    elapsed: Duration,
}

fn toy_overfit(mode: Mode, data: &[ShadowTriplet]) -> Result<ToyResult, String> {
    let start = Instant::now();
    let cfg = toy_run(mode);
    let vgg = perceptual_extractor(&cfg.networks, None, 0, &cpu()).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg, vgg, &cpu()).map_err(|e| e.to_string())?;
    let before = shadow_error(&trainer, data, false)?;
    let input = {
        let report = evaluate_triplets(
            &unshadow::evaluation::Passthrough,
            data.iter().cloned().map(Ok),
            &EvalConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        report.summary.shadow.rmse_lab.unwrap_or(f64::NAN)
    };
    let split = Arc::new(DatasetSplit::from_triplets(SplitName::Train, Layout::Istd, data.to_vec()).map_err(|e| e.to_string())?);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = FitOptions {
        checkpoint_dir: dir.path().join("ckpt"),
        log_dir: dir.path().join("logs"),
    };
    fit(&mut trainer, split, &opts).map_err(|e| e.to_string())?;
    Ok(ToyResult {
        before,
        after: shadow_error(&trainer, data, false)?,
        input,
        bypass_after: shadow_error(&trainer, data, true)?,
        elapsed: start.elapsed(),
    })
}

fn c6_toy_overfit() -> Outcome {
    let data = toy_triplets(&ToySpec::default());
    let mut out = Vec::new();
    let mut results = Vec::new();
    for mode in [Mode::Weak, Mode::Supervised] {
        let r = toy_overfit(mode, &data)?;
        let drop = 1.0 - r.after / r.before;
        out.push(check(
            format!("{mode}: shadow LAB error drops >= 50%"),
            drop >= 0.5 && r.elapsed <= Duration::from_secs(3 * 3600),
            format!(
                "{:.2} -> {:.2} ({:.0}% drop) in {TOY_STEPS} steps, {:.0} s; shadow input vs GT {:.2}, without refinement {:.2}",
                r.before,
                r.after,
                100.0 * drop,
                r.elapsed.as_secs_f64(),
                r.input,
                r.bypass_after
            ),
        ));
        results.push(r);
    }
    let (weak, sup) = (&results[0], &results[1]);
    out.push(check(
        "supervised <= weak",
        sup.after <= weak.after,
        format!("supervised {:.2}, weak {:.2}", sup.after, weak.after),
    ));
    Ok(out)
}

// ---------------------------------------------------------------------------
// C7

fn tiny_run(mode: Mode) -> RunConfig {
    let g = toy_generator(4);
    RunConfig {
        train: TrainConfig {
            mode,
            epochs: 3,
            decay_start_epoch: 1,
            lr_base: 1e-3,
            train_resolution: 48,
            crop_size: 36,
            seed: 5,
            checkpoint_every: 1,
            max_steps: Some(10),
            ..TrainConfig::default()
        },
        augment: AugmentationConfig::default(),
        networks: NetworkConfig {
            deshadower: g.clone(),
            illumination: g.clone(),
            refiner: g,
            critic: CriticSpec {
                num_layers: 3,
                base_channels: 4,
            },
            projection_hidden: 16,
            projection_dim: 8,
            nce_locations: 16,
            perceptual_width: 0.05,
            perceptual_random: true,
        },
    }
}

fn c7_determinism() -> Outcome {
    let data = toy_triplets(&ToySpec {
        size: 48,
        ..ToySpec::default()
    });
    let split = Arc::new(DatasetSplit::from_triplets(SplitName::Train, Layout::Istd, data).map_err(|e| e.to_string())?);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |tag: &str| -> Result<(Trainer, Vec<u8>), String> {
        let cfg = tiny_run(Mode::Weak);
        let vgg = perceptual_extractor(&cfg.networks, None, 0, &cpu()).map_err(|e| e.to_string())?;
        let mut trainer = Trainer::new(cfg, vgg, &cpu()).map_err(|e| e.to_string())?;
        let opts = FitOptions {
            checkpoint_dir: dir.path().join(tag).join("ckpt"),
            log_dir: dir.path().join(tag).join("logs"),
        };
        fit(&mut trainer, split.clone(), &opts).map_err(|e| e.to_string())?;
        let csv = std::fs::read(opts.loss_csv()).map_err(|e| e.to_string())?;
        Ok((trainer, csv))
    };
    let (a, csv_a) = run("a")?;
    let (b, csv_b) = run("b")?;
    let mut out = vec![check(
        "identical loss traces",
        !a.trace().is_empty() && a.trace() == b.trace() && csv_a == csv_b,
        format!("{} steps, loss csv {} bytes", a.trace().len(), csv_a.len()),
    )];

    for mode in [Mode::Weak, Mode::Supervised] {
        let fresh;
        let trainer = if mode == Mode::Weak {
            &a
        } else {
            let cfg = tiny_run(mode);
            let vgg = perceptual_extractor(&cfg.networks, None, 0, &cpu()).map_err(|e| e.to_string())?;
            fresh = Trainer::new(cfg, vgg, &cpu()).map_err(|e| e.to_string())?;
            &fresh
        };
        let first = dir.path().join(format!("{mode}_first.ckpt"));
        let second = dir.path().join(format!("{mode}_second.ckpt"));
        trainer.save(&first).map_err(|e| e.to_string())?;
        let vgg = perceptual_extractor(&trainer.config().networks, None, 0, &cpu()).map_err(|e| e.to_string())?;
        let reloaded = Trainer::resume(&first, vgg, &cpu()).map_err(|e| e.to_string())?;
        reloaded.save(&second).map_err(|e| e.to_string())?;
        let (x, y) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        out.push(check(
            format!("{mode}: checkpoint save -> load -> save byte-identical"),
            x == y,
            format!("{} bytes", x.len()),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// C8

fn all_perfect(s: &Summary) -> Result<(), String> {
    for (name, r) in [("shadow", &s.shadow), ("non-shadow", &s.non_shadow), ("all", &s.all)] {
        let RegionMetrics {
            rmse_lab,
            psnr_rgb,
            ssim_rgb,
        } = r;
        match (rmse_lab, psnr_rgb, ssim_rgb) {
            (Some(e), Some(p), Some(q)) if *e == 0.0 && *p == PSNR_CAP && (q - 1.0).abs() <= SPOT_TOL => {}
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    Ok(())
}

fn c8_eval_self_test() -> Outcome {
    let start = Instant::now();
    let data = toy_triplets(&ToySpec {
        count: 16,
        ..ToySpec::default()
    });
    let split = DatasetSplit::from_triplets(SplitName::Test, Layout::Istd, data).map_err(|e| e.to_string())?;
    let report = evaluate(&GroundTruthEcho, &split, &EvalConfig::default()).map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    for (name, s) in [
        ("summary", &report.summary),
        ("per-sample mean", &report.per_sample_mean),
        ("pixel pooled", &report.pixel_pooled),
    ] {
        if let Err(e) = all_perfect(s) {
            problems.push(format!("{name} {e}"));
        }
    }
    let elapsed = start.elapsed();
    let ok = problems.is_empty() && report.count == 16 && elapsed < Duration::from_secs(60);
    let detail = if problems.is_empty() {
        format!(
            "{} samples at {}x{}: RMSE 0, PSNR {PSNR_CAP}, SSIM 1 in every region, {:.1} s",
            report.count,
            report.config.resize,
            report.config.resize,
            elapsed.as_secs_f64()
        )
    } else {
        problems.join("; ")
    };
    Ok(vec![check("evaluate(GT, GT) is perfect", ok, detail)])
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: &'static str,
    title: &'static str,
    run: fn() -> Outcome,
    limit: Option<Duration>,
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("UNSHADOW_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_uppercase()).collect());
    let criteria = [
        Criterion {
            id: "C1",
            title: "loss oracle equivalence",
            run: c1_loss_oracles,
            limit: Some(Duration::from_secs(60)),
        },
        Criterion {
            id: "C2",
            title: "gradient checks",
            run: c2_gradients,
            limit: Some(Duration::from_secs(300)),
        },
        Criterion {
            id: "C3",
            title: "closed-form spot values",
            run: c3_spot_values,
            limit: None,
        },
        Criterion {
            id: "C4",
            title: "embedding/extraction algebra",
            run: c4_embedding_algebra,
            limit: None,
        },
        Criterion {
            id: "C5",
            title: "augmentation statistics",
            run: c5_augmentation,
            limit: None,
        },
        Criterion {
            id: "C6",
            title: "toy overfit (weak and supervised)",
            run: c6_toy_overfit,
            limit: Some(Duration::from_secs(3 * 3600)),
        },
        Criterion {
            id: "C7",
            title: "determinism",
            run: c7_determinism,
            limit: None,
        },
        Criterion {
            id: "C8",
            title: "evaluation self-test",
            run: c8_eval_self_test,
            limit: Some(Duration::from_secs(60)),
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        if let Some(only) = &only {
            if !only.iter().any(|o| o == c.id) {
                println!("SKIP [{}] {} (not selected)", c.id, c.title);
                continue;
            }
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, lines) = match outcome {
            Ok(checks) => {
                let ok = checks.iter().all(|k| k.ok) && c.limit.is_none_or(|l| elapsed <= l);
                let lines = checks
                    .iter()
                    .map(|k| format!("    {} {}: {}", if k.ok { "ok " } else { "BAD" }, k.name, k.detail))
                    .collect::<Vec<_>>();
                (ok, lines)
            }
            Err(e) => (false, vec![format!("    error: {e}")]),
        };
        if !ok {
            failed += 1;
        }
        let limit = c.limit.map(|l| format!(", limit {} s", l.as_secs())).unwrap_or_default();
        println!(
            "{} [{}] {} ({:.1} s{limit})",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            elapsed.as_secs_f64()
        );
        for l in lines {
            println!("{l}");
        }
    }
    println!(
        "INFO [C9] full-dataset targets (weak shadow RMSE 8.3 +-25%, supervised 5.9 +-25%) are non-gating and not run: they need the full ISTD+ set and a multi-hour accelerator budget"
    );
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
