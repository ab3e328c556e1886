//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p diffcl --test acceptance`. Set `ACCEPTANCE_ONLY`
//! to a comma-separated list of criterion numbers to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use diffcl::cli::{ablation_rows, train_run};
use diffcl::config::preset;
use diffcl::run::RunDir;
use diffcl_core::autodiff::Graph;
use diffcl_core::ddim::{ddim_reverse_step, ddim_sample, forward_noise, onehot_encode, NoiseSchedule};
use diffcl_core::evalkit::{evaluate, overlap_metrics, surface_distance_metrics, EvalConfig, VolumeModel};
use diffcl_core::fft::{fft3, Complex64};
use diffcl_core::hfmamba::{high_pass, selective_scan, HfmBlock, HfmConfig, SSMParams};
use diffcl_core::labelprop::{
    contrastive_loss, contrastive_loss_var, cosine_scores, mine_pairs, topk_select, Anchors, ClassPairs, MemoryBank,
};
use diffcl_core::losses::{ce_loss, ce_loss_var, dice_loss, dice_loss_var, warmup_lambda, CE_EPS, DICE_SMOOTH};
use diffcl_core::params::ParamStore;
use diffcl_core::voldata::VolumeSample;
use diffcl_core::{Rng, Tensor};
use diffcl_oracles as oracle;
use rand::{Rng as _, SeedableRng};

// ---- pinned tolerances -----------------------------------------------------

const SCAN_CASES: usize = 200;
const SCAN_REL: f64 = 1e-5;
const SCAN_BUDGET: Duration = Duration::from_secs(30);
const HPF_ABS: f64 = 1e-6;
const ZERO_ABS: f64 = 1e-12;
const PARSEVAL_REL: f64 = 1e-4;
const MC_DRAWS: usize = 10_000;
const MC_MEAN_SIGMAS: f64 = 4.0;
const MC_VAR_REL: f64 = 0.05;
const ROUND_TRIP_ABS: f64 = 1e-6;
const MULTI_STEP_ABS: f64 = 1e-5;
const GRAD_REL: f64 = 1e-3;
const GRAD_ABS_FLOOR: f64 = 1e-7;
const FD_STEP: f64 = 1e-6;
const FD_STEP_HFM: f64 = 1e-5;
const WARMUP_ABS: f64 = 1e-9;
const WARMUP_START: f64 = 0.013476;
const WARMUP_START_ABS: f64 = 1e-6;
const OPPOSED_PAIR: f64 = 0.1269;
const OPPOSED_PAIR_ABS: f64 = 1e-4;
const EXACT_ABS: f64 = 1e-12;
const METRIC_CASES: usize = 100;
const SURFACE_ABS: f64 = 1e-9;
const SMOKE_SEEDS: [u64; 3] = [0, 1, 2];
const SMOKE_MARGIN: f64 = 2.0;
const SMOKE_TIE: f64 = 0.5;
const SMOKE_BUDGET: Duration = Duration::from_secs(20 * 60);

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- 1 ---------------------------------------------------------------------

fn scan_case(len: usize, d: usize, s: usize, x: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> oracle::ScanCase {
    oracle::ScanCase {
        x: (0..len).map(|t| x[t * d..(t + 1) * d].to_vec()).collect(),
        a_bar: (0..len).map(|t| (0..d).map(|j| a[(t * d + j) * s..(t * d + j + 1) * s].to_vec()).collect()).collect(),
        b_bar: (0..len).map(|t| (0..d).map(|j| b[(t * d + j) * s..(t * d + j + 1) * s].to_vec()).collect()).collect(),
        c: (0..len).map(|t| c[t * s..(t + 1) * s].to_vec()).collect(),
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..SCAN_CASES {
        let len = [1, 2, 7, 64][i % 4];
        let d = rng.gen_range(1..=4);
        let s = rng.gen_range(1..=16);
        let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let x = draw(len * d, -2.0, 2.0);
        let a = draw(len * d * s, 0.0, 1.0);
        let b = draw(len * d * s, -1.0, 1.0);
        let c = draw(len * s, -1.0, 1.0);
        let fast = selective_scan(&x, &SSMParams::new(len, d, s, a.clone(), b.clone(), c.clone()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let slow = oracle::naive_scan(&scan_case(len, d, s, &x, &a, &b, &c));
        for t in 0..len {
            for j in 0..d {
                let (f, o) = (fast[t * d + j], slow.value[t][j]);
                let rel = (f - o).abs() / o.abs().max(1.0);
                worst = worst.max(rel);
                ensure(rel <= SCAN_REL, || format!("case {i} t={t} j={j}: {f} vs {o}"))?;
            }
        }
    }
    let took = start.elapsed();
    ensure(took < SCAN_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{SCAN_CASES} instances, worst relative error {worst:.1e} (<= {SCAN_REL:.0e}), {:.2} s", took.as_secs_f64()))
}

// ---- 2 ---------------------------------------------------------------------

fn criterion_2() -> Check {
    let mut rng = Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let grid: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hf = rng.gen_range(0.05..1.0);
        let fast = high_pass(&grid, [4, 4, 4], hf).map_err(|e| e.to_string())?;
        let slow = oracle::high_pass_dft(&grid, [4, 4, 4], hf).map_err(|e| format!("{e:?}"))?;
        for (f, o) in fast.iter().zip(&slow.value) {
            worst = worst.max((f - o).abs());
        }
    }
    ensure(worst <= HPF_ABS, || format!("high-pass differs from the DFT oracle by {worst:e}"))?;

    let constant = high_pass(&[3.5; 64], [4, 4, 4], 0.7).map_err(|e| e.to_string())?;
    let residue = constant.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(residue <= ZERO_ABS, || format!("constant input leaves {residue:e}"))?;

    let board: Vec<f64> = (0..64).map(|i| if (i / 16 + (i / 4) % 4 + i % 4) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let kept = high_pass(&board, [4, 4, 4], 0.7).map_err(|e| e.to_string())?;
    let change = board.iter().zip(&kept).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure(change <= ZERO_ABS, || format!("checkerboard changed by {change:e}"))?;

    let dims = [4, 6, 5];
    let signal: Vec<Complex64> = (0..120).map(|i| Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos())).collect();
    let mut spectrum = signal.clone();
    fft3(&mut spectrum, dims, false);
    let e_space: f64 = signal.iter().map(|v| v.norm_sqr()).sum();
    let e_freq: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum::<f64>() / 120.0;
    let parseval = (e_space - e_freq).abs() / e_space;
    ensure(parseval <= PARSEVAL_REL, || format!("Parseval relative gap {parseval:e}"))?;
    Ok(format!(
        "4^3 high-pass max error {worst:.1e} (<= {HPF_ABS:.0e}); constant -> {residue:.1e}; checkerboard kept; Parseval gap {parseval:.1e}"
    ))
}

// ---- 3 ---------------------------------------------------------------------

fn criterion_3() -> Check {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    ensure(s.beta.windows(2).all(|w| w[1] > w[0]), || "beta not increasing".into())?;
    ensure(s.alpha_bar.windows(2).all(|w| w[1] < w[0]), || "alpha_bar not decreasing".into())?;

    let mut rng = Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for t in [1, 250, 700, 1000] {
        let ab = s.alpha_bar_at(t).map_err(|e| e.to_string())?;
        let y0 = [1.0, -1.0];
        let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
        for _ in 0..MC_DRAWS {
            let f = forward_noise(&y0, t, &s, &mut rng).map_err(|e| e.to_string())?;
            for k in 0..2 {
                sum[k] += f.values[k];
                sq[k] += f.values[k] * f.values[k];
            }
        }
        let n = MC_DRAWS as f64;
        let sigma = (1.0 - ab).sqrt();
        for k in 0..2 {
            let mean = sum[k] / n;
            let var = sq[k] / n - mean * mean;
            // Mean error in units of sigma / sqrt(draws), variance error relative.
            worst_mean = worst_mean.max((mean - ab.sqrt() * y0[k]).abs() / (sigma / n.sqrt()));
            worst_var = worst_var.max((var - sigma * sigma).abs() / (sigma * sigma));
        }
    }
    ensure(worst_mean <= MC_MEAN_SIGMAS && worst_var <= MC_VAR_REL, || {
        format!("moments off: mean {worst_mean:.2} sigma/100, variance {:.1}%", 100.0 * worst_var)
    })?;

    let mut worst_trip = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let y: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let t = rng.gen_range(2..=1000);
        let noisy = forward_noise(&y, t, &s, &mut rng).map_err(|e| e.to_string())?;
        let back = ddim_reverse_step(&noisy.values, &y, t, 0, &s).map_err(|e| e.to_string())?;
        for (a, b) in back.iter().zip(&y) {
            worst_trip = worst_trip.max((a - b).abs());
        }
    }
    ensure(worst_trip <= ROUND_TRIP_ABS, || format!("reverse round trip off by {worst_trip:e}"))?;

    let y0 = onehot_encode(&[0, 1, 1, 0, 1, 0, 0, 1], 2).map_err(|e| e.to_string())?;
    let start = forward_noise(&y0, 1000, &s, &mut rng).map_err(|e| e.to_string())?.values;
    let out = ddim_sample(start, &s.strided(20), &s, |_, _| Ok(y0.clone())).map_err(|e| e.to_string())?;
    let multi = out.iter().zip(&y0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    ensure(multi <= MULTI_STEP_ABS, || format!("multi-step reverse off by {multi:e}"))?;
    Ok(format!(
        "schedule monotone; {MC_DRAWS} draws: mean within {worst_mean:.2} sigma/100 (<= {MC_MEAN_SIGMAS}), variance within {:.2}% (<= 5%); round trip {worst_trip:.1e}; 20-step reverse {multi:.1e}",
        100.0 * worst_var
    ))
}

// ---- 4 ---------------------------------------------------------------------

fn compare_gradients(what: &str, analytic: &[f64], numeric: &[f64]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let allowed = GRAD_REL * a.abs().max(n.abs()) + GRAD_ABS_FLOOR;
        worst = worst.max((a - n).abs() / (a.abs().max(n.abs()) + GRAD_ABS_FLOOR));
        ensure((a - n).abs() <= allowed, || format!("{what} entry {i}: analytic {a} vs numeric {n}"))?;
    }
    Ok(worst)
}

fn softmax_probs(rng: &mut Rng, n: usize, c: usize) -> Tensor {
    let s = 64;
    let mut d = vec![0.0; n * c * s];
    for b in 0..n {
        for j in 0..s {
            let e: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0f64..1.0).exp()).collect();
            let t: f64 = e.iter().sum();
            for k in 0..c {
                d[(b * c + k) * s + j] = e[k] / t;
            }
        }
    }
    Tensor::new(&[n, c, 4, 4, 4], d).unwrap()
}

fn criterion_4() -> Check {
    let mut rng = Rng::seed_from_u64(4);
    let mut worst = 0.0f64;

    // Dice and CE.
    let p = softmax_probs(&mut rng, 2, 3);
    let mut y = Tensor::zeros(p.shape());
    for i in 0..128 {
        let (b, j, l) = (i / 64, i % 64, rng.gen_range(0..3));
        y.data_mut()[(b * 3 + l) * 64 + j] = 1.0;
    }
    for use_dice in [true, false] {
        let eval = |pt: Tensor| {
            let mut g = Graph::new();
            let pv = g.param(pt);
            let yv = g.constant(y.clone());
            let l = if use_dice { dice_loss_var(&mut g, pv, yv, DICE_SMOOTH) } else { ce_loss_var(&mut g, pv, yv, CE_EPS) }
                .unwrap();
            (g, pv, l)
        };
        let (mut g, pv, l) = eval(p.clone());
        g.backward(l).map_err(|e| e.to_string())?;
        let numeric = oracle::central_gradient(
            &mut |x: &[f64]| {
                let (g, _, l) = eval(Tensor::new(p.shape(), x.to_vec()).unwrap());
                g.value(l).item()
            },
            p.data(),
            FD_STEP,
        );
        let name = if use_dice { "dice" } else { "ce" };
        worst = worst.max(compare_gradients(name, g.grad(pv).unwrap().data(), &numeric)?);
    }

    // Contrastive, with respect to the candidates.
    let a = Tensor::new(&[3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::new(&[10, 4], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let pairs = mine_pairs(&Anchors { per_class: vec![Some(a.clone())], skipped: vec![] }, &b, 2).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let bv = g.param(b.clone());
    let l = contrastive_loss_var(&mut g, &[av], bv, &pairs, 0.5).map_err(|e| e.to_string())?;
    g.backward(l).map_err(|e| e.to_string())?;
    let numeric = oracle::central_gradient(
        &mut |x: &[f64]| contrastive_loss(&[&a], &Tensor::new(&[10, 4], x.to_vec()).unwrap(), &pairs, 0.5).unwrap(),
        b.data(),
        FD_STEP,
    );
    worst = worst.max(compare_gradients("contrastive", g.grad(bv).unwrap().data(), &numeric)?);

    // Full HFM block, input and every parameter, on a 4^3 grid.
    let cfg = HfmConfig { channels: 3, state_dim: 2, hf_threshold: 0.5, attention_kernel: 3 };
    let mut store = ParamStore::new();
    let block = HfmBlock::new(&mut store, "hfm", cfg, &mut rng).map_err(|e| e.to_string())?;
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let shape = [1, 3, 4, 4, 4];
    let x = Tensor::new(&shape, (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let weights = Tensor::new(&shape, (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let run = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g, true);
        let xv = g.param(x.clone());
        let out = block.forward(&mut g, &p, xv).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        (g, p, xv, loss)
    };
    let (mut g, p, xv, loss) = run(&store, &x);
    g.backward(loss).map_err(|e| e.to_string())?;
    let numeric = oracle::central_gradient(
        &mut |v: &[f64]| {
            let (g, _, _, l) = run(&store, &Tensor::new(&shape, v.to_vec()).unwrap());
            g.value(l).item()
        },
        x.data(),
        FD_STEP_HFM,
    );
    worst = worst.max(compare_gradients("hfm input", g.grad(xv).unwrap().data(), &numeric)?);
    for (i, var) in p.vars().iter().enumerate() {
        let base = store.tensors()[i].clone();
        let numeric = oracle::central_gradient(
            &mut |v: &[f64]| {
                let mut probe = store.clone();
                probe.tensors_mut()[i] = Tensor::new(base.shape(), v.to_vec()).unwrap();
                let (g, _, _, l) = run(&probe, &x);
                g.value(l).item()
            },
            base.data(),
            FD_STEP_HFM,
        );
        let analytic = g.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        worst = worst.max(compare_gradients(&store.names()[i], analytic.data(), &numeric)?);
    }

    // Closed forms.
    let onehot = Tensor::new(&[1, 2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let perfect_dice = dice_loss(&onehot, &onehot, DICE_SMOOTH).map_err(|e| e.to_string())?;
    let perfect_ce = ce_loss(&onehot, &onehot, CE_EPS).map_err(|e| e.to_string())?;
    let half = Tensor::full(&[1, 2, 4], 0.5);
    let half_ce = ce_loss(&half, &onehot, CE_EPS).map_err(|e| e.to_string())?;
    // Dice of p = 1/2 everywhere against a balanced one-hot: 1 - (2·2 + s)/(4 + s) per class.
    let half_dice = dice_loss(&half, &onehot, DICE_SMOOTH).map_err(|e| e.to_string())?;
    let want_half_dice = 1.0 - (2.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
    ensure(perfect_dice == 0.0 && perfect_ce == 0.0, || format!("perfect prediction: dice {perfect_dice}, ce {perfect_ce}"))?;
    ensure((half_ce - std::f64::consts::LN_2).abs() <= EXACT_ABS, || format!("uniform CE {half_ce}"))?;
    ensure((half_dice - want_half_dice).abs() <= EXACT_ABS, || format!("uniform Dice {half_dice} vs {want_half_dice}"))?;

    let start = warmup_lambda(0.0, 300.0).map_err(|e| e.to_string())?;
    let end = warmup_lambda(300.0, 300.0).map_err(|e| e.to_string())?;
    ensure((start - 2.0 * (-5.0f64).exp()).abs() <= WARMUP_ABS, || format!("lambda(0) = {start}"))?;
    ensure((start - WARMUP_START).abs() <= WARMUP_START_ABS, || format!("lambda(0) = {start}"))?;
    ensure((end - 2.0).abs() <= WARMUP_ABS, || format!("lambda(t_max) = {end}"))?;
    Ok(format!(
        "dice, ce, contrastive and HFM-block gradients within {worst:.1e} relative (<= {GRAD_REL:.0e}); closed forms exact; lambda(0) = {start:.6}, lambda(t_max) = {end}"
    ))
}

// ---- 5 ---------------------------------------------------------------------

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn criterion_5() -> Check {
    let mut rng = Rng::seed_from_u64(5);
    let (classes, dim, s) = (3, 6, 50);
    let mut bank = MemoryBank::new(classes, dim, 40, 10).map_err(|e| e.to_string())?;
    for _ in 0..20 {
        let truth: Vec<u8> = (0..2 * s).map(|_| rng.gen_range(0..classes as u8)).collect();
        let pred: Vec<u8> =
            truth.iter().map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..classes as u8) }).collect();
        let mut f = vec![0.0; 2 * dim * s];
        for b in 0..2 {
            for j in 0..s {
                for k in 0..dim {
                    f[(b * dim + k) * s + j] = rng.gen_range(0.0..0.01);
                }
                f[(b * dim + truth[b * s + j] as usize) * s + j] = 1.0;
                f[(b * dim + classes + pred[b * s + j] as usize) * s + j] = 1.0;
            }
        }
        bank.update(&Tensor::new(&[2, dim, s], f).unwrap(), &pred, &truth, &mut rng).map_err(|e| e.to_string())?;
    }
    let (mut pure, mut total) = (0, 0);
    for c in 0..classes {
        for e in bank.entries(c) {
            let truth = (0..classes).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
            let pred = (0..classes).max_by(|&a, &b| e[classes + a].total_cmp(&e[classes + b])).unwrap();
            total += 1;
            pure += usize::from(truth == c && pred == c);
        }
    }
    ensure(total > 0 && pure == total, || format!("bank purity {pure}/{total}"))?;

    for case in 0..200 {
        let (p, q, d) = (rng.gen_range(1..5), rng.gen_range(4..30), rng.gen_range(2..6));
        let k = rng.gen_range(1..=q / 2);
        let a = Tensor::new(&[p, d], (0..p * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(&[q, d], (0..q * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let got = topk_select(&cosine_scores(&a, &b).map_err(|e| e.to_string())?, k).map_err(|e| e.to_string())?;
        let want = oracle::exhaustive_pairs(&rows_of(&a), &rows_of(&b), k);
        ensure(got == want, || format!("top-k case {case} differs from the exhaustive sort"))?;
    }

    let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![2.0, 0.0, -3.0, 0.0]).unwrap();
    let pairs = [ClassPairs { class: 0, positives: vec![0], negatives: vec![1] }];
    let opposed = contrastive_loss(&[&a], &b, &pairs, 1.0).map_err(|e| e.to_string())?;
    ensure((opposed - OPPOSED_PAIR).abs() <= OPPOSED_PAIR_ABS, || format!("opposed pair {opposed}"))?;

    let k = 3;
    let anchors = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.5, 0.0]).unwrap();
    let same = Tensor::new(&[2 * k, 2], vec![1.0; 4 * k]).unwrap();
    let pairs = [ClassPairs { class: 0, positives: (0..k).collect(), negatives: (k..2 * k).collect() }];
    let uniform = contrastive_loss(&[&anchors], &same, &pairs, 0.3).map_err(|e| e.to_string())?;
    let want = (1.0 + k as f64).ln();
    ensure((uniform - want).abs() <= EXACT_ABS, || format!("uniform case {uniform} vs {want}"))?;
    Ok(format!(
        "bank purity {pure}/{total}; top-k equals exhaustive sort on 200 cases; opposed pair {opposed:.4}; uniform case {uniform:.12} = ln(1+{k})"
    ))
}

// ---- 6 ---------------------------------------------------------------------

/// Reads the label of each voxel back from an image that stores voxel indices.
struct Lookup(Vec<u8>);

impl VolumeModel for Lookup {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, patch: &Tensor) -> diffcl_core::Result<Tensor> {
        let n = patch.numel();
        let mut out = vec![0.0; 2 * n];
        for (i, &v) in patch.data().iter().enumerate() {
            out[self.0[v as usize] as usize * n + i] = 1.0;
        }
        let sp = &patch.shape()[2..];
        Tensor::new(&[1, 2, sp[0], sp[1], sp[2]], out)
    }
}

fn criterion_6() -> Check {
    let mut rng = Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for case in 0..METRIC_CASES {
        let dims = [rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8)];
        let n: usize = dims.iter().product();
        let density = rng.gen_range(0.05..0.9);
        let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let spacing = [rng.gen_range(0.5..2.0), 1.0, 0.75];
        let overlap = overlap_metrics(&a, &b).map_err(|e| e.to_string())?;
        ensure(overlap == oracle::overlap(&a, &b), || format!("case {case}: overlap {overlap:?}"))?;
        let got = surface_distance_metrics(&a, &b, dims, spacing).map_err(|e| e.to_string())?;
        match oracle::surface_metrics(&a, &b, dims, spacing).map_err(|e| format!("{e:?}"))? {
            Some((hd, asd)) => {
                worst = worst.max((got.hd95 - hd).abs()).max((got.asd - asd).abs());
                ensure(!got.empty_mask && (got.hd95 - hd).abs() <= SURFACE_ABS && (got.asd - asd).abs() <= SURFACE_ABS, || {
                    format!("case {case}: hd95 {} vs {hd}, asd {} vs {asd}", got.hd95, got.asd)
                })?;
            }
            None => ensure(got.empty_mask, || format!("case {case}: empty mask not flagged"))?,
        }
    }
    let dims = [8, 8, 8];
    let label: Vec<u8> = (0..512).map(|i| u8::from(i / 64 % 3 == 0 && i % 8 > 2)).collect();
    let volume = VolumeSample::new("v", dims, (0..512).map(|i| i as f64).collect(), Some(label.clone()))
        .map_err(|e| e.to_string())?;
    let cfg = EvalConfig { patch_size: [4, 4, 4], stride: [2, 2, 2] };
    let report = evaluate(&Lookup(label), &[volume], &cfg, "").map_err(|e| e.to_string())?;
    ensure(report.mean.dice == 100.0 && report.mean.hd95 == 0.0, || format!("perfect network scored {:?}", report.mean))?;
    Ok(format!(
        "{METRIC_CASES} random mask pairs: overlap exact, surface metrics within {worst:.1e} (<= {SURFACE_ABS:.0e}); perfect network Dice 100, 95HD 0"
    ))
}

// ---- 7 and 8 ---------------------------------------------------------------

struct SmokeStudy {
    /// Per row: name and Dice per seed.
    rows: Vec<(&'static str, Vec<f64>)>,
    elapsed: Duration,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

const SMOKE_ROWS: [&str; 3] = ["supervised", "+cross-pseudo", "+contrastive"];

fn smoke_study() -> Result<SmokeStudy, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rows: Vec<(&'static str, Vec<f64>)> = SMOKE_ROWS.iter().map(|&n| (n, Vec::new())).collect();
    for seed in SMOKE_SEEDS {
        let mut base = preset("smoke").map_err(|e| e.to_string())?;
        base.seed = seed;
        base.data.synthetic.seed = seed;
        for (name, config) in ablation_rows(&base) {
            let Some(slot) = rows.iter_mut().find(|r| r.0 == name) else { continue };
            let run_dir = dir.path().join(format!("seed{seed}-{}", name.trim_start_matches('+')));
            let run = RunDir::create(&run_dir, "acceptance", &config, None).map_err(|e| e.to_string())?;
            let report = train_run(&config, &run, None, 1, false).map_err(|e| e.to_string())?;
            println!("    seed {seed} {name:<14} Dice {:6.2}  ({:.0} s elapsed)", report.mean.dice, start.elapsed().as_secs_f64());
            slot.1.push(report.mean.dice);
        }
    }
    Ok(SmokeStudy { rows, elapsed: start.elapsed() })
}

fn criterion_7(study: &Result<SmokeStudy, String>) -> Check {
    let study = study.as_ref().map_err(Clone::clone)?;
    let sup = median(&study.rows[0].1);
    let full = median(&study.rows[2].1);
    let secs = study.elapsed.as_secs_f64();
    let detail = format!(
        "median Dice full {full:.2} vs supervised-only {sup:.2} ({:+.2}, need >= {SMOKE_MARGIN}); {secs:.0} s for {} runs (budget {} s)",
        full - sup,
        SMOKE_SEEDS.len() * SMOKE_ROWS.len(),
        SMOKE_BUDGET.as_secs()
    );
    ensure(full - sup >= SMOKE_MARGIN && study.elapsed <= SMOKE_BUDGET, || detail.clone())?;
    Ok(detail)
}

fn criterion_8(study: &Result<SmokeStudy, String>) -> Check {
    let study = study.as_ref().map_err(Clone::clone)?;
    let m: Vec<f64> = study.rows.iter().map(|r| median(&r.1)).collect();
    let detail = format!(
        "median Dice supervised {:.2}, +cross-pseudo {:.2}, full {:.2} (ties within {SMOKE_TIE})",
        m[0], m[1], m[2]
    );
    ensure(m[0] <= m[1] + SMOKE_TIE && m[1] <= m[2] + SMOKE_TIE, || detail.clone())?;
    Ok(detail)
}

// ---- 9 and 10 --------------------------------------------------------------

fn diffcl(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_diffcl"))
        .args(args)
        .arg("--quiet")
        .current_dir(dir)
        .env_remove("DIFFCL_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("diffcl {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

/// Relative paths and contents of every file under `root/rel`.
fn files_under(root: &Path, rel: &str) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.join(rel)];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for e in std::fs::read_dir(&p).unwrap() {
                stack.push(e.unwrap().path());
            }
        } else {
            let name = p.strip_prefix(root).unwrap().display().to_string();
            out.push((name, std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

const SHORT_RUN: [&str; 4] = ["--set", "epochs=3", "--set", "iters_per_epoch=2"];

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for out in ["a", "b"] {
        let mut args = vec!["train", "--preset", "smoke", "--out", out];
        args.extend(SHORT_RUN);
        diffcl(dir.path(), &args)?;
    }
    let mut compared = 0;
    for rel in ["checkpoints", "eval", "history.csv", "config.toml"] {
        let a = files_under(&dir.path().join("a"), rel);
        let b = files_under(&dir.path().join("b"), rel);
        ensure(!a.is_empty(), || format!("run produced no {rel}"))?;
        ensure(a == b, || format!("{rel} differs between identical runs"))?;
        compared += a.len();
    }
    Ok(format!("two `diffcl train` runs: {compared} checkpoint, metric and history files bit-identical"))
}

fn criterion_10() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let five = ["--set", "epochs=5", "--set", "iters_per_epoch=1"];
    let mut straight = vec!["train", "--preset", "smoke", "--out", "straight"];
    straight.extend(five);
    diffcl(dir.path(), &straight)?;
    let mut first = vec!["train", "--preset", "smoke", "--out", "resumed", "--set", "epochs=3", "--set", "iters_per_epoch=1"];
    first.truncate(first.len());
    diffcl(dir.path(), &first)?;
    let mut rest = vec!["train", "--preset", "smoke", "--out", "resumed", "--resume", "resumed/checkpoints/epoch-0003"];
    rest.extend(five);
    diffcl(dir.path(), &rest)?;
    for epoch in [4, 5] {
        let rel = format!("checkpoints/epoch-{epoch:04}/state.bin");
        let a = std::fs::read(dir.path().join("straight").join(&rel)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("resumed").join(&rel)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{rel} differs after resuming"))?;
    }
    let metrics = |run: &str| std::fs::read(dir.path().join(run).join("eval/metrics.csv")).map_err(|e| e.to_string());
    ensure(metrics("straight")? == metrics("resumed")?, || "metrics differ after resuming".into())?;
    Ok("resume at epoch 3 of 5: epoch 4 and 5 payloads and final metrics bit-identical to the straight run".into())
}

// ---- driver ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut failures = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1} s]");
            }
        }
    };
    report(1, "kernel oracle suite", &mut criterion_1);
    report(2, "FFT and high-pass suite", &mut criterion_2);
    report(3, "diffusion suite", &mut criterion_3);
    report(4, "loss and gradient suite", &mut criterion_4);
    report(5, "label propagation suite", &mut criterion_5);
    report(6, "metric suite", &mut criterion_6);
    let study = if wanted(7) || wanted(8) {
        println!("running the smoke comparison ({} seeds x {} configurations)", SMOKE_SEEDS.len(), SMOKE_ROWS.len());
        Some(smoke_study())
    } else {
        None
    };
    if let Some(study) = &study {
        report(7, "end-to-end comparative smoke", &mut || criterion_7(study));
        report(8, "ablation monotonicity", &mut || criterion_8(study));
    }
    report(9, "determinism", &mut criterion_9);
    report(10, "resumption", &mut criterion_10);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
