//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the criteria execute in order on a
//! single thread and the wall-clock budgets are measured without
//! interference. Set `ACCEPTANCE_ONLY=1,4,10` to run a subset.

mod support;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg_core::acam::AxisAwareBlock;
use roadseg_core::checks::{run_gradcheck, CheckTarget, GRADCHECK_TOLERANCE};
use roadseg_core::config::{Profile, TrainConfig};
use roadseg_core::data::{normalize, RasterSample};
use roadseg_core::gam::Gam;
use roadseg_core::gradcheck::GradCheckOptions;
use roadseg_core::losses::{bce_loss, deep_supervised_loss, dice_loss, LossWeights, DICE_SMOOTH};
use roadseg_core::metrics::{roc_auc, threshold_mask, ConfusionCounts};
use roadseg_core::network::{ModelConfig, RoadNet, Toggles};
use roadseg_core::nn::{Graph, Mode, ParamStore};
use roadseg_core::ram::Ram;
use roadseg_core::synth::{generate_sample, SynthConfig};
use roadseg_core::tensor::Tensor;
use roadseg_core::tiling::{plan_windows, predict_mosaic, predict_probabilities, window_tensor, RgbRaster};
use roadseg_core::train::Trainer;
use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut pass = true;
    for target in CheckTarget::ALL {
        match run_gradcheck(target, 8, &opts) {
            Ok(r) => {
                pass &= r.max_rel_err < GRADCHECK_TOLERANCE;
                worst = worst.max(r.max_rel_err);
                parts.push(format!("{target} {:.1e}", r.max_rel_err));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{target} error: {e}"));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        pass && secs < 300.0,
        format!("max rel err {worst:.2e} < 1e-4 in {secs:.0}s (< 300s) [{}]", parts.join(", ")),
    )
}

fn c2_equation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut gam_err, mut ram_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let mut store = ParamStore::<f64>::new();
        let c = 64;
        let gam = Gam::new(&mut store, &mut rng, "gam", c);
        let ram = Ram::new(&mut store, &mut rng, "ram", c);
        randomize_params(&mut store, &mut rng, 0.2);
        let f3 = random_tensor(&mut rng, [2, c, 4, 4], 1.0);
        let f4 = random_tensor(&mut rng, [2, c, 2, 2], 1.0);
        let f5 = random_tensor(&mut rng, [2, c, 1, 1], 1.0);
        let guide = random_tensor(&mut rng, [2, 1, 4, 4], 2.0);
        let (want_g, want4, want3) = gam_oracle(&store, &gam, &f3, &f4, &f5);
        let (want_fg, want_bg, want_ref, want_side) = ram_oracle(&store, &ram, &f3, &guide);
        let mut g = Graph::new(&mut store, Mode::Train);
        let (v3, v4, v5, vr) = (g.input(f3), g.input(f4), g.input(f5), g.input(guide));
        let out = gam.forward(&mut g, v3, v4, v5).unwrap();
        let r = ram.forward(&mut g, v3, vr).unwrap();
        for (got, want) in [(out.global, &want_g), (out.f4_dense, &want4), (out.f3_dense, &want3)] {
            gam_err = gam_err.max(max_abs_diff(g.tape.value(got), want));
        }
        for (got, want) in [
            (r.foreground, &want_fg),
            (r.background, &want_bg),
            (r.refined, &want_ref),
            (r.side, &want_side),
        ] {
            ram_err = ram_err.max(max_abs_diff(g.tape.value(got), want));
        }
    }
    outcome(
        gam_err < 1e-6 && ram_err < 1e-6,
        format!("50 random inputs: aggregation max |diff| {gam_err:.1e}, refinement max |diff| {ram_err:.1e} (< 1e-6)"),
    )
}

fn c3_axial_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut err = 0.0f64;
    for _ in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let block = AxisAwareBlock::new(&mut store, &mut rng, "aab", 8);
        randomize_params(&mut store, &mut rng, 0.5);
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random_tensor(&mut rng, [n, 8, h, w], 1.0);
        let want = axial_oracle(&store, &block, &x);
        let mut g = Graph::new(&mut store, Mode::Train);
        let v = g.input(x);
        let got = block.forward(&mut g, v).unwrap();
        err = err.max(max_abs_diff(g.tape.value(got), &want));
    }
    outcome(err < 1e-6, format!("20 random 8-channel inputs up to 8x8: max |diff| {err:.1e} (< 1e-6)"))
}

fn c4_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let density: f64 = rng.random();
        let pred: Vec<u8> = (0..256).map(|_| rng.random_bool(density) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| rng.random_bool(density) as u8).collect();
        let c = ConfusionCounts::from_masks(&pred, &gt).unwrap();
        let (tp, fp, fn_, tn) = brute_counts(&pred, &gt);
        let empty = tp + fp + fn_ == 0;
        let frac = |a: u64, b: u64| if b == 0 { if empty { 1.0 } else { 0.0 } } else { a as f64 / b as f64 };
        let (p, r) = (frac(tp, tp + fp), frac(tp, tp + fn_));
        let f1 = if empty {
            1.0
        } else if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        let s = c.scores();
        let same = (c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn)
            && s.iou == frac(tp, tp + fp + fn_)
            && s.precision == p
            && s.recall == r
            && s.f1 == f1;
        mismatches += (!same) as usize;
    }
    // dense thresholds: scores on the threshold grid so every distinct
    // value is its own operating point
    let n = 1001;
    let mut auc_err = 0.0f64;
    for _ in 0..20 {
        let gt: Vec<u8> = (0..500).map(|_| rng.random_bool(0.3) as u8).collect();
        let score: Vec<f64> = gt
            .iter()
            .map(|&g| {
                let k = (rng.random_range(0..600) + 400 * g as usize) as f64;
                k / (n - 1) as f64
            })
            .collect();
        let auc = roc_auc(&score, &gt, n).unwrap().auc;
        auc_err = auc_err.max((auc - rank_auc(&score, &gt)).abs());
    }
    let gt: Vec<u8> = (0..100).map(|i| (i % 3 == 0) as u8).collect();
    let constant = roc_auc(&vec![0.37; 100], &gt, n).unwrap().auc;
    let pass = mismatches == 0 && auc_err < 1e-9 && (constant - 0.5).abs() < 1e-9;
    outcome(
        pass,
        format!(
            "1000 mask pairs: {mismatches} mismatches; AUC vs rank statistic max |diff| {auc_err:.1e}; constant AUC {constant}"
        ),
    )
}

fn c5_loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut dice_ok = true;
    let mut dice_worst = 0.0f64;
    for _ in 0..20 {
        let y = Tensor::from_fn([2, 1, 8, 8], |_| rng.random_bool(0.3) as u8 as f64);
        let d = dice_loss(&y, &y).unwrap();
        let size = y.data().iter().sum::<f64>() / 2.0;
        let bound = 2.0 * DICE_SMOOTH / (2.0 * size + DICE_SMOOTH);
        dice_ok &= d <= bound;
        dice_worst = dice_worst.max(d);
    }
    let y = Tensor::from_fn([2, 1, 8, 8], |_| rng.random_bool(0.5) as u8 as f64);
    let half = Tensor::full([2, 1, 8, 8], 0.5);
    let bce_err = (bce_loss(&half, &y).unwrap() - std::f64::consts::LN_2).abs();
    let sides: [Tensor<f64>; 5] = std::array::from_fn(|_| random_tensor(&mut rng, [2, 1, 8, 8], 2.0));
    let w1 = LossWeights::new([1.3, 1.0, 0.7, 0.7, 1.0]).unwrap();
    let w2 = LossWeights::new([0.2, 0.5, 0.0, 1.5, 0.3]).unwrap();
    let (a, b) = (0.7, 2.5);
    let mix = LossWeights::new(std::array::from_fn(|i| a * w1.0[i] + b * w2.0[i])).unwrap();
    let l1 = deep_supervised_loss(&sides, &y, &w1).unwrap().total;
    let l2 = deep_supervised_loss(&sides, &y, &w2).unwrap().total;
    let lm = deep_supervised_loss(&sides, &y, &mix).unwrap().total;
    let lin_err = (lm - (a * l1 + b * l2)).abs();
    outcome(
        dice_ok && bce_err < 1e-9 && lin_err < 1e-9,
        format!("dice(P=Y) max {dice_worst:.1e} within bound; |bce(0.5) - ln2| {bce_err:.1e}; linearity |diff| {lin_err:.1e}"),
    )
}

fn c6_shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f32>::new();
    let net = RoadNet::new(&mut store, &mut rng, ModelConfig::default()).unwrap();
    let mut ok = true;
    for s in [64, 96, 160] {
        let mut g = Graph::new(&mut store, Mode::Eval);
        let x = g.input(Tensor::from_fn([1, 3, s, s], |i| ((i % 97) as f32 / 48.0) - 1.0));
        let sides = net.forward(&mut g, x).unwrap();
        ok &= sides.maps.iter().all(|&m| g.tape.shape(m) == [1, 1, s, s]);
    }
    let mut g = Graph::new(&mut store, Mode::Eval);
    let x = g.input(Tensor::zeros([1, 3, 100, 100]));
    let rejected = net.forward(&mut g, x).is_err();
    outcome(
        ok && rejected,
        format!("64/96/160 give five full-resolution maps: {ok}; 100x100 rejected: {rejected}"),
    )
}

fn tiny_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::profile(Profile::Tiny);
    c.epochs = epochs;
    c
}

fn c7_overfit() -> Outcome {
    let t0 = Instant::now();
    let synth = SynthConfig {
        width_px: (4, 8),
        seed: 1,
        ..Default::default()
    };
    let train: Vec<RasterSample> = (0..8).map(|i| generate_sample(&synth, i).unwrap()).collect();
    let mut cfg = tiny_config(150);
    cfg.lr_drops.clear();
    cfg.flip_prob = 0.0;
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let mut t = Trainer::new(cfg).unwrap();
    t.fit(&train, &[], |_, _| Ok(())).unwrap();
    let steps = t.epoch * steps_per_epoch;
    let iou = t.evaluate(&train).unwrap().micro().iou;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        iou >= 0.90 && steps <= 300 && secs < 600.0,
        format!("train IoU {iou:.4} (>= 0.90) after {steps} steps in {secs:.0}s; roads 4-8 px wide, no flips"),
    )
}

/// Train/val split of the generalization run.
fn generalization_split() -> (Vec<RasterSample>, Vec<RasterSample>) {
    let train_cfg = SynthConfig {
        seed: 1,
        ..Default::default()
    };
    let val_cfg = SynthConfig {
        seed: 2,
        ..Default::default()
    };
    (
        (0..200).map(|i| generate_sample(&train_cfg, i).unwrap()).collect(),
        (0..50).map(|i| generate_sample(&val_cfg, i).unwrap()).collect(),
    )
}

struct RunResult {
    losses: Vec<f64>,
    val_iou: Vec<f64>,
    masks: Vec<Vec<u8>>,
    secs: f64,
}

fn generalization_run(toggles: Toggles, train: &[RasterSample], val: &[RasterSample]) -> RunResult {
    let t0 = Instant::now();
    let mut cfg = tiny_config(30);
    cfg.toggles = toggles;
    let mut t = Trainer::new(cfg).unwrap();
    t.fit(train, val, |_, _| Ok(())).unwrap();
    let masks = val
        .iter()
        .map(|s| {
            let b = normalize::<f32>(std::slice::from_ref(s), &t.config.normalization).unwrap();
            let p = predict_probabilities(&t.net, &mut t.store, b.images).unwrap();
            threshold_mask(p.data())
        })
        .collect();
    RunResult {
        losses: t.history.iter().map(|r| r.train_loss).collect(),
        val_iou: t.history.iter().map(|r| r.val.unwrap().iou).collect(),
        masks,
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn c8_generalization(run: &RunResult) -> Outcome {
    let best = run.val_iou.iter().cloned().fold(0.0, f64::max);
    let last = *run.val_iou.last().unwrap();
    outcome(
        best >= 0.60 && run.secs < 1800.0,
        format!("val IoU best {best:.4}, final {last:.4} (>= 0.60) over 30 epochs in {:.0}s", run.secs),
    )
}

fn c9_ablation(full: &RunResult, base: &RunResult) -> Outcome {
    let f = *full.val_iou.last().unwrap();
    let b = *base.val_iou.last().unwrap();
    outcome(f >= b, format!("final val IoU full {f:.4} vs baseline {b:.4}"))
}

fn c10_stitching() -> Outcome {
    let mut t = Trainer::new(TrainConfig::profile(Profile::Tiny)).unwrap();
    let norm = t.config.normalization;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let direct = |t: &mut Trainer, rgb: &[u8], h: usize, w: usize| -> Vec<f64> {
        let x = window_tensor::<f32>(rgb, h, w, &norm);
        let p = predict_probabilities(&t.net, &mut t.store, x).unwrap();
        p.data().iter().map(|&v| v as f64).collect()
    };

    // one window covers the raster
    let rgb: Vec<u8> = (0..96 * 96 * 3).map(|_| rng.random()).collect();
    let raster = RgbRaster::new(96, 96, rgb.clone()).unwrap();
    let plan = plan_windows(96, 96, 96, 64).unwrap();
    let mosaic = predict_mosaic(&raster, &plan, |w, h, wd| Ok(direct(&mut t, w, h, wd))).unwrap().prob();
    let single = direct(&mut t, &rgb, 96, 96);
    let identical = plan.origins.len() == 1 && mosaic == single;

    // two windows overlapping in columns 64..96
    let (h, w) = (96, 160);
    let rgb: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    let raster = RgbRaster::new(h, w, rgb).unwrap();
    let plan = plan_windows(h, w, 96, 64).unwrap();
    let mosaic = predict_mosaic(&raster, &plan, |win, wh, ww| Ok(direct(&mut t, win, wh, ww))).unwrap().prob();
    let left = direct(&mut t, &raster.padded_window(0, 0, 96, 96), 96, 96);
    let right = direct(&mut t, &raster.padded_window(0, 64, 96, 96), 96, 96);
    // whole-raster inference, reported for reference: global context makes
    // it differ from any windowed prediction
    let whole = direct(&mut t, &raster.rgb, h, w);
    let (mut exact, mut overlap_err, mut whole_err) = (true, 0.0f64, 0.0f64);
    for r in 0..h {
        for c in 0..w {
            let m = mosaic[r * w + c];
            if c < 64 {
                exact &= m == left[r * 96 + c];
            } else if c >= 96 {
                exact &= m == right[r * 96 + c - 64];
            } else {
                let want = 0.5 * (left[r * 96 + c] + right[r * 96 + c - 64]);
                overlap_err = overlap_err.max((m - want).abs());
                whole_err = whole_err.max((m - whole[r * w + c]).abs());
            }
        }
    }
    outcome(
        identical && exact && plan.origins.len() == 2 && overlap_err < 1e-5,
        format!(
            "single window bit-identical: {identical}; two windows: singly covered pixels exact: {exact}, overlap vs per-window direct mean max |diff| {overlap_err:.1e} (whole-raster inference differs by up to {whole_err:.1e}, informational)"
        ),
    )
}

fn c11_reproducibility(a: &RunResult, b: &RunResult) -> Outcome {
    let loss_err = a.losses.iter().zip(&b.losses).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let same_masks = a.masks == b.masks;
    outcome(
        a.losses.len() == b.losses.len() && loss_err < 1e-6 && same_masks,
        format!("epoch-loss max |diff| {loss_err:.1e} (< 1e-6); final val masks identical: {same_masks}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |k: usize, name: &'static str, o: Outcome| {
        println!("criterion {k:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, name, o));
    };
    type Check = fn() -> Outcome;
    let quick: [(usize, &str, Check); 7] = [
        (1, "gradient suite", c1_gradients),
        (2, "equation oracles", c2_equation_oracles),
        (3, "axial-attention oracle", c3_axial_oracle),
        (4, "metric oracles", c4_metric_oracles),
        (5, "loss identities", c5_loss_identities),
        (6, "shape contract", c6_shapes),
        (7, "overfit", c7_overfit),
    ];
    for (k, name, f) in quick {
        if wanted(k) {
            report(k, name, f());
        }
    }
    if wanted(8) || wanted(9) || wanted(11) {
        let (train, val) = generalization_split();
        let full = generalization_run(Toggles::FULL, &train, &val);
        if wanted(8) {
            report(8, "synthetic generalization", c8_generalization(&full));
        }
        if wanted(9) {
            let base = generalization_run(Toggles::BASELINE, &train, &val);
            report(9, "ablation direction", c9_ablation(&full, &base));
        }
        if wanted(10) {
            report(10, "stitching consistency", c10_stitching());
        }
        if wanted(11) {
            let again = generalization_run(Toggles::FULL, &train, &val);
            report(11, "reproducibility", c11_reproducibility(&full, &again));
        }
    } else if wanted(10) {
        report(10, "stitching consistency", c10_stitching());
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
