//! Independent reference implementations and randomized checks shared by the
//! integration tests and the acceptance runner.
//!
//! Every check returns `Ok(summary)` or `Err(first failure)`.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fovea_core::assignment::{build_level_targets, build_targets, CellLabel};
use fovea_core::codec::{self, BoxOffsets, DEFAULT_EPS};
use fovea_core::detector::{Detector, DetectorConfig};
use fovea_core::evaluation::{
    average_recall, coco_iou_thresholds, evaluate, ImageDets, ImageGts, PROPOSAL_KS,
};
use fovea_core::geometry::assigned_levels;
use fovea_core::inference::{nms, Detection};
use fovea_core::loss::{self, FocalParams, LossParams};
use fovea_core::tensor::{
    conv2d, conv2d_backward, relu, relu_backward, sigmoid, sigmoid_backward, upsample2x_backward,
    upsample2x_nearest, Tensor,
};
use fovea_core::{AssignConfig, BBox, LabeledBox, PyramidLevel, PyramidSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// box codec

/// Encodes random boxes at random interior cells and decodes them back.
pub fn codec_roundtrip(samples: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let (iw, ih) = (1024usize, 1024usize);
    let mut worst: f64 = 0.0;
    for n in 0..samples {
        let level = PyramidLevel::new(r.random_range(2..=7), iw, ih);
        let s = level.stride as f64;
        // wide enough that some cell center lies strictly inside
        let w = r.random_range(1.5 * s..(400.0f64).max(2.0 * s));
        let h = r.random_range(1.5 * s..(400.0f64).max(2.0 * s));
        let x1 = r.random_range(0.0..iw as f64 - w);
        let y1 = r.random_range(0.0..ih as f64 - h);
        let gt = BBox::new(x1, y1, x1 + w, y1 + h);
        let inside: Vec<(usize, usize)> = (0..level.grid_h)
            .flat_map(|y| (0..level.grid_w).map(move |x| (x, y)))
            .filter(|&(x, y)| {
                let (cx, cy) = (s * (x as f64 + 0.5), s * (y as f64 + 0.5));
                gt.x1 < cx && cx < gt.x2 && gt.y1 < cy && cy < gt.y2
            })
            .collect();
        ensure(!inside.is_empty(), || format!("sample {n}: no interior cell for {gt:?}"))?;
        let (x, y) = inside[r.random_range(0..inside.len())];
        let t = codec::encode(x, y, &gt, &level, DEFAULT_EPS);
        let back = codec::decode(x, y, &t, &level, iw as f64, ih as f64);
        for (a, b) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            let rel = (a - b).abs() / b.abs().max(1.0);
            worst = worst.max(rel);
            ensure(rel < 1e-9, || {
                format!("sample {n}: {gt:?} at cell ({x},{y}) level {} decoded to {back:?}", level.level)
            })?;
        }
    }
    Ok(format!("{samples} samples, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// target assignment

/// Random boxes on a half-pixel grid so that area ties and exact region
/// boundaries come up.
pub fn random_gts(r: &mut ChaCha8Rng, iw: usize, ih: usize, count: usize, classes: usize) -> Vec<LabeledBox> {
    (0..count)
        .map(|_| {
            let max_side = (iw.min(ih) as f64).min(300.0);
            let w = (r.random_range(2.0..max_side) * 2.0).round() / 2.0;
            let h = (r.random_range(2.0..max_side) * 2.0).round() / 2.0;
            let x1 = (r.random_range(0.0..=(iw as f64 - w)) * 2.0).floor() / 2.0;
            let y1 = (r.random_range(0.0..=(ih as f64 - h)) * 2.0).floor() / 2.0;
            LabeledBox::new(BBox::new(x1, y1, x1 + w, y1 + h), r.random_range(0..classes))
        })
        .collect()
}

/// Per-cell brute-force owner: for every cell, the smallest-area (then
/// lowest-index) in-range object whose fovea region holds the cell center, or
/// whose nearest-cell fallback lands there when its region holds no center.
pub fn brute_force_owners(gts: &[LabeledBox], stride: usize, gw: usize, gh: usize, sigma: f64, eta: f64) -> Vec<Option<usize>> {
    let s = stride as f64;
    let r = 4.0 * s;
    let in_range: Vec<bool> = gts
        .iter()
        .map(|g| {
            let scale = ((g.bbox.x2 - g.bbox.x1) * (g.bbox.y2 - g.bbox.y1)).sqrt();
            r / eta <= scale && scale <= r * eta
        })
        .collect();
    let covers = |g: &LabeledBox, x: usize, y: usize| {
        let (x1, x2) = (g.bbox.x1 / s, g.bbox.x2 / s);
        let (y1, y2) = (g.bbox.y1 / s, g.bbox.y2 / s);
        let (cx, cy) = (0.5 * (x1 + x2), 0.5 * (y1 + y2));
        let (hw, hh) = (0.5 * sigma * (x2 - x1), 0.5 * sigma * (y2 - y1));
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        cx - hw <= px && px <= cx + hw && cy - hh <= py && py <= cy + hh
    };
    let nearest = |c: f64, n: usize| {
        let mut best = 0;
        for i in 1..n {
            if (i as f64 + 0.5 - c).abs() < (best as f64 + 0.5 - c).abs() {
                best = i;
            }
        }
        best
    };
    let fallback: Vec<Option<(usize, usize)>> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| {
            if !in_range[i] {
                return None;
            }
            let any = (0..gh).any(|y| (0..gw).any(|x| covers(g, x, y)));
            if any {
                return None;
            }
            let cx = 0.5 * (g.bbox.x1 / s + g.bbox.x2 / s);
            let cy = 0.5 * (g.bbox.y1 / s + g.bbox.y2 / s);
            Some((nearest(cx, gw), nearest(cy, gh)))
        })
        .collect();
    let mut owners = vec![None; gw * gh];
    for y in 0..gh {
        for x in 0..gw {
            let mut best: Option<usize> = None;
            for (i, g) in gts.iter().enumerate() {
                let claims = in_range[i] && (covers(g, x, y) || fallback[i] == Some((x, y)));
                if !claims {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => g.bbox.area() < gts[b].bbox.area(),
                };
                if better {
                    best = Some(i);
                }
            }
            owners[y * gw + x] = best;
        }
    }
    owners
}

/// `build_targets` against [`brute_force_owners`] on random images.
pub fn assignment_oracle(images: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut positives = 0usize;
    for n in 0..images {
        let iw = r.random_range(4..=40) * 8;
        let ih = r.random_range(4..=40) * 8;
        let count = r.random_range(1..=6);
        let gts = random_gts(&mut r, iw, ih, count, 3);
        let cfg = AssignConfig {
            sigma: [0.2, 0.3, 0.4, 0.5, 0.7, 1.0][r.random_range(0..6)],
            eta: [1.5, 2.0, 3.0][r.random_range(0..3)],
        };
        let pyramid = PyramidSpec::new(iw, ih, 2, 6).unwrap();
        let maps = build_targets(&gts, &pyramid, &cfg, 3).map_err(|e| e.to_string())?;
        for t in &maps {
            let lvl = t.level;
            let owners = brute_force_owners(&gts, lvl.stride, lvl.grid_w, lvl.grid_h, cfg.sigma, cfg.eta);
            for (i, (label, owner)) in t.cls.iter().zip(&owners).enumerate() {
                let expected = owner.map(|o| CellLabel::Positive {
                    category: gts[o].category,
                    object: o,
                });
                let got = label.is_positive().then_some(*label);
                ensure(got == expected, || {
                    format!(
                        "image {n} ({iw}x{ih}, {cfg:?}) level {} cell ({}, {}): got {label:?}, oracle {expected:?}; gts {gts:?}",
                        lvl.level,
                        i % lvl.grid_w,
                        i / lvl.grid_w
                    )
                })?;
                if let Some(o) = owner {
                    let (x, y) = (i % lvl.grid_w, i / lvl.grid_w);
                    let want = codec::encode(x, y, &gts[*o].bbox, &lvl, DEFAULT_EPS);
                    ensure(t.boxes[i] == want, || format!("image {n} level {} cell {i}: offsets differ", lvl.level))?;
                } else {
                    ensure(t.boxes[i] == BoxOffsets::default(), || format!("image {n}: offsets on a negative cell"))?;
                }
            }
            positives += t.pos_count;
        }
    }
    Ok(format!("{images} images, {positives} positive cells agree"))
}

/// The hand-worked fovea and offset example.
pub fn worked_example() -> Check {
    let gt = LabeledBox::new(BBox::new(64.0, 64.0, 192.0, 192.0), 0);
    let level = PyramidLevel::new(3, 512, 512);
    // eta wide enough to admit the 128 px object on the stride-8 level
    let cfg = AssignConfig { sigma: 0.4, eta: 4.0 };
    let maps = build_level_targets(&[gt], &level, &cfg);
    let cells: Vec<(usize, usize)> = maps.positives().map(|(x, y, _, _)| (x, y)).collect();
    let expected: Vec<(usize, usize)> = (13..=18).flat_map(|y| (13..=18).map(move |x| (x, y))).collect();
    ensure(cells == expected, || format!("positive cells {cells:?}"))?;
    let t = codec::encode(10, 10, &BBox::new(40.0, 40.0, 120.0, 120.0), &level, DEFAULT_EPS);
    let want = [0.318454, 0.318454, 0.117783, 0.117783];
    for (got, want) in t.to_array().iter().zip(want) {
        ensure((got - want).abs() <= 1e-5, || format!("offsets {t:?}"))?;
    }
    Ok(format!("36 cells at 13..=18 squared, offsets {:.6?}", t.to_array()))
}

/// Total positive cells over `images` is non-decreasing in sigma.
pub fn sigma_monotone(images: &[(usize, usize, Vec<LabeledBox>)], min_level: u32, max_level: u32, classes: usize) -> Check {
    let sigmas = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    let mut counts = Vec::new();
    for &sigma in &sigmas {
        let cfg = AssignConfig { sigma, eta: 2.0 };
        let mut total = 0;
        for (w, h, gts) in images {
            let pyramid = PyramidSpec::new(*w, *h, min_level, max_level).map_err(|e| e.to_string())?;
            let maps = build_targets(gts, &pyramid, &cfg, classes).map_err(|e| e.to_string())?;
            total += maps.iter().map(|m| m.pos_count).sum::<usize>();
        }
        counts.push(total);
    }
    ensure(counts.windows(2).all(|w| w[0] <= w[1]), || format!("counts {counts:?} over sigma {sigmas:?}"))?;
    Ok(format!("positives {counts:?} for sigma {sigmas:?}"))
}

/// With eta 2 and doubling basic scales, every in-range object lands on one
/// to three levels, at least two strictly inside an overlap band, and gets
/// positives on exactly those levels when alone in the image.
pub fn scale_assignment(samples: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let (iw, ih) = (1024usize, 1024usize);
    let pyramid = PyramidSpec::new(iw, ih, 2, 6).unwrap();
    let cfg = AssignConfig { sigma: 0.4, eta: 2.0 };
    let bases: Vec<f64> = pyramid.levels.iter().map(|l| 4.0 * l.stride as f64).collect();
    let (lo, hi) = (bases[0] / 2.0, bases[bases.len() - 1] * 2.0);
    let mut hist = [0usize; 4];
    // boundary scales first: every band edge is a power of two
    let mut scales: Vec<f64> = (3..=9).map(|p| f64::from(1u32 << p)).collect();
    scales.extend((0..samples).map(|_| (r.random_range(lo.ln()..hi.ln())).exp()));
    for (n, &target) in scales.iter().enumerate() {
        let aspect = if n < 7 { 1.0 } else { r.random_range(0.5f64..2.0) };
        let w = (target * aspect.sqrt()).min(iw as f64);
        let h = (target * target / w).min(ih as f64);
        let gt = BBox::new(0.0, 0.0, w, h);
        let scale = (w * h).sqrt();
        let levels = assigned_levels(&gt, &pyramid, cfg.eta);
        let oracle: Vec<u32> = pyramid
            .levels
            .iter()
            .zip(&bases)
            .filter(|(_, &b)| b / 2.0 <= scale && scale <= b * 2.0)
            .map(|(l, _)| l.level)
            .collect();
        ensure(levels == oracle, || format!("scale {scale}: levels {levels:?}, oracle {oracle:?}"))?;
        if !(lo..=hi).contains(&scale) {
            continue;
        }
        ensure((1..=3).contains(&levels.len()), || format!("scale {scale} on {} levels", levels.len()))?;
        let in_band = bases.windows(2).any(|b| b[1] / 2.0 < scale && scale < b[0] * 2.0);
        ensure(!in_band || levels.len() >= 2, || format!("scale {scale} strictly inside an overlap band but on {levels:?}"))?;
        hist[levels.len()] += 1;
        let maps = build_targets(&[LabeledBox::new(gt, 0)], &pyramid, &cfg, 1).map_err(|e| e.to_string())?;
        let with_pos: Vec<u32> = maps.iter().filter(|m| m.pos_count > 0).map(|m| m.level.level).collect();
        ensure(with_pos == levels, || format!("scale {scale}: positives on {with_pos:?}, assigned {levels:?}"))?;
    }
    Ok(format!("{} in-range objects on 1/2/3 levels: {:?}", hist.iter().sum::<usize>(), &hist[1..]))
}

// ---------------------------------------------------------------------------
// gradients

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that near-zero gradients are
/// judged by their absolute difference.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central differences of `f` around `x`, compared with `analytic`.
pub fn fd_check(name: &str, x: &[f64], analytic: &[f64], tol: f64, mut f: impl FnMut(&[f64]) -> f64) -> Result<f64, String> {
    ensure(x.len() == analytic.len(), || format!("{name}: gradient length"))?;
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        xp[i] = x[i] + FD_STEP;
        let up = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let down = f(&xp);
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], numeric);
        worst = worst.max(e);
        ensure(e < tol, || format!("{name}[{i}]: analytic {} numeric {numeric} (rel {e:.2e})", analytic[i]))?;
    }
    Ok(worst)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = r.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn focal_gradients(seed: u64, tol: f64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let classes = r.random_range(1..=3);
        let cells = r.random_range(1..=64 / classes);
        let labels: Vec<CellLabel> = (0..cells)
            .map(|_| match r.random_range(0..4) {
                0 => CellLabel::Ignore,
                1 => CellLabel::Negative,
                _ => CellLabel::Positive {
                    category: r.random_range(0..classes),
                    object: 0,
                },
            })
            .collect();
        let params = FocalParams {
            alpha: r.random_range(0.1..0.9),
            gamma: [0.0, 0.5, 2.0, 3.0][r.random_range(0..4)],
        };
        let norm = r.random_range(1.0..5.0);
        let logits = uniform(&mut r, classes * cells, -6.0, 6.0);
        let (_, grad) = loss::focal_loss(&logits, &labels, classes, &params, norm).map_err(|e| e.to_string())?;
        let w = fd_check(&format!("focal case {case}"), &logits, &grad, tol, |z| {
            loss::focal_loss(z, &labels, classes, &params, norm).unwrap().0
        })?;
        worst = worst.max(w);
    }
    Ok(worst)
}

pub fn smooth_l1_gradients(seed: u64, tol: f64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let n = r.random_range(1..=64);
        let beta = [0.11, 0.5, 1.0][r.random_range(0..3)];
        let target = uniform(&mut r, n, -2.0, 2.0);
        let resid = away_from(&mut r, n, -3.0, 3.0, &[-beta, beta], 1e-3);
        let pred: Vec<f64> = target.iter().zip(&resid).map(|(t, d)| t + d).collect();
        let norm = r.random_range(1.0..5.0);
        let (_, grad) = loss::smooth_l1(&pred, &target, beta, norm).map_err(|e| e.to_string())?;
        let w = fd_check(&format!("smooth-L1 case {case}"), &pred, &grad, tol, |p| {
            loss::smooth_l1(p, &target, beta, norm).unwrap().0
        })?;
        worst = worst.max(w);
    }
    Ok(worst)
}

/// Input, weight and bias gradients of `conv2d` under a random linear readout.
pub fn conv_gradients(seed: u64, tol: f64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let cases = [
        // n, c_in, c_out, h, w, k, stride, pad
        (1, 3, 2, 6, 6, 3, 1, 1),
        (2, 2, 3, 7, 5, 3, 2, 1),
        (1, 2, 2, 5, 6, 1, 1, 0),
        (1, 1, 2, 8, 8, 3, 2, 0),
    ];
    for (case, &(n, ci, co, h, w, k, stride, pad)) in cases.iter().enumerate() {
        let x = uniform(&mut r, n * ci * h * w, -1.0, 1.0);
        let wt = uniform(&mut r, co * ci * k * k, -0.5, 0.5);
        let b = uniform(&mut r, co, -0.5, 0.5);
        let (xs, ws, bs) = ([n, ci, h, w], [co, ci, k, k], [co]);
        let out = conv2d(&tensor(&xs, x.clone()), &tensor(&ws, wt.clone()), &tensor(&bs, b.clone()), stride, pad).map_err(|e| e.to_string())?;
        let readout = uniform(&mut r, out.len(), -1.0, 1.0);
        let g = conv2d_backward(&tensor(&xs, x.clone()), &tensor(&ws, wt.clone()), stride, pad, &tensor(out.shape(), readout.clone())).map_err(|e| e.to_string())?;
        let loss = |x: &[f64], wt: &[f64], b: &[f64]| {
            let o = conv2d(&tensor(&xs, x.to_vec()), &tensor(&ws, wt.to_vec()), &tensor(&bs, b.to_vec()), stride, pad).unwrap();
            dot(o.data(), &readout)
        };
        let label = |p: &str| format!("conv case {case} {p}");
        worst = worst.max(fd_check(&label("input"), &x, g.input.data(), tol, |v| loss(v, &wt, &b))?);
        worst = worst.max(fd_check(&label("weight"), &wt, g.weight.data(), tol, |v| loss(&x, v, &b))?);
        worst = worst.max(fd_check(&label("bias"), &b, g.bias.data(), tol, |v| loss(&x, &wt, v))?);
    }
    Ok(worst)
}

/// ReLU, sigmoid and nearest upsampling under a random linear readout.
pub fn elementwise_gradients(seed: u64, tol: f64) -> Result<f64, String> {
    let mut r = rng(seed);
    let shape = [2, 2, 3, 4];
    let n: usize = shape.iter().product();
    let readout = uniform(&mut r, n, -1.0, 1.0);
    let mut worst: f64 = 0.0;

    let x = away_from(&mut r, n, -2.0, 2.0, &[0.0], 1e-3);
    let y = relu(&tensor(&shape, x.clone()));
    let g = relu_backward(&y, &tensor(&shape, readout.clone()));
    worst = worst.max(fd_check("relu", &x, g.data(), tol, |v| dot(relu(&tensor(&shape, v.to_vec())).data(), &readout))?);

    let x = uniform(&mut r, n, -8.0, 8.0);
    let y = sigmoid(&tensor(&shape, x.clone()));
    let g = sigmoid_backward(&y, &tensor(&shape, readout.clone()));
    worst = worst.max(fd_check("sigmoid", &x, g.data(), tol, |v| dot(sigmoid(&tensor(&shape, v.to_vec())).data(), &readout))?);

    let x = uniform(&mut r, n, -2.0, 2.0);
    let up_readout = uniform(&mut r, 4 * n, -1.0, 1.0);
    let up_shape = [2, 2, 6, 8];
    let g = upsample2x_backward(&tensor(&up_shape, up_readout.clone())).map_err(|e| e.to_string())?;
    worst = worst.max(fd_check("upsample", &x, g.data(), tol, |v| {
        dot(upsample2x_nearest(&tensor(&shape, v.to_vec())).unwrap().data(), &up_readout)
    })?);
    Ok(worst)
}

/// The tiny one-level detector used by the end-to-end gradient check.
pub fn tiny_detector(seed: u64) -> Detector {
    let cfg = DetectorConfig {
        num_classes: 2,
        min_level: 2,
        max_level: 2,
        channels: 4,
        head_depth: 1,
        ..DetectorConfig::default()
    };
    Detector::new(cfg, seed).unwrap()
}

/// Every detector parameter against central differences of the total loss
/// on one 16x16 image.
pub fn detector_gradients(seed: u64, tol: f64) -> Result<f64, String> {
    let mut r = rng(seed);
    let mut det = tiny_detector(seed);
    // move off the initialization so no gradient is trivially zero
    for p in det.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    let image = tensor(&[1, 1, 16, 16], uniform(&mut r, 256, -1.0, 1.0));
    let gts = [
        LabeledBox::new(BBox::new(1.0, 2.0, 13.0, 12.0), 0),
        LabeledBox::new(BBox::new(6.0, 5.0, 15.0, 16.0), 1),
    ];
    let pyramid = det.config().pyramid(16, 16).map_err(|e| e.to_string())?;
    let targets = build_targets(&gts, &pyramid, &AssignConfig::default(), 2).map_err(|e| e.to_string())?;
    let params = LossParams::default();
    let (_, grads) = det.forward_backward(&image, &targets, &params, 3.0).map_err(|e| e.to_string())?;
    let names = det.param_names();
    let mut worst: f64 = 0.0;
    for (p, name) in names.iter().enumerate() {
        let x = det.params()[p].data().to_vec();
        let mut probe = det.clone();
        worst = worst.max(fd_check(name, &x, &grads.0[p], tol, |v| {
            probe.params_mut()[p].data_mut().copy_from_slice(v);
            let out = probe.forward(&image).unwrap();
            loss::total_loss_with_normalizer(&out, &targets, &params, 3.0).unwrap().0.total
        })?);
    }
    Ok(worst)
}

/// The layer-level checks at `tol` plus the end-to-end check at `e2e_tol`.
pub fn gradient_suite(seed: u64, tol: f64, e2e_tol: f64) -> Check {
    let parts = [
        ("focal", focal_gradients(seed, tol)?),
        ("smooth-L1", smooth_l1_gradients(seed + 1, tol)?),
        ("conv", conv_gradients(seed + 2, tol)?),
        ("relu/sigmoid/upsample", elementwise_gradients(seed + 3, tol)?),
        ("detector", detector_gradients(seed + 4, e2e_tol)?),
    ];
    Ok(parts
        .iter()
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", "))
}

// ---------------------------------------------------------------------------
// NMS

fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |c: &BBox| (c.x2 - c.x1).max(0.0) * (c.y2 - c.y1).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Repeatedly keeps the best remaining box (lowest index on equal scores) and
/// drops everything overlapping it by more than `thr`.
pub fn reference_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && ref_iou(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    keep
}

pub fn nms_oracle(instances: usize, max_n: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut kept = 0;
    for case in 0..instances {
        let n = if case == 0 { max_n } else { r.random_range(0..=max_n) };
        // coarse grids make equal scores, duplicate boxes and exact-threshold IoUs common
        let quant = [0.0, 0.05, 0.25][case % 3];
        let mut boxes = Vec::with_capacity(n);
        let mut scores = Vec::with_capacity(n);
        for _ in 0..n {
            if !boxes.is_empty() && r.random_bool(0.1) {
                boxes.push(boxes[r.random_range(0..boxes.len())]);
            } else {
                let x1 = r.random_range(0..200) as f64;
                let y1 = r.random_range(0..200) as f64;
                boxes.push(BBox::new(x1, y1, x1 + r.random_range(1..60) as f64, y1 + r.random_range(1..60) as f64));
            }
            let s: f64 = r.random_range(0.0..1.0);
            scores.push(if quant > 0.0 { (s / quant).round() * quant } else { s });
        }
        let thr = [0.3, 0.5, 0.7, 1.0 / 3.0][r.random_range(0..4)];
        let got = nms(&boxes, &scores, thr);
        let want = reference_nms(&boxes, &scores, thr);
        ensure(got == want, || format!("instance {case} (n = {n}, thr {thr}): {got:?} vs {want:?}"))?;
        kept += got.len();
    }
    Ok(format!("{instances} instances up to n = {max_n}, {kept} boxes kept in total"))
}

// ---------------------------------------------------------------------------
// evaluation

/// Greedy COCO matching for one image and class at IoU `thr`: detections in
/// descending score order (stable) each take the untaken gt of highest IoU,
/// the later gt on equal IoU. Returns `(score, is_tp)` per detection.
pub fn reference_match(dets: &[(f64, BBox)], gts: &[BBox], thr: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0));
    let floor = thr.min(1.0 - 1e-10);
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .take(100)
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = ref_iou(&dets[d].1, gt);
                if taken[g] || v < floor {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v >= bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (dets[d].0, best.is_some())
        })
        .collect()
}

/// 101-point interpolated AP from pooled `(score, is_tp)` outcomes: at each
/// recall point, the best precision among ranks reaching that recall.
pub fn reference_ap(mut outcomes: Vec<(f64, bool)>, num_gts: usize) -> f64 {
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, (_, hit)) in outcomes.iter().enumerate() {
        tp += usize::from(*hit);
        points.push((tp as f64 / num_gts as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let target = i as f64 / 100.0;
        sum += points
            .iter()
            .filter(|(rec, _)| *rec >= target)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    sum / 101.0
}

/// Mean AP over `thresholds` and the classes that have gts.
pub fn reference_map(dets: &[ImageDets], gts: &[ImageGts], classes: usize, thresholds: &[f64]) -> Option<f64> {
    let mut vals = Vec::new();
    for &t in thresholds {
        for c in 0..classes {
            let mut pooled = Vec::new();
            let mut num_gts = 0;
            for img in gts {
                let g: Vec<BBox> = img.gts.iter().filter(|b| b.category == c).map(|b| b.bbox).collect();
                let d: Vec<(f64, BBox)> = dets
                    .iter()
                    .filter(|d| d.image_id == img.image_id)
                    .flat_map(|d| d.dets.iter())
                    .filter(|d| d.category == c)
                    .map(|d| (d.score, d.bbox))
                    .collect();
                num_gts += g.len();
                pooled.extend(reference_match(&d, &g, t));
            }
            if num_gts > 0 {
                vals.push(reference_ap(pooled, num_gts));
            }
        }
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn small_box(r: &mut ChaCha8Rng) -> BBox {
    let x1 = r.random_range(0..40) as f64;
    let y1 = r.random_range(0..40) as f64;
    BBox::new(x1, y1, x1 + r.random_range(4..30) as f64, y1 + r.random_range(4..30) as f64)
}

/// A random case with at most `max_boxes` gts and detections per image;
/// detections are often jittered copies of gts so that matches happen.
pub fn random_eval_case(r: &mut ChaCha8Rng, max_boxes: usize, classes: usize) -> (Vec<ImageDets>, Vec<ImageGts>) {
    let images = r.random_range(1..=3);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for id in 0..images {
        let g: Vec<LabeledBox> = (0..r.random_range(0..=max_boxes))
            .map(|_| LabeledBox::new(small_box(r), r.random_range(0..classes)))
            .collect();
        let d: Vec<Detection> = (0..r.random_range(0..=max_boxes))
            .map(|_| {
                let (bbox, category) = if !g.is_empty() && r.random_bool(0.7) {
                    let src = g[r.random_range(0..g.len())];
                    let j = |r: &mut ChaCha8Rng| r.random_range(-3..=3) as f64;
                    let b = src.bbox;
                    (BBox::new(b.x1 + j(r), b.y1 + j(r), b.x2 + j(r), b.y2 + j(r)), src.category)
                } else {
                    (small_box(r), r.random_range(0..classes))
                };
                // a coarse score grid produces ties
                let score = f64::from(r.random_range(1..=8u32)) / 8.0;
                Detection { bbox, category, score }
            })
            .collect();
        gts.push(ImageGts { image_id: id, gts: g });
        dets.push(ImageDets { image_id: id, dets: d });
    }
    (dets, gts)
}

/// Ground truth fed back as detections scores exactly one.
pub fn perfect_detections(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let (_, gts) = random_eval_case(&mut r, 6, 3);
        if gts.iter().all(|g| g.gts.is_empty()) {
            continue;
        }
        let dets: Vec<ImageDets> = gts
            .iter()
            .map(|g| ImageDets {
                image_id: g.image_id,
                dets: g.gts.iter().map(|b| Detection { bbox: b.bbox, category: b.category, score: 1.0 }).collect(),
            })
            .collect();
        let res = evaluate(&dets, &gts, 3, &coco_iou_thresholds()).map_err(|e| e.to_string())?;
        ensure(res.ap == 1.0 && res.ap50 == 1.0 && res.ap75 == 1.0, || format!("case {case}: {res:?}"))?;
    }
    Ok(())
}

/// `evaluate` against [`reference_map`].
pub fn evaluator_oracle(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let thresholds = coco_iou_thresholds();
    for case in 0..cases {
        let (dets, gts) = random_eval_case(&mut r, 6, 2);
        let res = evaluate(&dets, &gts, 2, &thresholds).map_err(|e| e.to_string())?;
        let checks = [
            (res.ap, reference_map(&dets, &gts, 2, &thresholds)),
            (res.ap50, reference_map(&dets, &gts, 2, &[0.5])),
            (res.ap75, reference_map(&dets, &gts, 2, &[0.75])),
        ];
        for (got, want) in checks {
            let want = want.unwrap_or(0.0);
            ensure((got - want).abs() < 1e-12, || format!("case {case}: evaluator {got}, reference {want}; dets {dets:?} gts {gts:?}"))?;
        }
    }
    Ok(())
}

/// AR@100 <= AR@300 <= AR@1000 on random proposal sets.
pub fn recall_monotone(cases: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let mut gts = Vec::new();
        let mut props = Vec::new();
        for id in 0..r.random_range(1..=3u64) {
            let g: Vec<LabeledBox> = (0..r.random_range(0..=12)).map(|_| LabeledBox::new(small_box(&mut r), 0)).collect();
            let p: Vec<Detection> = (0..r.random_range(0..=1500))
                .map(|_| Detection { bbox: small_box(&mut r), category: 0, score: r.random_range(0.0..1.0) })
                .collect();
            gts.push(ImageGts { image_id: id, gts: g });
            props.push(ImageDets { image_id: id, dets: p });
        }
        let ar: BTreeMap<usize, f64> = average_recall(&props, &gts, &PROPOSAL_KS).map_err(|e| e.to_string())?;
        let v: Vec<f64> = PROPOSAL_KS.iter().map(|k| ar[k]).collect();
        ensure(v.windows(2).all(|w| w[0] <= w[1]), || format!("case {case}: AR {v:?}"))?;
    }
    Ok(())
}

pub fn evaluator_suite(seed: u64) -> Check {
    perfect_detections(50, seed)?;
    evaluator_oracle(200, seed + 1)?;
    recall_monotone(30, seed + 2)?;
    Ok("perfect detections score 1, 200 cases match the reference matcher, AR monotone in k".into())
}
