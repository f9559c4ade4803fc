//! Shared test support: finite-difference gradient checking and brute-force
//! reference implementations ("oracles") that the optimized kernels are
//! checked against.

#![allow(dead_code)] // each integration-test binary uses a subset

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use triplenet_core::anchors::{iou, BBox};
use triplenet_core::tensor::{Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A tensor of the given shape with entries uniform in [lo, hi).
pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Uniform in [lo, hi) but at least `margin` away from zero, for ops with a
/// kink at the origin.
pub fn rand_tensor_off_zero(r: &mut ChaCha8Rng, shape: &[usize], span: f64, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = r.gen_range(margin..span);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Relative error of an analytic derivative against a finite-difference
/// estimate: |a - n| / max(1, |a|, |n|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

// Small enough that a step almost never straddles a ReLU/selection kink
// (which would corrupt the estimate), large enough that f64 rounding noise
// stays orders of magnitude under the tolerances.
const FD_STEP: f64 = 1e-6;

/// Check every coordinate of every input of a scalar-valued graph against
/// central differences. `build` must construct the same graph each call from
/// the inputs' current data. Returns the worst relative error.
pub fn max_grad_err(inputs: &[Tensor], build: &dyn Fn(&Tape) -> Tensor) -> f64 {
    for t in inputs {
        t.clear_grad();
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect()
    };
    for t in inputs {
        t.clear_grad();
    }

    let eval = || -> f64 {
        let tape = Tape::new();
        build(&tape).value()
    };
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + FD_STEP;
            let up = eval();
            t.data_mut()[i] = orig - FD_STEP;
            let down = eval();
            t.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ti][i], numeric));
        }
    }
    worst
}

/// Error of `analytic` against three difference quotients around a point:
/// central, forward, and backward. At smooth points the central estimate is
/// the most accurate and wins; where the loss has a kink exactly at the
/// point (ReLU zeros, tied hard-mining cuts), the central quotient measures
/// the average of the two one-sided slopes while the true derivative is one
/// of them, so agreement with either side is accepted instead.
fn three_point_err(analytic: f64, at: f64, up: f64, down: f64, h: f64) -> f64 {
    let central = rel_err(analytic, (up - down) / (2.0 * h));
    let forward = rel_err(analytic, (up - at) / h);
    let backward = rel_err(analytic, (at - down) / h);
    central.min(forward).min(backward)
}

/// Directional-derivative check for graphs too large for full-coordinate
/// sweeps: compares grad . d against difference quotients along a random
/// Rademacher direction d, plus difference quotients at `spot_checks`
/// randomly chosen single coordinates. Returns the worst relative error.
pub fn directional_grad_err(
    r: &mut ChaCha8Rng,
    inputs: &[Tensor],
    build: &dyn Fn(&Tape) -> Tensor,
    spot_checks: usize,
) -> f64 {
    for t in inputs {
        t.clear_grad();
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let loss = build(&tape);
        tape.backward(&loss).unwrap();
        inputs.iter().map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()])).collect()
    };
    for t in inputs {
        t.clear_grad();
    }
    let eval = || -> f64 {
        let tape = Tape::new();
        build(&tape).value()
    };
    let at = eval();

    let dirs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| (0..t.numel()).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .collect();
    // normalize so the step along d stays O(FD_STEP)
    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let h = FD_STEP / (total as f64).sqrt();

    let shift = |sign: f64| {
        for (t, d) in inputs.iter().zip(&dirs) {
            let mut data = t.data_mut();
            for (v, di) in data.iter_mut().zip(d) {
                *v += sign * h * di;
            }
        }
    };
    shift(1.0);
    let up = eval();
    shift(-2.0);
    let down = eval();
    shift(1.0);
    let directional: f64 = analytic
        .iter()
        .zip(&dirs)
        .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let mut worst = three_point_err(directional, at, up, down, h);

    for _ in 0..spot_checks {
        let ti = r.gen_range(0..inputs.len());
        let t = &inputs[ti];
        let i = r.gen_range(0..t.numel());
        let orig = t.data()[i];
        t.data_mut()[i] = orig + FD_STEP;
        let up = eval();
        t.data_mut()[i] = orig - FD_STEP;
        let down = eval();
        t.data_mut()[i] = orig;
        worst = worst.max(three_point_err(analytic[ti][i], at, up, down, FD_STEP));
    }
    worst
}

// ---------------------------------------------------------------------------
// brute-force oracles
// ---------------------------------------------------------------------------

/// Direct six-loop convolution, NCHW x OIHW, symmetric zero padding.
pub fn naive_conv2d(
    x: &[f64],
    (n, c_in, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for ni in 0..n {
        for co in 0..c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - padding as isize;
                                let jj = (oj * stride + kj) as isize - padding as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * c_in + ci) * h + ii as usize) * w + jj as usize];
                                let kv = k[((co * c_in + ci) * kh + ki) * kw + kj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * c_out + co) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    out
}

/// Corner-form IoU, written independently of the production center-size one.
/// Used to validate the production primitive numerically; the combinatorial
/// oracles below (NMS, matching, AP) deliberately consume the production
/// `iou` instead, because their discrete decisions are compared bit-exactly
/// and structural IoU ties (e.g. a ground truth fully inside two equal-area
/// anchors) must resolve identically on both sides.
pub fn naive_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pool-removal greedy NMS: repeatedly take the best remaining candidate
/// (highest score, ties to the lower index) and delete everything that
/// overlaps it at or above the threshold.
pub fn naive_nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut best = 0;
        for p in 1..pool.len() {
            let (i, j) = (pool[p], pool[best]);
            if scores[i] > scores[j] || (scores[i] == scores[j] && i < j) {
                best = p;
            }
        }
        let top = pool.swap_remove(best);
        kept.push(top);
        pool.retain(|&i| iou(&boxes[i], &boxes[top]) < iou_thresh);
    }
    kept
}

/// Matching by definition: every anchor at or above the IoU threshold joins
/// its best ground truth; additionally each ground truth claims its single
/// best anchor no matter the IoU, with conflicting claims resolved by IoU
/// (ties to the lower ground-truth index).
pub fn naive_match(anchors: &[BBox], gts: &[BBox], pos_iou: f64) -> Vec<Option<usize>> {
    let mut assignment = vec![None; anchors.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > 0.0 && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((v, g)) = best {
            if v >= pos_iou {
                assignment[a] = Some(g);
            }
        }
    }
    // forced phase: each GT's argmax anchor (ties to the lower anchor index);
    // an anchor claimed twice goes to the higher IoU, ties to the lower GT
    for (g, gt) in gts.iter().enumerate() {
        if anchors.is_empty() {
            break;
        }
        let mut arg = 0;
        let mut best = f64::NEG_INFINITY;
        for (a, anchor) in anchors.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best {
                best = v;
                arg = a;
            }
        }
        let stronger_claim = gts.iter().enumerate().take(g).any(|(_, other)| {
            let mut other_arg = 0;
            let mut other_best = f64::NEG_INFINITY;
            for (a, anchor) in anchors.iter().enumerate() {
                let v = iou(anchor, other);
                if v > other_best {
                    other_best = v;
                    other_arg = a;
                }
            }
            other_arg == arg && other_best >= best
        });
        if !stronger_claim {
            assignment[arg] = Some(g);
        }
    }
    assignment
}

/// Mining by repeated argmax extraction over the negatives.
pub fn naive_mine(loss: &[f64], positive: &[bool], ratio: usize, floor: usize) -> Vec<usize> {
    let npos = positive.iter().filter(|&&p| p).count();
    let want = if npos > 0 { ratio * npos } else { floor };
    let mut pool: Vec<usize> = (0..loss.len()).filter(|&i| !positive[i]).collect();
    let mut picked = Vec::new();
    for _ in 0..want {
        if pool.is_empty() {
            break;
        }
        let mut best = 0;
        for p in 1..pool.len() {
            let (i, j) = (pool[p], pool[best]);
            if loss[i] > loss[j] || (loss[i] == loss[j] && i < j) {
                best = p;
            }
        }
        picked.push(pool.swap_remove(best));
    }
    picked.sort_unstable();
    picked
}

/// A detection as the AP oracle sees it: (box, class, score) per image.
pub type OracleDet = (BBox, usize, f64);
/// Ground truth per image: (box, class).
pub type OracleGt = (BBox, usize);

/// Average precision from first principles: rank globally per class, match
/// greedily (highest IoU unclaimed ground truth of the class in the image,
/// ties to the lower index), then integrate the all-points precision
/// envelope, each envelope value found by an explicit scan over later ranks.
/// Returns per-class AP (None where the class has no ground truth).
pub fn naive_ap(
    dets: &[Vec<OracleDet>],
    gts: &[Vec<OracleGt>],
    num_classes: usize,
    iou_thresh: f64,
) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|o| o.1 == class).count()).sum();
        if n_gt == 0 {
            out.push(None);
            continue;
        }
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, per_image) in dets.iter().enumerate() {
            for (i, d) in per_image.iter().enumerate() {
                if d.1 == class {
                    ranked.push((d.2, img, i));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp_at = Vec::with_capacity(ranked.len());
        let mut tp = 0usize;
        for &(_, img, i) in &ranked {
            let det = &dets[img][i];
            let mut best: Option<(f64, usize)> = None;
            for (gi, gt) in gts[img].iter().enumerate() {
                if gt.1 != class || claimed[img][gi] {
                    continue;
                }
                let v = iou(&det.0, &gt.0);
                if v >= iou_thresh && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            if let Some((_, gi)) = best {
                claimed[img][gi] = true;
                tp += 1;
            }
            tp_at.push(tp);
        }
        let recall = |i: usize| tp_at[i] as f64 / n_gt as f64;
        let precision = |i: usize| tp_at[i] as f64 / (i + 1) as f64;
        let mut ap = 0.0;
        for i in (0..ranked.len()).rev() {
            let mut env = 0.0f64;
            for j in i..ranked.len() {
                env = env.max(precision(j));
            }
            let r_prev = if i == 0 { 0.0 } else { recall(i - 1) };
            ap += (recall(i) - r_prev) * env;
        }
        out.push(Some(ap));
    }
    out
}

/// Random boxes with comfortably positive sizes inside the unit square.
pub fn rand_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let w = r.gen_range(0.05..0.6);
            let h = r.gen_range(0.05..0.6);
            let cx = r.gen_range(w / 2.0..1.0 - w / 2.0);
            let cy = r.gen_range(h / 2.0..1.0 - h / 2.0);
            BBox::new(cx, cy, w, h)
        })
        .collect()
}

/// Boxes that overlap often: random seeds plus jittered copies, so NMS and
/// matching actually have suppression work to do.
pub fn clustered_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    let mut boxes = Vec::with_capacity(n);
    while boxes.len() < n {
        let base = rand_boxes(r, 1)[0];
        boxes.push(base);
        let copies = r.gen_range(0..3).min(n - boxes.len());
        for _ in 0..copies {
            boxes.push(BBox::new(
                (base.cx + r.gen_range(-0.05..0.05)).clamp(0.05, 0.95),
                (base.cy + r.gen_range(-0.05..0.05)).clamp(0.05, 0.95),
                (base.w * r.gen_range(0.8..1.25)).min(1.0),
                (base.h * r.gen_range(0.8..1.25)).min(1.0),
            ));
        }
    }
    boxes
}

// ---------------------------------------------------------------------------
// per-op gradient checks: each returns the worst relative error for one
// seeded random instance
// ---------------------------------------------------------------------------

pub mod opcheck {
    use std::rc::Rc;

    use rand::Rng;
    use triplenet_core::loss::{
        ce_rows, pixel_ce, segmentation_loss, smooth_l1_rows, SegStrategy, IGNORE_LABEL,
    };
    use triplenet_core::tensor::{
        add, affine_combine, batch_norm, bilinear_resize, concat_channels, conv2d, dot_const,
        global_average_pool, relu, scale_channels, sigmoid, softmax_channels, Tape, Tensor,
    };

    use super::{max_grad_err, rand_tensor, rand_tensor_off_zero, rng};

    /// Project any tensor to a scalar with fixed random weights.
    fn project(tape: &Tape, y: &Tensor, weights: &[f64]) -> Tensor {
        dot_const(tape, y, weights.to_vec())
    }

    fn proj_weights(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    pub fn conv2d_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (n, c_in, c_out) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = [1, 2, 3][r.gen_range(0..3)];
        let stride = r.gen_range(1..=2);
        let padding = r.gen_range(0..=k / 2 + 1);
        let h = r.gen_range(k..k + 4);
        let w = r.gen_range(k..k + 4);
        let x = rand_tensor(&mut r, &[n, c_in, h, w], -1.0, 1.0);
        let kernel = rand_tensor(&mut r, &[c_out, c_in, k, k], -1.0, 1.0);
        let bias = rand_tensor(&mut r, &[c_out], -0.5, 0.5);
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let wts = proj_weights(&mut r, n * c_out * ho * wo);
        max_grad_err(&[x.clone(), kernel.clone(), bias.clone()], &|tape| {
            let y = conv2d(tape, &x, &kernel, &bias, stride, padding).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn relu_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let shape = [2, 3, r.gen_range(2..5), r.gen_range(2..5)];
        let x = rand_tensor_off_zero(&mut r, &shape, 2.0, 0.05);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone()], &|tape| {
            let y = relu(tape, &x);
            project(tape, &y, &wts)
        })
    }

    pub fn sigmoid_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[2, 2, 3, 3], -3.0, 3.0);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone()], &|tape| {
            let y = sigmoid(tape, &x);
            project(tape, &y, &wts)
        })
    }

    pub fn add_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let shape = [2, r.gen_range(1..4), 3, 3];
        let a = rand_tensor(&mut r, &shape, -1.0, 1.0);
        let b = rand_tensor(&mut r, &shape, -1.0, 1.0);
        let wts = proj_weights(&mut r, a.numel());
        max_grad_err(&[a.clone(), b.clone()], &|tape| {
            let y = add(tape, &a, &b).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn bilinear_resize_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
        let (oh, ow) = (r.gen_range(1..9), r.gen_range(1..9));
        let x = rand_tensor(&mut r, &[1, 2, h, w], -1.0, 1.0);
        let wts = proj_weights(&mut r, 2 * oh * ow);
        max_grad_err(&[x.clone()], &|tape| {
            let y = bilinear_resize(tape, &x, oh, ow).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn global_average_pool_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (h, w) = (r.gen_range(1..5), r.gen_range(1..5));
        let x = rand_tensor(&mut r, &[2, 3, h, w], -1.0, 1.0);
        let wts = proj_weights(&mut r, 6);
        max_grad_err(&[x.clone()], &|tape| {
            let y = global_average_pool(tape, &x).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn concat_channels_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (c1, c2, c3) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
        let a = rand_tensor(&mut r, &[2, c1, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[2, c2, 3, 3], -1.0, 1.0);
        let c = rand_tensor(&mut r, &[2, c3, 3, 3], -1.0, 1.0);
        let wts = proj_weights(&mut r, 2 * (c1 + c2 + c3) * 9);
        max_grad_err(&[a.clone(), b.clone(), c.clone()], &|tape| {
            let y = concat_channels(tape, &[&a, &b, &c]).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn scale_channels_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (n, c) = (2, r.gen_range(1..4));
        let x = rand_tensor(&mut r, &[n, c, 3, 4], -1.0, 1.0);
        let gate = rand_tensor(&mut r, &[n, c, 1, 1], 0.1, 0.9);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone(), gate.clone()], &|tape| {
            let y = scale_channels(tape, &x, &gate).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn softmax_channels_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.gen_range(2..5);
        let x = rand_tensor(&mut r, &[2, c, 3, 3], -2.0, 2.0);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone()], &|tape| {
            let y = softmax_channels(tape, &x).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn dot_const_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone()], &|tape| dot_const(tape, &x, wts.clone()))
    }

    pub fn affine_combine_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let terms: Vec<(Tensor, f64)> = (0..3)
            .map(|_| (Tensor::scalar(r.gen_range(-1.0..1.0)), r.gen_range(-2.0..2.0)))
            .collect();
        let inputs: Vec<Tensor> = terms.iter().map(|(t, _)| t.clone()).collect();
        max_grad_err(&inputs, &|tape| affine_combine(tape, &terms))
    }

    pub fn batch_norm_train_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.gen_range(1..4);
        let x = rand_tensor(&mut r, &[3, c, 4, 4], -1.0, 1.0);
        let scale = rand_tensor(&mut r, &[c], 0.5, 1.5);
        let shift = rand_tensor(&mut r, &[c], -0.5, 0.5);
        let rm = Tensor::zeros(&[c]);
        let rv = Tensor::filled(&[c], 1.0);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone(), scale.clone(), shift.clone()], &|tape| {
            let y = batch_norm(tape, &x, &scale, &shift, &rm, &rv, 1e-5, 0.1, true).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn batch_norm_infer_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.gen_range(1..4);
        let x = rand_tensor(&mut r, &[2, c, 3, 3], -1.0, 1.0);
        let scale = rand_tensor(&mut r, &[c], 0.5, 1.5);
        let shift = rand_tensor(&mut r, &[c], -0.5, 0.5);
        let rm = rand_tensor(&mut r, &[c], -1.0, 1.0);
        let rv = rand_tensor(&mut r, &[c], 0.5, 2.0);
        let wts = proj_weights(&mut r, x.numel());
        max_grad_err(&[x.clone(), scale.clone(), shift.clone()], &|tape| {
            let y = batch_norm(tape, &x, &scale, &shift, &rm, &rv, 1e-5, 0.1, false).unwrap();
            project(tape, &y, &wts)
        })
    }

    pub fn ce_rows_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (rows, classes) = (r.gen_range(4..10), r.gen_range(2..5));
        let x = rand_tensor(&mut r, &[rows, classes], -2.0, 2.0);
        let targets: Vec<u32> = (0..rows).map(|_| r.gen_range(0..classes) as u32).collect();
        let mut selected: Vec<usize> = (0..rows).filter(|_| r.gen_bool(0.6)).collect();
        if selected.is_empty() {
            selected.push(0);
        }
        let inv_norm = 1.0 / selected.len() as f64;
        let (targets, selected) = (Rc::new(targets), Rc::new(selected));
        max_grad_err(&[x.clone()], &|tape| {
            ce_rows(tape, &x, targets.clone(), selected.clone(), inv_norm).unwrap()
        })
    }

    pub fn smooth_l1_rows_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let rows = r.gen_range(3..8);
        // both sides in [-0.45, 0.45] keeps |diff| <= 0.9, clear of the
        // |d| = 1 regime change
        let x = rand_tensor(&mut r, &[rows, 4], -0.45, 0.45);
        let targets: Vec<[f64; 4]> =
            (0..rows).map(|_| std::array::from_fn(|_| r.gen_range(-0.45..0.45))).collect();
        let mut selected: Vec<usize> = (0..rows).filter(|_| r.gen_bool(0.6)).collect();
        if selected.is_empty() {
            selected.push(0);
        }
        let inv_norm = 1.0 / selected.len() as f64;
        let (targets, selected) = (Rc::new(targets), Rc::new(selected));
        max_grad_err(&[x.clone()], &|tape| {
            smooth_l1_rows(tape, &x, targets.clone(), selected.clone(), inv_norm).unwrap()
        })
    }

    pub fn pixel_ce_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.gen_range(2..5);
        let x = rand_tensor(&mut r, &[2, c, 3, 3], -2.0, 2.0);
        let labels: Vec<u8> = (0..2 * 9)
            .map(|_| if r.gen_bool(0.15) { IGNORE_LABEL } else { r.gen_range(0..c) as u8 })
            .collect();
        let labels = Rc::new(if labels.iter().all(|&l| l == IGNORE_LABEL) {
            vec![0; 2 * 9]
        } else {
            labels
        });
        max_grad_err(&[x.clone()], &|tape| pixel_ce(tape, &x, labels.clone()).unwrap())
    }

    pub fn segmentation_loss_upsample_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.gen_range(2..4);
        let x = rand_tensor(&mut r, &[1, c, 2, 2], -2.0, 2.0);
        let labels: Vec<u8> = (0..16).map(|_| r.gen_range(0..c) as u8).collect();
        max_grad_err(&[x.clone()], &|tape| {
            segmentation_loss(tape, &x, &labels, (4, 4), SegStrategy::UpsampleLogits).unwrap()
        })
    }

    pub fn segmentation_loss_downsample_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let c = r.gen_range(2..4);
        let x = rand_tensor(&mut r, &[1, c, 3, 3], -2.0, 2.0);
        let labels: Vec<u8> = (0..36).map(|_| r.gen_range(0..c) as u8).collect();
        max_grad_err(&[x.clone()], &|tape| {
            segmentation_loss(tape, &x, &labels, (6, 6), SegStrategy::DownsampleTargets).unwrap()
        })
    }

    /// Every differentiable op with its checker.
    pub fn all() -> Vec<(&'static str, fn(u64) -> f64)> {
        vec![
            ("conv2d", conv2d_check as fn(u64) -> f64),
            ("relu", relu_check),
            ("sigmoid", sigmoid_check),
            ("add", add_check),
            ("bilinear_resize", bilinear_resize_check),
            ("global_average_pool", global_average_pool_check),
            ("concat_channels", concat_channels_check),
            ("scale_channels", scale_channels_check),
            ("softmax_channels", softmax_channels_check),
            ("dot_const", dot_const_check),
            ("affine_combine", affine_combine_check),
            ("batch_norm_train", batch_norm_train_check),
            ("batch_norm_infer", batch_norm_infer_check),
            ("ce_rows", ce_rows_check),
            ("smooth_l1_rows", smooth_l1_rows_check),
            ("pixel_ce", pixel_ce_check),
            ("segmentation_loss_upsample", segmentation_loss_upsample_check),
            ("segmentation_loss_downsample", segmentation_loss_downsample_check),
        ]
    }
}

// ---------------------------------------------------------------------------
// end-to-end gradient check through a full micro network + multi-task loss
// ---------------------------------------------------------------------------

pub mod netcheck {
    use rand::Rng;
    use triplenet_core::anchors::{match_anchors, BBox, MatchResult};
    use triplenet_core::loss::{LossWeights, SegStrategy};
    use triplenet_core::net::{ForwardOptions, Network, NetworkConfig};
    use triplenet_core::tensor::{Tape, Tensor};
    use triplenet_core::train::batch_loss;

    use super::{directional_grad_err, rng};

    /// Smallest full network: every module on, two levels, 16x16 input.
    pub fn micro_config() -> NetworkConfig {
        NetworkConfig {
            input_hw: (16, 16),
            num_classes: 2,
            encoder_channels: vec![4, 6],
            encoder_strides: vec![2, 4],
            decoder_channels: 6,
            decoder_levels: 2,
            se_reduction: 2,
            ..NetworkConfig::default()
        }
    }

    /// Directional + spot-check FD through `batch_loss` on a random
    /// instance; returns the worst relative error.
    pub fn end_to_end_check(seed: u64) -> f64 {
        let mut r = rng(seed);
        let cfg = micro_config();
        let net = Network::new(&cfg, seed).unwrap();
        let set = cfg.anchor_set().unwrap();
        let batch = 2usize;
        let (h, w) = cfg.input_hw;

        let xd: Vec<f64> = (0..batch * 3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(&[batch, 3, h, w], xd).unwrap();
        let labels: Vec<u8> =
            (0..batch * h * w).map(|_| r.gen_range(0..=cfg.num_classes) as u8).collect();
        let mut gts: Vec<Vec<(BBox, u32)>> = Vec::new();
        let mut matches: Vec<MatchResult> = Vec::new();
        for _ in 0..batch {
            let n = r.gen_range(1..=2);
            let img: Vec<(BBox, u32)> = super::rand_boxes(&mut r, n)
                .into_iter()
                .map(|b| (b, r.gen_range(1..=cfg.num_classes) as u32))
                .collect();
            let boxes: Vec<BBox> = img.iter().map(|(b, _)| *b).collect();
            matches.push(match_anchors(&set.boxes, &boxes, cfg.anchors.pos_iou));
            gts.push(img);
        }

        let params: Vec<Tensor> = net.param_tensors();
        let weights = LossWeights::default();
        let build = |tape: &Tape| {
            let (loss, _) = batch_loss(
                tape,
                &net,
                &set,
                &x,
                &labels,
                &matches,
                &gts,
                &weights,
                SegStrategy::DownsampleTargets,
                &ForwardOptions::train(),
            )
            .unwrap();
            loss
        };
        directional_grad_err(&mut r, &params, &build, 10)
    }
}

/// Randomized agreement cases shared by the brute-force oracle suite and the
/// acceptance checks. Each function runs one seeded instance and panics with
/// the seed on disagreement.
pub mod cases {
    use super::{clustered_boxes, naive_ap, naive_conv2d, naive_match, naive_mine, naive_nms, rng};
    use rand::Rng;
    use triplenet_core::anchors::{
        generate_anchors, hard_negative_mine, match_anchors, nms, AnchorConfig, BBox,
    };
    use triplenet_core::data::SceneObject;
    use triplenet_core::eval::{evaluate_detections, Detection};
    use triplenet_core::tensor::{conv2d, Tape, Tensor};

    pub const CONV_CASES: usize = 100;
    pub const CASES: usize = 200;
    pub const CONV_TOL: f64 = 1e-10;

    /// Worst absolute difference between the GEMM conv and the naive loops
    /// for one random case.
    pub fn conv_case(seed: u64) -> f64 {
        let mut r = rng(seed);
        let (n, c_in, c_out) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4));
        let (kh, kw) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let stride = r.gen_range(1..=3);
        let padding = r.gen_range(0..=2);
        let h = r.gen_range(kh.max(2 * padding + 1).max(1)..kh + 8);
        let w = r.gen_range(kw.max(2 * padding + 1).max(1)..kw + 8);
        let xd: Vec<f64> = (0..n * c_in * h * w).map(|_| r.gen_range(-1.0..1.0)).collect();
        let kd: Vec<f64> = (0..c_out * c_in * kh * kw).map(|_| r.gen_range(-1.0..1.0)).collect();
        let bd: Vec<f64> = (0..c_out).map(|_| r.gen_range(-0.5..0.5)).collect();

        let x = Tensor::from_vec(&[n, c_in, h, w], xd.clone()).unwrap();
        let k = Tensor::from_vec(&[c_out, c_in, kh, kw], kd.clone()).unwrap();
        let b = Tensor::from_vec(&[c_out], bd.clone()).unwrap();
        let tape = Tape::new();
        let y = conv2d(&tape, &x, &k, &b, stride, padding).unwrap();

        let want = naive_conv2d(&xd, (n, c_in, h, w), &kd, (c_out, kh, kw), &bd, stride, padding);
        assert_eq!(y.numel(), want.len(), "conv output size disagrees with the naive one");
        let yd = y.data();
        yd.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn nms_case(seed: u64) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=25);
        let boxes = clustered_boxes(&mut r, n);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let thresh = [0.3, 0.45, 0.5, 0.7][r.gen_range(0..4)];
        assert_eq!(
            nms(&boxes, &scores, thresh),
            naive_nms(&boxes, &scores, thresh),
            "nms disagrees at thresh {thresh} on {} boxes (seed {seed})",
            boxes.len()
        );
    }

    pub fn match_case(seed: u64) {
        let mut r = rng(seed);
        let anchors = if r.gen_bool(0.5) {
            let cfg = AnchorConfig::default();
            generate_anchors(&[(2, 2), (3, 3)], &cfg).unwrap().boxes
        } else {
            let n = r.gen_range(1..=30);
            clustered_boxes(&mut r, n)
        };
        let n_gt = r.gen_range(0..=5);
        let gts = clustered_boxes(&mut r, n_gt);
        let pos_iou = r.gen_range(0.3..0.6);
        let got = match_anchors(&anchors, &gts, pos_iou);
        assert_eq!(
            got.assignment,
            naive_match(&anchors, &gts, pos_iou),
            "matching disagrees for {} anchors, {} gts, pos_iou {pos_iou} (seed {seed})",
            anchors.len(),
            gts.len()
        );
        if !gts.is_empty() {
            assert!(got.num_positive() >= 1, "forced phase must leave no GT unmatched");
        }
    }

    pub fn mine_case(seed: u64) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=50);
        let loss: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..3.0)).collect();
        let positive: Vec<bool> = match r.gen_range(0..10) {
            0 => vec![false; n],
            1 => vec![true; n],
            _ => (0..n).map(|_| r.gen_bool(0.25)).collect(),
        };
        let ratio = r.gen_range(0..=4);
        let floor = r.gen_range(0..=8);
        assert_eq!(
            hard_negative_mine(&loss, &positive, ratio, floor),
            naive_mine(&loss, &positive, ratio, floor),
            "mining disagrees for n={n} ratio={ratio} floor={floor} (seed {seed})"
        );
    }

    pub fn ap_case(seed: u64) {
        let mut r = rng(seed);
        let num_classes = 3;
        let images = r.gen_range(1..=4);
        let mut gts: Vec<Vec<SceneObject>> = Vec::new();
        let mut dets: Vec<Vec<Detection>> = Vec::new();
        for _ in 0..images {
            let n_gt = r.gen_range(0..=4);
            let img_gts: Vec<SceneObject> = clustered_boxes(&mut r, n_gt)
                .into_iter()
                .map(|bbox| SceneObject { class: r.gen_range(1..=num_classes), bbox })
                .collect();
            let mut img_dets = Vec::new();
            // jittered copies of ground truth produce true positives...
            for gt in &img_gts {
                if r.gen_bool(0.7) {
                    let b = gt.bbox;
                    img_dets.push(Detection {
                        bbox: BBox::new(
                            (b.cx + r.gen_range(-0.03..0.03)).clamp(0.0, 1.0),
                            (b.cy + r.gen_range(-0.03..0.03)).clamp(0.0, 1.0),
                            b.w * r.gen_range(0.85..1.15),
                            b.h * r.gen_range(0.85..1.15),
                        ),
                        class: if r.gen_bool(0.8) {
                            gt.class
                        } else {
                            r.gen_range(1..=num_classes)
                        },
                        score: r.gen_range(0.0..1.0),
                    });
                }
            }
            // ...plus unrelated noise for false positives
            let n_fp = r.gen_range(0..=3);
            for bbox in clustered_boxes(&mut r, n_fp) {
                img_dets.push(Detection {
                    bbox,
                    class: r.gen_range(1..=num_classes),
                    score: r.gen_range(0.0..1.0),
                });
            }
            gts.push(img_gts);
            dets.push(img_dets);
        }

        let got = evaluate_detections(&dets, &gts, num_classes, 0.5).unwrap();
        let oracle_dets: Vec<Vec<super::OracleDet>> = dets
            .iter()
            .map(|per| per.iter().map(|d| (d.bbox, d.class, d.score)).collect())
            .collect();
        let oracle_gts: Vec<Vec<super::OracleGt>> =
            gts.iter().map(|per| per.iter().map(|o| (o.bbox, o.class)).collect()).collect();
        let want = naive_ap(&oracle_dets, &oracle_gts, num_classes, 0.5);
        assert_eq!(got.per_class, want, "per-class AP disagrees over {images} images (seed {seed})");
        let known: Vec<f64> = want.iter().filter_map(|a| *a).collect();
        let want_map =
            if known.is_empty() { 0.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
        assert_eq!(got.map, want_map, "mAP disagrees (seed {seed})");
    }
}
