//! Multi-task training losses: hard-mined softmax cross-entropy + smooth-L1
//! for detection, per-pixel cross-entropy for segmentation (class-aware and
//! class-agnostic), and the weighted combination.
//!
//! The loss kernels are fused tape ops with analytic backwards rather than
//! compositions of elementwise ops; cross-entropy is stabilized by max
//! subtraction everywhere.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::anchors::{encode_box, hard_negative_mine, AnchorSet, BBox, MatchResult};
use crate::error::{CoreError, Result};
use crate::tensor::{bilinear_resize, Tape, Tensor};

pub const IGNORE_LABEL: u8 = 255;

/// Softmax cross-entropy of one logit row against a target index.
pub fn softmax_ce_row(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Per-row CE for a flat [rows, classes] buffer.
pub fn per_row_ce(rows: &[f64], classes: usize, targets: &[u32]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| softmax_ce_row(&rows[r * classes..(r + 1) * classes], t as usize))
        .collect()
}

/// Rearrange per-level head maps [B, A*C, H, W] into anchor rows [B*G, C],
/// matching the flat anchor order of `layout` (level -> row -> col -> ratio).
/// Channel a*C + c of a head map holds channel c of the cell's a-th anchor.
pub fn gather_anchor_rows(
    tape: &Tape,
    levels: &[Tensor],
    layout: &AnchorSet,
    channels: usize,
) -> Result<Tensor> {
    if levels.len() != layout.level_dims.len() {
        return Err(CoreError::shape(format!(
            "{} head maps for {} anchor levels",
            levels.len(),
            layout.level_dims.len()
        )));
    }
    let a = layout.num_ratios;
    let (batch, ..) = levels[0].dims4()?;
    for (l, t) in levels.iter().enumerate() {
        let (n, c, h, w) = t.dims4()?;
        let (lh, lw) = layout.level_dims[l];
        if n != batch || c != a * channels || (h, w) != (lh, lw) {
            return Err(CoreError::shape(format!(
                "head map {l} has shape {:?}, want [{batch},{},{lh},{lw}]",
                t.shape(),
                a * channels
            )));
        }
    }
    let g = layout.len();
    let mut out = vec![0.0; batch * g * channels];
    for (l, t) in levels.iter().enumerate() {
        let (h, w) = layout.level_dims[l];
        let off = layout.level_offsets[l];
        let td = t.data();
        for b in 0..batch {
            for i in 0..h {
                for j in 0..w {
                    for ai in 0..a {
                        let row = b * g + off + (i * w + j) * a + ai;
                        for c in 0..channels {
                            let src = ((b * (a * channels) + ai * channels + c) * h + i) * w + j;
                            out[row * channels + c] = td[src];
                        }
                    }
                }
            }
        }
    }
    let y = Tensor::from_vec(&[batch * g, channels], out)?;
    let yc = y.clone();
    let inputs: Vec<Tensor> = levels.to_vec();
    let parts = inputs.clone();
    let dims: Vec<(usize, usize)> = layout.level_dims.clone();
    let offsets: Vec<usize> = layout.level_offsets.clone();
    tape.record("gather_anchor_rows", inputs, y.clone(), move || {
        let gg = yc.grad_guard();
        let go = gg.as_deref().unwrap();
        for (l, t) in parts.iter().enumerate() {
            let (h, w) = dims[l];
            let off = offsets[l];
            t.with_grad_mut(|dt| {
                for b in 0..batch {
                    for i in 0..h {
                        for j in 0..w {
                            for ai in 0..a {
                                let row = b * g + off + (i * w + j) * a + ai;
                                for c in 0..channels {
                                    let dst = ((b * (a * channels) + ai * channels + c) * h + i) * w + j;
                                    dt[dst] += go[row * channels + c];
                                }
                            }
                        }
                    }
                }
            });
        }
    });
    Ok(y)
}

/// Summed CE over `selected` rows, times `inv_norm`. One fused tape node.
pub fn ce_rows(
    tape: &Tape,
    rows: &Tensor,
    targets: Rc<Vec<u32>>,
    selected: Rc<Vec<usize>>,
    inv_norm: f64,
) -> Result<Tensor> {
    let s = rows.shape();
    if s.len() != 2 {
        return Err(CoreError::shape(format!("ce_rows wants [rows, classes], got {s:?}")));
    }
    let (r, c) = (s[0], s[1]);
    if targets.len() != r {
        return Err(CoreError::shape("ce_rows targets length mismatch"));
    }
    for &i in selected.iter() {
        if i >= r {
            return Err(CoreError::invalid(format!("selected row {i} out of {r}")));
        }
        if targets[i] as usize >= c {
            return Err(CoreError::invalid(format!(
                "class target {} out of {c} classes",
                targets[i]
            )));
        }
    }
    let rd = rows.data();
    let total: f64 = selected
        .iter()
        .map(|&i| softmax_ce_row(&rd[i * c..(i + 1) * c], targets[i] as usize))
        .sum();
    drop(rd);
    let y = Tensor::scalar(total * inv_norm);
    let (rows_c, yc) = (rows.clone(), y.clone());
    tape.record("ce_rows", vec![rows.clone()], y.clone(), move || {
        let gg = yc.grad_guard();
        let gv = gg.as_deref().unwrap()[0] * inv_norm;
        let rd = rows_c.data();
        rows_c.with_grad_mut(|dr| {
            for &i in selected.iter() {
                let row = &rd[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                let t = targets[i] as usize;
                for k in 0..c {
                    let p = (row[k] - m).exp() / denom;
                    dr[i * c + k] += gv * (p - if k == t { 1.0 } else { 0.0 });
                }
            }
        });
    });
    Ok(y)
}

/// Summed smooth-L1 over `selected` rows of a [rows, 4] tensor, times
/// `inv_norm`. smooth_l1(d) = 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
pub fn smooth_l1_rows(
    tape: &Tape,
    rows: &Tensor,
    targets: Rc<Vec<[f64; 4]>>,
    selected: Rc<Vec<usize>>,
    inv_norm: f64,
) -> Result<Tensor> {
    let s = rows.shape();
    if s.len() != 2 || s[1] != 4 {
        return Err(CoreError::shape(format!("smooth_l1_rows wants [rows, 4], got {s:?}")));
    }
    let r = s[0];
    if targets.len() != r {
        return Err(CoreError::shape("smooth_l1_rows targets length mismatch"));
    }
    if selected.iter().any(|&i| i >= r) {
        return Err(CoreError::invalid("selected row out of range"));
    }
    let rd = rows.data();
    let mut total = 0.0;
    for &i in selected.iter() {
        for k in 0..4 {
            let d = rd[i * 4 + k] - targets[i][k];
            total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
    }
    drop(rd);
    let y = Tensor::scalar(total * inv_norm);
    let (rows_c, yc) = (rows.clone(), y.clone());
    tape.record("smooth_l1_rows", vec![rows.clone()], y.clone(), move || {
        let gg = yc.grad_guard();
        let gv = gg.as_deref().unwrap()[0] * inv_norm;
        let rd = rows_c.data();
        rows_c.with_grad_mut(|dr| {
            for &i in selected.iter() {
                for k in 0..4 {
                    let d = rd[i * 4 + k] - targets[i][k];
                    let slope = if d.abs() < 1.0 { d } else { d.signum() };
                    dr[i * 4 + k] += gv * slope;
                }
            }
        });
    });
    Ok(y)
}

/// Per-anchor classification/regression targets for a batch.
pub struct DetTargets {
    /// [B*G] class index per anchor; 0 is background.
    pub cls: Rc<Vec<u32>>,
    /// [B*G] encoded box offsets (zeros for non-positive anchors).
    pub loc: Rc<Vec<[f64; 4]>>,
    /// [B*G]
    pub positive: Vec<bool>,
}

/// Build targets from per-image match results. Ground-truth classes are
/// 1-based (0 is reserved for background).
pub fn build_det_targets(
    set: &AnchorSet,
    matches: &[MatchResult],
    gts: &[Vec<(BBox, u32)>],
    num_classes: usize,
    variances: (f64, f64),
) -> Result<DetTargets> {
    if matches.len() != gts.len() {
        return Err(CoreError::invalid("matches/gts batch size mismatch"));
    }
    let g = set.len();
    let b = matches.len();
    let mut cls = vec![0u32; b * g];
    let mut loc = vec![[0.0; 4]; b * g];
    let mut positive = vec![false; b * g];
    for (bi, (m, gt)) in matches.iter().zip(gts).enumerate() {
        if m.assignment.len() != g {
            return Err(CoreError::shape("match result does not cover the anchor set"));
        }
        for (ai, assigned) in m.assignment.iter().enumerate() {
            if let Some(gi) = assigned {
                let (ref bx, klass) = gt[*gi];
                if klass == 0 || klass as usize > num_classes {
                    return Err(CoreError::invalid(format!(
                        "ground-truth class {klass} outside 1..={num_classes}"
                    )));
                }
                let row = bi * g + ai;
                cls[row] = klass;
                loc[row] = encode_box(&set.boxes[ai], bx, variances)?;
                positive[row] = true;
            }
        }
    }
    Ok(DetTargets { cls: Rc::new(cls), loc: Rc::new(loc), positive })
}

/// Detection loss with hard negative mining (ratio negatives per positive,
/// mined per image by descending per-anchor CE; images with no positives
/// keep up to `zero_pos_floor` negatives). Both terms are normalized by the
/// batch-wide positive count, floored at one.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    tape: &Tape,
    cls_rows: &Tensor,
    loc_rows: &Tensor,
    targets: &DetTargets,
    batch: usize,
    anchors_per_image: usize,
    neg_ratio: usize,
    zero_pos_floor: usize,
) -> Result<(Tensor, Tensor)> {
    let g = anchors_per_image;
    let classes = cls_rows.shape()[1];
    let anchor_ce = per_row_ce(&cls_rows.data(), classes, &targets.cls);

    let mut selected: Vec<usize> = Vec::new();
    let mut pos_rows: Vec<usize> = Vec::new();
    for b in 0..batch {
        let lo = b * g;
        let img_pos = &targets.positive[lo..lo + g];
        let img_ce = &anchor_ce[lo..lo + g];
        for (i, &p) in img_pos.iter().enumerate() {
            if p {
                selected.push(lo + i);
                pos_rows.push(lo + i);
            }
        }
        for i in hard_negative_mine(img_ce, img_pos, neg_ratio, zero_pos_floor) {
            selected.push(lo + i);
        }
    }
    selected.sort_unstable();
    let norm = 1.0 / pos_rows.len().max(1) as f64;

    let det_cls = ce_rows(tape, cls_rows, targets.cls.clone(), Rc::new(selected), norm)?;
    let det_loc =
        smooth_l1_rows(tape, loc_rows, targets.loc.clone(), Rc::new(pos_rows), norm)?;
    Ok((det_cls, det_loc))
}

/// Mean per-pixel CE of [B,C,h,w] logits against [B*h*w] labels; label 255
/// is excluded from the mean. All pixels ignored -> constant 0.
pub fn pixel_ce(tape: &Tape, logits: &Tensor, labels: Rc<Vec<u8>>) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(CoreError::shape(format!(
            "{} labels for {}x{}x{} pixels",
            labels.len(),
            b,
            h,
            w
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
        return Err(CoreError::invalid(format!("segmentation label {bad} out of {c} classes")));
    }
    let ld = logits.data();
    let mut valid = 0usize;
    let mut total = 0.0;
    let mut row = vec![0.0; c];
    for bi in 0..b {
        for pix in 0..hw {
            let t = labels[bi * hw + pix];
            if t == IGNORE_LABEL {
                continue;
            }
            for (ci, slot) in row.iter_mut().enumerate() {
                *slot = ld[(bi * c + ci) * hw + pix];
            }
            total += softmax_ce_row(&row, t as usize);
            valid += 1;
        }
    }
    drop(ld);
    if valid == 0 {
        return Ok(Tensor::scalar(0.0));
    }
    let y = Tensor::scalar(total / valid as f64);
    let inv = 1.0 / valid as f64;
    let (lc, yc) = (logits.clone(), y.clone());
    tape.record("pixel_ce", vec![logits.clone()], y.clone(), move || {
        let gg = yc.grad_guard();
        let gv = gg.as_deref().unwrap()[0] * inv;
        let ld = lc.data();
        lc.with_grad_mut(|dl| {
            for bi in 0..b {
                for pix in 0..hw {
                    let t = labels[bi * hw + pix];
                    if t == IGNORE_LABEL {
                        continue;
                    }
                    let mut m = f64::NEG_INFINITY;
                    for ci in 0..c {
                        m = m.max(ld[(bi * c + ci) * hw + pix]);
                    }
                    let mut denom = 0.0;
                    for ci in 0..c {
                        denom += (ld[(bi * c + ci) * hw + pix] - m).exp();
                    }
                    for ci in 0..c {
                        let idx = (bi * c + ci) * hw + pix;
                        let p = (ld[idx] - m).exp() / denom;
                        dl[idx] += gv * (p - if ci == t as usize { 1.0 } else { 0.0 });
                    }
                }
            }
        });
    });
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegStrategy {
    /// Bilinearly upsample logits to label resolution (default).
    UpsampleLogits,
    /// Nearest-downsample the labels to logit resolution.
    DownsampleTargets,
}

/// Nearest-neighbor label downsampling with half-pixel centers.
pub fn downsample_labels(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<u8>> {
    if labels.len() != h * w {
        return Err(CoreError::shape("label buffer does not match its stated size"));
    }
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(CoreError::invalid("label downsample target must shrink or keep size"));
    }
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = (((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).round().max(0.0) as usize).min(h - 1);
        for j in 0..ow {
            let sj =
                (((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).round().max(0.0) as usize).min(w - 1);
            out.push(labels[si * w + sj]);
        }
    }
    Ok(out)
}

/// Per-level segmentation CE between logits at head resolution (h,w) and
/// labels at image resolution (H,W); (H,W) must be an integer multiple of
/// (h,w). Strategy picks which side is resampled.
pub fn segmentation_loss(
    tape: &Tape,
    logits: &Tensor,
    labels: &[u8],
    label_hw: (usize, usize),
    strategy: SegStrategy,
) -> Result<Tensor> {
    let (b, _, h, w) = logits.dims4()?;
    let (lh, lw) = label_hw;
    if labels.len() != b * lh * lw {
        return Err(CoreError::shape(format!(
            "{} labels for batch {b} at {lh}x{lw}",
            labels.len()
        )));
    }
    if lh % h != 0 || lw % w != 0 {
        return Err(CoreError::shape(format!(
            "label grid {lh}x{lw} is not an integer multiple of logit grid {h}x{w}"
        )));
    }
    match strategy {
        SegStrategy::UpsampleLogits => {
            let up = if (h, w) == (lh, lw) {
                logits.clone()
            } else {
                bilinear_resize(tape, logits, lh, lw)?
            };
            pixel_ce(tape, &up, Rc::new(labels.to_vec()))
        }
        SegStrategy::DownsampleTargets => {
            let mut down = Vec::with_capacity(b * h * w);
            for bi in 0..b {
                down.extend(downsample_labels(&labels[bi * lh * lw..(bi + 1) * lh * lw], lh, lw, h, w)?);
            }
            pixel_ce(tape, logits, Rc::new(down))
        }
    }
}

/// Collapse class labels to the class-agnostic pair: background stays 0,
/// ignore stays 255, everything else becomes 1.
pub fn agnostic_labels(labels: &[u8]) -> Vec<u8> {
    labels
        .iter()
        .map(|&l| match l {
            0 => 0,
            IGNORE_LABEL => IGNORE_LABEL,
            _ => 1,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub det: f64,
    pub seg: f64,
    pub agn: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { det: 1.0, seg: 1.0, agn: 1.0 }
    }
}

/// Raw (unweighted) loss tensors produced by one forward pass.
#[derive(Default)]
pub struct LossTerms {
    pub det_cls: Option<Tensor>,
    pub det_loc: Option<Tensor>,
    /// Class-aware per-level segmentation losses, coarse to fine.
    pub seg_levels: Vec<Tensor>,
    pub seg_fused: Option<Tensor>,
    pub agn_levels: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub det_cls: Option<f64>,
    pub det_loc: Option<f64>,
    pub seg_levels: Vec<f64>,
    pub seg_fused: Option<f64>,
    pub agn_levels: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recompute the weighted sum from the stored terms (for checking the
    /// recorded total).
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let mut s = 0.0;
        s += w.det * (self.det_cls.unwrap_or(0.0) + self.det_loc.unwrap_or(0.0));
        s += w.seg * self.seg_levels.iter().sum::<f64>();
        s += w.seg * self.seg_fused.unwrap_or(0.0);
        s += w.agn * self.agn_levels.iter().sum::<f64>();
        s
    }
}

/// Weighted total over the present terms; per-level terms are summed.
pub fn combine_losses(tape: &Tape, terms: &LossTerms, w: &LossWeights) -> (Tensor, LossBreakdown) {
    let mut parts: Vec<(Tensor, f64)> = Vec::new();
    let mut bd = LossBreakdown::default();
    if let Some(t) = &terms.det_cls {
        bd.det_cls = Some(t.value());
        parts.push((t.clone(), w.det));
    }
    if let Some(t) = &terms.det_loc {
        bd.det_loc = Some(t.value());
        parts.push((t.clone(), w.det));
    }
    for t in &terms.seg_levels {
        bd.seg_levels.push(t.value());
        parts.push((t.clone(), w.seg));
    }
    if let Some(t) = &terms.seg_fused {
        bd.seg_fused = Some(t.value());
        parts.push((t.clone(), w.seg));
    }
    for t in &terms.agn_levels {
        bd.agn_levels.push(t.value());
        parts.push((t.clone(), w.agn));
    }
    let total = crate::tensor::affine_combine(tape, &parts);
    bd.total = total.value();
    (total, bd)
}
