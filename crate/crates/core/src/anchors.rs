//! SSD-style anchor machinery in normalized image coordinates.
//!
//! Boxes are center-size `(cx, cy, w, h)` with the image mapped to the unit
//! square. Anchors are laid out one scale per pyramid level (coarse to
//! fine), one box per aspect ratio, centered on cell centers; the flat
//! ordering is level -> row -> column -> ratio, and everything downstream
//! (head channel layout, loss gathering) relies on that order.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { cx: (x1 + x2) / 2.0, cy: (y1 + y2) / 2.0, w: x2 - x1, h: y2 - y1 }
    }

    /// (x1, y1, x2, y2)
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        if self.w <= 0.0 || self.h <= 0.0 {
            0.0
        } else {
            self.w * self.h
        }
    }
}

/// Intersection-over-union. Degenerate boxes have zero area and zero IoU.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// One anchor per ratio per cell; width s*sqrt(r), height s/sqrt(r).
    pub aspect_ratios: Vec<f64>,
    /// Scale of the coarsest level; levels interpolate linearly down to
    /// `scale_min` at the finest level.
    pub scale_max: f64,
    pub scale_min: f64,
    /// Positive-match IoU threshold.
    pub pos_iou: f64,
    /// Offset encoding variances (center, size).
    pub variances: (f64, f64),
}

impl Default for AnchorConfig {
    fn default() -> AnchorConfig {
        AnchorConfig {
            aspect_ratios: vec![1.0, 2.0, 0.5],
            scale_max: 0.8,
            scale_min: 0.2,
            pos_iou: 0.5,
            variances: (0.1, 0.2),
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aspect_ratios.is_empty() {
            return Err(CoreError::config("at least one aspect ratio required"));
        }
        if self.aspect_ratios.iter().any(|&r| r <= 0.0) {
            return Err(CoreError::config("aspect ratios must be positive"));
        }
        if self.scale_max <= 0.0 || self.scale_min <= 0.0 {
            return Err(CoreError::config("anchor scales must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pos_iou) {
            return Err(CoreError::config("pos_iou must be in [0,1]"));
        }
        if self.variances.0 <= 0.0 || self.variances.1 <= 0.0 {
            return Err(CoreError::config("variances must be positive"));
        }
        Ok(())
    }

    /// Per-level anchor scales, coarsest first.
    pub fn level_scales(&self, num_levels: usize) -> Vec<f64> {
        if num_levels == 1 {
            return vec![self.scale_max];
        }
        (0..num_levels)
            .map(|i| {
                let t = i as f64 / (num_levels - 1) as f64;
                self.scale_max + t * (self.scale_min - self.scale_max)
            })
            .collect()
    }
}

pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    /// (h, w) grid per level, coarsest first.
    pub level_dims: Vec<(usize, usize)>,
    pub num_ratios: usize,
    /// Start of each level's block in `boxes`.
    pub level_offsets: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Anchors for a pyramid of grids (coarsest first), cell centers at
/// ((j+0.5)/w, (i+0.5)/h).
pub fn generate_anchors(level_dims: &[(usize, usize)], cfg: &AnchorConfig) -> Result<AnchorSet> {
    cfg.validate()?;
    if level_dims.is_empty() {
        return Err(CoreError::config("anchor pyramid needs at least one level"));
    }
    if level_dims.iter().any(|&(h, w)| h == 0 || w == 0) {
        return Err(CoreError::config("anchor grid dims must be positive"));
    }
    let scales = cfg.level_scales(level_dims.len());
    let mut boxes = Vec::new();
    let mut level_offsets = Vec::with_capacity(level_dims.len());
    for (&(h, w), &s) in level_dims.iter().zip(&scales) {
        level_offsets.push(boxes.len());
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f64 + 0.5) / w as f64;
                let cy = (i as f64 + 0.5) / h as f64;
                for &r in &cfg.aspect_ratios {
                    boxes.push(BBox::new(cx, cy, s * r.sqrt(), s / r.sqrt()));
                }
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        level_dims: level_dims.to_vec(),
        num_ratios: cfg.aspect_ratios.len(),
        level_offsets,
    })
}

#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    /// Per anchor: index of the assigned ground-truth box, if positive.
    pub assignment: Vec<Option<usize>>,
    /// Per anchor: IoU with its best ground-truth box (0 with no GTs).
    pub best_iou: Vec<f64>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// Two-phase matching. Phase 1 force-assigns each GT its argmax-IoU anchor
/// (so no GT is left unmatched); phase 2 assigns every anchor whose best-GT
/// IoU clears `pos_iou`. An anchor claimed by several GTs goes to the
/// highest IoU, ties to the lowest GT index.
pub fn match_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f64) -> MatchResult {
    let mut assignment = vec![None; anchors.len()];
    let mut best_iou = vec![0.0; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    if gts.is_empty() || anchors.is_empty() {
        return MatchResult { assignment, best_iou };
    }
    // best GT per anchor (ties -> lowest GT index via strict >)
    for (g, gt) in gts.iter().enumerate() {
        for (a, anchor) in anchors.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[a] {
                best_iou[a] = v;
                best_gt[a] = g;
            }
        }
    }
    for a in 0..anchors.len() {
        if best_gt[a] != usize::MAX && best_iou[a] >= pos_iou {
            assignment[a] = Some(best_gt[a]);
        }
    }
    // force each GT's argmax anchor; conflicting claims resolved by IoU,
    // then by lower GT index (earlier iteration wins ties via strict >)
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut arg = 0;
        let mut best = -1.0;
        for (a, anchor) in anchors.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best {
                best = v;
                arg = a;
            }
        }
        match forced[arg] {
            Some((_, prev)) if prev >= best => {}
            _ => forced[arg] = Some((g, best)),
        }
    }
    for (a, f) in forced.iter().enumerate() {
        if let Some((g, _)) = f {
            assignment[a] = Some(*g);
        }
    }
    MatchResult { assignment, best_iou }
}

/// Offsets of `gt` relative to `anchor`, scaled by the variances:
/// ((g.cx-a.cx)/(a.w*vc), (g.cy-a.cy)/(a.h*vc), ln(g.w/a.w)/vs, ln(g.h/a.h)/vs).
pub fn encode_box(anchor: &BBox, gt: &BBox, variances: (f64, f64)) -> Result<[f64; 4]> {
    if gt.w <= 0.0 || gt.h <= 0.0 || anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(CoreError::invalid(format!(
            "encode needs positive box sizes (anchor {}x{}, gt {}x{})",
            anchor.w, anchor.h, gt.w, gt.h
        )));
    }
    let (vc, vs) = variances;
    Ok([
        (gt.cx - anchor.cx) / (anchor.w * vc),
        (gt.cy - anchor.cy) / (anchor.h * vc),
        (gt.w / anchor.w).ln() / vs,
        (gt.h / anchor.h).ln() / vs,
    ])
}

/// Inverse of [`encode_box`]; the result is clipped to the unit square
/// (already-inside boxes pass through untouched).
pub fn decode_box(anchor: &BBox, t: &[f64; 4], variances: (f64, f64)) -> BBox {
    let (vc, vs) = variances;
    let b = BBox {
        cx: anchor.cx + t[0] * anchor.w * vc,
        cy: anchor.cy + t[1] * anchor.h * vc,
        w: anchor.w * (t[2] * vs).exp(),
        h: anchor.h * (t[3] * vs).exp(),
    };
    let (x1, y1, x2, y2) = b.corners();
    if x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0 {
        b
    } else {
        BBox::from_corners(x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0))
    }
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order (score ties -> lower index first); a candidate is dropped when its
/// IoU with any kept box reaches `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms boxes/scores length mismatch");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    'cand: for &i in &order {
        for &k in &kept {
            if iou(&boxes[i], &boxes[k]) >= iou_thresh {
                continue 'cand;
            }
        }
        kept.push(i);
    }
    kept
}

/// Select negative anchors with the highest per-anchor loss, at most
/// `ratio` negatives per positive; with zero positives, keep up to
/// `zero_pos_floor` negatives so the image still trains the background
/// class. Returns indices in ascending order.
pub fn hard_negative_mine(
    per_anchor_loss: &[f64],
    is_positive: &[bool],
    ratio: usize,
    zero_pos_floor: usize,
) -> Vec<usize> {
    assert_eq!(per_anchor_loss.len(), is_positive.len());
    let npos = is_positive.iter().filter(|&&p| p).count();
    let want = if npos > 0 { ratio * npos } else { zero_pos_floor };
    let mut negs: Vec<usize> = (0..is_positive.len()).filter(|&i| !is_positive[i]).collect();
    negs.sort_by(|&a, &b| {
        per_anchor_loss[b].partial_cmp(&per_anchor_loss[a]).unwrap().then(a.cmp(&b))
    });
    negs.truncate(want);
    negs.sort_unstable();
    negs
}
