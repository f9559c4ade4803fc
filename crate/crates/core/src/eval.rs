//! Evaluation: detection average precision at a fixed IoU threshold,
//! segmentation mean IoU from a global confusion matrix, and the end-to-end
//! prediction path (softmax, decode, score floor, per-class NMS, fused-mask
//! argmax). Predictions can be dumped to / reloaded from JSON-lines files so
//! scoring can run offline.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, nms, AnchorSet, BBox};
use crate::data::SceneObject;
use crate::error::{CoreError, Result};
use crate::loss::gather_anchor_rows;
use crate::net::{ForwardOptions, Network};
use crate::tensor::{bilinear_resize, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// 1..=K
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct ApResult {
    /// AP for class k at index k-1; `None` when the class has no ground
    /// truth anywhere.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have ground truth (0.0 when none do).
    pub map: f64,
    /// (recall, precision) after each detection, per class.
    pub pr_curves: Vec<Vec<(f64, f64)>>,
}

/// All-points average precision with the precision envelope.
fn average_precision(events: &[bool], n_gt: usize) -> (f64, Vec<(f64, f64)>) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut points = Vec::with_capacity(events.len());
    for &is_tp in events {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        points.push((tp / n_gt as f64, tp / (tp + fp)));
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..points.len()).rev() {
        let (r, p) = points[i];
        envelope = envelope.max(p);
        let r_prev = if i == 0 { 0.0 } else { points[i - 1].0 };
        ap += (r - r_prev) * envelope;
    }
    (ap, points)
}

/// Score detections against ground truth. Detections are ranked by score
/// globally per class; each greedily claims the highest-IoU unclaimed ground
/// truth box of its class in its image (IoU ties -> lowest index). A claim
/// at IoU >= `iou_thresh` is a true positive, anything else a false
/// positive. `dets` and `gts` align by image index.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<SceneObject>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(CoreError::invalid(format!(
            "{} detection lists vs {} ground-truth lists",
            dets.len(),
            gts.len()
        )));
    }
    for per_image in dets {
        for d in per_image {
            if !d.score.is_finite() {
                return Err(CoreError::invalid("non-finite detection score"));
            }
            if d.class == 0 || d.class > num_classes {
                return Err(CoreError::invalid(format!("detection class {} out of range", d.class)));
            }
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let mut pr_curves = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let n_gt: usize =
            gts.iter().map(|g| g.iter().filter(|o| o.class == class).count()).sum();
        if n_gt == 0 {
            per_class.push(None);
            pr_curves.push(Vec::new());
            continue;
        }
        // (score, image, index) for a deterministic global ranking
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (img, per_image) in dets.iter().enumerate() {
            for (i, d) in per_image.iter().enumerate() {
                if d.class == class {
                    ranked.push((d.score, img, i));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut events = Vec::with_capacity(ranked.len());
        for &(_, img, i) in &ranked {
            let det = &dets[img][i];
            let mut best: Option<(f64, usize)> = None;
            for (gi, gt) in gts[img].iter().enumerate() {
                if gt.class != class || claimed[img][gi] {
                    continue;
                }
                let v = crate::anchors::iou(&det.bbox, &gt.bbox);
                if v >= iou_thresh && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            match best {
                Some((_, gi)) => {
                    claimed[img][gi] = true;
                    events.push(true);
                }
                None => events.push(false),
            }
        }
        let (ap, points) = average_precision(&events, n_gt);
        per_class.push(Some(ap));
        pr_curves.push(points);
    }
    let known: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    let map = if known.is_empty() { 0.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
    Ok(ApResult { per_class, map, pr_curves })
}

#[derive(Clone, Debug)]
pub struct MiouResult {
    /// IoU per label (0 = background); `None` when the label appears in
    /// neither prediction nor ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present labels.
    pub miou: f64,
}

/// Pixel confusion matrix accumulated over any number of images.
pub struct Confusion {
    num_labels: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_labels: usize) -> Confusion {
        Confusion { num_labels, counts: vec![0; num_labels * num_labels] }
    }

    /// Add one image. Ground-truth pixels labeled 255 are ignored.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(CoreError::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == crate::loss::IGNORE_LABEL {
                continue;
            }
            if (p as usize) >= self.num_labels || (g as usize) >= self.num_labels {
                return Err(CoreError::invalid(format!(
                    "pixel label out of range: pred {p}, gt {g}, {} labels",
                    self.num_labels
                )));
            }
            self.counts[g as usize * self.num_labels + p as usize] += 1;
        }
        Ok(())
    }

    pub fn result(&self) -> MiouResult {
        let n = self.num_labels;
        let mut per_class = Vec::with_capacity(n);
        for c in 0..n {
            let tp = self.counts[c * n + c];
            let row: u64 = (0..n).map(|j| self.counts[c * n + j]).sum();
            let col: u64 = (0..n).map(|i| self.counts[i * n + c]).sum();
            let union = row + col - tp;
            per_class.push(if union == 0 { None } else { Some(tp as f64 / union as f64) });
        }
        let known: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
        let miou =
            if known.is_empty() { 0.0 } else { known.iter().sum::<f64>() / known.len() as f64 };
        MiouResult { per_class, miou }
    }
}

/// Single-image mean IoU over `num_labels` labels (background included).
pub fn miou(pred: &[u8], gt: &[u8], num_labels: usize) -> Result<MiouResult> {
    let mut confusion = Confusion::new(num_labels);
    confusion.add(pred, gt)?;
    Ok(confusion.result())
}

#[derive(Clone, Copy, Debug)]
pub struct PredictConfig {
    /// Softmax score below which a candidate is dropped.
    pub score_floor: f64,
    /// Per-class NMS suppression threshold.
    pub nms_iou: f64,
    /// Global cap on detections per image, applied after NMS.
    pub max_detections: usize,
}

impl Default for PredictConfig {
    fn default() -> PredictConfig {
        PredictConfig { score_floor: 0.01, nms_iou: 0.45, max_detections: 200 }
    }
}

pub struct Prediction {
    pub detections: Vec<Detection>,
    /// Per-pixel labels at input resolution; `None` for detection-only nets.
    pub mask: Option<Vec<u8>>,
}

/// Turn flat per-anchor logits/offsets into final detections: softmax, score
/// floor, decode, per-class NMS, then a global top-k by score (ties -> lower
/// class, then lower anchor index).
pub fn decode_detections(
    cls_rows: &[f64],
    reg_rows: &[f64],
    set: &AnchorSet,
    num_classes: usize,
    variances: (f64, f64),
    pcfg: &PredictConfig,
) -> Vec<Detection> {
    let k1 = num_classes + 1;
    let n = set.len();
    debug_assert_eq!(cls_rows.len(), n * k1);
    debug_assert_eq!(reg_rows.len(), n * 4);
    let mut survivors: Vec<(Detection, usize)> = Vec::new();
    let mut class_boxes: Vec<Vec<(BBox, f64, usize)>> = vec![Vec::new(); num_classes];
    for a in 0..n {
        let row = &cls_rows[a * k1..(a + 1) * k1];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 1..k1 {
            let score = exps[k] / z;
            if score < pcfg.score_floor {
                continue;
            }
            let t = [
                reg_rows[a * 4],
                reg_rows[a * 4 + 1],
                reg_rows[a * 4 + 2],
                reg_rows[a * 4 + 3],
            ];
            let bbox = decode_box(&set.boxes[a], &t, variances);
            class_boxes[k - 1].push((bbox, score, a));
        }
    }
    for (ki, candidates) in class_boxes.iter().enumerate() {
        let boxes: Vec<BBox> = candidates.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
        for i in nms(&boxes, &scores, pcfg.nms_iou) {
            let (bbox, score, a) = candidates[i];
            survivors.push((Detection { bbox, class: ki + 1, score }, a));
        }
    }
    survivors.sort_by(|x, y| {
        y.0.score
            .partial_cmp(&x.0.score)
            .unwrap()
            .then(x.0.class.cmp(&y.0.class))
            .then(x.1.cmp(&y.1))
    });
    survivors.truncate(pcfg.max_detections);
    survivors.into_iter().map(|(d, _)| d).collect()
}

/// Run one image through the network in inference mode.
pub fn predict(net: &Network, image: &[f64], pcfg: &PredictConfig) -> Result<Prediction> {
    let (h, w) = net.cfg.input_hw;
    if image.len() != 3 * h * w {
        return Err(CoreError::shape(format!(
            "image has {} values, network wants {}",
            image.len(),
            3 * h * w
        )));
    }
    let tape = Tape::new();
    let x = Tensor::from_vec(&[1, 3, h, w], image.to_vec())?;
    let out = net.forward(&tape, &x, &ForwardOptions::inference())?;

    let mut detections = Vec::new();
    if let Some((cls_levels, reg_levels)) = out.det_levels() {
        let set = net.cfg.anchor_set()?;
        let cls_rows = gather_anchor_rows(&tape, &cls_levels, &set, net.cfg.num_classes + 1)?;
        let reg_rows = gather_anchor_rows(&tape, &reg_levels, &set, 4)?;
        detections = decode_detections(
            &cls_rows.data(),
            &reg_rows.data(),
            &set,
            net.cfg.num_classes,
            net.cfg.anchors.variances,
            pcfg,
        );
    }

    let mask = match out.seg_prediction() {
        Some(logits) => {
            let up = bilinear_resize(&tape, logits, h, w)?;
            let d = up.data();
            let k1 = net.cfg.num_classes + 1;
            let mut mask = vec![0u8; h * w];
            for p in 0..h * w {
                let mut best = 0usize;
                for k in 1..k1 {
                    if d[k * h * w + p] > d[best * h * w + p] {
                        best = k;
                    }
                }
                mask[p] = best as u8;
            }
            Some(mask)
        }
        None => None,
    };
    Ok(Prediction { detections, mask })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub detections: Vec<Detection>,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let r = BufReader::new(
        File::open(path).map_err(|e| CoreError::Dataset(format!("{}: {e}", path.display())))?,
    );
    let mut records = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| {
            CoreError::Dataset(format!("{} line {}: {e}", path.display(), ln + 1))
        })?;
        records.push(rec);
    }
    Ok(records)
}
