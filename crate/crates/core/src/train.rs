//! Training orchestration: config, the SGD loop with a staged learning-rate
//! schedule, metrics logging, checkpointing, dataset evaluation, and the
//! eight-row ablation sweep.
//!
//! Everything here is a pure function of (config, seed): batch order, flips,
//! and initialization all come from seeded streams, so reruns produce
//! bit-identical checkpoints and logs.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{match_anchors, AnchorSet, BBox, MatchResult};
use crate::data::{self, Dataset, SceneSample};
use crate::error::{CoreError, Result};
use crate::eval::{
    evaluate_detections, predict, Confusion, PredictConfig, PredictionRecord,
};
use crate::loss::{
    agnostic_labels, build_det_targets, combine_losses, detection_loss, gather_anchor_rows,
    segmentation_loss, LossBreakdown, LossTerms, LossWeights, SegStrategy,
};
use crate::net::{ForwardOptions, Network, NetworkConfig, SegSupervision};
use crate::tensor::{Sgd, Tape, Tensor};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub iters: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub network: NetworkConfig,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Stage lengths must partition `iterations`.
    pub lr_stages: Vec<LrStage>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Random horizontal flips (off keeps cached targets per sample).
    pub hflip: bool,
    pub loss_weights: LossWeights,
    pub seg_strategy: SegStrategy,
    pub log_interval: usize,
    /// Also write the checkpoint every N iterations, not only at the end.
    pub checkpoint_interval: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            version: CONFIG_VERSION,
            network: NetworkConfig::default(),
            dataset_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            seed: 0,
            iterations: 2000,
            batch_size: 8,
            // three stages with x10 decay, split 60/25/15
            lr_stages: vec![
                LrStage { iters: 1200, lr: 1e-3 },
                LrStage { iters: 500, lr: 1e-4 },
                LrStage { iters: 300, lr: 1e-5 },
            ],
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: None,
            hflip: false,
            loss_weights: LossWeights::default(),
            seg_strategy: SegStrategy::DownsampleTargets,
            log_interval: 25,
            checkpoint_interval: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CoreError::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.network.validate()?;
        if self.dataset_dir.as_os_str().is_empty() {
            return Err(CoreError::config("dataset_dir is required"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(CoreError::config("out_dir is required"));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(CoreError::config("iterations and batch_size must be positive"));
        }
        if self.lr_stages.is_empty() {
            return Err(CoreError::config("at least one learning-rate stage is required"));
        }
        let staged: usize = self.lr_stages.iter().map(|s| s.iters).sum();
        if staged != self.iterations {
            return Err(CoreError::config(format!(
                "lr stages cover {staged} iterations, config says {}",
                self.iterations
            )));
        }
        for s in &self.lr_stages {
            if s.iters == 0 || !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(CoreError::config("every lr stage needs iters >= 1 and finite lr > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CoreError::config("weight_decay must be finite and non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(CoreError::config("grad_clip must be finite and positive"));
            }
        }
        let w = &self.loss_weights;
        for (name, v) in [("det", w.det), ("seg", w.seg), ("agn", w.agn)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::config(format!("loss weight {name} must be >= 0")));
            }
        }
        if self.log_interval == 0 {
            return Err(CoreError::config("log_interval must be positive"));
        }
        if self.checkpoint_interval == Some(0) {
            return Err(CoreError::config("checkpoint_interval must be positive when set"));
        }
        Ok(())
    }

    /// Parse a config file without validating, so callers can apply
    /// overrides (seed, output directory) before `validate` runs.
    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let cfg = Self::parse_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut end = 0;
        for s in &self.lr_stages {
            end += s.iters;
            if iteration < end {
                return s.lr;
            }
        }
        self.lr_stages.last().unwrap().lr
    }

    /// Decoder levels that receive a class-aware segmentation loss.
    fn supervised_levels(&self) -> Vec<usize> {
        (0..self.network.decoder_levels).filter(|&l| self.network.supervised_at(l)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    /// Exponential moving average of the total (0.98 decay).
    pub smoothed: f64,
    pub breakdown: LossBreakdown,
}

struct CachedSample {
    sample: SceneSample,
    gts: Vec<(BBox, u32)>,
    matches: MatchResult,
}

fn prepare_sample(sample: SceneSample, set: &AnchorSet, pos_iou: f64) -> CachedSample {
    let gts: Vec<(BBox, u32)> =
        sample.objects.iter().map(|o| (o.bbox, o.class as u32)).collect();
    let boxes: Vec<BBox> = gts.iter().map(|g| g.0).collect();
    let matches = match_anchors(&set.boxes, &boxes, pos_iou);
    CachedSample { sample, gts, matches }
}

fn batch_tensor(batch: &[Rc<CachedSample>], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch.len() * 3 * h * w);
    for s in batch {
        data.extend_from_slice(&s.sample.image);
    }
    Tensor::from_vec(&[batch.len(), 3, h, w], data).expect("batch assembly is shape-correct")
}

fn batch_labels(batch: &[Rc<CachedSample>]) -> Vec<u8> {
    let mut labels = Vec::with_capacity(batch.len() * batch[0].sample.mask.len());
    for s in batch {
        labels.extend_from_slice(&s.sample.mask);
    }
    labels
}

fn clip_global_norm(params: &[Tensor], max_norm: f64) {
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params {
            p.with_grad_mut(|g| {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            });
        }
    }
}

fn first_non_finite_param(net: &Network) -> Option<String> {
    net.params()
        .iter()
        .find(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        .map(|(name, _)| name.clone())
}

fn non_finite_term(bd: &LossBreakdown, sup_levels: &[usize]) -> Option<String> {
    let bad = |v: f64| !v.is_finite();
    if bd.det_cls.is_some_and(bad) {
        return Some("det_cls".into());
    }
    if bd.det_loc.is_some_and(bad) {
        return Some("det_loc".into());
    }
    for (i, &v) in bd.seg_levels.iter().enumerate() {
        if bad(v) {
            return Some(format!("seg_l{}", sup_levels[i]));
        }
    }
    if bd.seg_fused.is_some_and(bad) {
        return Some("seg_fused".into());
    }
    for (l, &v) in bd.agn_levels.iter().enumerate() {
        if bad(v) {
            return Some(format!("agn_l{l}"));
        }
    }
    if bad(bd.total) {
        return Some("total".into());
    }
    None
}

fn metrics_header(cfg: &RunConfig, sup_levels: &[usize]) -> String {
    let mut cols = vec![
        "iteration".to_string(),
        "lr".to_string(),
        "total".to_string(),
        "smoothed".to_string(),
    ];
    if cfg.network.with_detection {
        cols.push("det_cls".into());
        cols.push("det_loc".into());
    }
    for &l in sup_levels {
        cols.push(format!("seg_l{l}"));
    }
    if cfg.network.mfs {
        cols.push("seg_fused".into());
    }
    if cfg.network.cas {
        for l in 0..cfg.network.decoder_levels {
            cols.push(format!("agn_l{l}"));
        }
    }
    cols.join(",")
}

fn metrics_line(rec: &MetricsRecord) -> String {
    let mut cols = vec![
        rec.iteration.to_string(),
        format!("{:e}", rec.lr),
        format!("{:.6}", rec.total),
        format!("{:.6}", rec.smoothed),
    ];
    let bd = &rec.breakdown;
    if let Some(v) = bd.det_cls {
        cols.push(format!("{v:.6}"));
    }
    if let Some(v) = bd.det_loc {
        cols.push(format!("{v:.6}"));
    }
    for &v in &bd.seg_levels {
        cols.push(format!("{v:.6}"));
    }
    if let Some(v) = bd.seg_fused {
        cols.push(format!("{v:.6}"));
    }
    for &v in &bd.agn_levels {
        cols.push(format!("{v:.6}"));
    }
    cols.join(",")
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub final_total: f64,
    pub final_smoothed: f64,
}

/// Build the loss for one batch on `tape`. Shared by the training loop and
/// by tests that probe gradients through the full graph.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &Tape,
    net: &Network,
    set: &AnchorSet,
    x: &Tensor,
    labels: &[u8],
    matches: &[MatchResult],
    gts: &[Vec<(BBox, u32)>],
    weights: &LossWeights,
    strategy: SegStrategy,
    opts: &ForwardOptions,
) -> Result<(Tensor, LossBreakdown)> {
    let cfg = &net.cfg;
    let (batch, _, h, w) = x.dims4()?;
    let out = net.forward(tape, x, opts)?;
    let mut terms = LossTerms::default();
    if cfg.with_detection {
        let (cls_levels, reg_levels) =
            out.det_levels().expect("detection heads exist on every level");
        let cls_rows = gather_anchor_rows(tape, &cls_levels, set, cfg.num_classes + 1)?;
        let reg_rows = gather_anchor_rows(tape, &reg_levels, set, 4)?;
        let targets = build_det_targets(set, matches, gts, cfg.num_classes, cfg.anchors.variances)?;
        let (det_cls, det_loc) =
            detection_loss(tape, &cls_rows, &reg_rows, &targets, batch, set.len(), 3, 8)?;
        terms.det_cls = Some(det_cls);
        terms.det_loc = Some(det_loc);
    }
    for l in 0..cfg.decoder_levels {
        if !cfg.supervised_at(l) {
            continue;
        }
        let logits = out.levels[l].seg.as_ref().expect("supervised level has a head");
        terms.seg_levels.push(segmentation_loss(tape, logits, labels, (h, w), strategy)?);
    }
    if let Some(fused) = &out.seg_fused {
        terms.seg_fused = Some(segmentation_loss(tape, fused, labels, (h, w), strategy)?);
    }
    if cfg.cas && opts.mode == crate::net::Mode::Train {
        let agn = agnostic_labels(labels);
        for l in 0..cfg.decoder_levels {
            let logits = out.levels[l].agn.as_ref().expect("cas builds agnostic heads");
            terms.agn_levels.push(segmentation_loss(tape, logits, &agn, (h, w), strategy)?);
        }
    }
    Ok(combine_losses(tape, &terms, weights))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = data::load_dataset(&cfg.dataset_dir)?;
    if dataset.num_classes() != cfg.network.num_classes {
        return Err(CoreError::config(format!(
            "dataset has {} classes, network wants {}",
            dataset.num_classes(),
            cfg.network.num_classes
        )));
    }
    if (dataset.height, dataset.width) != cfg.network.input_hw {
        return Err(CoreError::config(format!(
            "dataset is {}x{}, network wants {}x{}",
            dataset.height, dataset.width, cfg.network.input_hw.0, cfg.network.input_hw.1
        )));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;

    let net = Network::new(&cfg.network, cfg.seed)?;
    let params = net.param_tensors();
    let set = cfg.network.anchor_set()?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let (h, w) = cfg.network.input_hw;
    let n = dataset.samples.len();

    // per-(sample, flip) ground-truth preparation, built lazily and reused
    let mut cache: HashMap<(usize, bool), Rc<CachedSample>> = HashMap::new();
    let samples = dataset.samples;
    let mut fetch = |idx: usize, flip: bool, set: &AnchorSet| -> Rc<CachedSample> {
        cache
            .entry((idx, flip))
            .or_insert_with(|| {
                let s =
                    if flip { data::hflip(&samples[idx]) } else { samples[idx].clone() };
                Rc::new(prepare_sample(s, set, cfg.network.anchors.pos_iou))
            })
            .clone()
    };

    let checkpoint = cfg.out_dir.join("model.ckpt");
    let metrics_csv = cfg.out_dir.join("metrics.csv");
    let mut log = BufWriter::new(File::create(&metrics_csv)?);
    let sup_levels = cfg.supervised_levels();
    writeln!(log, "{}", metrics_header(cfg, &sup_levels))?;

    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut records = Vec::new();
    let mut smoothed = f64::NAN;
    let mut last_total = f64::NAN;
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == n {
                order.shuffle(&mut sampler);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let flip = cfg.hflip && sampler.gen_bool(0.5);
            batch.push(fetch(idx, flip, &set));
        }
        let x = batch_tensor(&batch, h, w);
        let labels = batch_labels(&batch);
        let matches: Vec<MatchResult> = batch.iter().map(|s| s.matches.clone()).collect();
        let gts: Vec<Vec<(BBox, u32)>> = batch.iter().map(|s| s.gts.clone()).collect();

        let tape = Tape::new();
        let (total, bd) = batch_loss(
            &tape,
            &net,
            &set,
            &x,
            &labels,
            &matches,
            &gts,
            &cfg.loss_weights,
            cfg.seg_strategy,
            &ForwardOptions::train(),
        )?;
        if let Some(term) = non_finite_term(&bd, &sup_levels) {
            log.flush()?;
            return Err(CoreError::Numerical {
                term: format!("{term} at iteration {}", it + 1),
            });
        }
        tape.backward(&total)?;
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&params, c);
        }
        let lr = cfg.lr_at(it);
        opt.step(&params, lr)?;
        // never let a diverged update reach the checkpoint on disk
        if let Some(name) = first_non_finite_param(&net) {
            log.flush()?;
            return Err(CoreError::Numerical {
                term: format!("parameter {name} after iteration {}", it + 1),
            });
        }

        last_total = bd.total;
        smoothed = if smoothed.is_nan() { bd.total } else { 0.98 * smoothed + 0.02 * bd.total };
        if (it + 1) % cfg.log_interval == 0 || it + 1 == cfg.iterations {
            let rec = MetricsRecord {
                iteration: it + 1,
                lr,
                total: bd.total,
                smoothed,
                breakdown: bd,
            };
            writeln!(log, "{}", metrics_line(&rec))?;
            log.flush()?;
            records.push(rec);
        }
        if let Some(every) = cfg.checkpoint_interval {
            if (it + 1) % every == 0 {
                net.save(&checkpoint)?;
            }
        }
    }
    net.save(&checkpoint)?;
    log.flush()?;
    Ok(TrainOutcome {
        checkpoint,
        metrics_csv,
        records,
        final_total: last_total,
        final_smoothed: smoothed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub num_images: usize,
    /// `None` for networks without a detection branch.
    pub map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    /// `None` for networks without segmentation output.
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "N/A".to_string(),
    }
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "images={} mAP@0.5={} mIoU={}",
            self.num_images,
            fmt_opt(self.map),
            fmt_opt(self.miou)
        )
    }
}

/// Run the network over a dataset and score it. With `out_dir` set, also
/// writes `predictions.jsonl` and `report.json` (byte-deterministic).
pub fn evaluate(net: &Network, dataset: &Dataset, out_dir: Option<&Path>) -> Result<EvalReport> {
    if dataset.num_classes() != net.cfg.num_classes {
        return Err(CoreError::config(format!(
            "dataset has {} classes, checkpoint wants {}",
            dataset.num_classes(),
            net.cfg.num_classes
        )));
    }
    if (dataset.height, dataset.width) != net.cfg.input_hw {
        return Err(CoreError::config(format!(
            "dataset is {}x{}, checkpoint wants {}x{}",
            dataset.height, dataset.width, net.cfg.input_hw.0, net.cfg.input_hw.1
        )));
    }
    let pcfg = PredictConfig::default();
    let k = net.cfg.num_classes;
    let mut records = Vec::with_capacity(dataset.samples.len());
    let mut all_dets = Vec::with_capacity(dataset.samples.len());
    let mut confusion = Confusion::new(k + 1);
    let mut any_mask = false;
    for s in &dataset.samples {
        let p = predict(net, &s.image, &pcfg)?;
        all_dets.push(p.detections.clone());
        records.push(PredictionRecord { id: s.id.clone(), detections: p.detections });
        if let Some(mask) = &p.mask {
            confusion.add(mask, &s.mask)?;
            any_mask = true;
        }
    }
    let (map, per_class_ap) = if net.cfg.with_detection {
        let gts: Vec<_> = dataset.samples.iter().map(|s| s.objects.clone()).collect();
        let ap = evaluate_detections(&all_dets, &gts, k, 0.5)?;
        (Some(ap.map), ap.per_class)
    } else {
        (None, Vec::new())
    };
    let (miou, per_class_iou) = if any_mask {
        let r = confusion.result();
        (Some(r.miou), r.per_class)
    } else {
        (None, Vec::new())
    };
    let report = EvalReport { num_images: dataset.samples.len(), map, per_class_ap, miou, per_class_iou };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        crate::eval::write_predictions(&dir.join("predictions.jsonl"), &records)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub label: &'static str,
    pub desc: &'static str,
    pub with_detection: bool,
    pub seg_supervision: SegSupervision,
    pub mfs: bool,
    pub ic: bool,
    pub cas: bool,
    pub asf: bool,
}

/// The eight rows of the ablation table, in presentation order.
pub fn ablation_rows() -> Vec<AblationRow> {
    let base = AblationRow {
        label: "a",
        desc: "detection only",
        with_detection: true,
        seg_supervision: SegSupervision::Off,
        mfs: false,
        ic: false,
        cas: false,
        asf: false,
    };
    vec![
        base,
        AblationRow {
            label: "b",
            desc: "segmentation only (finest level)",
            with_detection: false,
            seg_supervision: SegSupervision::Finest,
            ..base
        },
        AblationRow {
            label: "c",
            desc: "segmentation only (all levels)",
            with_detection: false,
            seg_supervision: SegSupervision::All,
            ..base
        },
        AblationRow {
            label: "d",
            desc: "joint baseline",
            seg_supervision: SegSupervision::All,
            ..base
        },
        AblationRow {
            label: "e",
            desc: "joint + MFS",
            seg_supervision: SegSupervision::All,
            mfs: true,
            ..base
        },
        AblationRow {
            label: "f",
            desc: "joint + MFS + IC",
            seg_supervision: SegSupervision::All,
            mfs: true,
            ic: true,
            ..base
        },
        AblationRow {
            label: "g",
            desc: "joint + MFS + IC + CAS",
            seg_supervision: SegSupervision::All,
            mfs: true,
            ic: true,
            cas: true,
            ..base
        },
        AblationRow {
            label: "h",
            desc: "joint + MFS + IC + CAS + ASF",
            seg_supervision: SegSupervision::All,
            mfs: true,
            ic: true,
            cas: true,
            asf: true,
            ..base
        },
    ]
}

pub fn apply_row(base: &NetworkConfig, row: &AblationRow) -> NetworkConfig {
    NetworkConfig {
        with_detection: row.with_detection,
        seg_supervision: row.seg_supervision,
        mfs: row.mfs,
        ic: row.ic,
        cas: row.cas,
        asf: row.asf,
        ..base.clone()
    }
}

pub struct AblationRowResult {
    pub row: AblationRow,
    pub report: EvalReport,
}

fn name_row(label: &str, e: CoreError) -> CoreError {
    match e {
        CoreError::Numerical { term } => {
            CoreError::Numerical { term: format!("ablation row ({label}): {term}") }
        }
        other => CoreError::InvalidArgument(format!("ablation row ({label}): {other}")),
    }
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        ""
    }
}

/// Train and evaluate every ablation row with the shared seed and dataset.
/// `ablation.csv` is written incrementally, so completed rows survive a
/// failing later row.
pub fn ablate(base: &RunConfig) -> Result<Vec<AblationRowResult>> {
    base.validate()?;
    fs::create_dir_all(&base.out_dir)?;
    let eval_dataset = data::load_dataset(&base.dataset_dir)?;
    let csv_path = base.out_dir.join("ablation.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "row,mfs,ic,cas,asf,map,miou")?;
    csv.flush()?;
    let mut results = Vec::new();
    for row in ablation_rows() {
        let mut cfg = base.clone();
        cfg.network = apply_row(&base.network, &row);
        cfg.out_dir = base.out_dir.join(format!("row_{}", row.label));
        let outcome = train(&cfg).map_err(|e| name_row(row.label, e))?;
        let net = Network::load(&outcome.checkpoint).map_err(|e| name_row(row.label, e))?;
        let report = evaluate(&net, &eval_dataset, Some(&cfg.out_dir))
            .map_err(|e| name_row(row.label, e))?;
        writeln!(
            csv,
            "({}) {},{},{},{},{},{},{}",
            row.label,
            row.desc,
            mark(row.mfs),
            mark(row.ic),
            mark(row.cas),
            mark(row.asf),
            fmt_opt(report.map),
            fmt_opt(report.miou),
        )?;
        csv.flush()?;
        results.push(AblationRowResult { row, report });
    }
    Ok(results)
}
