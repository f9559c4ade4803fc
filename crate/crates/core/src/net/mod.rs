//! The network family: a strided residual encoder, a skip-fusing decoder
//! pyramid, and per-level prediction heads.
//!
//! The decoder is anchored at the encoder's finest stride: decoder level `l`
//! (coarse to fine, `0..L`) lives at encoder index `L-1-l`. Level 0 fuses
//! the bottleneck with that skip; in the special case `L == E` it is instead
//! a plain residual stage on the bottleneck (there is no coarser skip).
//!
//! Toggles select the architecture variant:
//! * detection + per-level segmentation heads (the paired baseline),
//! * `mfs`  — a fused segmentation head over all levels,
//! * `ic`   — segmentation logits folded back into the detection branch,
//! * `cas`  — class-agnostic auxiliary segmentation heads (training only),
//! * `asf`  — SE-gated attention on the encoder skip before fusion.
//!
//! Every op a forward pass records is scope-tagged (`enc/l0`, `dec/l1/se`,
//! `head/l2/agn`, `mfs`, ...) so cost claims can be audited per component.

mod blocks;
mod checkpoint;

pub use blocks::{BN_EPS, BN_MOMENTUM};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, AnchorSet};
use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor};
use blocks::{
    ConvBnRelu, DetHead, FuseUnit, IcModule, MfsHead, ParamReg, ResidualUnit, SegHead,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegSupervision {
    /// No segmentation loss.
    Off,
    /// Supervise only the finest decoder level.
    Finest,
    /// Supervise every decoder level.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_hw: (usize, usize),
    /// Foreground classes; class 0 is always background.
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    /// Cumulative stride of each encoder level (powers of two, increasing).
    pub encoder_strides: Vec<usize>,
    pub decoder_channels: usize,
    pub decoder_levels: usize,
    pub with_detection: bool,
    pub seg_supervision: SegSupervision,
    pub mfs: bool,
    pub ic: bool,
    pub cas: bool,
    pub asf: bool,
    pub se_reduction: usize,
    pub anchors: AnchorConfig,
}

impl Default for NetworkConfig {
    fn default() -> NetworkConfig {
        NetworkConfig {
            input_hw: (96, 96),
            num_classes: 3,
            encoder_channels: vec![32, 48, 64, 64],
            encoder_strides: vec![4, 8, 16, 32],
            decoder_channels: 48,
            decoder_levels: 3,
            with_detection: true,
            seg_supervision: SegSupervision::All,
            mfs: true,
            ic: true,
            cas: true,
            asf: true,
            se_reduction: 4,
            anchors: AnchorConfig::default(),
        }
    }
}

fn pow2(x: usize) -> bool {
    x >= 1 && x & (x - 1) == 0
}

impl NetworkConfig {
    /// The paired baseline: detection + per-level segmentation, all module
    /// toggles off.
    pub fn baseline() -> NetworkConfig {
        NetworkConfig { mfs: false, ic: false, cas: false, asf: false, ..NetworkConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 {
            return Err(CoreError::config("input size must be positive"));
        }
        if self.num_classes == 0 {
            return Err(CoreError::config("need at least one foreground class"));
        }
        let e = self.encoder_strides.len();
        if e == 0 || self.encoder_channels.len() != e {
            return Err(CoreError::config(format!(
                "encoder wants matching channel/stride lists, got {} channels for {e} strides",
                self.encoder_channels.len()
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(CoreError::config("encoder channels must be positive"));
        }
        let mut prev = 1usize;
        for &s in &self.encoder_strides {
            if s <= prev || !pow2(s) {
                return Err(CoreError::config(format!(
                    "encoder strides must be increasing powers of two, got {:?}",
                    self.encoder_strides
                )));
            }
            prev = s;
        }
        let deepest = *self.encoder_strides.last().unwrap();
        if h % deepest != 0 || w % deepest != 0 {
            return Err(CoreError::config(format!(
                "input {h}x{w} is not divisible by the deepest stride {deepest}"
            )));
        }
        if self.decoder_levels == 0 || self.decoder_levels > e {
            return Err(CoreError::config(format!(
                "decoder_levels must be in 1..={e}, got {}",
                self.decoder_levels
            )));
        }
        if self.decoder_channels == 0 {
            return Err(CoreError::config("decoder channels must be positive"));
        }
        if self.se_reduction == 0 {
            return Err(CoreError::config("se_reduction must be positive"));
        }
        if self.ic && !self.with_detection {
            return Err(CoreError::config("ic feeds the detection branch; enable with_detection"));
        }
        if !self.with_detection && self.seg_supervision == SegSupervision::Off && !self.mfs {
            return Err(CoreError::config("network would predict nothing"));
        }
        self.anchors.validate()?;
        Ok(())
    }

    pub fn num_encoder_levels(&self) -> usize {
        self.encoder_strides.len()
    }

    /// Encoder index whose resolution decoder level `l` shares.
    pub fn enc_index(&self, l: usize) -> usize {
        self.decoder_levels - 1 - l
    }

    /// (h, w) of each decoder level, coarse to fine.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let (h, w) = self.input_hw;
        (0..self.decoder_levels)
            .map(|l| {
                let s = self.encoder_strides[self.enc_index(l)];
                (h / s, w / s)
            })
            .collect()
    }

    /// Whether level `l` gets a segmentation loss.
    pub fn supervised_at(&self, l: usize) -> bool {
        match self.seg_supervision {
            SegSupervision::Off => false,
            SegSupervision::Finest => l == self.decoder_levels - 1,
            SegSupervision::All => true,
        }
    }

    /// Whether level `l` owns a class-aware segmentation head. Heads exist
    /// beyond the supervised set when a module consumes their logits.
    pub fn seg_head_at(&self, l: usize) -> bool {
        self.mfs || self.ic || self.supervised_at(l)
    }

    pub fn anchor_set(&self) -> Result<AnchorSet> {
        generate_anchors(&self.level_dims(), &self.anchors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Use running statistics in batch norm even in train mode.
    pub freeze_norm: bool,
    /// Replace learned attention gates with a constant (diagnostic).
    pub asf_gate_override: Option<f64>,
}

impl ForwardOptions {
    pub fn train() -> ForwardOptions {
        ForwardOptions { mode: Mode::Train, freeze_norm: false, asf_gate_override: None }
    }

    pub fn inference() -> ForwardOptions {
        ForwardOptions { mode: Mode::Inference, freeze_norm: false, asf_gate_override: None }
    }
}

pub struct LevelOutput {
    pub hw: (usize, usize),
    /// [B, A*(K+1), h, w]
    pub det_cls: Option<Tensor>,
    /// [B, A*4, h, w]
    pub det_reg: Option<Tensor>,
    /// [B, K+1, h, w]
    pub seg: Option<Tensor>,
    /// [B, 2, h, w] — training only
    pub agn: Option<Tensor>,
}

pub struct ForwardOutputs {
    /// Coarse to fine, one per decoder level.
    pub levels: Vec<LevelOutput>,
    /// [B, K+1, h_finest, w_finest]
    pub seg_fused: Option<Tensor>,
}

impl ForwardOutputs {
    /// Per-level detection tensors, coarse to fine (None unless every level
    /// has a detection head).
    pub fn det_levels(&self) -> Option<(Vec<Tensor>, Vec<Tensor>)> {
        let mut cls = Vec::with_capacity(self.levels.len());
        let mut reg = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            cls.push(l.det_cls.clone()?);
            reg.push(l.det_reg.clone()?);
        }
        Some((cls, reg))
    }

    /// The logits a segmentation prediction should come from: the fused head
    /// when present, otherwise the finest computed per-level head.
    pub fn seg_prediction(&self) -> Option<&Tensor> {
        self.seg_fused
            .as_ref()
            .or_else(|| self.levels.iter().rev().find_map(|l| l.seg.as_ref()))
    }
}

enum EncBlock {
    Stem(ConvBnRelu),
    Unit(ResidualUnit),
}

impl EncBlock {
    fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        match self {
            EncBlock::Stem(b) => b.forward(tape, x, training),
            EncBlock::Unit(u) => u.forward(tape, x, training),
        }
    }
}

enum DecoderStage {
    /// `L == E` only: refine the bottleneck in place, no skip to fuse.
    Root(ResidualUnit),
    Fuse(FuseUnit),
}

struct LevelHeads {
    seg: Option<SegHead>,
    ic: Option<IcModule>,
    det: Option<DetHead>,
    agn: Option<SegHead>,
}

pub struct Network {
    pub cfg: NetworkConfig,
    encoder: Vec<Vec<EncBlock>>,
    decoder: Vec<DecoderStage>,
    heads: Vec<LevelHeads>,
    mfs: Option<MfsHead>,
    params: Vec<(String, Tensor)>,
    state: Vec<(String, Tensor)>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamReg::new(&mut rng);
        let e = cfg.num_encoder_levels();
        let l_num = cfg.decoder_levels;
        let k = cfg.num_classes;
        let a = cfg.anchors.aspect_ratios.len();
        let dec_c = cfg.decoder_channels;

        let mut encoder = Vec::with_capacity(e);
        let mut c_prev = 3;
        for i in 0..e {
            let ch = cfg.encoder_channels[i];
            let ratio = if i == 0 {
                cfg.encoder_strides[0]
            } else {
                cfg.encoder_strides[i] / cfg.encoder_strides[i - 1]
            };
            let mut steps = ratio.trailing_zeros() as usize;
            let mut blocks = Vec::new();
            let mut c_in = c_prev;
            if i == 0 {
                blocks.push(EncBlock::Stem(ConvBnRelu::new(&mut reg, "enc/l0/stem", 3, ch, 3, 2)));
                steps -= 1;
                c_in = ch;
            }
            for u in 0..steps {
                blocks.push(EncBlock::Unit(ResidualUnit::new(
                    &mut reg,
                    &format!("enc/l{i}/u{u}"),
                    c_in,
                    ch,
                    2,
                )));
                c_in = ch;
            }
            encoder.push(blocks);
            c_prev = ch;
        }

        let mut decoder = Vec::with_capacity(l_num);
        let mut d_ch = cfg.encoder_channels[e - 1];
        for l in 0..l_num {
            if l == 0 && l_num == e {
                decoder.push(DecoderStage::Root(ResidualUnit::new(
                    &mut reg,
                    &format!("dec/l{l}/unit"),
                    d_ch,
                    dec_c,
                    1,
                )));
            } else {
                let enc_ch = cfg.encoder_channels[cfg.enc_index(l)];
                decoder.push(DecoderStage::Fuse(FuseUnit::new(
                    &mut reg,
                    &format!("dec/l{l}/fuse"),
                    d_ch,
                    enc_ch,
                    dec_c,
                    cfg.asf.then_some(cfg.se_reduction),
                )));
            }
            d_ch = dec_c;
        }

        let mut heads = Vec::with_capacity(l_num);
        for l in 0..l_num {
            let name = format!("head/l{l}");
            let seg = cfg
                .seg_head_at(l)
                .then(|| SegHead::new(&mut reg, &format!("{name}/seg"), dec_c, k + 1));
            let ic = cfg.ic.then(|| IcModule::new(&mut reg, &format!("{name}/ic"), dec_c, k + 1));
            let det = cfg
                .with_detection
                .then(|| DetHead::new(&mut reg, &format!("{name}/det"), dec_c, a, k));
            let agn = cfg.cas.then(|| SegHead::new(&mut reg, &format!("{name}/agn"), dec_c, 2));
            heads.push(LevelHeads { seg, ic, det, agn });
        }
        let mfs = cfg.mfs.then(|| MfsHead::new(&mut reg, "mfs", l_num, k + 1));

        Ok(Network {
            cfg: cfg.clone(),
            encoder,
            decoder,
            heads,
            mfs,
            params: reg.params,
            state: reg.state,
        })
    }

    /// Named trainable parameters, in registration (= checkpoint) order.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Named non-trainable state (batch-norm running statistics).
    pub fn state(&self) -> &[(String, Tensor)] {
        &self.state
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether level `l`'s segmentation head runs in the given mode.
    fn seg_computed(&self, l: usize, mode: Mode) -> bool {
        if !self.cfg.seg_head_at(l) {
            return false;
        }
        match mode {
            Mode::Train => true,
            // at test time per-level logits are only produced where a module
            // or the final prediction consumes them
            Mode::Inference => {
                self.cfg.ic
                    || self.cfg.mfs
                    || (self.cfg.seg_supervision != SegSupervision::Off
                        && l == self.cfg.decoder_levels - 1)
            }
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardOutputs> {
        let (b, c, h, w) = x.dims4()?;
        if b == 0 {
            return Err(CoreError::shape("empty batch"));
        }
        if c != 3 || (h, w) != self.cfg.input_hw {
            return Err(CoreError::shape(format!(
                "input shape {:?} does not match configured 3x{}x{}",
                x.shape(),
                self.cfg.input_hw.0,
                self.cfg.input_hw.1
            )));
        }
        let training = opts.mode == Mode::Train;
        let bn_train = training && !opts.freeze_norm;

        let mut feats: Vec<Tensor> = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for (i, level) in self.encoder.iter().enumerate() {
            cur = tape.scoped(format!("enc/l{i}"), || -> Result<Tensor> {
                let mut f = cur.clone();
                for blk in level {
                    f = blk.forward(tape, &f, bn_train)?;
                }
                Ok(f)
            })?;
            feats.push(cur.clone());
        }

        let mut d = feats.last().unwrap().clone();
        let mut level_feats = Vec::with_capacity(self.decoder.len());
        for (l, stage) in self.decoder.iter().enumerate() {
            d = tape.scoped(format!("dec/l{l}"), || match stage {
                DecoderStage::Root(u) => u.forward(tape, &d, bn_train),
                DecoderStage::Fuse(f) => f.forward(
                    tape,
                    &d,
                    &feats[self.cfg.enc_index(l)],
                    bn_train,
                    opts.asf_gate_override,
                ),
            })?;
            level_feats.push(d.clone());
        }

        let mut levels = Vec::with_capacity(self.heads.len());
        let mut mfs_inputs = Vec::new();
        for (l, lh) in self.heads.iter().enumerate() {
            let feat = &level_feats[l];
            let (_, _, fh, fw) = feat.dims4()?;
            let out = tape.scoped(format!("head/l{l}"), || -> Result<LevelOutput> {
                let seg = match &lh.seg {
                    Some(head) if self.seg_computed(l, opts.mode) => {
                        Some(tape.scoped("seg", || head.forward(tape, feat))?)
                    }
                    _ => None,
                };
                let (det_cls, det_reg) = match &lh.det {
                    Some(head) => {
                        let det_in = match &lh.ic {
                            Some(ic) => {
                                let logits =
                                    seg.as_ref().expect("ic implies a computed seg head");
                                tape.scoped("ic", || ic.forward(tape, feat, logits))?
                            }
                            None => feat.clone(),
                        };
                        let (cls, reg) = tape.scoped("det", || head.forward(tape, &det_in))?;
                        (Some(cls), Some(reg))
                    }
                    None => (None, None),
                };
                let agn = match &lh.agn {
                    Some(head) if training => Some(tape.scoped("agn", || head.forward(tape, feat))?),
                    _ => None,
                };
                Ok(LevelOutput { hw: (fh, fw), det_cls, det_reg, seg, agn })
            })?;
            if let Some(s) = &out.seg {
                mfs_inputs.push(s.clone());
            }
            levels.push(out);
        }

        let seg_fused = match &self.mfs {
            Some(m) => {
                debug_assert_eq!(mfs_inputs.len(), self.heads.len());
                Some(tape.scoped("mfs", || m.forward(tape, &mfs_inputs))?)
            }
            None => None,
        };

        Ok(ForwardOutputs { levels, seg_fused })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Network> {
        checkpoint::load(path)
    }
}
