//! Network building blocks. Construction goes through [`ParamReg`] so every
//! parameter gets a stable hierarchical name (used by checkpoints) and He
//! initialization from one seeded stream.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::tensor::{
    add, batch_norm, bilinear_resize, concat_channels, conv2d, global_average_pool, relu,
    scale_channels, sigmoid, Tape, Tensor,
};

pub(crate) struct ParamReg<'r> {
    rng: &'r mut ChaCha8Rng,
    pub params: Vec<(String, Tensor)>,
    pub state: Vec<(String, Tensor)>,
}

impl<'r> ParamReg<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> ParamReg<'r> {
        ParamReg { rng, params: Vec::new(), state: Vec::new() }
    }

    fn he_kernel(&mut self, c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        (0..c_out * c_in * k * k).map(|_| normal.sample(self.rng)).collect()
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv {
        let kernel = Tensor::from_vec(&[c_out, c_in, k, k], self.he_kernel(c_out, c_in, k)).unwrap();
        let bias = Tensor::zeros(&[c_out]);
        self.params.push((format!("{name}/kernel"), kernel.clone()));
        self.params.push((format!("{name}/bias"), bias.clone()));
        Conv { kernel, bias, stride, padding }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        let scale = Tensor::filled(&[c], 1.0);
        let shift = Tensor::zeros(&[c]);
        let running_mean = Tensor::zeros(&[c]);
        let running_var = Tensor::filled(&[c], 1.0);
        self.params.push((format!("{name}/scale"), scale.clone()));
        self.params.push((format!("{name}/shift"), shift.clone()));
        self.state.push((format!("{name}/running_mean"), running_mean.clone()));
        self.state.push((format!("{name}/running_var"), running_var.clone()));
        BatchNorm { scale, shift, running_mean, running_var }
    }
}

pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        conv2d(tape, x, &self.kernel, &self.bias, self.stride, self.padding)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        batch_norm(
            tape,
            x,
            &self.scale,
            &self.shift,
            &self.running_mean,
            &self.running_var,
            BN_EPS,
            BN_MOMENTUM,
            training,
        )
    }
}

/// conv -> bn -> relu
pub struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(reg: &mut ParamReg, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvBnRelu {
        ConvBnRelu {
            conv: reg.conv(&format!("{name}/conv"), c_in, c_out, k, stride, k / 2),
            bn: reg.bn(&format!("{name}/bn"), c_out),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, training)?;
        Ok(relu(tape, &y))
    }
}

/// Two 3x3 conv+bn with a residual shortcut (1x1 conv+bn projection when the
/// shape changes); relu after the first bn and after the sum.
pub struct ResidualUnit {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl ResidualUnit {
    pub fn new(reg: &mut ParamReg, name: &str, c_in: usize, c_out: usize, stride: usize) -> ResidualUnit {
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                reg.conv(&format!("{name}/proj/conv"), c_in, c_out, 1, stride, 0),
                reg.bn(&format!("{name}/proj/bn"), c_out),
            ))
        } else {
            None
        };
        ResidualUnit {
            conv1: reg.conv(&format!("{name}/conv1"), c_in, c_out, 3, stride, 1),
            bn1: reg.bn(&format!("{name}/bn1"), c_out),
            conv2: reg.conv(&format!("{name}/conv2"), c_out, c_out, 3, 1, 1),
            bn2: reg.bn(&format!("{name}/bn2"), c_out),
            shortcut,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, &h, training)?;
        let h = relu(tape, &h);
        let h = self.conv2.forward(tape, &h)?;
        let h = self.bn2.forward(tape, &h, training)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, &s, training)?
            }
            None => x.clone(),
        };
        Ok(relu(tape, &add(tape, &h, &s)?))
    }
}

/// Squeeze-excitation gate: gap -> 1x1 reduce -> relu -> 1x1 expand ->
/// sigmoid. Produces a per-channel gate in (0,1) shaped for the tensor it
/// will scale (which may have a different channel count than the input).
pub struct SeGate {
    reduce: Conv,
    expand: Conv,
}

impl SeGate {
    pub fn new(reg: &mut ParamReg, name: &str, c_in: usize, c_gate: usize, reduction: usize) -> SeGate {
        let hidden = (c_in / reduction).max(1);
        SeGate {
            reduce: reg.conv(&format!("{name}/reduce"), c_in, hidden, 1, 1, 0),
            expand: reg.conv(&format!("{name}/expand"), hidden, c_gate, 1, 1, 0),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let g = global_average_pool(tape, x)?;
        let g = self.reduce.forward(tape, &g)?;
        let g = relu(tape, &g);
        let g = self.expand.forward(tape, &g)?;
        Ok(sigmoid(tape, &g))
    }
}

/// Skip fusion: upsample the decoder feature to the encoder feature's size,
/// concatenate channels, refine with a residual unit. With an [`SeGate`]
/// attached, the (pre-upsample) decoder feature drives a per-channel gate
/// that scales the encoder feature first — attention skip fusion.
pub struct FuseUnit {
    pub se: Option<SeGate>,
    unit: ResidualUnit,
}

impl FuseUnit {
    pub fn new(
        reg: &mut ParamReg,
        name: &str,
        c_dec: usize,
        c_enc: usize,
        c_out: usize,
        se_reduction: Option<usize>,
    ) -> FuseUnit {
        let se = se_reduction.map(|r| SeGate::new(reg, &format!("{name}/se"), c_dec, c_enc, r));
        FuseUnit { se, unit: ResidualUnit::new(reg, &format!("{name}/unit"), c_dec + c_enc, c_out, 1) }
    }

    /// `gate_override` replaces the learned SE gate with a constant (a
    /// diagnostic hook: 1.0 makes attention fusion reproduce plain fusion
    /// bit for bit). The SE path itself is skipped when overridden.
    pub fn forward(
        &self,
        tape: &Tape,
        dec: &Tensor,
        enc: &Tensor,
        training: bool,
        gate_override: Option<f64>,
    ) -> Result<Tensor> {
        let (_, _, dh, dw) = dec.dims4()?;
        let (en, ec, eh, ew) = enc.dims4()?;
        if eh % dh != 0 || ew % dw != 0 {
            return Err(CoreError::shape(format!(
                "skip fusion needs an integral scale: decoder {dh}x{dw} vs encoder {eh}x{ew}"
            )));
        }
        let enc_in = match (&self.se, gate_override) {
            (Some(se), None) => {
                let gate = tape.scoped("se", || se.forward(tape, dec))?;
                tape.scoped("se", || scale_channels(tape, enc, &gate))?
            }
            (Some(_), Some(g)) => {
                let gate = Tensor::filled(&[en, ec, 1, 1], g);
                tape.scoped("se", || scale_channels(tape, enc, &gate))?
            }
            (None, _) => enc.clone(),
        };
        let up = bilinear_resize(tape, dec, eh, ew)?;
        let cat = concat_channels(tape, &[&up, &enc_in])?;
        self.unit.forward(tape, &cat, training)
    }
}

/// Detection head: shared 3x3 conv + relu, then sibling 1x1 convs for class
/// scores and box offsets. Channel layout per cell: anchor-major, i.e.
/// channel a*C + c is class c (or coord c) of the cell's a-th anchor.
pub struct DetHead {
    shared: Conv,
    cls: Conv,
    reg: Conv,
}

impl DetHead {
    pub fn new(reg: &mut ParamReg, name: &str, c_in: usize, num_anchors: usize, num_classes: usize) -> DetHead {
        DetHead {
            shared: reg.conv(&format!("{name}/shared"), c_in, c_in, 3, 1, 1),
            cls: reg.conv(&format!("{name}/cls"), c_in, num_anchors * (num_classes + 1), 1, 1, 0),
            reg: reg.conv(&format!("{name}/reg"), c_in, num_anchors * 4, 1, 1, 0),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = relu(tape, &self.shared.forward(tape, x)?);
        Ok((self.cls.forward(tape, &h)?, self.reg.forward(tape, &h)?))
    }
}

/// Plain 3x3 conv producing segmentation logits.
pub struct SegHead {
    conv: Conv,
}

impl SegHead {
    pub fn new(reg: &mut ParamReg, name: &str, c_in: usize, classes: usize) -> SegHead {
        SegHead { conv: reg.conv(&format!("{name}/conv"), c_in, classes, 3, 1, 1) }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(tape, x)
    }
}

/// Inner-connected module: segmentation logits pass through two 3x3
/// conv+relu layers, get concatenated back onto the feature map, and a
/// final 3x3 conv+relu produces the detection branch's input.
pub struct IcModule {
    conv1: Conv,
    conv2: Conv,
    merge: Conv,
}

impl IcModule {
    pub fn new(reg: &mut ParamReg, name: &str, c_feat: usize, c_logits: usize) -> IcModule {
        let hidden = (c_feat / 4).max(4);
        IcModule {
            conv1: reg.conv(&format!("{name}/conv1"), c_logits, hidden, 3, 1, 1),
            conv2: reg.conv(&format!("{name}/conv2"), hidden, hidden, 3, 1, 1),
            merge: reg.conv(&format!("{name}/merge"), c_feat + hidden, c_feat, 3, 1, 1),
        }
    }

    pub fn forward(&self, tape: &Tape, feat: &Tensor, seg_logits: &Tensor) -> Result<Tensor> {
        let h = relu(tape, &self.conv1.forward(tape, seg_logits)?);
        let h = relu(tape, &self.conv2.forward(tape, &h)?);
        let cat = concat_channels(tape, &[feat, &h])?;
        Ok(relu(tape, &self.merge.forward(tape, &cat)?))
    }
}

/// Multiscale fused segmentation: upsample every level's logits to the
/// finest level's size, concatenate coarse-to-fine, and fuse with a 3x3
/// conv into one set of logits.
pub struct MfsHead {
    conv: Conv,
}

impl MfsHead {
    pub fn new(reg: &mut ParamReg, name: &str, levels: usize, classes: usize) -> MfsHead {
        MfsHead { conv: reg.conv(&format!("{name}/conv"), levels * classes, classes, 3, 1, 1) }
    }

    pub fn forward(&self, tape: &Tape, level_logits: &[Tensor]) -> Result<Tensor> {
        let last = level_logits.last().ok_or_else(|| CoreError::invalid("mfs with no levels"))?;
        let (_, _, th, tw) = last.dims4()?;
        let mut resized = Vec::with_capacity(level_logits.len());
        for l in level_logits {
            let (_, _, h, w) = l.dims4()?;
            resized.push(if (h, w) == (th, tw) { l.clone() } else { bilinear_resize(tape, l, th, tw)? });
        }
        let refs: Vec<&Tensor> = resized.iter().collect();
        let cat = concat_channels(tape, &refs)?;
        self.conv.forward(tape, &cat)
    }
}
