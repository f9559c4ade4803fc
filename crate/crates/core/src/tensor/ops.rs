//! Differentiable ops. Each records one tape node with an analytic backward
//! closure. Reductions use fixed loop orders so results are reproducible
//! bit-for-bit.

use std::rc::Rc;

use super::{Tape, Tensor};
use crate::error::{CoreError, Result};

/// Row-major GEMM with explicit strides: C = alpha * A(m,k) * B(k,n) + beta * C.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid output-column range [lo, hi) for one kernel column: the `oj` with
/// 0 <= oj*stride + kj - pad < w.
fn valid_cols(wo: usize, stride: usize, kj: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kj {
        ((w + pad - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let hw_out = ho * wo;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = ((c * kh + ki) * kw + kj) * hw_out;
                let (lo, hi) = valid_cols(wo, stride, kj, pad, w);
                for oi in 0..ho {
                    let row = &mut col[base + oi * wo..base + (oi + 1) * wo];
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    row[..lo].fill(0.0);
                    row[hi..].fill(0.0);
                    if hi <= lo {
                        continue;
                    }
                    if stride == 1 {
                        let j0 = lo + kj - pad; // >= 0 by construction of lo
                        row[lo..hi].copy_from_slice(&src[j0..j0 + (hi - lo)]);
                    } else {
                        for (oj, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                            *slot = src[oj * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let hw_out = ho * wo;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = ((c * kh + ki) * kw + kj) * hw_out;
                let (lo, hi) = valid_cols(wo, stride, kj, pad, w);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let row = &col[base + oi * wo..base + (oi + 1) * wo];
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in lo..hi {
                        dst[oj * stride + kj - pad] += row[oj];
                    }
                }
            }
        }
    }
}

/// 2-D convolution, NCHW input, OIHW kernel, symmetric zero padding.
/// Output spatial size: (h + 2*pad - kh) / stride + 1 (floor).
pub fn conv2d(
    tape: &Tape,
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c_in, h, w) = x.dims4()?;
    let ks = kernel.shape().to_vec();
    if ks.len() != 4 {
        return Err(CoreError::shape(format!("conv kernel must be rank 4, got {ks:?}")));
    }
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in {
        return Err(CoreError::shape(format!(
            "conv kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(CoreError::shape(format!(
            "conv bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(CoreError::invalid("conv stride must be >= 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(CoreError::shape(format!(
            "conv kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let ckk = c_in * kh * kw;
    let hw_out = ho * wo;
    let chw = c_in * h * w;

    let mut out = vec![0.0; n * c_out * hw_out];
    {
        let xd = x.data();
        let kd = kernel.data();
        let bd = bias.data();
        let mut col = vec![0.0; ckk * hw_out];
        for ni in 0..n {
            im2col(&xd[ni * chw..(ni + 1) * chw], c_in, h, w, kh, kw, stride, padding, ho, wo, &mut col);
            let slab = &mut out[ni * c_out * hw_out..(ni + 1) * c_out * hw_out];
            dgemm(c_out, ckk, hw_out, 1.0, &kd, ckk as isize, 1, &col, hw_out as isize, 1, 0.0, slab);
            for c in 0..c_out {
                let b = bd[c];
                for v in &mut slab[c * hw_out..(c + 1) * hw_out] {
                    *v += b;
                }
            }
        }
    }
    let y = Tensor::from_vec(&[n, c_out, ho, wo], out)?;

    let (xc, kc_, bc, yc) = (x.clone(), kernel.clone(), bias.clone(), y.clone());
    tape.record("conv2d", vec![x.clone(), kernel.clone(), bias.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        let xd = xc.data();
        let kd = kc_.data();
        let mut col = vec![0.0; ckk * hw_out];
        let mut dcol = vec![0.0; ckk * hw_out];
        let mut dk = vec![0.0; c_out * ckk];
        let mut db = vec![0.0; c_out];
        xc.with_grad_mut(|dx| {
            for ni in 0..n {
                let gn = &go[ni * c_out * hw_out..(ni + 1) * c_out * hw_out];
                // dX: col-space adjoint = K^T * dY, then scatter back.
                dgemm(ckk, c_out, hw_out, 1.0, &kd, 1, ckk as isize, gn, hw_out as isize, 1, 0.0, &mut dcol);
                col2im_add(&dcol, c_in, h, w, kh, kw, stride, padding, ho, wo, &mut dx[ni * chw..(ni + 1) * chw]);
                // dK += dY * col^T
                im2col(&xd[ni * chw..(ni + 1) * chw], c_in, h, w, kh, kw, stride, padding, ho, wo, &mut col);
                dgemm(c_out, hw_out, ckk, 1.0, gn, hw_out as isize, 1, &col, 1, hw_out as isize, 1.0, &mut dk);
                for c in 0..c_out {
                    db[c] += gn[c * hw_out..(c + 1) * hw_out].iter().sum::<f64>();
                }
            }
        });
        kc_.with_grad_mut(|g| {
            for (gi, di) in g.iter_mut().zip(&dk) {
                *gi += *di;
            }
        });
        bc.with_grad_mut(|g| {
            for (gi, di) in g.iter_mut().zip(&db) {
                *gi += *di;
            }
        });
    });
    Ok(y)
}

pub fn relu(tape: &Tape, x: &Tensor) -> Tensor {
    let yd: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let y = Tensor::from_vec(x.shape(), yd).unwrap();
    let (xc, yc) = (x.clone(), y.clone());
    tape.record("relu", vec![x.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        let xd = xc.data();
        xc.with_grad_mut(|dx| {
            for i in 0..dx.len() {
                if xd[i] > 0.0 {
                    dx[i] += go[i];
                }
            }
        });
    });
    y
}

pub fn sigmoid(tape: &Tape, x: &Tensor) -> Tensor {
    let yd: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    let y = Tensor::from_vec(x.shape(), yd).unwrap();
    let (xc, yc) = (x.clone(), y.clone());
    tape.record("sigmoid", vec![x.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        let yd = yc.data();
        xc.with_grad_mut(|dx| {
            for i in 0..dx.len() {
                dx[i] += go[i] * yd[i] * (1.0 - yd[i]);
            }
        });
    });
    y
}

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let yd: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let y = Tensor::from_vec(a.shape(), yd)?;
    let (ac, bc, yc) = (a.clone(), b.clone(), y.clone());
    tape.record("add", vec![a.clone(), b.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        ac.with_grad_mut(|da| {
            for (d, &gi) in da.iter_mut().zip(go) {
                *d += gi;
            }
        });
        bc.with_grad_mut(|db| {
            for (d, &gi) in db.iter_mut().zip(go) {
                *d += gi;
            }
        });
    });
    Ok(y)
}

/// Per-axis sample positions for bilinear interpolation with half-pixel
/// centers: src = (i + 0.5) * in/out - 0.5, clamped to [0, in-1].
fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to (out_h, out_w) with half-pixel sample centers.
/// Resizing to the same size reproduces the input exactly.
pub fn bilinear_resize(tape: &Tape, x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::invalid("resize target must be at least 1x1"));
    }
    let rows = Rc::new(axis_table(h, out_h));
    let cols = Rc::new(axis_table(w, out_w));
    let mut out = vec![0.0; n * c * out_h * out_w];
    {
        let xd = x.data();
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oi, &(i0, i1, ty)) in rows.iter().enumerate() {
                let r0 = &plane[i0 * w..i0 * w + w];
                let r1 = &plane[i1 * w..i1 * w + w];
                let ty0 = 1.0 - ty;
                let drow = &mut dst[oi * out_w..(oi + 1) * out_w];
                for (oj, &(j0, j1, tx)) in cols.iter().enumerate() {
                    let tx0 = 1.0 - tx;
                    drow[oj] = ty0 * (tx0 * r0[j0] + tx * r0[j1]) + ty * (tx0 * r1[j0] + tx * r1[j1]);
                }
            }
        }
    }
    let y = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
    let (xc, yc) = (x.clone(), y.clone());
    let (rows_b, cols_b) = (rows, cols);
    tape.record("bilinear_resize", vec![x.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        xc.with_grad_mut(|dx| {
            for p in 0..n * c {
                let gplane = &go[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                for (oi, &(i0, i1, ty)) in rows_b.iter().enumerate() {
                    let ty0 = 1.0 - ty;
                    for (oj, &(j0, j1, tx)) in cols_b.iter().enumerate() {
                        let tx0 = 1.0 - tx;
                        let gv = gplane[oi * out_w + oj];
                        dplane[i0 * w + j0] += ty0 * tx0 * gv;
                        dplane[i0 * w + j1] += ty0 * tx * gv;
                        dplane[i1 * w + j0] += ty * tx0 * gv;
                        dplane[i1 * w + j1] += ty * tx * gv;
                    }
                }
            }
        });
    });
    Ok(y)
}

/// Mean over spatial dims: [N,C,H,W] -> [N,C,1,1].
pub fn global_average_pool(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = vec![0.0; n * c];
    {
        let xd = x.data();
        for (p, o) in out.iter_mut().enumerate() {
            *o = xd[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
    }
    let y = Tensor::from_vec(&[n, c, 1, 1], out)?;
    let (xc, yc) = (x.clone(), y.clone());
    tape.record("global_average_pool", vec![x.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        xc.with_grad_mut(|dx| {
            for (p, &gv) in go.iter().enumerate() {
                let share = gv / hw as f64;
                for d in &mut dx[p * hw..(p + 1) * hw] {
                    *d += share;
                }
            }
        });
    });
    Ok(y)
}

/// Concatenate along the channel axis; spatial and batch dims must agree.
pub fn concat_channels(tape: &Tape, xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(CoreError::invalid("concat of zero tensors"));
    }
    let (n, _, h, w) = xs[0].dims4()?;
    let mut cs = Vec::with_capacity(xs.len());
    for x in xs {
        let (ni, ci, hi, wi) = x.dims4()?;
        if (ni, hi, wi) != (n, h, w) {
            return Err(CoreError::shape(format!(
                "concat mismatch: {:?} vs leading {:?}",
                x.shape(),
                xs[0].shape()
            )));
        }
        cs.push(ci);
    }
    let c_total: usize = cs.iter().sum();
    let hw = h * w;
    let mut out = vec![0.0; n * c_total * hw];
    for ni in 0..n {
        let mut off = ni * c_total * hw;
        for (x, &ci) in xs.iter().zip(&cs) {
            let xd = x.data();
            let slab = &xd[ni * ci * hw..(ni + 1) * ci * hw];
            out[off..off + ci * hw].copy_from_slice(slab);
            off += ci * hw;
        }
    }
    let y = Tensor::from_vec(&[n, c_total, h, w], out)?;
    let inputs: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
    let parts = inputs.clone();
    let yc = y.clone();
    tape.record("concat_channels", inputs, y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        for ni in 0..n {
            let mut off = ni * c_total * hw;
            for (x, &ci) in parts.iter().zip(&cs) {
                let src = &go[off..off + ci * hw];
                x.with_grad_mut(|dx| {
                    for (d, &gi) in dx[ni * ci * hw..(ni + 1) * ci * hw].iter_mut().zip(src) {
                        *d += gi;
                    }
                });
                off += ci * hw;
            }
        }
    });
    Ok(y)
}

/// Multiply each channel plane of `x` [N,C,H,W] by a gate from `g` [N,C,1,1].
pub fn scale_channels(tape: &Tape, x: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (gn, gc, gh, gw) = gate.dims4()?;
    if (gn, gc, gh, gw) != (n, c, 1, 1) {
        return Err(CoreError::shape(format!(
            "gate shape {:?} does not match [{n},{c},1,1]",
            gate.shape()
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    {
        let xd = x.data();
        let gd = gate.data();
        for p in 0..n * c {
            let gv = gd[p];
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(&xd[p * hw..(p + 1) * hw]) {
                *o = v * gv;
            }
        }
    }
    let y = Tensor::from_vec(x.shape(), out)?;
    let (xc, gc_, yc) = (x.clone(), gate.clone(), y.clone());
    tape.record("scale_channels", vec![x.clone(), gate.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        let gd = gc_.data();
        let xd = xc.data();
        xc.with_grad_mut(|dx| {
            for p in 0..n * c {
                let gv = gd[p];
                for (d, &gi) in dx[p * hw..(p + 1) * hw].iter_mut().zip(&go[p * hw..(p + 1) * hw]) {
                    *d += gi * gv;
                }
            }
        });
        gc_.with_grad_mut(|dg| {
            for p in 0..n * c {
                let mut acc = 0.0;
                for (&gi, &v) in go[p * hw..(p + 1) * hw].iter().zip(&xd[p * hw..(p + 1) * hw]) {
                    acc += gi * v;
                }
                dg[p] += acc;
            }
        });
    });
    Ok(y)
}

/// Softmax over the channel axis at every spatial position.
/// Stabilized by max subtraction.
pub fn softmax_channels(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c == 0 {
        return Err(CoreError::shape("softmax over zero channels"));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    {
        let xd = x.data();
        for ni in 0..n {
            for pix in 0..hw {
                let base = ni * c * hw + pix;
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(xd[base + ci * hw]);
                }
                let mut s = 0.0;
                for ci in 0..c {
                    let e = (xd[base + ci * hw] - m).exp();
                    out[base + ci * hw] = e;
                    s += e;
                }
                for ci in 0..c {
                    out[base + ci * hw] /= s;
                }
            }
        }
    }
    let y = Tensor::from_vec(x.shape(), out)?;
    let (xc, yc) = (x.clone(), y.clone());
    tape.record("softmax_channels", vec![x.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        let yd = yc.data();
        xc.with_grad_mut(|dx| {
            for ni in 0..n {
                for pix in 0..hw {
                    let base = ni * c * hw + pix;
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += go[base + ci * hw] * yd[base + ci * hw];
                    }
                    for ci in 0..c {
                        let idx = base + ci * hw;
                        dx[idx] += yd[idx] * (go[idx] - dot);
                    }
                }
            }
        });
    });
    Ok(y)
}

/// Scalar projection sum(w[i] * x[i]); handy for reducing any tensor to a
/// scalar with fixed weights.
pub fn dot_const(tape: &Tape, x: &Tensor, weights: Vec<f64>) -> Tensor {
    assert_eq!(weights.len(), x.numel(), "dot_const weight length mismatch");
    let v: f64 = x.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
    let y = Tensor::scalar(v);
    let (xc, yc) = (x.clone(), y.clone());
    tape.record("dot_const", vec![x.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let gv = g.as_deref().unwrap()[0];
        xc.with_grad_mut(|dx| {
            for (d, &wi) in dx.iter_mut().zip(&weights) {
                *d += wi * gv;
            }
        });
    });
    y
}

/// Weighted sum of scalar tensors: sum(w_i * t_i). One tape node.
pub fn affine_combine(tape: &Tape, terms: &[(Tensor, f64)]) -> Tensor {
    for (t, _) in terms {
        assert_eq!(t.numel(), 1, "affine_combine needs scalar terms");
    }
    let v: f64 = terms.iter().map(|(t, w)| w * t.value()).sum();
    let y = Tensor::scalar(v);
    let yc = y.clone();
    let terms_b: Vec<(Tensor, f64)> = terms.to_vec();
    let inputs: Vec<Tensor> = terms.iter().map(|(t, _)| t.clone()).collect();
    tape.record("affine_combine", inputs, y.clone(), move || {
        let g = yc.grad_guard();
        let gv = g.as_deref().unwrap()[0];
        for (t, w) in &terms_b {
            t.with_grad_mut(|dt| dt[0] += w * gv);
        }
    });
    y
}

/// Batch normalization over [N,C,H,W] with per-channel scale/shift.
///
/// Training mode uses biased batch statistics, updates running stats in
/// place with the given momentum, and normalizes by sqrt(max(var, eps)) so
/// zero-variance channels stay finite. Inference mode normalizes with the
/// running statistics; with neutral stats (mean 0, var 1) and identity
/// scale/shift the op reproduces its input exactly.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm(
    tape: &Tape,
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
    momentum: f64,
    training: bool,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [
        ("scale", scale),
        ("shift", shift),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(CoreError::shape(format!(
                "batch_norm {name} shape {:?} does not match {c} channels",
                t.shape()
            )));
        }
    }
    if eps <= 0.0 {
        return Err(CoreError::invalid("batch_norm eps must be positive"));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(CoreError::invalid("batch_norm momentum must be in [0,1]"));
    }
    let hw = h * w;
    let m = (n * hw) as f64;

    let (mean, var): (Vec<f64>, Vec<f64>) = if training {
        let xd = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                s += plane.iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for ni in 0..n {
                let plane = &xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                v += plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = v / m;
        }
        (mean, var)
    } else {
        (running_mean.data().clone(), running_var.data().clone())
    };
    let denom: Vec<f64> = var.iter().map(|&v| v.max(eps).sqrt()).collect();
    let floored: Vec<bool> = var.iter().map(|&v| v < eps).collect();

    let mut out = vec![0.0; n * c * hw];
    {
        let xd = x.data();
        let sd = scale.data();
        let bd = shift.data();
        for ni in 0..n {
            for ci in 0..c {
                let g = sd[ci] / denom[ci];
                let b = bd[ci] - mean[ci] * g;
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    out[base + i] = xd[base + i] * g + b;
                }
            }
        }
    }
    if training {
        let mut rm = running_mean.data_mut();
        let mut rv = running_var.data_mut();
        for ci in 0..c {
            rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
            rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci];
        }
    }

    let y = Tensor::from_vec(x.shape(), out)?;
    let (xc, sc, bc, yc) = (x.clone(), scale.clone(), shift.clone(), y.clone());
    tape.record("batch_norm", vec![x.clone(), scale.clone(), shift.clone()], y.clone(), move || {
        let g = yc.grad_guard();
        let go = g.as_deref().unwrap();
        let xd = xc.data();
        let sd = sc.data();
        let mut dscale = vec![0.0; c];
        let mut dshift = vec![0.0; c];
        xc.with_grad_mut(|dx| {
            for ci in 0..c {
                let (mu, dn) = (mean[ci], denom[ci]);
                let mut s1 = 0.0; // sum of dY
                let mut s2 = 0.0; // sum of dY * xhat
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        let gv = go[base + i];
                        s1 += gv;
                        s2 += gv * (xd[base + i] - mu) / dn;
                    }
                }
                dshift[ci] += s1;
                dscale[ci] += s2;
                let k = sd[ci] / dn;
                if training {
                    let c1 = s1 / m;
                    let c2 = if floored[ci] { 0.0 } else { s2 / m };
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            let xhat = (xd[base + i] - mu) / dn;
                            dx[base + i] += k * (go[base + i] - c1 - xhat * c2);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] += k * go[base + i];
                        }
                    }
                }
            }
        });
        sc.with_grad_mut(|g| {
            for (gi, di) in g.iter_mut().zip(&dscale) {
                *gi += *di;
            }
        });
        bc.with_grad_mut(|g| {
            for (gi, di) in g.iter_mut().zip(&dshift) {
                *gi += *di;
            }
        });
    });
    Ok(y)
}
