//! Differentiable primitives: forward kernels and their gradient rules.
//!
//! Every function takes the tape first; on a recording tape the op is pushed
//! with whatever intermediate buffers its backward rule needs, on an
//! inference tape only the forward math runs.

use crate::error::{KforgeError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Which statistics a batch-norm layer normalizes with.
///
/// `Train` uses batch statistics and updates the running estimates.
/// `Eval` uses the running estimates. `BatchStats` uses batch statistics
/// without touching the running estimates — the mode shared-weight reward
/// evaluation runs in, where running stats are polluted across architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
    BatchStats,
}

fn shape3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(KforgeError::ShapeMismatch {
            op,
            detail: format!("expected 3-d tensor, got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2]))
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(KforgeError::ShapeMismatch {
            op,
            detail: format!("expected 2-d tensor, got {s:?}"),
        });
    }
    Ok((s[0], s[1]))
}

pub(crate) enum Op {
    Noop,
    Conv1d {
        x: Tensor,
        w: Tensor,
        bias: Tensor,
        out: Tensor,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Linear {
        x: Tensor,
        w: Tensor,
        bias: Tensor,
        out: Tensor,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        out: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        x: Tensor,
        out: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    GlobalAvgPool {
        x: Tensor,
        out: Tensor,
    },
    Embedding {
        table: Tensor,
        indices: Vec<usize>,
        out: Tensor,
    },
    LstmCell {
        x: Tensor,
        h: Tensor,
        c: Tensor,
        w_ih: Tensor,
        w_hh: Tensor,
        b_ih: Tensor,
        b_hh: Tensor,
        h_out: Tensor,
        c_out: Tensor,
        gates: Vec<f64>,
        tanh_c_next: Vec<f64>,
    },
    SoftmaxCe {
        logits: Tensor,
        labels: Vec<usize>,
        probs: Vec<f64>,
        loss: Tensor,
    },
    WeightedNll {
        logits: Tensor,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        loss: Tensor,
    },
    Scale {
        x: Tensor,
        factor: f64,
        out: Tensor,
    },
    Sum {
        x: Tensor,
        out: Tensor,
    },
    WeightedSum {
        x: Tensor,
        weights: Vec<f64>,
        out: Tensor,
    },
}

impl Op {
    pub(crate) fn outputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Noop => vec![],
            Op::Conv1d { out, .. }
            | Op::Linear { out, .. }
            | Op::BatchNorm { out, .. }
            | Op::Relu { out, .. }
            | Op::Add { out, .. }
            | Op::GlobalAvgPool { out, .. }
            | Op::Embedding { out, .. }
            | Op::Scale { out, .. }
            | Op::Sum { out, .. }
            | Op::WeightedSum { out, .. } => vec![out],
            Op::LstmCell { h_out, c_out, .. } => vec![h_out, c_out],
            Op::SoftmaxCe { loss, .. } | Op::WeightedNll { loss, .. } => vec![loss],
        }
    }

    pub(crate) fn backward(self, tape: &Tape) {
        match self {
            Op::Noop => {}
            Op::Conv1d {
                x,
                w,
                bias,
                out,
                stride,
                dilation,
                padding,
            } => backward_conv1d(tape, &x, &w, &bias, &out, stride, dilation, padding),
            Op::Linear { x, w, bias, out } => backward_linear(tape, &x, &w, &bias, &out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                out,
                xhat,
                inv_std,
                batch_stats,
            } => backward_batchnorm(tape, &x, &gamma, &beta, &out, &xhat, &inv_std, batch_stats),
            Op::Relu { x, out } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&x) {
                    let dx: Vec<f64> = {
                        let xd = x.data();
                        g.iter()
                            .zip(xd.iter())
                            .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect()
                    };
                    x.accumulate_grad(&dx);
                }
            }
            Op::Add { a, b, out } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&a) {
                    a.accumulate_grad(&g);
                }
                if tape.needs_grad(&b) {
                    b.accumulate_grad(&g);
                }
            }
            Op::GlobalAvgPool { x, out } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&x) {
                    let t = x.shape()[2];
                    let inv = 1.0 / t as f64;
                    let mut dx = vec![0.0; x.numel()];
                    for (row, &gi) in g.iter().enumerate() {
                        let v = gi * inv;
                        for ti in 0..t {
                            dx[row * t + ti] = v;
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }
            Op::Embedding {
                table,
                indices,
                out,
            } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&table) {
                    let e = table.shape()[1];
                    let mut dt = vec![0.0; table.numel()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..e {
                            dt[idx * e + j] += g[row * e + j];
                        }
                    }
                    table.accumulate_grad(&dt);
                }
            }
            Op::LstmCell {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                h_out,
                c_out,
                gates,
                tanh_c_next,
            } => backward_lstm(
                tape,
                &x,
                &h,
                &c,
                &w_ih,
                &w_hh,
                &b_ih,
                &b_hh,
                &h_out,
                &c_out,
                &gates,
                &tanh_c_next,
            ),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
                loss,
            } => {
                let Some(g) = loss.grad() else { return };
                if tape.needs_grad(&logits) {
                    let (b, k) = (labels.len(), logits.shape()[1]);
                    let scale = g[0] / b as f64;
                    let mut dl = probs;
                    for (row, &label) in labels.iter().enumerate() {
                        dl[row * k + label] -= 1.0;
                        for v in &mut dl[row * k..(row + 1) * k] {
                            *v *= scale;
                        }
                    }
                    logits.accumulate_grad(&dl);
                }
            }
            Op::WeightedNll {
                logits,
                labels,
                weights,
                probs,
                loss,
            } => {
                let Some(g) = loss.grad() else { return };
                if tape.needs_grad(&logits) {
                    let k = logits.shape()[1];
                    let mut dl = probs;
                    for (row, (&label, &wk)) in labels.iter().zip(&weights).enumerate() {
                        dl[row * k + label] -= 1.0;
                        for v in &mut dl[row * k..(row + 1) * k] {
                            *v *= g[0] * wk;
                        }
                    }
                    logits.accumulate_grad(&dl);
                }
            }
            Op::Scale { x, factor, out } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&x) {
                    let dx: Vec<f64> = g.iter().map(|&gi| gi * factor).collect();
                    x.accumulate_grad(&dx);
                }
            }
            Op::Sum { x, out } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&x) {
                    x.accumulate_grad(&vec![g[0]; x.numel()]);
                }
            }
            Op::WeightedSum { x, weights, out } => {
                let Some(g) = out.grad() else { return };
                if tape.needs_grad(&x) {
                    let dx: Vec<f64> = weights.iter().map(|&w| g[0] * w).collect();
                    x.accumulate_grad(&dx);
                }
            }
        }
    }
}

/// Dilated 1-D convolution over `x: [b, c_in, t]` with `w: [c_out, c_in, k]`,
/// zero padding. Output length is `(t + 2 pad - dil (k-1) - 1) / stride + 1`.
pub fn conv1d(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c_in, t) = shape3(x, "conv1d")?;
    let (c_out, wc_in, k) = shape3(w, "conv1d")?;
    if wc_in != c_in {
        return Err(KforgeError::ShapeMismatch {
            op: "conv1d",
            detail: format!("input has {c_in} channels, kernel expects {wc_in}"),
        });
    }
    if bias.shape() != vec![c_out] {
        return Err(KforgeError::ShapeMismatch {
            op: "conv1d",
            detail: format!("bias shape {:?}, expected [{c_out}]", bias.shape()),
        });
    }
    if stride < 1 || dilation < 1 {
        return Err(KforgeError::Domain {
            op: "conv1d",
            detail: format!("stride {stride} and dilation {dilation} must be >= 1"),
        });
    }
    let span = dilation * (k - 1) + 1;
    if t + 2 * padding < span {
        return Err(KforgeError::Domain {
            op: "conv1d",
            detail: format!(
                "padded length {} shorter than kernel span {span}",
                t + 2 * padding
            ),
        });
    }
    let t_out = (t + 2 * padding - span) / stride + 1;

    let mut out = vec![0.0; b * c_out * t_out];
    {
        let x_data = x.data();
        let w_data = w.data();
        let bias_data = bias.data();
        for bi in 0..b {
            let x_base = bi * c_in * t;
            for o in 0..c_out {
                let orow = &mut out[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out];
                orow.fill(bias_data[o]);
                for c in 0..c_in {
                    let xrow = &x_data[x_base + c * t..x_base + (c + 1) * t];
                    for j in 0..k {
                        let wv = w_data[(o * c_in + c) * k + j];
                        let off = (j * dilation) as isize - padding as isize;
                        let Some((lo, hi)) = tap_range(off, stride, t, t_out) else {
                            continue;
                        };
                        if stride == 1 {
                            let s0 = (lo as isize + off) as usize;
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(&xrow[s0..s0 + hi - lo]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (ti, ov) in orow[lo..hi].iter_mut().enumerate() {
                                let src = ((lo + ti) * stride) as isize + off;
                                *ov += wv * xrow[src as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, c_out, t_out], out)?;
    if tape.is_recording() {
        tape.push(Op::Conv1d {
            x: x.clone(),
            w: w.clone(),
            bias: bias.clone(),
            out: out.clone(),
            stride,
            dilation,
            padding,
        });
    }
    Ok(out)
}

/// The output positions fed by kernel tap offset `off`: `lo..hi` such that
/// `0 <= t*stride + off < t_in` for all `t` in the range.
fn tap_range(off: isize, stride: usize, t_in: usize, t_out: usize) -> Option<(usize, usize)> {
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(stride)
    } else {
        0
    };
    let max_src = t_in as isize - 1 - off;
    if max_src < 0 {
        return None;
    }
    let hi = (max_src as usize / stride + 1).min(t_out);
    (lo < hi).then_some((lo, hi))
}

#[allow(clippy::too_many_arguments)]
fn backward_conv1d(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    out: &Tensor,
    stride: usize,
    dilation: usize,
    padding: usize,
) {
    let Some(g) = out.grad() else { return };
    let (b, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_out = out.shape()[2];
    let need_x = tape.needs_grad(x);
    let need_w = tape.needs_grad(w);
    let need_b = tape.needs_grad(bias);
    if !(need_x || need_w || need_b) {
        return;
    }

    let mut dx = if need_x { vec![0.0; x.numel()] } else { vec![] };
    let mut dw = if need_w { vec![0.0; w.numel()] } else { vec![] };
    let mut db = if need_b { vec![0.0; c_out] } else { vec![] };
    {
        let x_data = x.data();
        let w_data = w.data();
        for bi in 0..b {
            let x_base = bi * c_in * t;
            for o in 0..c_out {
                let grow = &g[(bi * c_out + o) * t_out..(bi * c_out + o + 1) * t_out];
                if need_b {
                    db[o] += grow.iter().sum::<f64>();
                }
                for c in 0..c_in {
                    let xrow = &x_data[x_base + c * t..x_base + (c + 1) * t];
                    for j in 0..k {
                        let off = (j * dilation) as isize - padding as isize;
                        let Some((lo, hi)) = tap_range(off, stride, t, t_out) else {
                            continue;
                        };
                        if need_w {
                            let mut acc = 0.0;
                            if stride == 1 {
                                let s0 = (lo as isize + off) as usize;
                                for (&gv, &xv) in grow[lo..hi].iter().zip(&xrow[s0..s0 + hi - lo])
                                {
                                    acc += gv * xv;
                                }
                            } else {
                                for (ti, &gv) in grow[lo..hi].iter().enumerate() {
                                    let src = ((lo + ti) * stride) as isize + off;
                                    acc += gv * xrow[src as usize];
                                }
                            }
                            dw[(o * c_in + c) * k + j] += acc;
                        }
                        if need_x {
                            let wv = w_data[(o * c_in + c) * k + j];
                            let dxrow = &mut dx[x_base + c * t..x_base + (c + 1) * t];
                            if stride == 1 {
                                let s0 = (lo as isize + off) as usize;
                                for (dv, &gv) in
                                    dxrow[s0..s0 + hi - lo].iter_mut().zip(&grow[lo..hi])
                                {
                                    *dv += wv * gv;
                                }
                            } else {
                                for (ti, &gv) in grow[lo..hi].iter().enumerate() {
                                    let src = ((lo + ti) * stride) as isize + off;
                                    dxrow[src as usize] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if need_x {
        x.accumulate_grad(&dx);
    }
    if need_w {
        w.accumulate_grad(&dw);
    }
    if need_b {
        bias.accumulate_grad(&db);
    }
}

/// Fully connected `y = x w^T + bias` with `x: [b, f_in]`, `w: [f_out, f_in]`.
pub fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, f_in) = shape2(x, "linear")?;
    let (f_out, wf_in) = shape2(w, "linear")?;
    if wf_in != f_in {
        return Err(KforgeError::ShapeMismatch {
            op: "linear",
            detail: format!("input features {f_in}, weight expects {wf_in}"),
        });
    }
    if bias.shape() != vec![f_out] {
        return Err(KforgeError::ShapeMismatch {
            op: "linear",
            detail: format!("bias shape {:?}, expected [{f_out}]", bias.shape()),
        });
    }
    let mut out = vec![0.0; b * f_out];
    {
        let x_data = x.data();
        let w_data = w.data();
        let bias_data = bias.data();
        for r in 0..b {
            let xrow = &x_data[r * f_in..(r + 1) * f_in];
            for o in 0..f_out {
                let wrow = &w_data[o * f_in..(o + 1) * f_in];
                let mut acc = bias_data[o];
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out[r * f_out + o] = acc;
            }
        }
    }
    let out = Tensor::from_vec(&[b, f_out], out)?;
    if tape.is_recording() {
        tape.push(Op::Linear {
            x: x.clone(),
            w: w.clone(),
            bias: bias.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

fn backward_linear(tape: &Tape, x: &Tensor, w: &Tensor, bias: &Tensor, out: &Tensor) {
    let Some(g) = out.grad() else { return };
    let (b, f_in) = (x.shape()[0], x.shape()[1]);
    let f_out = w.shape()[0];
    let need_x = tape.needs_grad(x);
    let need_w = tape.needs_grad(w);
    let need_b = tape.needs_grad(bias);
    let mut dx = if need_x { vec![0.0; b * f_in] } else { vec![] };
    let mut dw = if need_w { vec![0.0; f_out * f_in] } else { vec![] };
    let mut db = if need_b { vec![0.0; f_out] } else { vec![] };
    {
        let x_data = x.data();
        let w_data = w.data();
        for r in 0..b {
            let grow = &g[r * f_out..(r + 1) * f_out];
            let xrow = &x_data[r * f_in..(r + 1) * f_in];
            for (o, &gv) in grow.iter().enumerate() {
                if need_b {
                    db[o] += gv;
                }
                if need_w {
                    let dwrow = &mut dw[o * f_in..(o + 1) * f_in];
                    for (dv, &xv) in dwrow.iter_mut().zip(xrow) {
                        *dv += gv * xv;
                    }
                }
                if need_x {
                    let wrow = &w_data[o * f_in..(o + 1) * f_in];
                    let dxrow = &mut dx[r * f_in..(r + 1) * f_in];
                    for (dv, &wv) in dxrow.iter_mut().zip(wrow) {
                        *dv += gv * wv;
                    }
                }
            }
        }
    }
    if need_x {
        x.accumulate_grad(&dx);
    }
    if need_w {
        w.accumulate_grad(&dw);
    }
    if need_b {
        bias.accumulate_grad(&db);
    }
}

/// Per-channel batch normalization over `x: [b, c, t]`.
///
/// Running statistics are read in `Eval` mode and updated (momentum 0.1,
/// unbiased variance) in `Train` mode.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm1d(
    tape: &mut Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: NormMode,
) -> Result<Tensor> {
    let (b, c, t) = shape3(x, "batchnorm1d")?;
    for (name, p) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if p.shape() != vec![c] {
            return Err(KforgeError::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!("{name} shape {:?}, expected [{c}]", p.shape()),
            });
        }
    }
    let n = b * t;
    let batch_stats = mode != NormMode::Eval;
    if batch_stats && n < 2 {
        return Err(KforgeError::DegenerateBatch(n));
    }

    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    if batch_stats {
        let x_data = x.data();
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                let row = &x_data[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                sum += row.iter().sum::<f64>();
            }
            let mu = sum / n as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                let row = &x_data[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                for &v in row {
                    let d = v - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / n as f64;
            inv_std[ci] = 1.0 / (var[ci] + BN_EPS).sqrt();
        }
        if mode == NormMode::Train {
            let unbias = n as f64 / (n as f64 - 1.0);
            running_mean.with_data_mut(|rm| {
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
            });
            running_var.with_data_mut(|rv| {
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            });
        }
    } else {
        mean.copy_from_slice(&running_mean.data());
        for (iv, &rv) in inv_std.iter_mut().zip(running_var.data().iter()) {
            *iv = 1.0 / (rv + BN_EPS).sqrt();
        }
    }

    let recording = tape.is_recording();
    let mut out = vec![0.0; b * c * t];
    let mut xhat = if recording {
        vec![0.0; b * c * t]
    } else {
        vec![]
    };
    {
        let x_data = x.data();
        let gamma_data = gamma.data();
        let beta_data = beta.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * t;
                let (mu, iv) = (mean[ci], inv_std[ci]);
                let (ga, be) = (gamma_data[ci], beta_data[ci]);
                if recording {
                    for i in base..base + t {
                        let xh = (x_data[i] - mu) * iv;
                        xhat[i] = xh;
                        out[i] = ga * xh + be;
                    }
                } else {
                    // y = a x + b, folded per channel.
                    let a = ga * iv;
                    let off = be - ga * mu * iv;
                    for i in base..base + t {
                        out[i] = a * x_data[i] + off;
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, c, t], out)?;
    if recording {
        tape.push(Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            out: out.clone(),
            xhat,
            inv_std,
            batch_stats,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn backward_batchnorm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    out: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
) {
    let Some(g) = out.grad() else { return };
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (b * t) as f64;
    let need_x = tape.needs_grad(x);
    let need_gamma = tape.needs_grad(gamma);
    let need_beta = tape.needs_grad(beta);
    let mut dx = if need_x { vec![0.0; x.numel()] } else { vec![] };
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let gamma_data = gamma.to_vec();
    for ci in 0..c {
        let mut s1 = 0.0; // sum of dy
        let mut s2 = 0.0; // sum of dy * xhat
        for bi in 0..b {
            let base = (bi * c + ci) * t;
            for i in base..base + t {
                s1 += g[i];
                s2 += g[i] * xhat[i];
            }
        }
        dbeta[ci] = s1;
        dgamma[ci] = s2;
        if need_x {
            let a = gamma_data[ci] * inv_std[ci];
            if batch_stats {
                let m1 = s1 / n;
                let m2 = s2 / n;
                for bi in 0..b {
                    let base = (bi * c + ci) * t;
                    for i in base..base + t {
                        dx[i] = a * (g[i] - m1 - xhat[i] * m2);
                    }
                }
            } else {
                for bi in 0..b {
                    let base = (bi * c + ci) * t;
                    for i in base..base + t {
                        dx[i] = a * g[i];
                    }
                }
            }
        }
    }
    if need_x {
        x.accumulate_grad(&dx);
    }
    if need_gamma {
        gamma.accumulate_grad(&dgamma);
    }
    if need_beta {
        beta.accumulate_grad(&dbeta);
    }
}

/// Elementwise `max(0, x)`; the derivative at exactly zero is zero.
pub fn relu(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
    let out = Tensor::from_vec(&x.shape(), out)?;
    if tape.is_recording() {
        tape.push(Op::Relu {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(KforgeError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let out: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::from_vec(&a.shape(), out)?;
    if tape.is_recording() {
        tape.push(Op::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Mean over the temporal axis: `[b, c, t] -> [b, c]`.
pub fn global_avg_pool(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let (b, c, t) = shape3(x, "global_avg_pool")?;
    let mut out = vec![0.0; b * c];
    {
        let x_data = x.data();
        for (row, ov) in out.iter_mut().enumerate() {
            let base = row * t;
            *ov = x_data[base..base + t].iter().sum::<f64>() / t as f64;
        }
    }
    let out = Tensor::from_vec(&[b, c], out)?;
    if tape.is_recording() {
        tape.push(Op::GlobalAvgPool {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Row lookup `[v, e] x indices[b] -> [b, e]`.
pub fn embedding_lookup(tape: &mut Tape, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (v, e) = shape2(table, "embedding_lookup")?;
    let mut out = vec![0.0; indices.len() * e];
    {
        let t_data = table.data();
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= v {
                return Err(KforgeError::IndexOutOfBounds {
                    what: "embedding row",
                    index: idx,
                    size: v,
                });
            }
            out[row * e..(row + 1) * e].copy_from_slice(&t_data[idx * e..(idx + 1) * e]);
        }
    }
    let out = Tensor::from_vec(&[indices.len(), e], out)?;
    if tape.is_recording() {
        tape.push(Op::Embedding {
            table: table.clone(),
            indices: indices.to_vec(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// One LSTM step. Gate layout along the `4h` axis is `[i, f, g, o]`:
/// `c' = sigma(i) tanh(g) + sigma(f) c`, `h' = sigma(o) tanh(c')`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell(
    tape: &mut Tape,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    b_ih: &Tensor,
    b_hh: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (b, i_sz) = shape2(x, "lstm_cell")?;
    let (hb, h_sz) = shape2(h, "lstm_cell")?;
    if hb != b || c.shape() != vec![b, h_sz] {
        return Err(KforgeError::ShapeMismatch {
            op: "lstm_cell",
            detail: format!(
                "x {:?}, h {:?}, c {:?} disagree on batch/hidden",
                x.shape(),
                h.shape(),
                c.shape()
            ),
        });
    }
    if w_ih.shape() != vec![4 * h_sz, i_sz]
        || w_hh.shape() != vec![4 * h_sz, h_sz]
        || b_ih.shape() != vec![4 * h_sz]
        || b_hh.shape() != vec![4 * h_sz]
    {
        return Err(KforgeError::ShapeMismatch {
            op: "lstm_cell",
            detail: format!(
                "weights {:?}/{:?}/{:?}/{:?} do not match i={i_sz}, h={h_sz}",
                w_ih.shape(),
                w_hh.shape(),
                b_ih.shape(),
                b_hh.shape()
            ),
        });
    }

    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut gates = vec![0.0; b * 4 * h_sz];
    let mut h_next = vec![0.0; b * h_sz];
    let mut c_next = vec![0.0; b * h_sz];
    let mut tanh_c_next = vec![0.0; b * h_sz];
    {
        let x_data = x.data();
        let h_data = h.data();
        let c_data = c.data();
        let wi = w_ih.data();
        let wh = w_hh.data();
        let bi_d = b_ih.data();
        let bh_d = b_hh.data();
        for row in 0..b {
            let xrow = &x_data[row * i_sz..(row + 1) * i_sz];
            let hrow = &h_data[row * h_sz..(row + 1) * h_sz];
            let grow = &mut gates[row * 4 * h_sz..(row + 1) * 4 * h_sz];
            for (r, gv) in grow.iter_mut().enumerate() {
                let mut acc = bi_d[r] + bh_d[r];
                for (wv, xv) in wi[r * i_sz..(r + 1) * i_sz].iter().zip(xrow) {
                    acc += wv * xv;
                }
                for (wv, hv) in wh[r * h_sz..(r + 1) * h_sz].iter().zip(hrow) {
                    acc += wv * hv;
                }
                *gv = acc;
            }
            for u in 0..h_sz {
                let ig = sigmoid(grow[u]);
                let fg = sigmoid(grow[h_sz + u]);
                let gg = grow[2 * h_sz + u].tanh();
                let og = sigmoid(grow[3 * h_sz + u]);
                grow[u] = ig;
                grow[h_sz + u] = fg;
                grow[2 * h_sz + u] = gg;
                grow[3 * h_sz + u] = og;
                let cn = fg * c_data[row * h_sz + u] + ig * gg;
                c_next[row * h_sz + u] = cn;
                tanh_c_next[row * h_sz + u] = cn.tanh();
                h_next[row * h_sz + u] = og * tanh_c_next[row * h_sz + u];
            }
        }
    }
    let h_out = Tensor::from_vec(&[b, h_sz], h_next)?;
    let c_out = Tensor::from_vec(&[b, h_sz], c_next)?;
    if tape.is_recording() {
        tape.push(Op::LstmCell {
            x: x.clone(),
            h: h.clone(),
            c: c.clone(),
            w_ih: w_ih.clone(),
            w_hh: w_hh.clone(),
            b_ih: b_ih.clone(),
            b_hh: b_hh.clone(),
            h_out: h_out.clone(),
            c_out: c_out.clone(),
            gates,
            tanh_c_next,
        });
    }
    Ok((h_out, c_out))
}

#[allow(clippy::too_many_arguments)]
fn backward_lstm(
    tape: &Tape,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    b_ih: &Tensor,
    b_hh: &Tensor,
    h_out: &Tensor,
    c_out: &Tensor,
    gates: &[f64],
    tanh_c_next: &[f64],
) {
    let gh = h_out.grad();
    let gc = c_out.grad();
    if gh.is_none() && gc.is_none() {
        return;
    }
    let (b, i_sz) = (x.shape()[0], x.shape()[1]);
    let h_sz = h.shape()[1];
    let zeros = vec![0.0; b * h_sz];
    let gh = gh.unwrap_or_else(|| zeros.clone());
    let gc = gc.unwrap_or(zeros);

    // Pre-activation gate gradients, layout [i, f, g, o].
    let mut d_pre = vec![0.0; b * 4 * h_sz];
    let mut dc = vec![0.0; b * h_sz];
    {
        let c_data = c.data();
        for row in 0..b {
            let grow = &gates[row * 4 * h_sz..(row + 1) * 4 * h_sz];
            for u in 0..h_sz {
                let idx = row * h_sz + u;
                let (ig, fg, gg, og) = (
                    grow[u],
                    grow[h_sz + u],
                    grow[2 * h_sz + u],
                    grow[3 * h_sz + u],
                );
                let tc = tanh_c_next[idx];
                let dct = gc[idx] + gh[idx] * og * (1.0 - tc * tc);
                let p = row * 4 * h_sz;
                d_pre[p + u] = dct * gg * ig * (1.0 - ig);
                d_pre[p + h_sz + u] = dct * c_data[idx] * fg * (1.0 - fg);
                d_pre[p + 2 * h_sz + u] = dct * ig * (1.0 - gg * gg);
                d_pre[p + 3 * h_sz + u] = gh[idx] * tc * og * (1.0 - og);
                dc[idx] = dct * fg;
            }
        }
    }

    if tape.needs_grad(c) {
        c.accumulate_grad(&dc);
    }
    let need_x = tape.needs_grad(x);
    let need_h = tape.needs_grad(h);
    let need_wi = tape.needs_grad(w_ih);
    let need_wh = tape.needs_grad(w_hh);
    let need_bi = tape.needs_grad(b_ih);
    let need_bh = tape.needs_grad(b_hh);

    let mut dx = if need_x { vec![0.0; b * i_sz] } else { vec![] };
    let mut dh = if need_h { vec![0.0; b * h_sz] } else { vec![] };
    let mut dwi = if need_wi {
        vec![0.0; 4 * h_sz * i_sz]
    } else {
        vec![]
    };
    let mut dwh = if need_wh {
        vec![0.0; 4 * h_sz * h_sz]
    } else {
        vec![]
    };
    let mut dbias = if need_bi || need_bh {
        vec![0.0; 4 * h_sz]
    } else {
        vec![]
    };
    {
        let x_data = x.data();
        let h_data = h.data();
        let wi = w_ih.data();
        let wh = w_hh.data();
        for row in 0..b {
            let prow = &d_pre[row * 4 * h_sz..(row + 1) * 4 * h_sz];
            let xrow = &x_data[row * i_sz..(row + 1) * i_sz];
            let hrow = &h_data[row * h_sz..(row + 1) * h_sz];
            for (r, &pv) in prow.iter().enumerate() {
                if !dbias.is_empty() {
                    dbias[r] += pv;
                }
                if need_wi {
                    for (dv, &xv) in dwi[r * i_sz..(r + 1) * i_sz].iter_mut().zip(xrow) {
                        *dv += pv * xv;
                    }
                }
                if need_wh {
                    for (dv, &hv) in dwh[r * h_sz..(r + 1) * h_sz].iter_mut().zip(hrow) {
                        *dv += pv * hv;
                    }
                }
                if need_x {
                    let dxrow = &mut dx[row * i_sz..(row + 1) * i_sz];
                    for (dv, &wv) in dxrow.iter_mut().zip(&wi[r * i_sz..(r + 1) * i_sz]) {
                        *dv += pv * wv;
                    }
                }
                if need_h {
                    let dhrow = &mut dh[row * h_sz..(row + 1) * h_sz];
                    for (dv, &wv) in dhrow.iter_mut().zip(&wh[r * h_sz..(r + 1) * h_sz]) {
                        *dv += pv * wv;
                    }
                }
            }
        }
    }
    if need_x {
        x.accumulate_grad(&dx);
    }
    if need_h {
        h.accumulate_grad(&dh);
    }
    if need_wi {
        w_ih.accumulate_grad(&dwi);
    }
    if need_wh {
        w_hh.accumulate_grad(&dwh);
    }
    if need_bi {
        b_ih.accumulate_grad(&dbias);
    }
    if need_bh {
        b_hh.accumulate_grad(&dbias);
    }
}

fn softmax_rows(logits: &[f64], b: usize, k: usize) -> Vec<f64> {
    let mut probs = vec![0.0; b * k];
    for row in 0..b {
        let ls = &logits[row * k..(row + 1) * k];
        let max = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ps = &mut probs[row * k..(row + 1) * k];
        let mut denom = 0.0;
        for (p, &l) in ps.iter_mut().zip(ls) {
            *p = (l - max).exp();
            denom += *p;
        }
        for p in ps.iter_mut() {
            *p /= denom;
        }
    }
    probs
}

fn check_labels(labels: &[usize], b: usize, k: usize, op: &'static str) -> Result<()> {
    if labels.len() != b {
        return Err(KforgeError::ShapeMismatch {
            op,
            detail: format!("{} labels for batch of {b}", labels.len()),
        });
    }
    for &l in labels {
        if l >= k {
            return Err(KforgeError::IndexOutOfBounds {
                what: "class label",
                index: l,
                size: k,
            });
        }
    }
    Ok(())
}

/// Mean cross-entropy of row-wise softmax. Returns `(loss, probs)`; the
/// probabilities are detached from the tape.
pub fn softmax_cross_entropy(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Tensor)> {
    let (b, k) = shape2(logits, "softmax_cross_entropy")?;
    check_labels(labels, b, k, "softmax_cross_entropy")?;
    let probs = softmax_rows(&logits.data(), b, k);
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        loss -= probs[row * k + label].max(f64::MIN_POSITIVE).ln();
    }
    loss /= b as f64;
    let loss_t = Tensor::scalar(loss);
    let probs_t = Tensor::from_vec(&[b, k], probs.clone())?;
    if tape.is_recording() {
        tape.push(Op::SoftmaxCe {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
            loss: loss_t.clone(),
        });
    }
    Ok((loss_t, probs_t))
}

/// Weighted negative log-likelihood `sum_b w_b * (-ln softmax(logits_b)[y_b])`.
/// The weights are constants, not differentiated through.
pub fn weighted_nll(
    tape: &mut Tape,
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<Tensor> {
    let (b, k) = shape2(logits, "weighted_nll")?;
    check_labels(labels, b, k, "weighted_nll")?;
    if weights.len() != b {
        return Err(KforgeError::ShapeMismatch {
            op: "weighted_nll",
            detail: format!("{} weights for batch of {b}", weights.len()),
        });
    }
    let probs = softmax_rows(&logits.data(), b, k);
    let mut loss = 0.0;
    for (row, (&label, &w)) in labels.iter().zip(weights).enumerate() {
        loss -= w * probs[row * k + label].max(f64::MIN_POSITIVE).ln();
    }
    let loss_t = Tensor::scalar(loss);
    if tape.is_recording() {
        tape.push(Op::WeightedNll {
            logits: logits.clone(),
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
            loss: loss_t.clone(),
        });
    }
    Ok(loss_t)
}

/// Multiply every element by a constant.
pub fn scale(tape: &mut Tape, x: &Tensor, factor: f64) -> Result<Tensor> {
    let out: Vec<f64> = x.data().iter().map(|&v| v * factor).collect();
    let out = Tensor::from_vec(&x.shape(), out)?;
    if tape.is_recording() {
        tape.push(Op::Scale {
            x: x.clone(),
            factor,
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
    let out = Tensor::scalar(x.data().iter().sum());
    if tape.is_recording() {
        tape.push(Op::Sum {
            x: x.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Dot product with a constant coefficient vector, as a scalar tensor.
pub fn weighted_sum(tape: &mut Tape, x: &Tensor, weights: &[f64]) -> Result<Tensor> {
    if weights.len() != x.numel() {
        return Err(KforgeError::ShapeMismatch {
            op: "weighted_sum",
            detail: format!("{} weights for {} elements", weights.len(), x.numel()),
        });
    }
    let out = Tensor::scalar(x.data().iter().zip(weights).map(|(&v, &w)| v * w).sum());
    if tape.is_recording() {
        tape.push(Op::WeightedSum {
            x: x.clone(),
            weights: weights.to_vec(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Stable row-wise softmax without tape participation (policy sampling).
pub fn softmax_inference(logits: &Tensor) -> Result<Vec<f64>> {
    let (b, k) = shape2(logits, "softmax")?;
    Ok(softmax_rows(&logits.data(), b, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::rng::stream;
    use rand::Rng as _;

    fn uniform_vec(n: usize, scale: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "[{i}]: {a} vs {e}");
        }
    }

    #[test]
    fn conv_counts_kernel_taps_on_constant_signal() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[1, 1, 5], vec![1.0; 5]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3], vec![1.0; 3]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let y = conv1d(&mut tape, &x, &w, &bias, 1, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn same_padding_preserves_length() {
        // k=3, d=2 needs p = d(k-1)/2 = 2 to keep T=1000.
        let mut tape = Tape::inference();
        let x = Tensor::zeros(&[1, 1, 1000]);
        let w = Tensor::zeros(&[1, 1, 3]);
        let bias = Tensor::zeros(&[1]);
        let y = conv1d(&mut tape, &x, &w, &bias, 1, 2, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1000]);
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut rng = stream(3, "conv-oracle");
        let (b, ci, t, co, k) = (2, 3, 16, 4, 5);
        let xd = uniform_vec(b * ci * t, 1.0, &mut rng);
        let wd = uniform_vec(co * ci * k, 1.0, &mut rng);
        let bd = uniform_vec(co, 1.0, &mut rng);
        let (expect, t_out) =
            oracles::conv1d_reference(&xd, b, ci, t, &wd, co, k, &bd, 2, 3, 0);
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[b, ci, t], xd).unwrap();
        let w = Tensor::from_vec(&[co, ci, k], wd).unwrap();
        let bias = Tensor::from_vec(&[co], bd).unwrap();
        let y = conv1d(&mut tape, &x, &w, &bias, 2, 3, 0).unwrap();
        assert_eq!(y.shape(), vec![b, co, t_out]);
        assert_close(&y.to_vec(), &expect, 1e-12);
    }

    #[test]
    fn conv_rejects_bad_inputs() {
        let mut tape = Tape::inference();
        let x = Tensor::zeros(&[1, 2, 8]);
        let w = Tensor::zeros(&[1, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(
            conv1d(&mut tape, &x, &w, &bias, 1, 1, 0),
            Err(KforgeError::ShapeMismatch { .. })
        ));
        let w2 = Tensor::zeros(&[1, 2, 5]);
        assert!(matches!(
            conv1d(&mut tape, &x, &w2, &bias, 1, 3, 0),
            Err(KforgeError::Domain { .. })
        ));
    }

    #[test]
    fn linear_identity_and_arithmetic() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::zeros(&[2]);
        assert_eq!(
            linear(&mut tape, &x, &w, &bias).unwrap().to_vec(),
            vec![1.0, 2.0]
        );
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(
            linear(&mut tape, &x, &w, &bias).unwrap().to_vec(),
            vec![6.0]
        );
    }

    #[test]
    fn linear_matches_naive_matmul() {
        let mut rng = stream(4, "linear-oracle");
        let (b, fi, fo) = (3, 4, 5);
        let xd = uniform_vec(b * fi, 1.0, &mut rng);
        let wd = uniform_vec(fo * fi, 1.0, &mut rng);
        let bd = uniform_vec(fo, 1.0, &mut rng);
        let expect = oracles::linear_reference(&xd, b, fi, &wd, fo, &bd);
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[b, fi], xd).unwrap();
        let w = Tensor::from_vec(&[fo, fi], wd).unwrap();
        let bias = Tensor::from_vec(&[fo], bd).unwrap();
        let y = linear(&mut tape, &x, &w, &bias).unwrap();
        assert_close(&y.to_vec(), &expect, 1e-12);
    }

    fn bn_state(c: usize) -> (Tensor, Tensor, Tensor, Tensor) {
        (
            Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
            Tensor::zeros(&[c]),
            Tensor::zeros(&[c]),
            Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
        )
    }

    #[test]
    fn batchnorm_symmetric_pair_normalizes_to_unit() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[1, 1, 2], vec![-3.0, 3.0]).unwrap();
        let (gamma, beta, rm, rv) = bn_state(1);
        let y = batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::Train).unwrap();
        assert_close(&y.to_vec(), &[-1.0, 1.0], 1e-5);
    }

    #[test]
    fn batchnorm_zero_gamma_yields_beta() {
        let mut tape = Tape::inference();
        let mut rng = stream(5, "bn");
        let x = Tensor::from_vec(&[2, 2, 4], uniform_vec(16, 2.0, &mut rng)).unwrap();
        let gamma = Tensor::zeros(&[2]);
        let beta = Tensor::from_vec(&[2], vec![0.7, -0.3]).unwrap();
        let (_, _, rm, rv) = bn_state(2);
        let y = batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::Train).unwrap();
        let yd = y.to_vec();
        for bi in 0..2 {
            for ci in 0..2 {
                for ti in 0..4 {
                    assert_eq!(yd[(bi * 2 + ci) * 4 + ti], beta.to_vec()[ci]);
                }
            }
        }
    }

    #[test]
    fn batchnorm_output_has_zero_mean_unit_variance() {
        let mut tape = Tape::inference();
        let mut rng = stream(6, "bn-mv");
        // Large input scale keeps the epsilon bias under the tolerance.
        let x = Tensor::from_vec(&[4, 2, 8], uniform_vec(64, 10.0, &mut rng)).unwrap();
        let (gamma, beta, rm, rv) = bn_state(2);
        let y = batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::BatchStats).unwrap();
        let yd = y.to_vec();
        for ci in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|bi| yd[(bi * 2 + ci) * 8..(bi * 2 + ci + 1) * 8].to_vec())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_train_updates_them() {
        let x = Tensor::from_vec(&[1, 1, 4], vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let (gamma, beta, rm, rv) = bn_state(1);
        let mut tape = Tape::inference();
        // Eval with fresh stats (mean 0, var 1) is a near-identity map.
        let y = batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::Eval).unwrap();
        assert_close(&y.to_vec(), &x.to_vec(), 1e-4);
        batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::Train).unwrap();
        // mean 5, biased var 5, unbiased var 20/3; momentum 0.1.
        assert_close(&rm.to_vec(), &[0.5], 1e-12);
        assert_close(&rv.to_vec(), &[0.9 + 0.1 * 20.0 / 3.0], 1e-12);
        // BatchStats must not touch them.
        batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::BatchStats).unwrap();
        assert_close(&rm.to_vec(), &[0.5], 1e-12);
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[1, 1, 1], vec![3.0]).unwrap();
        let (gamma, beta, rm, rv) = bn_state(1);
        assert!(matches!(
            batchnorm1d(&mut tape, &x, &gamma, &beta, &rm, &rv, NormMode::Train),
            Err(KforgeError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn relu_pool_embed_basics() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&mut tape, &x).unwrap().to_vec(), vec![0.0, 0.0, 2.0]);

        let ones = Tensor::from_vec(&[1, 3, 10], vec![1.0; 30]).unwrap();
        assert_eq!(
            global_avg_pool(&mut tape, &ones).unwrap().to_vec(),
            vec![1.0, 1.0, 1.0]
        );

        let mut rng = stream(7, "embed");
        let table = Tensor::from_vec(&[7, 64], uniform_vec(7 * 64, 1.0, &mut rng)).unwrap();
        let row = embedding_lookup(&mut tape, &table, &[6]).unwrap();
        assert_eq!(row.to_vec(), table.to_vec()[6 * 64..7 * 64].to_vec());
        assert!(matches!(
            embedding_lookup(&mut tape, &table, &[7]),
            Err(KforgeError::IndexOutOfBounds { .. })
        ));

        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(
            add(&mut tape, &a, &b),
            Err(KforgeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn lstm_zero_weights_produce_zero_state() {
        let mut tape = Tape::inference();
        let (b, i, h) = (2, 3, 4);
        let x = Tensor::from_vec(&[b, i], vec![0.5; b * i]).unwrap();
        let h0 = Tensor::zeros(&[b, h]);
        let c0 = Tensor::zeros(&[b, h]);
        let w_ih = Tensor::zeros(&[4 * h, i]);
        let w_hh = Tensor::zeros(&[4 * h, h]);
        let b_ih = Tensor::zeros(&[4 * h]);
        let b_hh = Tensor::zeros(&[4 * h]);
        let (hn, cn) = lstm_cell(&mut tape, &x, &h0, &c0, &w_ih, &w_hh, &b_ih, &b_hh).unwrap();
        assert_eq!(hn.to_vec(), vec![0.0; b * h]);
        assert_eq!(cn.to_vec(), vec![0.0; b * h]);
    }

    #[test]
    fn lstm_saturated_gates_carry_cell_state() {
        // Forget gate driven to 1, input gate to 0: c' == c.
        let mut tape = Tape::inference();
        let (b, i, h) = (1, 2, 3);
        let mut rng = stream(8, "lstm-sat");
        let x = Tensor::from_vec(&[b, i], uniform_vec(b * i, 1.0, &mut rng)).unwrap();
        let h0 = Tensor::from_vec(&[b, h], uniform_vec(b * h, 1.0, &mut rng)).unwrap();
        let c0 = Tensor::from_vec(&[b, h], vec![0.3, -0.7, 1.1]).unwrap();
        let w_ih = Tensor::zeros(&[4 * h, i]);
        let w_hh = Tensor::zeros(&[4 * h, h]);
        let mut bias = vec![0.0; 4 * h];
        for u in 0..h {
            bias[u] = -1e3; // input gate shut
            bias[h + u] = 1e3; // forget gate open
        }
        let b_ih = Tensor::from_vec(&[4 * h], bias).unwrap();
        let b_hh = Tensor::zeros(&[4 * h]);
        let (_, cn) = lstm_cell(&mut tape, &x, &h0, &c0, &w_ih, &w_hh, &b_ih, &b_hh).unwrap();
        assert_close(&cn.to_vec(), &c0.to_vec(), 1e-12);
    }

    #[test]
    fn lstm_matches_scalar_reference() {
        let mut rng = stream(9, "lstm-oracle");
        let (b, i, h) = (2, 5, 4);
        let xd = uniform_vec(b * i, 1.0, &mut rng);
        let hd = uniform_vec(b * h, 1.0, &mut rng);
        let cd = uniform_vec(b * h, 1.0, &mut rng);
        let wid = uniform_vec(4 * h * i, 1.0, &mut rng);
        let whd = uniform_vec(4 * h * h, 1.0, &mut rng);
        let bid = uniform_vec(4 * h, 1.0, &mut rng);
        let bhd = uniform_vec(4 * h, 1.0, &mut rng);
        let (eh, ec) =
            oracles::lstm_cell_reference(&xd, &hd, &cd, b, i, h, &wid, &whd, &bid, &bhd);
        let mut tape = Tape::inference();
        let (hn, cn) = lstm_cell(
            &mut tape,
            &Tensor::from_vec(&[b, i], xd).unwrap(),
            &Tensor::from_vec(&[b, h], hd).unwrap(),
            &Tensor::from_vec(&[b, h], cd).unwrap(),
            &Tensor::from_vec(&[4 * h, i], wid).unwrap(),
            &Tensor::from_vec(&[4 * h, h], whd).unwrap(),
            &Tensor::from_vec(&[4 * h], bid).unwrap(),
            &Tensor::from_vec(&[4 * h], bhd).unwrap(),
        )
        .unwrap();
        assert_close(&hn.to_vec(), &eh, 1e-12);
        assert_close(&cn.to_vec(), &ec, 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::inference();
        let logits = Tensor::zeros(&[1, 6]);
        let (loss, probs) = softmax_cross_entropy(&mut tape, &logits, &[2]).unwrap();
        assert!((loss.item() - 6.0f64.ln()).abs() < 1e-12);
        assert_close(&probs.to_vec(), &[1.0 / 6.0; 6], 1e-12);

        let logits = Tensor::from_vec(&[1, 2], vec![10.0, -10.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&mut tape, &logits, &[0]).unwrap();
        assert!(loss.item() < 1e-8);

        assert!(matches!(
            softmax_cross_entropy(&mut tape, &Tensor::zeros(&[1, 3]), &[3]),
            Err(KforgeError::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = stream(10, "ce-oracle");
        let (b, k) = (3, 6);
        let ld = uniform_vec(b * k, 2.0, &mut rng);
        let labels = [1usize, 4, 0];
        let expect = oracles::softmax_ce_reference(&ld, b, k, &labels);
        let mut tape = Tape::inference();
        let logits = Tensor::from_vec(&[b, k], ld).unwrap();
        let (loss, probs) = softmax_cross_entropy(&mut tape, &logits, &labels).unwrap();
        assert!((loss.item() - expect).abs() < 1e-12);
        let pd = probs.to_vec();
        for row in 0..b {
            let s: f64 = pd[row * k..(row + 1) * k].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_sum_is_all_ones_and_relu_gates_it() {
        let x = Tensor::param(&[2, 3], vec![1.0, -1.0, 0.5, 2.0, -0.1, 0.0]).unwrap();
        let mut tape = Tape::recording();
        let loss = sum(&mut tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);

        let x = Tensor::param(&[2], vec![-1.0, 2.0]).unwrap();
        let mut tape = Tape::recording();
        let y = relu(&mut tape, &x).unwrap();
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_across_fanout() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::recording();
        let y = add(&mut tape, &x, &x).unwrap();
        let loss = sum(&mut tape, &y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    /// Analytic gradient of `weighted_sum(f(inputs), proj)` wrt each input
    /// against central finite differences.
    fn fd_check(
        build: impl Fn(&mut Tape, &[Tensor]) -> Tensor,
        inputs: &[(Vec<usize>, Vec<f64>)],
        proj: &[f64],
        tol: f64,
    ) {
        let tensors: Vec<Tensor> = inputs
            .iter()
            .map(|(s, d)| Tensor::param(s, d.clone()).unwrap())
            .collect();
        let mut tape = Tape::recording();
        let out = build(&mut tape, &tensors);
        let loss = weighted_sum(&mut tape, &out, proj).unwrap();
        tape.backward(&loss).unwrap();
        for (i, t) in tensors.iter().enumerate() {
            let analytic = t.grad().unwrap();
            let numeric = oracles::finite_diff(
                |probe| {
                    let mut local: Vec<Tensor> = inputs
                        .iter()
                        .map(|(s, d)| Tensor::from_vec(s, d.clone()).unwrap())
                        .collect();
                    local[i] = Tensor::from_vec(&inputs[i].0, probe.to_vec()).unwrap();
                    let mut tape = Tape::inference();
                    let out = build(&mut tape, &local);
                    let v: f64 = out.data().iter().zip(proj).map(|(&a, &b)| a * b).sum();
                    v
                },
                &inputs[i].1,
                1e-5,
            );
            let err = oracles::max_rel_err(&analytic, &numeric);
            assert!(err < tol, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream(11, "fd-conv");
        let (b, ci, t, co, k) = (2, 2, 9, 3, 3);
        let inputs = vec![
            (vec![b, ci, t], uniform_vec(b * ci * t, 1.0, &mut rng)),
            (vec![co, ci, k], uniform_vec(co * ci * k, 1.0, &mut rng)),
            (vec![co], uniform_vec(co, 1.0, &mut rng)),
        ];
        let t_out = (t + 2 * 2 - (2 * (k - 1) + 1)) / 1 + 1;
        let proj = uniform_vec(b * co * t_out, 1.0, &mut rng);
        fd_check(
            |tape, ts| conv1d(tape, &ts[0], &ts[1], &ts[2], 1, 2, 2).unwrap(),
            &inputs,
            &proj,
            1e-6,
        );
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = stream(12, "fd-lstm");
        let (b, i, h) = (2, 3, 4);
        let inputs = vec![
            (vec![b, i], uniform_vec(b * i, 1.0, &mut rng)),
            (vec![b, h], uniform_vec(b * h, 1.0, &mut rng)),
            (vec![b, h], uniform_vec(b * h, 1.0, &mut rng)),
            (vec![4 * h, i], uniform_vec(4 * h * i, 1.0, &mut rng)),
            (vec![4 * h, h], uniform_vec(4 * h * h, 1.0, &mut rng)),
            (vec![4 * h], uniform_vec(4 * h, 1.0, &mut rng)),
            (vec![4 * h], uniform_vec(4 * h, 1.0, &mut rng)),
        ];
        let proj = uniform_vec(b * h, 1.0, &mut rng);
        // Project only h'; c' feeds it through the cell anyway.
        fd_check(
            |tape, ts| {
                lstm_cell(tape, &ts[0], &ts[1], &ts[2], &ts[3], &ts[4], &ts[5], &ts[6])
                    .unwrap()
                    .0
            },
            &inputs,
            &proj,
            1e-6,
        );
    }

    #[test]
    fn weighted_nll_zero_weights_are_inert() {
        let mut rng = stream(13, "nll");
        let logits = Tensor::param(&[3, 4], uniform_vec(12, 1.0, &mut rng)).unwrap();
        let mut tape = Tape::recording();
        let loss = weighted_nll(&mut tape, &logits, &[0, 1, 2], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(loss.item(), 0.0);
        tape.backward(&loss).unwrap();
        assert_eq!(logits.grad().unwrap(), vec![0.0; 12]);
    }
}
