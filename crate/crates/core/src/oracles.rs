//! Independent reference implementations used by the test suites.
//!
//! Everything here is written as a direct transcription of the defining
//! formula — nested loops, no shared code with the production kernels — so
//! the two can check each other.

/// Direct nested-loop 1-D convolution with zero padding.
/// `x` is `[batch, c_in, t]`, `w` is `[c_out, c_in, k]`, output is
/// `[batch, c_out, t_out]` with
/// `t_out = (t + 2 pad - dil (k - 1) - 1) / stride + 1`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_reference(
    x: &[f64],
    batch: usize,
    c_in: usize,
    t: usize,
    w: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
    dilation: usize,
    padding: usize,
) -> (Vec<f64>, usize) {
    let t_out = (t + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
    let mut y = vec![0.0; batch * c_out * t_out];
    for b in 0..batch {
        for o in 0..c_out {
            for ti in 0..t_out {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for j in 0..k {
                        let src = (ti * stride + j * dilation) as isize - padding as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += x[(b * c_in + c) * t + src as usize]
                                * w[(o * c_in + c) * k + j];
                        }
                    }
                }
                y[(b * c_out + o) * t_out + ti] = acc;
            }
        }
    }
    (y, t_out)
}

/// Naive triple-loop `y = x w^T + bias` with `x: [b, f_in]`, `w: [f_out, f_in]`.
pub fn linear_reference(
    x: &[f64],
    b: usize,
    f_in: usize,
    w: &[f64],
    f_out: usize,
    bias: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; b * f_out];
    for r in 0..b {
        for o in 0..f_out {
            let mut acc = bias[o];
            for i in 0..f_in {
                acc += x[r * f_in + i] * w[o * f_in + i];
            }
            y[r * f_out + o] = acc;
        }
    }
    y
}

/// Scalar-by-scalar LSTM cell step, gate order `[i, f, g, o]`.
/// Returns `(h_next, c_next)` for `x: [b, i_sz]`, `h, c: [b, h_sz]`,
/// `w_ih: [4 h_sz, i_sz]`, `w_hh: [4 h_sz, h_sz]`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_reference(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    b: usize,
    i_sz: usize,
    h_sz: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    b_ih: &[f64],
    b_hh: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut h_next = vec![0.0; b * h_sz];
    let mut c_next = vec![0.0; b * h_sz];
    for row in 0..b {
        for u in 0..h_sz {
            let mut pre = [0.0f64; 4];
            for (gate, p) in pre.iter_mut().enumerate() {
                let r = gate * h_sz + u;
                let mut acc = b_ih[r] + b_hh[r];
                for i in 0..i_sz {
                    acc += w_ih[r * i_sz + i] * x[row * i_sz + i];
                }
                for j in 0..h_sz {
                    acc += w_hh[r * h_sz + j] * h[row * h_sz + j];
                }
                *p = acc;
            }
            let ig = sigmoid(pre[0]);
            let fg = sigmoid(pre[1]);
            let gg = pre[2].tanh();
            let og = sigmoid(pre[3]);
            let cn = fg * c[row * h_sz + u] + ig * gg;
            c_next[row * h_sz + u] = cn;
            h_next[row * h_sz + u] = og * cn.tanh();
        }
    }
    (h_next, c_next)
}

/// Cross-entropy by the direct formula (no max-subtraction trick):
/// mean over rows of `-ln(exp(l_y) / sum_j exp(l_j))`.
pub fn softmax_ce_reference(logits: &[f64], b: usize, k: usize, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for row in 0..b {
        let ls = &logits[row * k..(row + 1) * k];
        let denom: f64 = ls.iter().map(|v| v.exp()).sum();
        loss -= (ls[labels[row]].exp() / denom).ln();
    }
    loss / b as f64
}

/// Central finite differences of a scalar function, step `h`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst per-element deviation between two gradient vectors, relative to the
/// overall gradient scale `max(1e-6, ||a||_inf, ||b||_inf)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(1e-6f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Magnitudes of the naive discrete Fourier transform (first n/2 bins).
pub fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut mags = Vec::with_capacity(n / 2);
    for bin in 0..n / 2 {
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (t, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * bin as f64 * t as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        mags.push((re * re + im * im).sqrt());
    }
    mags
}
