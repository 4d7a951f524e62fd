//! fp64 forward references for every differentiable operation.
//!
//! Conventions pinned here (the production engine must match):
//! * conv2d is cross-correlation (no kernel flip), NCHW input, OIKK weight,
//!   output H' = (H + 2*pad - K) / stride + 1 rounded down.
//! * reflect padding mirrors without repeating the edge sample
//!   (index -1 maps to 1, index H maps to H-2); requires pad < H.
//! * conv_transpose2d is the exact adjoint of conv2d with the same OIKK
//!   weight: it consumes O channels and produces I channels,
//!   output H' = (H - 1) * stride - 2*pad + K + output_pad.
//! * instance_norm2d uses population variance over H*W per (n, c) with
//!   eps inside the square root.
//! * log_softmax normalizes over the channel axis of NCHW.

/// Dimensions of a rank-4 tensor in NCHW order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Padded lookup. Out-of-range indices resolve to 0.0 (zero padding) or to
/// the mirrored in-range sample (reflect padding).
fn sample(x: &[f64], d: Dims4, n: usize, c: usize, i: isize, j: isize, mode: PadMode) -> f64 {
    let (h, w) = (d.h as isize, d.w as isize);
    match mode {
        PadMode::Zero => {
            if i < 0 || j < 0 || i >= h || j >= w {
                0.0
            } else {
                x[d.at(n, c, i as usize, j as usize)]
            }
        }
        PadMode::Reflect => {
            let ri = reflect_index(i, h);
            let rj = reflect_index(j, w);
            x[d.at(n, c, ri, rj)]
        }
    }
}

/// Mirror an index into [0, len) without repeating the edge sample.
pub fn reflect_index(i: isize, len: isize) -> usize {
    assert!(len > 0);
    let mut i = i;
    // Each pass folds one overshoot; pad < len keeps this to a couple passes.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Output spatial size of conv2d.
pub fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Output spatial size of conv_transpose2d.
pub fn convt_out(h: usize, k: usize, stride: usize, pad: usize, output_pad: usize) -> usize {
    (h - 1) * stride + k + output_pad - 2 * pad
}

/// Cross-correlation with OIKK weights. Returns (data, dims).
pub fn conv2d(
    x: &[f64],
    xd: Dims4,
    w: &[f64],
    wd: Dims4, // (out_ch, in_ch, k, k)
    bias: &[f64],
    stride: usize,
    mode: PadMode,
    pad: usize,
) -> (Vec<f64>, Dims4) {
    assert_eq!(xd.c, wd.c, "input channels must match weight I");
    assert_eq!(bias.len(), wd.n);
    let oh = conv_out(xd.h, wd.h, stride, pad);
    let ow = conv_out(xd.w, wd.w, stride, pad);
    let od = Dims4::new(xd.n, wd.n, oh, ow);
    let mut out = vec![0.0; od.len()];
    for n in 0..xd.n {
        for o in 0..wd.n {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..xd.c {
                        for ki in 0..wd.h {
                            for kj in 0..wd.w {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                acc += sample(x, xd, n, c, ii, jj, mode)
                                    * w[wd.at(o, c, ki, kj)];
                            }
                        }
                    }
                    out[od.at(n, o, oi, oj)] = acc;
                }
            }
        }
    }
    (out, od)
}

/// Adjoint of conv2d: consumes wd.n channels, produces wd.c channels.
/// Scatter form, zero padding semantics only (the generator's upsampling
/// path never uses reflect padding here).
pub fn conv_transpose2d(
    x: &[f64],
    xd: Dims4,
    w: &[f64],
    wd: Dims4, // (o, i, k, k); xd.c == o
    bias: &[f64],
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> (Vec<f64>, Dims4) {
    assert_eq!(xd.c, wd.n, "input channels must match weight O");
    assert_eq!(bias.len(), wd.c);
    let oh = convt_out(xd.h, wd.h, stride, pad, output_pad);
    let ow = convt_out(xd.w, wd.w, stride, pad, output_pad);
    let od = Dims4::new(xd.n, wd.c, oh, ow);
    let mut out = vec![0.0; od.len()];
    for n in 0..xd.n {
        for i in 0..wd.c {
            for oi in 0..oh {
                for oj in 0..ow {
                    out[od.at(n, i, oi, oj)] = bias[i];
                }
            }
        }
        for o in 0..xd.c {
            for a in 0..xd.h {
                for b in 0..xd.w {
                    let v = x[xd.at(n, o, a, b)];
                    for i in 0..wd.c {
                        for ki in 0..wd.h {
                            for kj in 0..wd.w {
                                let oi = (a * stride + ki) as isize - pad as isize;
                                let oj = (b * stride + kj) as isize - pad as isize;
                                if oi >= 0 && oj >= 0 && (oi as usize) < oh && (oj as usize) < ow
                                {
                                    out[od.at(n, i, oi as usize, oj as usize)] +=
                                        v * w[wd.at(o, i, ki, kj)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, od)
}

/// Instance norm with affine transform, population variance, eps in sqrt.
pub fn instance_norm2d(x: &[f64], d: Dims4, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    assert_eq!(gamma.len(), d.c);
    assert_eq!(beta.len(), d.c);
    let hw = (d.h * d.w) as f64;
    let mut out = vec![0.0; d.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let mut mean = 0.0;
            for i in 0..d.h {
                for j in 0..d.w {
                    mean += x[d.at(n, c, i, j)];
                }
            }
            mean /= hw;
            let mut var = 0.0;
            for i in 0..d.h {
                for j in 0..d.w {
                    let v = x[d.at(n, c, i, j)] - mean;
                    var += v * v;
                }
            }
            var /= hw;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..d.h {
                for j in 0..d.w {
                    let idx = d.at(n, c, i, j);
                    out[idx] = gamma[c] * (x[idx] - mean) * inv + beta[c];
                }
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn leaky_relu(x: &[f64], slope: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

/// log(sigmoid(x)) evaluated stably.
pub fn log_sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let m = v.min(0.0);
            m - (1.0 + (-v.abs()).exp()).ln()
        })
        .collect()
}

/// log_softmax over the channel axis of NCHW.
pub fn log_softmax(x: &[f64], d: Dims4) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for n in 0..d.n {
        for i in 0..d.h {
            for j in 0..d.w {
                let mut mx = f64::NEG_INFINITY;
                for c in 0..d.c {
                    mx = mx.max(x[d.at(n, c, i, j)]);
                }
                let mut sum = 0.0;
                for c in 0..d.c {
                    sum += (x[d.at(n, c, i, j)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for c in 0..d.c {
                    out[d.at(n, c, i, j)] = x[d.at(n, c, i, j)] - lse;
                }
            }
        }
    }
    out
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn sum(x: &[f64]) -> f64 {
    x.iter().sum()
}

/// Mean absolute difference over all elements.
pub fn l1_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Class-weighted negative log likelihood from log-probabilities.
/// Mean over all N*H*W pixels of weight[label] * -logp[label].
pub fn nll(logp: &[f64], d: Dims4, labels: &[u8], weights: &[f64]) -> f64 {
    assert_eq!(labels.len(), d.n * d.h * d.w);
    assert_eq!(weights.len(), d.c);
    let mut acc = 0.0;
    for n in 0..d.n {
        for i in 0..d.h {
            for j in 0..d.w {
                let m = labels[(n * d.h + i) * d.w + j] as usize;
                assert!(m < d.c, "label {} out of range for {} classes", m, d.c);
                acc -= weights[m] * logp[d.at(n, m, i, j)];
            }
        }
    }
    acc / (d.n * d.h * d.w) as f64
}

/// Bilinear resample with align-corners index mapping
/// src = dst * (len_src - 1) / (len_dst - 1).
pub fn resample_bilinear(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert!(h >= 2 && w >= 2 && oh >= 2 && ow >= 2);
    let mut out = vec![0.0; oh * ow];
    for oi in 0..oh {
        for oj in 0..ow {
            let fi = oi as f64 * (h - 1) as f64 / (oh - 1) as f64;
            let fj = oj as f64 * (w - 1) as f64 / (ow - 1) as f64;
            let i0 = fi.floor() as usize;
            let j0 = fj.floor() as usize;
            let i1 = (i0 + 1).min(h - 1);
            let j1 = (j0 + 1).min(w - 1);
            let di = fi - i0 as f64;
            let dj = fj - j0 as f64;
            out[oi * ow + oj] = x[i0 * w + j0] * (1.0 - di) * (1.0 - dj)
                + x[i0 * w + j1] * (1.0 - di) * dj
                + x[i1 * w + j0] * di * (1.0 - dj)
                + x[i1 * w + j1] * di * dj;
        }
    }
    out
}

/// Nearest-neighbor resample under the same align-corners mapping,
/// rounding half up.
pub fn resample_nearest(x: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    assert!(h >= 1 && w >= 1 && oh >= 2 && ow >= 2);
    let mut out = vec![0u8; oh * ow];
    for oi in 0..oh {
        for oj in 0..ow {
            let fi = if h == 1 { 0.0 } else { oi as f64 * (h - 1) as f64 / (oh - 1) as f64 };
            let fj = if w == 1 { 0.0 } else { oj as f64 * (w - 1) as f64 / (ow - 1) as f64 };
            let si = (fi + 0.5).floor() as usize;
            let sj = (fj + 0.5).floor() as usize;
            out[oi * ow + oj] = x[si.min(h - 1) * w + sj.min(w - 1)];
        }
    }
    out
}
