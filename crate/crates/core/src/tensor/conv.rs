//! conv2d / conv_transpose2d via explicit padding + im2col + GEMM.
//!
//! conv2d is cross-correlation over NCHW input with OIKK weights.
//! conv_transpose2d is its exact adjoint with the *same* weight layout: it
//! consumes O channels and produces I channels, so one weight tensor can
//! serve either direction of the inner-product identity
//! <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>.

use super::gemm::{gemm, gemm_a_bt, gemm_at_b};
use super::{joint_tape, BackwardFn, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Mirror an index into [0, len) without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
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

/// Pad every (n, c) plane by p on all sides.
fn pad2d(x: &[f32], n: usize, c: usize, h: usize, w: usize, p: usize, mode: PadMode) -> Vec<f32> {
    if p == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0f32; n * c * hp * wp];
    // column source map shared by every row (reflect only)
    let col_map: Vec<usize> = match mode {
        PadMode::Reflect => (0..wp).map(|j| reflect(j as isize - p as isize, w)).collect(),
        PadMode::Zero => Vec::new(),
    };
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * hp * wp..(plane + 1) * hp * wp];
        match mode {
            PadMode::Zero => {
                for i in 0..h {
                    dst[(i + p) * wp + p..(i + p) * wp + p + w]
                        .copy_from_slice(&src[i * w..(i + 1) * w]);
                }
            }
            PadMode::Reflect => {
                for ip in 0..hp {
                    let si = reflect(ip as isize - p as isize, h);
                    let srow = &src[si * w..(si + 1) * w];
                    let drow = &mut dst[ip * wp..(ip + 1) * wp];
                    for (d, &sj) in drow.iter_mut().zip(&col_map) {
                        *d = srow[sj];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of pad2d: fold a padded-shape gradient back to the unpadded
/// shape (crop for zero padding, mirrored accumulate for reflect).
fn unpad2d_adjoint(
    gp: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mode: PadMode,
) -> Vec<f32> {
    if p == 0 {
        return gp.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &gp[plane * hp * wp..(plane + 1) * hp * wp];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        match mode {
            PadMode::Zero => {
                for i in 0..h {
                    let srow = &src[(i + p) * wp + p..(i + p) * wp + p + w];
                    dst[i * w..(i + 1) * w].copy_from_slice(srow);
                }
            }
            PadMode::Reflect => {
                for ip in 0..hp {
                    let si = reflect(ip as isize - p as isize, h);
                    for jp in 0..wp {
                        let sj = reflect(jp as isize - p as isize, w);
                        dst[si * w + sj] += src[ip * wp + jp];
                    }
                }
            }
        }
    }
    out
}

/// Gather: col[(cc*k+ki)*k+kj][a*pw+b] = src[cc][a*stride+ki][b*stride+kj].
/// `src` is one image of c planes sized sh x sw; (ph, pw) is the position
/// grid (conv output positions, or transpose-conv input positions).
fn im2col(
    src: &[f32],
    c: usize,
    sh: usize,
    sw: usize,
    k: usize,
    stride: usize,
    ph: usize,
    pw: usize,
) -> Vec<f32> {
    let mut col = vec![0.0f32; c * k * k * ph * pw];
    let mut r = 0;
    for cc in 0..c {
        let plane = &src[cc * sh * sw..(cc + 1) * sh * sw];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut col[r * ph * pw..(r + 1) * ph * pw];
                for a in 0..ph {
                    let srow = (a * stride + ki) * sw + kj;
                    let drow = &mut dst[a * pw..(a + 1) * pw];
                    if stride == 1 {
                        drow.copy_from_slice(&plane[srow..srow + pw]);
                    } else {
                        for (b, d) in drow.iter_mut().enumerate() {
                            *d = plane[srow + b * stride];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    col
}

/// Scatter adjoint of im2col: buf[cc][a*stride+ki][b*stride+kj] += col[r][a*pw+b].
fn col2im(
    col: &[f32],
    c: usize,
    k: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    buf: &mut [f32],
    bh: usize,
    bw: usize,
) {
    debug_assert_eq!(buf.len(), c * bh * bw);
    let mut r = 0;
    for cc in 0..c {
        let plane = &mut buf[cc * bh * bw..(cc + 1) * bh * bw];
        for ki in 0..k {
            for kj in 0..k {
                let src = &col[r * ph * pw..(r + 1) * ph * pw];
                for a in 0..ph {
                    let drow = (a * stride + ki) * bw + kj;
                    let srow = &src[a * pw..(a + 1) * pw];
                    if stride == 1 {
                        for (d, &s) in plane[drow..drow + pw].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (b, &s) in srow.iter().enumerate() {
                            plane[drow + b * stride] += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Cross-correlation. Output spatial size floor((H + 2p - K)/stride) + 1.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    mode: PadMode,
    pad: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = x.dims4()?;
    let (o, wi, k, k2) = weight.dims4()?;
    if k != k2 {
        return Err(Error::InvalidArgument("only square kernels are supported".into()));
    }
    if wi != ci {
        return Err(Error::shape(format!("weight I = {}", ci), format!("{}", wi)));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(format!("bias [{}]", o), format!("{:?}", bias.shape())));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::InvalidArgument(format!(
            "kernel {}x{} larger than padded input {}x{}",
            k,
            k,
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    if mode == PadMode::Reflect && (pad >= h || pad >= w) {
        return Err(Error::InvalidArgument(format!(
            "reflect pad {} needs input extent > pad, got {}x{}",
            pad, h, w
        )));
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let oh = (hp - k) / stride + 1;
    let ow = (wp - k) / stride + 1;
    let planes = oh * ow;
    let ckk = ci * k * k;

    let xp = pad2d(x.data(), n, ci, h, w, pad, mode);
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; n * o * planes];
    let mut cols: Vec<Arc<Vec<f32>>> = Vec::with_capacity(n);
    for nn in 0..n {
        let col = im2col(&xp[nn * ci * hp * wp..(nn + 1) * ci * hp * wp], ci, hp, wp, k, stride, oh, ow);
        let dst = &mut out[nn * o * planes..(nn + 1) * o * planes];
        for oo in 0..o {
            dst[oo * planes..(oo + 1) * planes].fill(bd[oo]);
        }
        gemm(wd, o, ckk, &col, planes, dst);
        cols.push(Arc::new(col));
    }

    let tape = joint_tape(&[x, weight, bias])?;
    let xn = x.tape_node().map(|(_, id)| *id);
    let wn = weight.tape_node().map(|(_, id)| *id);
    let bn = bias.tape_node().map(|(_, id)| *id);
    let wsave = Arc::new(wd.to_vec());
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let mut outg = Vec::new();
            if let Some(id) = bn {
                let mut db = vec![0.0f32; o];
                for nn in 0..n {
                    for oo in 0..o {
                        let gy = &g[(nn * o + oo) * planes..(nn * o + oo + 1) * planes];
                        db[oo] += gy.iter().sum::<f32>();
                    }
                }
                outg.push((id, db));
            }
            if let Some(id) = wn {
                let mut dw = vec![0.0f32; o * ckk];
                for nn in 0..n {
                    let gy = &g[nn * o * planes..(nn + 1) * o * planes];
                    gemm_a_bt(gy, o, planes, &cols[nn], ckk, &mut dw);
                }
                outg.push((id, dw));
            }
            if let Some(id) = xn {
                let mut gxp = vec![0.0f32; n * ci * hp * wp];
                for nn in 0..n {
                    let gy = &g[nn * o * planes..(nn + 1) * o * planes];
                    let mut gcol = vec![0.0f32; ckk * planes];
                    gemm_at_b(&wsave, o, ckk, gy, planes, &mut gcol);
                    col2im(
                        &gcol,
                        ci,
                        k,
                        stride,
                        oh,
                        ow,
                        &mut gxp[nn * ci * hp * wp..(nn + 1) * ci * hp * wp],
                        hp,
                        wp,
                    );
                }
                outg.push((id, unpad2d_adjoint(&gxp, n, ci, h, w, pad, mode)));
            }
            outg
        }) as BackwardFn
    });
    Ok(Tensor::tracked(vec![n, o, oh, ow], out, tape, backward))
}

/// Adjoint of conv2d with the same OIKK weight; zero-padding semantics.
/// Output spatial size (H-1)*stride - 2p + K + output_pad.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<Tensor> {
    let (n, co, h, w) = x.dims4()?;
    let (o, i, k, k2) = weight.dims4()?;
    if k != k2 {
        return Err(Error::InvalidArgument("only square kernels are supported".into()));
    }
    if co != o {
        return Err(Error::shape(format!("weight O = {}", co), format!("{}", o)));
    }
    if bias.shape() != [i] {
        return Err(Error::shape(format!("bias [{}]", i), format!("{:?}", bias.shape())));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if output_pad >= stride {
        return Err(Error::InvalidArgument("output_pad must be < stride".into()));
    }
    let full = (h - 1) * stride + k + output_pad;
    if full < 2 * pad + 1 {
        return Err(Error::InvalidArgument(format!(
            "non-positive output size: (H-1)*s + K + op = {} vs 2*pad = {}",
            full,
            2 * pad
        )));
    }
    let oh = (h - 1) * stride + k + output_pad - 2 * pad;
    let ow = (w - 1) * stride + k + output_pad - 2 * pad;
    let (ohp, owp) = (oh + 2 * pad, ow + 2 * pad);
    let ikk = i * k * k;
    let hw = h * w;

    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; n * i * oh * ow];
    for nn in 0..n {
        let xs = &x.data()[nn * o * hw..(nn + 1) * o * hw];
        let mut xcol = vec![0.0f32; ikk * hw];
        gemm_at_b(wd, o, ikk, xs, hw, &mut xcol);
        let mut padded = vec![0.0f32; i * ohp * owp];
        col2im(&xcol, i, k, stride, h, w, &mut padded, ohp, owp);
        let dst = &mut out[nn * i * oh * ow..(nn + 1) * i * oh * ow];
        for ii in 0..i {
            let plane = &padded[ii * ohp * owp..(ii + 1) * ohp * owp];
            let drow = &mut dst[ii * oh * ow..(ii + 1) * oh * ow];
            for a in 0..oh {
                for (b, d) in drow[a * ow..(a + 1) * ow].iter_mut().enumerate() {
                    *d = plane[(a + pad) * owp + b + pad] + bd[ii];
                }
            }
        }
    }

    let tape = joint_tape(&[x, weight, bias])?;
    let xn = x.tape_node().map(|(_, id)| *id);
    let wn = weight.tape_node().map(|(_, id)| *id);
    let bn = bias.tape_node().map(|(_, id)| *id);
    let wsave = Arc::new(wd.to_vec());
    let xsave = Arc::new(x.data().to_vec());
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let mut outg = Vec::new();
            // both dX and dW need the im2col of the zero-padded gradient
            let gp = pad2d(g, n, i, oh, ow, pad, PadMode::Zero);
            let mut gcols: Vec<Vec<f32>> = Vec::with_capacity(n);
            for nn in 0..n {
                gcols.push(im2col(
                    &gp[nn * i * ohp * owp..(nn + 1) * i * ohp * owp],
                    i,
                    ohp,
                    owp,
                    k,
                    stride,
                    h,
                    w,
                ));
            }
            if let Some(id) = bn {
                let mut db = vec![0.0f32; i];
                for nn in 0..n {
                    for ii in 0..i {
                        let gy = &g[(nn * i + ii) * oh * ow..(nn * i + ii + 1) * oh * ow];
                        db[ii] += gy.iter().sum::<f32>();
                    }
                }
                outg.push((id, db));
            }
            if let Some(id) = wn {
                let mut dw = vec![0.0f32; o * ikk];
                for nn in 0..n {
                    let xs = &xsave[nn * o * hw..(nn + 1) * o * hw];
                    gemm_a_bt(xs, o, hw, &gcols[nn], ikk, &mut dw);
                }
                outg.push((id, dw));
            }
            if let Some(id) = xn {
                let mut dx = vec![0.0f32; n * o * hw];
                for nn in 0..n {
                    gemm(&wsave, o, ikk, &gcols[nn], hw, &mut dx[nn * o * hw..(nn + 1) * o * hw]);
                }
                outg.push((id, dx));
            }
            outg
        }) as BackwardFn
    });
    Ok(Tensor::tracked(vec![n, i, oh, ow], out, tape, backward))
}
