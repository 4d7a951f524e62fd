//! Instance normalization over NCHW: per (n, c) plane, population variance,
//! eps inside the square root, then per-channel affine.

use super::{joint_tape, BackwardFn, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

pub fn instance_norm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            format!("gamma/beta [{}]", c),
            format!("{:?}/{:?}", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0f32; xd.len()];
    // normalized values and inverse stddevs are reused by the backward pass
    let mut xhat = vec![0.0f32; xd.len()];
    let mut inv_std = vec![0.0f32; n * c];
    for plane in 0..n * c {
        let cc = plane % c;
        let src = &xd[plane * hw..(plane + 1) * hw];
        let mut mean = 0.0f32;
        for &v in src {
            mean += v;
        }
        mean /= hw as f32;
        let mut var = 0.0f32;
        for &v in src {
            let d = v - mean;
            var += d * d;
        }
        var /= hw as f32;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[plane] = inv;
        let xh = &mut xhat[plane * hw..(plane + 1) * hw];
        let dst = &mut out[plane * hw..(plane + 1) * hw];
        for ((d, xh), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
            let norm = (v - mean) * inv;
            *xh = norm;
            *d = gd[cc] * norm + bd[cc];
        }
    }

    let tape = joint_tape(&[x, gamma, beta])?;
    let xn = x.tape_node().map(|(_, id)| *id);
    let gn = gamma.tape_node().map(|(_, id)| *id);
    let bn = beta.tape_node().map(|(_, id)| *id);
    let xhat = Arc::new(xhat);
    let inv_std = Arc::new(inv_std);
    let gsave = Arc::new(gd.to_vec());
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let mut outg = Vec::new();
            if let Some(id) = bn {
                let mut db = vec![0.0f32; c];
                for plane in 0..n * c {
                    let gy = &g[plane * hw..(plane + 1) * hw];
                    db[plane % c] += gy.iter().sum::<f32>();
                }
                outg.push((id, db));
            }
            if let Some(id) = gn {
                let mut dg = vec![0.0f32; c];
                for plane in 0..n * c {
                    let gy = &g[plane * hw..(plane + 1) * hw];
                    let xh = &xhat[plane * hw..(plane + 1) * hw];
                    let mut acc = 0.0f32;
                    for (&gv, &xv) in gy.iter().zip(xh) {
                        acc += gv * xv;
                    }
                    dg[plane % c] += acc;
                }
                outg.push((id, dg));
            }
            if let Some(id) = xn {
                // dL/dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
                // with means over the (n, c) plane; standard result of
                // differentiating through the plane statistics.
                let mut dx = vec![0.0f32; g.len()];
                for plane in 0..n * c {
                    let cc = plane % c;
                    let gy = &g[plane * hw..(plane + 1) * hw];
                    let xh = &xhat[plane * hw..(plane + 1) * hw];
                    let mut gm = 0.0f32;
                    let mut gxm = 0.0f32;
                    for (&gv, &xv) in gy.iter().zip(xh) {
                        gm += gv;
                        gxm += gv * xv;
                    }
                    gm /= hw as f32;
                    gxm /= hw as f32;
                    let scale = gsave[cc] * inv_std[plane];
                    let dst = &mut dx[plane * hw..(plane + 1) * hw];
                    for ((d, &gv), &xv) in dst.iter_mut().zip(gy).zip(xh) {
                        *d = scale * (gv - gm - xv * gxm);
                    }
                }
                outg.push((id, dx));
            }
            outg
        }) as BackwardFn
    });
    Ok(Tensor::tracked(vec![n, c, h, w], out, tape, backward))
}
