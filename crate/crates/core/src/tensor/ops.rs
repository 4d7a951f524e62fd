//! Elementwise ops, activations, reductions, log_softmax and the weighted
//! negative log likelihood. Binary ops accept equal shapes, or a rank-0
//! scalar as the second operand (the only broadcast the engine supports).

use super::{joint_tape, BackwardFn, NodeId, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

fn node_id(t: &Tensor) -> Option<NodeId> {
    t.tape_node().map(|(_, id)| *id)
}

fn check_binary(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.rank() == 0 {
        Ok(true) // scalar broadcast
    } else {
        Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())))
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let scalar_b = check_binary(a, b)?;
    let tape = joint_tape(&[a, b])?;
    let data: Vec<f32> = if scalar_b {
        let s = b.data()[0];
        a.data().iter().map(|x| x + s).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
    };
    let (an, bn) = (node_id(a), node_id(b));
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let mut out = Vec::new();
            if let Some(id) = an {
                out.push((id, g.to_vec()));
            }
            if let Some(id) = bn {
                if scalar_b {
                    out.push((id, vec![g.iter().sum()]));
                } else {
                    out.push((id, g.to_vec()));
                }
            }
            out
        }) as BackwardFn
    });
    Ok(Tensor::tracked(a.shape().to_vec(), data, tape, backward))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let scalar_b = check_binary(a, b)?;
    let tape = joint_tape(&[a, b])?;
    let data: Vec<f32> = if scalar_b {
        let s = b.data()[0];
        a.data().iter().map(|x| x - s).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()
    };
    let (an, bn) = (node_id(a), node_id(b));
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let mut out = Vec::new();
            if let Some(id) = an {
                out.push((id, g.to_vec()));
            }
            if let Some(id) = bn {
                if scalar_b {
                    out.push((id, vec![-g.iter().sum::<f32>()]));
                } else {
                    out.push((id, g.iter().map(|v| -v).collect()));
                }
            }
            out
        }) as BackwardFn
    });
    Ok(Tensor::tracked(a.shape().to_vec(), data, tape, backward))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let scalar_b = check_binary(a, b)?;
    let tape = joint_tape(&[a, b])?;
    let data: Vec<f32> = if scalar_b {
        let s = b.data()[0];
        a.data().iter().map(|x| x * s).collect()
    } else {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
    };
    let (an, bn) = (node_id(a), node_id(b));
    let (ad, bd) = (Arc::new(a.data().to_vec()), Arc::new(b.data().to_vec()));
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let mut out = Vec::new();
            if let Some(id) = an {
                if scalar_b {
                    let s = bd[0];
                    out.push((id, g.iter().map(|v| v * s).collect()));
                } else {
                    out.push((id, g.iter().zip(bd.iter()).map(|(v, y)| v * y).collect()));
                }
            }
            if let Some(id) = bn {
                if scalar_b {
                    out.push((id, vec![g.iter().zip(ad.iter()).map(|(v, x)| v * x).sum()]));
                } else {
                    out.push((id, g.iter().zip(ad.iter()).map(|(v, x)| v * x).collect()));
                }
            }
            out
        }) as BackwardFn
    });
    Ok(Tensor::tracked(a.shape().to_vec(), data, tape, backward))
}

pub fn neg(a: &Tensor) -> Tensor {
    let tape = joint_tape(&[a]).expect("single input");
    let data: Vec<f32> = a.data().iter().map(|x| -x).collect();
    let an = node_id(a);
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match an {
            Some(id) => vec![(id, g.iter().map(|v| -v).collect())],
            None => vec![],
        }) as BackwardFn
    });
    Tensor::tracked(a.shape().to_vec(), data, tape, backward)
}

pub fn add_scalar(a: &Tensor, c: f32) -> Tensor {
    let tape = joint_tape(&[a]).expect("single input");
    let data: Vec<f32> = a.data().iter().map(|x| x + c).collect();
    let an = node_id(a);
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match an {
            Some(id) => vec![(id, g.to_vec())],
            None => vec![],
        }) as BackwardFn
    });
    Tensor::tracked(a.shape().to_vec(), data, tape, backward)
}

pub fn mul_scalar(a: &Tensor, c: f32) -> Tensor {
    let tape = joint_tape(&[a]).expect("single input");
    let data: Vec<f32> = a.data().iter().map(|x| x * c).collect();
    let an = node_id(a);
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match an {
            Some(id) => vec![(id, g.iter().map(|v| v * c).collect())],
            None => vec![],
        }) as BackwardFn
    });
    Tensor::tracked(a.shape().to_vec(), data, tape, backward)
}

/// Unary activation plumbing: forward map + backward factor from (x, y).
fn unary(
    a: &Tensor,
    fwd: impl Fn(f32) -> f32,
    dfactor: impl Fn(f32, f32) -> f32 + 'static,
) -> Tensor {
    let tape = joint_tape(&[a]).expect("single input");
    let data: Vec<f32> = a.data().iter().map(|&x| fwd(x)).collect();
    let an = node_id(a);
    let saved_x = Arc::new(a.data().to_vec());
    let saved_y = Arc::new(data.clone());
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match an {
            Some(id) => {
                let buf: Vec<f32> = g
                    .iter()
                    .zip(saved_x.iter().zip(saved_y.iter()))
                    .map(|(v, (&x, &y))| v * dfactor(x, y))
                    .collect();
                vec![(id, buf)]
            }
            None => vec![],
        }) as BackwardFn
    });
    Tensor::tracked(a.shape().to_vec(), data, tape, backward)
}

/// Subgradient at the kink is 0.
pub fn relu(a: &Tensor) -> Tensor {
    unary(a, |x| if x > 0.0 { x } else { 0.0 }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(a: &Tensor, slope: f32) -> Tensor {
    unary(
        a,
        move |x| if x > 0.0 { x } else { slope * x },
        move |x, _| if x > 0.0 { 1.0 } else { slope },
    )
}

pub fn tanh_op(a: &Tensor) -> Tensor {
    unary(a, |x| x.tanh(), |_, y| 1.0 - y * y)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
}

/// log(sigmoid(x)), stable for large |x|; d/dx = sigmoid(-x).
pub fn log_sigmoid(a: &Tensor) -> Tensor {
    unary(
        a,
        |x| x.min(0.0) - (-x.abs()).exp().ln_1p(),
        |x, _| {
            let e = (-x.abs()).exp();
            if x >= 0.0 {
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + e)
            }
        },
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    let tape = joint_tape(&[a]).expect("single input");
    let n = a.len();
    let m = a.data().iter().sum::<f32>() / n as f32;
    let an = node_id(a);
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match an {
            Some(id) => vec![(id, vec![g[0] / n as f32; n])],
            None => vec![],
        }) as BackwardFn
    });
    Tensor::tracked(vec![], vec![m], tape, backward)
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let tape = joint_tape(&[a]).expect("single input");
    let n = a.len();
    let s = a.data().iter().sum::<f32>();
    let an = node_id(a);
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match an {
            Some(id) => vec![(id, vec![g[0]; n])],
            None => vec![],
        }) as BackwardFn
    });
    Tensor::tracked(vec![], vec![s], tape, backward)
}

/// Mean absolute difference over all elements; the L1 metric behind the
/// cycle losses. Subgradient at equal elements is 0.
pub fn l1_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let tape = joint_tape(&[a, b])?;
    let n = a.len();
    let v = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f32>()
        / n as f32;
    let (an, bn) = (node_id(a), node_id(b));
    let (ad, bd) = (Arc::new(a.data().to_vec()), Arc::new(b.data().to_vec()));
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| {
            let scale = g[0] / n as f32;
            let signs: Vec<f32> = ad
                .iter()
                .zip(bd.iter())
                .map(|(x, y)| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut out = Vec::new();
            if let Some(id) = an {
                out.push((id, signs.clone()));
            }
            if let Some(id) = bn {
                out.push((id, signs.iter().map(|s| -s).collect()));
            }
            out
        }) as BackwardFn
    });
    Ok(Tensor::tracked(vec![], vec![v], tape, backward))
}

/// log_softmax over the channel axis of an NCHW tensor, max-subtracted for
/// stability. exp of the output sums to 1 along channels per pixel.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let tape = joint_tape(&[x])?;
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    let plane = h * w;
    let stride_n = c * plane;
    for nn in 0..n {
        for p in 0..plane {
            let base = nn * stride_n + p;
            let mut mx = f32::NEG_INFINITY;
            for cc in 0..c {
                mx = mx.max(xd[base + cc * plane]);
            }
            let mut sum = 0.0f32;
            for cc in 0..c {
                sum += (xd[base + cc * plane] - mx).exp();
            }
            let lse = mx + sum.ln();
            for cc in 0..c {
                out[base + cc * plane] = xd[base + cc * plane] - lse;
            }
        }
    }
    let xn = node_id(x);
    let saved = Arc::new(out.clone());
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match xn {
            Some(id) => {
                let mut dx = vec![0.0f32; g.len()];
                for nn in 0..n {
                    for p in 0..plane {
                        let base = nn * stride_n + p;
                        let mut gsum = 0.0f32;
                        for cc in 0..c {
                            gsum += g[base + cc * plane];
                        }
                        for cc in 0..c {
                            let i = base + cc * plane;
                            dx[i] = g[i] - saved[i].exp() * gsum;
                        }
                    }
                }
                vec![(id, dx)]
            }
            None => vec![],
        }) as BackwardFn
    });
    Ok(Tensor::tracked(x.shape().to_vec(), out, tape, backward))
}

/// Class-weighted negative log likelihood from NCHW log-probabilities and a
/// per-pixel label plane: mean over all N*H*W pixels of -w[m] * logp[m].
pub fn nll_weighted(logp: &Tensor, labels: &[u8], weights: &[f32]) -> Result<Tensor> {
    let (n, c, h, w) = logp.dims4()?;
    if labels.len() != n * h * w {
        return Err(Error::shape(format!("{} labels", n * h * w), format!("{}", labels.len())));
    }
    if weights.len() != c {
        return Err(Error::shape(format!("{} class weights", c), format!("{}", weights.len())));
    }
    if let Some(bad) = labels.iter().find(|&&m| m as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            bad, c
        )));
    }
    let tape = joint_tape(&[logp])?;
    let plane = h * w;
    let stride_n = c * plane;
    let ld = logp.data();
    let count = (n * plane) as f32;
    let mut acc = 0.0f32;
    for nn in 0..n {
        for p in 0..plane {
            let m = labels[nn * plane + p] as usize;
            acc -= weights[m] * ld[nn * stride_n + m * plane + p];
        }
    }
    let v = acc / count;
    let xn = node_id(logp);
    let labels: Arc<Vec<u8>> = Arc::new(labels.to_vec());
    let weights: Arc<Vec<f32>> = Arc::new(weights.to_vec());
    let total = n * stride_n;
    let backward: Option<BackwardFn> = tape.as_ref().map(|_| {
        Box::new(move |g: &[f32]| match xn {
            Some(id) => {
                let mut dx = vec![0.0f32; total];
                let scale = g[0] / count;
                for nn in 0..n {
                    for p in 0..plane {
                        let m = labels[nn * plane + p] as usize;
                        dx[nn * stride_n + m * plane + p] = -weights[m] * scale;
                    }
                }
                vec![(id, dx)]
            }
            None => vec![],
        }) as BackwardFn
    });
    Ok(Tensor::tracked(vec![], vec![v], tape, backward))
}
