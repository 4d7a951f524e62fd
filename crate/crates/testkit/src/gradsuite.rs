//! Finite-difference gradient suite: for every differentiable op, build a
//! random probe-weighted scalar through the engine, backprop analytically,
//! and compare against fp64 central differences of the independent
//! reference forward. One report per op.

use crate::fd;
use crate::ref64::{self, Dims4, PadMode};
use synseg_core::tensor as eng;

/// Small standalone RNG (splitmix64) so the oracle side owns its own
/// randomness.
pub struct Sm64(u64);

impl Sm64 {
    pub fn new(seed: u64) -> Sm64 {
        Sm64(seed)
    }
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
    /// Values in +-[0.2, 1.2): bounded away from relu/abs kinks at 0.
    pub fn kink_free(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = self.uniform(0.2, 1.2);
                if self.next_u64() & 1 == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }
}

pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Core comparison. `inputs` are (shape, values) of differentiable inputs;
/// `build` assembles the engine graph from tape-tracked versions of them;
/// `reference` is the independent fp64 forward producing the same output
/// (flattened). Returns the max relative error across all input gradients.
pub fn grad_compare<B, R>(
    rng: &mut Sm64,
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: B,
    reference: R,
) -> f64
where
    B: Fn(&eng::Tape, &[eng::Tensor]) -> eng::Tensor,
    R: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let raw: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let out64 = reference(&raw);
    let u: Vec<f64> = (0..out64.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();

    // engine: probe-weighted scalar, analytic gradients
    let tape = eng::Tape::new();
    let tracked: Vec<eng::Tensor> = inputs
        .iter()
        .map(|(shape, v)| tape.var(&eng::Tensor::from_vec(shape.clone(), to_f32(v)).unwrap()))
        .collect();
    let out = build(&tape, &tracked);
    assert_eq!(
        out.len(),
        out64.len(),
        "engine and reference outputs disagree in size"
    );
    let w = eng::Tensor::from_vec(out.shape().to_vec(), to_f32(&u)).unwrap();
    let loss = eng::sum_all(&eng::mul(&out, &w).unwrap());
    let grads = tape.backward(&loss).expect("backward");

    // reference: fp64 central differences of the same probe scalar
    let scalar = |xs: &[Vec<f64>]| -> f64 {
        reference(xs).iter().zip(&u).map(|(y, pw)| y * pw).sum()
    };
    let mut worst = 0.0f64;
    for (i, tr) in tracked.iter().enumerate() {
        let analytic = grads.of(tr).expect("tracked input has grad");
        let f = |x: &[f64]| {
            let mut tmp = raw.clone();
            tmp[i] = x.to_vec();
            scalar(&tmp)
        };
        let fdg = fd::central_diff(f, &raw[i], 1e-5);
        worst = worst.max(fd::rel_err(analytic, &fdg));
    }
    worst
}

fn small4(rng: &mut Sm64) -> (Dims4, Vec<usize>) {
    let d = Dims4::new(1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(4));
    (d, vec![d.n, d.c, d.h, d.w])
}

pub fn run_all(seed: u64, instances: usize) -> Vec<OpReport> {
    let mut rng = Sm64::new(seed);
    let mut out = Vec::new();

    macro_rules! op {
        ($name:literal, $body:expr) => {{
            let mut worst = 0.0f64;
            for _ in 0..instances {
                #[allow(clippy::redundant_closure_call)]
                let e: f64 = $body(&mut rng);
                worst = worst.max(e);
            }
            out.push(OpReport { name: $name, instances, max_rel_err: worst });
        }};
    }

    op!("add", |r: &mut Sm64| {
        let n = 3 + r.below(6);
        let (a, b) = (r.kink_free(n), r.kink_free(n));
        grad_compare(
            r,
            &[(vec![n], a), (vec![n], b)],
            |_, v| eng::add(&v[0], &v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect(),
        )
    });
    op!("sub", |r: &mut Sm64| {
        let n = 3 + r.below(6);
        let (a, b) = (r.kink_free(n), r.kink_free(n));
        grad_compare(
            r,
            &[(vec![n], a), (vec![n], b)],
            |_, v| eng::sub(&v[0], &v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(p, q)| p - q).collect(),
        )
    });
    op!("mul", |r: &mut Sm64| {
        let n = 3 + r.below(6);
        let (a, b) = (r.kink_free(n), r.kink_free(n));
        grad_compare(
            r,
            &[(vec![n], a), (vec![n], b)],
            |_, v| eng::mul(&v[0], &v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(p, q)| p * q).collect(),
        )
    });
    op!("mul_scalar_broadcast", |r: &mut Sm64| {
        let n = 3 + r.below(6);
        let (a, s) = (r.kink_free(n), r.kink_free(1));
        grad_compare(
            r,
            &[(vec![n], a), (vec![], s)],
            |_, v| eng::mul(&v[0], &v[1]).unwrap(),
            |x| x[0].iter().map(|p| p * x[1][0]).collect(),
        )
    });
    op!("neg", |r: &mut Sm64| {
        let n = 3 + r.below(6);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::neg(&v[0]),
            |x| x[0].iter().map(|p| -p).collect(),
        )
    });
    op!("relu", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::relu(&v[0]),
            |x| ref64::relu(&x[0]),
        )
    });
    op!("leaky_relu", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::leaky_relu(&v[0], 0.2),
            |x| ref64::leaky_relu(&x[0], 0.2),
        )
    });
    op!("tanh", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::tanh_op(&v[0]),
            |x| ref64::tanh(&x[0]),
        )
    });
    op!("sigmoid", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::sigmoid(&v[0]),
            |x| ref64::sigmoid(&x[0]),
        )
    });
    op!("log_sigmoid", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::log_sigmoid(&v[0]),
            |x| ref64::log_sigmoid(&x[0]),
        )
    });
    op!("mean", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::mean(&v[0]),
            |x| vec![ref64::mean(&x[0])],
        )
    });
    op!("sum", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        let a = r.kink_free(n);
        grad_compare(
            r,
            &[(vec![n], a)],
            |_, v| eng::sum_all(&v[0]),
            |x| vec![ref64::sum(&x[0])],
        )
    });
    op!("l1_diff", |r: &mut Sm64| {
        let n = 4 + r.below(8);
        // keep |a - b| far from the kink at equality
        let a = r.kink_free(n);
        let b: Vec<f64> = a.iter().map(|v| v + 3.0 + r.uniform(0.0, 1.0)).collect();
        grad_compare(
            r,
            &[(vec![n], a), (vec![n], b)],
            |_, v| eng::l1_diff(&v[0], &v[1]).unwrap(),
            |x| vec![ref64::l1_diff(&x[0], &x[1])],
        )
    });
    op!("log_softmax", |r: &mut Sm64| {
        let (d, shape) = small4(r);
        let x = r.kink_free(d.len());
        grad_compare(
            r,
            &[(shape, x)],
            |_, v| eng::log_softmax(&v[0]).unwrap(),
            move |x| ref64::log_softmax(&x[0], d),
        )
    });
    op!("nll_weighted", |r: &mut Sm64| {
        let d = Dims4::new(1 + r.below(2), 2 + r.below(3), 2 + r.below(3), 2 + r.below(3));
        let x = r.kink_free(d.len());
        let labels: Vec<u8> = (0..d.n * d.h * d.w).map(|_| r.below(d.c) as u8).collect();
        let weights: Vec<f64> = (0..d.c).map(|_| r.uniform(0.5, 2.0)).collect();
        let (l2, w2) = (labels.clone(), weights.clone());
        let wf: Vec<f32> = weights.iter().map(|&v| v as f32).collect();
        grad_compare(
            r,
            &[(vec![d.n, d.c, d.h, d.w], x)],
            move |_, v| eng::nll_weighted(&v[0], &l2, &wf).unwrap(),
            move |x| vec![ref64::nll(&x[0], d, &labels, &w2)],
        )
    });
    op!("instance_norm2d", |r: &mut Sm64| {
        let (d, shape) = small4(r);
        let x = r.kink_free(d.len());
        let gamma = r.kink_free(d.c);
        let beta = r.kink_free(d.c);
        grad_compare(
            r,
            &[(shape, x), (vec![d.c], gamma), (vec![d.c], beta)],
            |_, v| eng::instance_norm2d(&v[0], &v[1], &v[2], 1e-5).unwrap(),
            move |x| ref64::instance_norm2d(&x[0], d, &x[1], &x[2], 1e-5),
        )
    });
    op!("conv2d_zero_s1", |r: &mut Sm64| conv_case(r, 1, PadMode::Zero, 1));
    op!("conv2d_zero_s2", |r: &mut Sm64| conv_case(r, 2, PadMode::Zero, 1));
    op!("conv2d_reflect_s1", |r: &mut Sm64| conv_case(r, 1, PadMode::Reflect, 1));
    op!("conv2d_pad0", |r: &mut Sm64| conv_case(r, 1, PadMode::Zero, 0));
    op!("conv_transpose2d_s1", |r: &mut Sm64| convt_case(r, 1, 0));
    op!("conv_transpose2d_s2_op1", |r: &mut Sm64| convt_case(r, 2, 1));
    op!("conv_transpose2d_s2", |r: &mut Sm64| convt_case(r, 2, 0));

    out
}

fn conv_case(r: &mut Sm64, stride: usize, mode: PadMode, pad: usize) -> f64 {
    let k = 1 + 2 * r.below(2); // 1 or 3
    let (ci, co) = (1 + r.below(2), 1 + r.below(2));
    let h = k + pad + 2 + r.below(3);
    let w = k + pad + 2 + r.below(3);
    let xd = Dims4::new(1 + r.below(2), ci, h, w);
    let wd = Dims4::new(co, ci, k, k);
    let x = r.kink_free(xd.len());
    let wt = r.kink_free(wd.len());
    let b = r.kink_free(co);
    let emode = match mode {
        PadMode::Zero => eng::PadMode::Zero,
        PadMode::Reflect => eng::PadMode::Reflect,
    };
    grad_compare(
        r,
        &[
            (vec![xd.n, xd.c, xd.h, xd.w], x),
            (vec![co, ci, k, k], wt),
            (vec![co], b),
        ],
        move |_, v| eng::conv2d(&v[0], &v[1], &v[2], stride, emode, pad).unwrap(),
        move |i| ref64::conv2d(&i[0], xd, &i[1], wd, &i[2], stride, mode, pad).0,
    )
}

fn convt_case(r: &mut Sm64, stride: usize, output_pad: usize) -> f64 {
    let k = 3;
    let (co, ci) = (1 + r.below(2), 1 + r.below(2)); // weight (o=co, i=ci)
    let pad = r.below(2);
    let h = 3 + r.below(3);
    let w = 3 + r.below(3);
    let xd = Dims4::new(1 + r.below(2), co, h, w);
    let wd = Dims4::new(co, ci, k, k);
    let x = r.kink_free(xd.len());
    let wt = r.kink_free(wd.len());
    let b = r.kink_free(ci);
    grad_compare(
        r,
        &[
            (vec![xd.n, xd.c, xd.h, xd.w], x),
            (vec![co, ci, k, k], wt),
            (vec![ci], b),
        ],
        move |_, v| eng::conv_transpose2d(&v[0], &v[1], &v[2], stride, pad, output_pad).unwrap(),
        move |i| ref64::conv_transpose2d(&i[0], xd, &i[1], wd, &i[2], stride, pad, output_pad).0,
    )
}
