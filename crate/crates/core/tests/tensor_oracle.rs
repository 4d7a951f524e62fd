//! Forward agreement between the fp32 engine and the fp64 reference on
//! randomized shapes, plus the inner-product adjoint identity tying
//! conv2d to conv_transpose2d.

use synseg_core::tensor as eng;
use synseg_testkit::gradsuite::Sm64;
use synseg_testkit::ref64::{self, Dims4, PadMode};

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn nchw(d: Dims4, v: &[f64]) -> eng::Tensor {
    eng::Tensor::from_vec(vec![d.n, d.c, d.h, d.w], to_f32(v)).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_forward_matches_reference() {
    let mut r = Sm64::new(11);
    for _ in 0..20 {
        let k = 1 + 2 * r.below(2);
        let stride = 1 + r.below(2);
        let pad = r.below(2);
        let mode = if r.below(2) == 0 { PadMode::Zero } else { PadMode::Reflect };
        let xd = Dims4::new(1 + r.below(2), 1 + r.below(3), k + 2 + r.below(5), k + 2 + r.below(5));
        let wd = Dims4::new(1 + r.below(3), xd.c, k, k);
        let x = r.kink_free(xd.len());
        let w = r.kink_free(wd.len());
        let b = r.kink_free(wd.n);
        let (want, od) = ref64::conv2d(&x, xd, &w, wd, &b, stride, mode, pad);
        let emode = match mode {
            PadMode::Zero => eng::PadMode::Zero,
            PadMode::Reflect => eng::PadMode::Reflect,
        };
        let got = eng::conv2d(
            &nchw(xd, &x),
            &nchw(wd, &w),
            &eng::Tensor::from_vec(vec![wd.n], to_f32(&b)).unwrap(),
            stride,
            emode,
            pad,
        )
        .unwrap();
        assert_eq!(got.shape(), &[od.n, od.c, od.h, od.w]);
        assert!(max_abs_diff(got.data(), &want) < 1e-4);
    }
}

#[test]
fn conv_transpose2d_forward_matches_reference() {
    let mut r = Sm64::new(12);
    for _ in 0..20 {
        let k = 3;
        let stride = 1 + r.below(2);
        let pad = r.below(2);
        let output_pad = r.below(stride);
        let xd = Dims4::new(1 + r.below(2), 1 + r.below(3), 2 + r.below(4), 2 + r.below(4));
        let wd = Dims4::new(xd.c, 1 + r.below(3), k, k);
        let x = r.kink_free(xd.len());
        let w = r.kink_free(wd.len());
        let b = r.kink_free(wd.c);
        let (want, od) = ref64::conv_transpose2d(&x, xd, &w, wd, &b, stride, pad, output_pad);
        let got = eng::conv_transpose2d(
            &nchw(xd, &x),
            &nchw(wd, &w),
            &eng::Tensor::from_vec(vec![wd.c], to_f32(&b)).unwrap(),
            stride,
            pad,
            output_pad,
        )
        .unwrap();
        assert_eq!(got.shape(), &[od.n, od.c, od.h, od.w]);
        assert!(max_abs_diff(got.data(), &want) < 1e-4);
    }
}

#[test]
fn instance_norm_and_log_softmax_match_reference() {
    let mut r = Sm64::new(13);
    for _ in 0..20 {
        let d = Dims4::new(1 + r.below(2), 1 + r.below(4), 2 + r.below(5), 2 + r.below(5));
        let x = r.kink_free(d.len());
        let g = r.kink_free(d.c);
        let b = r.kink_free(d.c);
        let want = ref64::instance_norm2d(&x, d, &g, &b, 1e-5);
        let got = eng::instance_norm2d(
            &nchw(d, &x),
            &eng::Tensor::from_vec(vec![d.c], to_f32(&g)).unwrap(),
            &eng::Tensor::from_vec(vec![d.c], to_f32(&b)).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(max_abs_diff(got.data(), &want) < 1e-4);

        let want = ref64::log_softmax(&x, d);
        let got = eng::log_softmax(&nchw(d, &x)).unwrap();
        assert!(max_abs_diff(got.data(), &want) < 1e-5);
    }
}

/// <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> with zero bias: the two
/// ops are exact adjoints of each other.
#[test]
fn conv_pair_satisfies_adjoint_identity() {
    let mut r = Sm64::new(14);
    for _ in 0..30 {
        let k = 1 + 2 * r.below(2);
        let stride = 1 + r.below(2);
        let pad = r.below(2);
        let xd = Dims4::new(1 + r.below(2), 1 + r.below(2), k + 2 + r.below(4), k + 2 + r.below(4));
        let wd = Dims4::new(1 + r.below(2), xd.c, k, k);
        let x = r.kink_free(xd.len());
        let w = r.kink_free(wd.len());

        let zero_o = eng::Tensor::from_vec(vec![wd.n], vec![0.0; wd.n]).unwrap();
        let zero_i = eng::Tensor::from_vec(vec![wd.c], vec![0.0; wd.c]).unwrap();
        let fx = eng::conv2d(&nchw(xd, &x), &nchw(wd, &w), &zero_o, stride, eng::PadMode::Zero, pad)
            .unwrap();

        let y = r.kink_free(fx.len());
        let yd = {
            let s = fx.shape();
            Dims4::new(s[0], s[1], s[2], s[3])
        };
        // conv2d consumed (H + 2p - K) up to a remainder; pick output_pad so
        // the transpose lands back on the original extent
        let oph = xd.h + 2 * pad - ((yd.h - 1) * stride + k);
        let opw = xd.w + 2 * pad - ((yd.w - 1) * stride + k);
        if oph != opw || oph >= stride {
            continue; // rectangular remainder: geometry not invertible here
        }
        let fty =
            eng::conv_transpose2d(&nchw(yd, &y), &nchw(wd, &w), &zero_i, stride, pad, oph).unwrap();
        assert_eq!(fty.shape(), &[xd.n, xd.c, xd.h, xd.w]);

        let lhs: f64 = fx.data().iter().zip(&y).map(|(a, b)| *a as f64 * b).sum();
        let rhs: f64 = fty.data().iter().zip(&x).map(|(a, b)| *a as f64 * b).sum();
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        assert!(
            ((lhs - rhs) / scale).abs() < 1e-5,
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }
}
