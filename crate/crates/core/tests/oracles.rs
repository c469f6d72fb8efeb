//! Forward passes against plain-loop reimplementations.

mod common;

use axunet::attention::{cam_eval, pam_eval, PamParams, SelfAttention};
use axunet::data::{RegionMask, SlicePair};
use axunet::tensor::kernels;
use axunet::train::{bce_dice_loss, bce_loss, dice_loss, dice_score, evaluate_masks, loss_value};
use axunet::Tensor;
use common::*;
use rand::Rng;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_is_bit_compatible_with_direct_loops() {
    let mut r = rng(100);
    for (n, c, o, h, w, k, s, p) in [(2, 3, 4, 8, 8, 3, 1, 1), (1, 5, 2, 9, 7, 3, 2, 1), (3, 2, 3, 6, 6, 1, 1, 0), (1, 4, 4, 7, 10, 5, 2, 2)] {
        let x = rand_tensor(&[n, c, h, w], &mut r);
        let wt = rand_tensor(&[o, c, k, k], &mut r);
        let b = rand_tensor(&[o], &mut r);
        let got = kernels::conv2d(&x, &wt, Some(&b), s, p).unwrap();
        let want = conv2d_ref(&x, &wt, Some(&b), s, p);
        assert_eq!(got.shape(), want.shape());
        assert_eq!(got.data(), want.data(), "f64 conv {n}x{c}x{h}x{w} k{k} s{s} p{p}");
        let (x32, w32, b32) = (x.cast::<f32>(), wt.cast::<f32>(), b.cast::<f32>());
        let got = kernels::conv2d(&x32, &w32, Some(&b32), s, p).unwrap();
        assert_eq!(got.data(), conv2d_ref(&x32, &w32, Some(&b32), s, p).data(), "f32 conv");
    }
}

#[test]
fn conv2d_small_cases() {
    let ones = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
    let id = Tensor::ones(vec![1, 1, 1, 1]);
    assert_eq!(kernels::conv2d(&ones, &id, None, 1, 0).unwrap(), ones);
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = kernels::conv2d(&x, &Tensor::ones(vec![1, 1, 2, 2]), None, 1, 0).unwrap();
    assert_eq!(y.data(), &[10.0]);
    let mut centre = Tensor::<f64>::zeros(vec![2, 2, 3, 3]);
    for c in 0..2 {
        centre.data_mut()[c * 9 + c * 18 + 4] = 1.0;
    }
    let x = rand_tensor(&[2, 2, 5, 4], &mut rng(101));
    assert_eq!(kernels::conv2d(&x, &centre, None, 1, 1).unwrap(), x);
}

#[test]
fn separable_equals_two_step_composition() {
    let mut r = rng(102);
    for case in 0..20 {
        let n = r.random_range(1..3);
        let c = r.random_range(1..6);
        let o = r.random_range(1..6);
        let h = r.random_range(3..9);
        let w = r.random_range(3..9);
        let s = r.random_range(1..3);
        let x = rand_tensor(&[n, c, h, w], &mut r);
        let dw = rand_tensor(&[c, 1, 3, 3], &mut r);
        let pw = rand_tensor(&[o, c, 1, 1], &mut r);
        let b = rand_tensor(&[o], &mut r);
        let mut g = axunet::Graph::new();
        let v: Vec<_> = [&x, &dw, &pw, &b].iter().map(|t| g.constant((*t).clone()).unwrap()).collect();
        let y = g.separable_conv2d(v[0], v[1], v[2], Some(v[3]), s, 1).unwrap();
        let want = conv2d_ref(&depthwise_ref(&x, &dw, s, 1), &pw, Some(&b), 1, 0);
        assert_eq!(g.value(y).shape(), want.shape());
        assert!(max_abs_diff(g.value(y).data(), want.data()) < 1e-12, "case {case}");
    }
}

#[test]
fn separable_identity_and_parameter_count() {
    let c = 3;
    let mut dw = Tensor::<f64>::zeros(vec![c, 1, 3, 3]);
    let mut pw = Tensor::<f64>::zeros(vec![c, c, 1, 1]);
    for i in 0..c {
        dw.data_mut()[i * 9 + 4] = 1.0;
        pw.data_mut()[i * c + i] = 1.0;
    }
    let x = rand_tensor(&[1, c, 5, 5], &mut rng(103));
    let mut g = axunet::Graph::new();
    let v: Vec<_> = [&x, &dw, &pw].iter().map(|t| g.constant((*t).clone()).unwrap()).collect();
    let y = g.separable_conv2d(v[0], v[1], v[2], None, 1, 1).unwrap();
    assert_eq!(g.value(y), &x);

    let sep = axunet::nn::SeparableConv::new("s", 64, 128, 3, 1, 1).unwrap();
    let mut specs = Vec::new();
    sep.specs(&mut specs);
    let weights: usize = specs.iter().filter(|s| !s.name.ends_with("bias")).map(|s| s.shape.iter().product::<usize>()).sum();
    assert_eq!(weights, 64 * 9 + 128 * 64);
    assert!(weights < 128 * 64 * 9);
}

#[test]
fn conv_transpose_matches_scatter_reference() {
    let mut r = rng(104);
    for (n, ci, co, h, w, k, s, p, op) in [(1, 2, 3, 4, 4, 3, 2, 1, 1), (2, 3, 2, 3, 5, 3, 1, 1, 0), (1, 1, 1, 1, 1, 2, 2, 0, 0), (2, 4, 3, 5, 3, 3, 2, 0, 1)] {
        let x = rand_tensor(&[n, ci, h, w], &mut r);
        let wt = rand_tensor(&[ci, co, k, k], &mut r);
        let b = rand_tensor(&[co], &mut r);
        let got = kernels::conv_transpose2d(&x, &wt, Some(&b), s, p, op).unwrap();
        let want = conv_transpose_ref(&x, &wt, &b, s, p, op);
        assert_eq!(got.shape(), want.shape());
        assert_eq!(got.shape()[2], (h - 1) * s + k + op - 2 * p);
        assert!(max_abs_diff(got.data(), want.data()) < 1e-12);
    }
    let one = Tensor::<f64>::ones(vec![1, 1, 1, 1]);
    let y = kernels::conv_transpose2d(&one, &Tensor::ones(vec![1, 1, 2, 2]), None, 2, 0, 0).unwrap();
    assert_eq!(y, Tensor::ones(vec![1, 1, 2, 2]));
}

#[test]
fn conv_transpose_is_the_adjoint_of_conv() {
    let mut r = rng(105);
    for (n, c, o, h, w, k, s, p) in [(1, 2, 3, 7, 7, 3, 2, 1), (2, 3, 2, 6, 5, 3, 1, 1), (1, 1, 4, 8, 8, 2, 2, 0)] {
        let x = rand_tensor(&[n, c, h, w], &mut r);
        let wt = rand_tensor(&[o, c, k, k], &mut r);
        let y = kernels::conv2d(&x, &wt, None, s, p).unwrap();
        let gy = rand_tensor(y.shape(), &mut r);
        let (dx, _, _) = kernels::conv2d_backward(&x, &wt, &gy, s, p).unwrap();
        // recover the rows/cols the strided conv never touched
        let oh = (y.shape()[2] - 1) * s + k - 2 * p;
        let op = h - oh;
        let t = kernels::conv_transpose2d(&gy, &wt, None, s, p, op).unwrap();
        assert_eq!(t.shape(), dx.shape());
        assert!(max_abs_diff(t.data(), dx.data()) < 1e-12);
        // <conv(x), gy> = <x, convᵀ(gy)>
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}

#[test]
fn maxpool_small_cases() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, arg) = kernels::maxpool2d(&x, 2, 2, 0).unwrap();
    assert_eq!((y.data(), arg.as_slice()), (&[4.0][..], &[3][..]));
    let c = Tensor::full(vec![1, 1, 4, 4], 2.5);
    let (y, arg) = kernels::maxpool2d(&c, 2, 2, 0).unwrap();
    assert!(y.data().iter().all(|&v| v == 2.5));
    assert_eq!(arg, vec![0, 2, 8, 10]);
}

fn pam_params(c: usize, r: usize, seed: u64) -> PamParams<f64> {
    let layer = SelfAttention::new("pam", c, r).unwrap();
    let mut specs = Vec::new();
    layer.specs(&mut specs);
    PamParams { channels: c, reduction: r, store: random_store(&specs, seed) }
}

#[test]
fn pam_matches_quadratic_attention() {
    let mut r = rng(106);
    let mut tested = 0;
    for c in [8, 16] {
        for (h, w) in [(1, 1), (1, 5), (2, 3), (4, 4), (3, 7), (8, 8), (2, 32)] {
            if h * w > 64 {
                continue;
            }
            let p = pam_params(c, 8, 200 + tested);
            let x = rand_tensor(&[2, c, h, w], &mut r);
            let got = pam_eval(&x, &p).unwrap();
            let want = pam_quadratic(&x, &p.store, "pam");
            assert_eq!(got.shape(), x.shape());
            assert!(max_abs_diff(got.data(), want.data()) < 1e-10, "C={c} {h}x{w}");
            tested += 1;
        }
    }
    assert!(tested >= 12);
}

#[test]
fn pam_single_pixel_weight_is_one() {
    let c = 8;
    let p = pam_params(c, 4, 300);
    let x = rand_tensor(&[1, c, 1, 1], &mut rng(107));
    let got = pam_eval(&x, &p).unwrap();
    let get = |n: &str| p.store.get(&format!("pam.{n}")).unwrap();
    let v = conv2d_ref(&x, get("value.weight"), Some(get("value.bias")), 1, 0);
    let out = conv2d_ref(&v, get("out.weight"), Some(get("out.bias")), 1, 0);
    let want: Vec<f64> = x.data().iter().zip(out.data()).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(got.data(), &want) < 1e-12);
}

#[test]
fn cam_matches_loops_and_rows_sum_to_one() {
    let mut r = rng(108);
    for shape in [[1, 4, 3, 3], [2, 3, 2, 5], [1, 8, 4, 4]] {
        let x = rand_tensor(&shape, &mut r);
        let (want, mats) = cam_loops(&x);
        assert!(max_abs_diff(cam_eval(&x).unwrap().data(), want.data()) < 1e-10);
        for row in mats.iter().flatten() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut g = axunet::Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let a = axunet::attention::cam_attention(&mut g, xv).unwrap();
        let a = g.value(a);
        let c = shape[1];
        for row in a.data().chunks(c) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let x = rand_tensor(&[1, 1, 3, 3], &mut r);
    assert_eq!(cam_eval(&x).unwrap(), x.map(|v| 2.0 * v));
    assert!(cam_eval(&Tensor::<f64>::zeros(vec![1, 4, 2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_has_no_cross_batch_leakage() {
    let p = pam_params(8, 4, 301);
    let x = rand_tensor(&[3, 8, 2, 3], &mut rng(109));
    let y = pam_eval(&x, &p).unwrap();
    let per = 8 * 6;
    let perm = [2usize, 0, 1];
    let xp = Tensor::from_fn(vec![3, 8, 2, 3], |i| x.data()[perm[i / per] * per + i % per]);
    let yp = pam_eval(&xp, &p).unwrap();
    let cp = cam_eval(&xp).unwrap();
    let c = cam_eval(&x).unwrap();
    for (b, &src) in perm.iter().enumerate() {
        assert_eq!(&yp.data()[b * per..(b + 1) * per], &y.data()[src * per..(src + 1) * per]);
        assert_eq!(&cp.data()[b * per..(b + 1) * per], &c.data()[src * per..(src + 1) * per]);
    }
}

#[test]
fn losses_match_scalar_loops() {
    let mut r = rng(110);
    for shape in [[1, 3, 8, 8], [2, 3, 5, 4], [3, 3, 2, 2]] {
        let x = rand_tensor(&shape, &mut r).map(|v| 4.0 * v);
        let y = rand_binary(&shape, &mut r);
        let bce = loss_value(&x, &y, bce_loss).unwrap();
        assert!((bce - bce_naive(x.data(), y.data())).abs() < 1e-12);
        let dice = loss_value(&x, &y, |g, l, t| dice_loss(g, l, t, 1e-6)).unwrap();
        assert!((dice - dice_loss_loop(x.data(), y.data(), 1e-6)).abs() < 1e-12);

        let n = shape[0];
        let plane = shape[2] * shape[3];
        let mut want = 0.0;
        for ch in 0..3 {
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for b in 0..n {
                let off = (b * 3 + ch) * plane;
                xs.extend_from_slice(&x.data()[off..off + plane]);
                ys.extend_from_slice(&y.data()[off..off + plane]);
            }
            want += bce_naive(&xs, &ys) + dice_loss_loop(&xs, &ys, 1e-6);
        }
        want /= 3.0;
        let total = loss_value(&x, &y, |g, l, t| bce_dice_loss(g, l, t, 1e-6)).unwrap();
        assert!((total - want).abs() < 1e-12, "{total} vs {want}");
    }
}

#[test]
fn dice_loss_reference_values() {
    let big = Tensor::<f64>::full(vec![1, 1, 4, 4], 30.0);
    let ones = Tensor::ones(vec![1, 1, 4, 4]);
    assert!(loss_value(&big, &ones, |g, l, t| dice_loss(g, l, t, 1e-6)).unwrap() < 1e-9);
    let neg = big.map(|v| -2.0 * v);
    let zeros = Tensor::zeros(vec![1, 1, 4, 4]);
    assert!(loss_value(&neg, &zeros, |g, l, t| dice_loss(g, l, t, 1e-6)).unwrap() < 1e-6);
    let miss = loss_value(&neg, &ones, |g, l, t| dice_loss(g, l, t, 1e-6)).unwrap();
    assert!((miss - (1.0 - 1e-6 / (16.0 + 1e-6))).abs() < 1e-12);
}

#[test]
fn dice_score_matches_loop() {
    let mut r = rng(111);
    for _ in 0..50 {
        let n = r.random_range(1..200);
        let p = r.random_range(0.0..1.0);
        let q = r.random_range(0.0..1.0);
        let pred: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(p))).collect();
        let truth: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(q))).collect();
        assert!((dice_score(&pred, &truth).unwrap() - dice_score_loop(&pred, &truth)).abs() < 1e-12);
    }
    assert_eq!(dice_score(&[0, 0], &[0, 0]).unwrap(), 1.0);
    assert_eq!(dice_score(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.5);
}

#[test]
fn case_dice_pools_slices_before_scoring() {
    // two slices of one case: per-slice scores 1 and 0 would average 0.5,
    // pooled counts give 2·1/(1+2)
    let mask = |wt: [u8; 2]| RegionMask { height: 1, width: 2, wt: wt.to_vec(), tc: vec![0, 0], et: vec![0, 0] };
    let pair = |k: usize, m: RegionMask| SlicePair { case_id: "a".into(), slice: k, image: Tensor::zeros(vec![3, 1, 2]), mask: m };
    let truth = vec![pair(0, mask([1, 0])), pair(1, mask([0, 1]))];
    let preds = vec![mask([1, 0]), mask([0, 0])];
    let report = evaluate_masks(&preds, &truth).unwrap();
    assert_eq!(report.cases.len(), 1);
    assert!((report.mean.wt - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(report.mean.tc, 1.0);
}
