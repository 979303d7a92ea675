mod common;

use common::checks::{self, draw_conv, projected};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbquant_core::tensor::kernels::{self, ConvParams};
use vbquant_core::tensor::grad_check;


#[test]
fn conv3d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let d = draw_conv(&mut rng, 4, 8);
        let x = random_tensor(&mut rng, &[d.cin, d.dims[0], d.dims[1], d.dims[2]], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[d.cout, d.cin, d.k, d.k, d.k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[d.cout], -1.0, 1.0);
        let fast = kernels::conv3d(&x, &w, Some(&b), ConvParams::new(d.stride, d.pad)).unwrap();
        let slow = naive_conv3d(&x, &w, Some(&b), d.stride, d.pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(max_abs_diff(fast.data(), slow.data()) <= 1e-12);
    }
}

#[test]
fn conv3d_transpose_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..40 {
        let d = draw_conv(&mut rng, 4, 6);
        // transposed output must stay positive
        let dims = d.dims.map(|n| n.max(d.pad + 1));
        let y = random_tensor(&mut rng, &[d.cin, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[d.cin, d.cout, d.k, d.k, d.k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[d.cout], -1.0, 1.0);
        let p = ConvParams::new(d.stride, d.pad);
        let Ok(fast) = kernels::conv3d_transpose(&y, &w, Some(&b), p) else {
            continue;
        };
        let slow = naive_conv3d_transpose(&y, &w, Some(&b), d.stride, d.pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(max_abs_diff(fast.data(), slow.data()) <= 1e-12);
    }
}

#[test]
fn elementwise_ops_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let c = rng.gen_range(1..4);
        let shape = [c, rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
        let x = random_tensor(&mut rng, &shape, -3.0, 3.0);
        let y = random_tensor(&mut rng, &shape, -3.0, 3.0);
        let s = random_tensor(&mut rng, &[c], -1.0, 1.0);
        assert!(max_abs_diff(kernels::prelu(&x, &s).unwrap().data(), naive_prelu(&x, &s).data()) == 0.0);
        assert!(max_abs_diff(kernels::sigmoid(&x).data(), naive_sigmoid(&x).data()) <= 1e-15);
        assert_eq!(kernels::add(&x, &y).unwrap(), naive_add(&x, &y));
        assert_eq!(kernels::concat_channels(&[&x, &y]).unwrap(), naive_concat(&x, &y));
        let p = naive_sigmoid(&x);
        let t = y.map(|v| (v > 0.0) as u8 as f64);
        let d = kernels::soft_dice_loss(&p, &t, 1.0).unwrap();
        assert!((d - naive_soft_dice(&p, &t, 1.0)).abs() <= 1e-14);
    }
}

#[test]
fn conv_and_transpose_are_adjoint() {
    checks::adjointness(50, 4).unwrap();
}

#[test]
fn grad_conv3d() {
    checks::grad_conv3d().unwrap();
}

#[test]
fn grad_conv3d_transpose() {
    checks::grad_conv3d_transpose().unwrap();
}

#[test]
fn grad_prelu() {
    checks::grad_prelu().unwrap();
}

#[test]
fn grad_sigmoid() {
    checks::grad_sigmoid().unwrap();
}

#[test]
fn grad_add() {
    checks::grad_add().unwrap();
}

#[test]
fn grad_concat() {
    checks::grad_concat().unwrap();
}

#[test]
fn grad_soft_dice() {
    checks::grad_soft_dice().unwrap();
}

#[test]
fn grad_check_detects_wrong_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[1, 2, 2, 2], -1.0, 1.0);
    let good = grad_check(
        |g, v| {
            let y = g.map(v[0], f64::tanh, |x| 1.0 - x.tanh().powi(2));
            projected(g, y, 0)
        },
        &[x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(good.max_rel_error < 1e-6);
    let bad = grad_check(
        |g, v| {
            // derivative off by a sign in the second term
            let y = g.map(v[0], f64::tanh, |x| 1.0 + x.tanh().powi(2));
            projected(g, y, 0)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(bad.max_rel_error > 1e-2);
}
