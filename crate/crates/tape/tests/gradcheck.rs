//! Central finite-difference checks for every differentiable op.

use orca_tape::{Graph, Param, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type F = f64;

/// Compares the analytic gradient of `mse(f(x), target)` against central
/// differences on every coordinate of `x`.
fn check(shape: &[usize], f: impl Fn(&mut Graph<F>, Var) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = Tensor::<F>::randn(shape, 1.0, &mut rng);
    let loss_at = |x: &Tensor<F>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = f(&mut g, xv);
        let target = Tensor::full(g.shape(y), 0.3);
        let l = g.mse(y, &target);
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let xv = g.input(x0.clone());
    let y = f(&mut g, xv);
    let target = Tensor::full(g.shape(y), 0.3);
    let l = g.mse(y, &target);
    let grads = g.backward(l);
    let analytic = grads.wrt(xv).expect("gradient reaches input").clone();
    let h = 1e-5;
    for i in 0..x0.numel() {
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss_at(&xp) - loss_at(&xm)) / (2.0 * h);
        let an = analytic.data()[i];
        let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
        assert!(err < 1e-5 || (fd - an).abs() < 1e-9, "coord {i}: analytic {an} vs fd {fd}");
    }
}

fn fixed(shape: &[usize], seed: u64) -> Tensor<F> {
    Tensor::randn(shape, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    check(&[3, 4], |g, x| g.relu(x));
    check(&[3, 4], |g, x| g.silu(x));
    check(&[3, 4], |g, x| g.gelu(x));
    check(&[3, 4], |g, x| g.scale(x, -1.7));
    check(&[3, 4], |g, x| {
        let y = g.silu(x);
        g.add(x, y)
    });
}

#[test]
fn broadcast_ops_both_operands() {
    check(&[2, 3, 4], |g, x| {
        let v = g.constant(fixed(&[3], 1));
        g.add_bcast(x, v, 2, 4)
    });
    check(&[2, 3, 4], |g, x| {
        let v = g.constant(fixed(&[3], 2));
        g.mul_bcast(x, v, 2, 4)
    });
    check(&[3], |g, v| {
        let x = g.constant(fixed(&[2, 3, 4], 3));
        g.mul_bcast(x, v, 2, 4)
    });
    check(&[3], |g, v| {
        let x = g.constant(fixed(&[2, 3, 4], 3));
        g.add_bcast(x, v, 2, 4)
    });
}

#[test]
fn matmul_all_transpose_modes() {
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check(&sa, |g, a| {
            let b = g.constant(fixed(&sb, 4));
            g.matmul_t(a, b, ta, tb)
        });
        check(&sb, |g, b| {
            let a = g.constant(fixed(&sa, 5));
            g.matmul_t(a, b, ta, tb)
        });
    }
    // shared right operand
    check(&[4, 5], |g, b| {
        let a = g.constant(fixed(&[3, 2, 4], 6));
        g.matmul(a, b)
    });
}

#[test]
fn conv_pool_upsample() {
    check(&[2, 3, 5, 5], |g, x| {
        let w = g.constant(fixed(&[4, 3, 3, 3], 8));
        g.conv2d(x, w, 1, 1)
    });
    check(&[2, 3, 5, 5], |g, x| {
        let w = g.constant(fixed(&[4, 3, 3, 3], 8));
        g.conv2d(x, w, 2, 1)
    });
    check(&[4, 3, 3, 3], |g, w| {
        let x = g.constant(fixed(&[2, 3, 5, 5], 9));
        g.conv2d(x, w, 2, 1)
    });
    check(&[2, 3, 4, 4], |g, x| {
        let w = g.constant(fixed(&[2, 3, 1, 1], 10));
        g.conv2d(x, w, 1, 0)
    });
    check(&[2, 3, 1, 1], |g, w| {
        let x = g.constant(fixed(&[2, 3, 4, 4], 10));
        g.conv2d(x, w, 1, 0)
    });
    check(&[1, 2, 5, 6], |g, x| g.adaptive_avg_pool(x, 3));
    check(&[1, 2, 1, 1], |g, x| g.adaptive_avg_pool(x, 4));
    check(&[1, 2, 3, 2], |g, x| g.upsample2x(x));
}

#[test]
fn normalization_softmax_layout() {
    check(&[3, 6], |g, x| g.normalize_rows(x, 6, 1e-5));
    check(&[2, 4], |g, x| g.softmax(x, 4, false));
    check(&[2, 3, 3], |g, x| g.softmax(x, 3, true));
    check(&[2, 3, 4, 2], |g, x| g.swap12(x, [2, 3, 4, 2]));
    check(&[2, 3], |g, x| {
        let c = g.constant(fixed(&[2, 2], 11));
        let y = g.relu(x);
        g.concat(&[x, c, y], 1)
    });
    check(&[2, 3], |g, x| g.reshape(x, &[3, 2]));
}

#[test]
fn l1_loss_gradient_sign() {
    let mut g = Graph::<F>::new();
    let x = g.input(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
    let l = g.l1(x, &Tensor::from_vec(&[3], vec![0.0, 0.0, 0.5]));
    assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
    let gr = g.backward(l);
    assert_eq!(gr.wrt(x).unwrap().data(), &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
}

#[test]
fn frozen_params_receive_nothing_and_reuse_accumulates() {
    let w = Param::trainable("w", Tensor::<F>::from_vec(&[2], vec![1.0, 2.0]));
    let frozen = Param::frozen("f", Tensor::<F>::from_vec(&[2], vec![3.0, 4.0]));
    let mut g = Graph::new();
    let a = g.param(&w);
    let a2 = g.param(&w);
    assert_eq!(a, a2);
    let f = g.param(&frozen);
    let s = g.add(a, f);
    let s = g.add(s, a2);
    let l = g.mse(s, &Tensor::zeros(&[2]));
    let gr = g.backward(l);
    assert!(gr.param(&frozen).is_none());
    assert_eq!(gr.param_norm(&frozen), 0.0);
    // d/dw mean((2w + f)^2) = 2 * (2w + f) * 2 / 2
    let gw = gr.param(&w).unwrap();
    assert_eq!(gw.data(), &[2.0 * 5.0, 2.0 * 8.0]);
}
