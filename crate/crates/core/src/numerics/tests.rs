use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn([m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum()
    })
}

fn depthwise_oracle(x: &Tensor, k: &Tensor) -> Tensor {
    let (h, w, c) = x.hwc().unwrap();
    let ks = k.shape()[0] as isize;
    let half = ks / 2;
    Tensor::from_fn([h, w, c], |idx| {
        let (y, xx, ch) = ((idx / c) / w, (idx / c) % w, idx % c);
        let mut acc = 0.0;
        for dy in -half..=half {
            for dx in -half..=half {
                let (iy, ix) = (y as isize + dy, xx as isize + dx);
                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                    continue;
                }
                let kv = k.data()[(((dy + half) * ks + dx + half) as usize) * c + ch];
                acc += x.data()[(iy as usize * w + ix as usize) * c + ch] * kv;
            }
        }
        acc
    })
}

fn eval1(f: impl Fn(&Graph, Var) -> crate::Result<Var>, x: &Tensor) -> Tensor {
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&g, v).unwrap();
    g.value(out)
}

#[test]
fn matmul_identity_and_small_case() {
    let x = Tensor::new([2, 2], vec![0.3, -1.0, 2.5, 4.0]).unwrap();
    let g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let xv = g.constant(x.clone());
    assert_eq!(g.value(g.matmul(i, xv).unwrap()), x);

    let a = g.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new([2, 1], vec![0.0, 1.0]).unwrap());
    assert_eq!(g.value(g.matmul(a, b).unwrap()).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::randn([5, 7], 1.0, &mut r);
    let b = Tensor::randn([7, 3], 1.0, &mut r);
    let g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.value(g.matmul(av, bv).unwrap());
    assert!(out.max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 1]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let mut r = rng(2);
    let x = Tensor::randn([5, 4, 3], 1.0, &mut r);
    let mut k = Tensor::zeros([3, 3, 3]);
    for ch in 0..3 {
        k.data_mut()[4 * 3 + ch] = 1.0;
    }
    let out = eval1(|g, v| g.conv2d_depthwise(v, g.constant(k.clone())), &x);
    assert_eq!(out, x);
}

#[test]
fn depthwise_all_ones_counts_neighbours() {
    let x = Tensor::full([5, 5, 1], 1.0);
    let k = Tensor::full([3, 3, 1], 1.0);
    let out = eval1(|g, v| g.conv2d_depthwise(v, g.constant(k.clone())), &x);
    assert_eq!(out.data()[2 * 5 + 2], 9.0);
    assert_eq!(out.data()[0], 4.0);
    assert_eq!(out.data()[5 * 5 - 1], 4.0);
    assert_eq!(out.data()[2], 6.0);
}

#[test]
fn depthwise_matches_nested_loops() {
    let mut r = rng(3);
    let x = Tensor::randn([6, 6, 3], 1.0, &mut r);
    let k = Tensor::randn([3, 3, 3], 1.0, &mut r);
    let out = eval1(|g, v| g.conv2d_depthwise(v, g.constant(k.clone())), &x);
    assert!(out.max_abs_diff(&depthwise_oracle(&x, &k)) < 1e-12);

    let k5 = Tensor::randn([5, 5, 3], 1.0, &mut r);
    let out5 = eval1(|g, v| g.conv2d_depthwise(v, g.constant(k5.clone())), &x);
    assert!(out5.max_abs_diff(&depthwise_oracle(&x, &k5)) < 1e-12);
}

#[test]
fn depthwise_rejects_even_kernel() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros([4, 4, 2]));
    let k = g.constant(Tensor::zeros([2, 2, 2]));
    assert!(matches!(g.conv2d_depthwise(x, k), Err(Error::Config(_))));
}

#[test]
fn conv1x1_cases() {
    let g = Graph::new();
    let mut r = rng(4);
    let x = Tensor::randn([3, 2, 4], 1.0, &mut r);
    let xv = g.constant(x.clone());
    let id = g.constant(Tensor::identity(4));
    let zero = g.constant(Tensor::zeros([4]));
    assert_eq!(g.value(g.conv1x1(xv, id, zero).unwrap()), x);

    let px = g.constant(Tensor::new([1, 1, 2], vec![3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros([1]));
    assert_eq!(g.value(g.conv1x1(px, w, b).unwrap()).data(), &[7.0]);

    let w = Tensor::randn([4, 5], 1.0, &mut r);
    let b = Tensor::randn([5], 1.0, &mut r);
    let out = g.value(g.conv1x1(xv, g.constant(w.clone()), g.constant(b.clone())).unwrap());
    assert_eq!(out.shape(), &[3, 2, 5]);
    for site in 0..6 {
        let pixel = Tensor::new([1, 4], x.data()[site * 4..site * 4 + 4].to_vec()).unwrap();
        let expect = matmul_oracle(&pixel, &w);
        for co in 0..5 {
            let diff = out.data()[site * 5 + co] - (expect.data()[co] + b.data()[co]);
            assert!(diff.abs() < 1e-12);
        }
    }

    let bad = g.constant(Tensor::zeros([3, 5]));
    assert!(matches!(g.conv1x1(xv, bad, b_var(&g)), Err(Error::Dimension { .. })));
}

fn b_var(g: &Graph) -> Var {
    g.constant(Tensor::zeros([5]))
}

#[test]
fn silu_values() {
    let x = Tensor::new([4], vec![0.0, 1.0, 40.0, -40.0]).unwrap();
    let y = eval1(|g, v| Ok(g.silu(v)), &x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!((y.data()[1] - 0.731059).abs() < 1e-6);
    assert!((y.data()[2] - 40.0).abs() < 1e-12);
    assert!(y.data()[3].abs() < 1e-12);
}

#[test]
fn global_avg_pool_cases() {
    let c7 = Tensor::full([3, 5, 2], 7.0);
    assert_eq!(eval1(|g, v| g.global_avg_pool(v), &c7).data(), &[7.0, 7.0]);

    let one = Tensor::new([1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let out = eval1(|g, v| g.global_avg_pool(v), &one);
    assert_eq!(out.data(), one.data());
    assert_eq!(out.shape(), &[1, 1, 3]);

    let mut r = rng(5);
    let x = Tensor::randn([4, 4, 2], 1.0, &mut r);
    let out = eval1(|g, v| g.global_avg_pool(v), &x);
    for ch in 0..2 {
        let total: f64 = (0..16).map(|s| x.data()[s * 2 + ch]).sum();
        assert!((out.data()[ch] - total / 16.0).abs() < 1e-15);
    }
}

#[test]
fn backward_simple_cases() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let grads = g.backward(x).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0]);

    let g = Graph::new();
    let xt = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = g.param(xt.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_and_skips_constants() {
    let g = Graph::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));

    let c = g.constant(Tensor::full([2], 2.0));
    let prod = g.mul(x, c).unwrap();
    let s = g.sum(prod);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn finite_diff_check_on_linear_and_silu() {
    let mut r = rng(6);
    let x = Tensor::randn([6], 1.0, &mut r);
    let w = Tensor::randn([6], 1.0, &mut r);
    let lin = finite_diff_check(
        |g, v| {
            let p = g.mul(v, g.constant(w.clone()))?;
            Ok(g.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(lin < 1e-10, "{lin}");

    let silu = finite_diff_check(
        |g, v| {
            let s = g.silu(v);
            let p = g.mul(s, g.constant(w.clone()))?;
            Ok(g.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(silu < 1e-4, "{silu}");
}

/// Weighted-sum probe so every output coordinate contributes to the scalar.
fn probe(g: &Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let mut r = rng(seed);
    let w = Tensor::randn(g.shape(y), 1.0, &mut r);
    let p = g.mul(y, g.constant(w))?;
    Ok(g.sum(p))
}

fn check_op(name: &str, inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> crate::Result<Var>) {
    let report = finite_diff_check_inputs(
        |g, v| {
            let y = f(g, v)?;
            probe(g, y, 99)
        },
        inputs,
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(
        report.max_rel_error < 1e-6,
        "{name}: rel error {} at {:?} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst,
        report.analytic,
        report.numeric
    );
}

#[test]
fn every_op_passes_gradient_check() {
    let mut r = rng(7);
    let mut t = |shape: &[usize]| Tensor::randn(shape.to_vec(), 1.0, &mut r);
    let (a, b) = (t(&[3, 4]), t(&[3, 4]));
    let (m1, m2) = (t(&[3, 5]), t(&[5, 2]));
    let img = t(&[5, 6, 3]);
    let img2 = t(&[5, 6, 3]);
    let chan = t(&[3]);
    let conv_w = t(&[3, 3, 3, 4]);
    let conv4 = t(&[4, 4, 3, 2]);
    let dw = t(&[3, 3, 3]);
    let s = t(&[1]);
    let w11 = t(&[3, 2]);
    let b11 = t(&[2]);

    check_op("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check_op("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check_op("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check_op("scale", std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -1.7)));
    check_op("mul_scalar", &[a.clone(), s], |g, v| g.mul_scalar(v[0], v[1]));
    check_op("add_channel", &[img.clone(), chan.clone()], |g, v| {
        g.add_channel(v[0], v[1])
    });
    check_op("mul_channel", &[img.clone(), chan], |g, v| g.mul_channel(v[0], v[1]));
    check_op("matmul", &[m1.clone(), m2], |g, v| g.matmul(v[0], v[1]));
    check_op("transpose", &[m1], |g, v| g.transpose(v[0]));
    check_op("reshape", std::slice::from_ref(&img), |g, v| g.reshape(v[0], [30, 3]));
    check_op("gather_rows", std::slice::from_ref(&a), |g, v| {
        g.gather_rows(v[0], &[2, 0, 0, 1])
    });
    check_op("conv2d s1", &[img.clone(), conv_w.clone()], |g, v| {
        g.conv2d(v[0], v[1], 1, 1)
    });
    check_op("conv2d s2", &[img.clone(), conv_w], |g, v| g.conv2d(v[0], v[1], 2, 1));
    check_op("conv2d k4", &[img.clone(), conv4], |g, v| g.conv2d(v[0], v[1], 2, 1));
    check_op("depthwise", &[img.clone(), dw], |g, v| g.conv2d_depthwise(v[0], v[1]));
    check_op("conv1x1", &[img.clone(), w11, b11], |g, v| g.conv1x1(v[0], v[1], v[2]));
    check_op("upsample2x", std::slice::from_ref(&img), |g, v| g.upsample2x(v[0]));
    check_op("avg_pool even", &[t(&[4, 6, 2])], |g, v| g.avg_pool(v[0], 2));
    check_op("avg_pool ragged", std::slice::from_ref(&img), |g, v| {
        g.avg_pool(v[0], 2)
    });
    check_op("global_avg_pool", std::slice::from_ref(&img), |g, v| {
        g.global_avg_pool(v[0])
    });
    check_op("silu", std::slice::from_ref(&a), |g, v| Ok(g.silu(v[0])));
    check_op("tanh", std::slice::from_ref(&a), |g, v| Ok(g.tanh(v[0])));
    check_op("sigmoid", std::slice::from_ref(&a), |g, v| Ok(g.sigmoid(v[0])));
    check_op("leaky_relu", std::slice::from_ref(&a), |g, v| {
        Ok(g.leaky_relu(v[0], 0.2))
    });
    check_op("log_sigmoid", std::slice::from_ref(&a), |g, v| {
        Ok(g.log_sigmoid_clamped(v[0], 1e-7))
    });
    check_op("softmax_rows", std::slice::from_ref(&a), |g, v| g.softmax_rows(v[0]));
    check_op("sum", std::slice::from_ref(&img), |g, v| Ok(g.sum(v[0])));
    check_op("mean", &[img2], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn backward_is_linear_in_the_objective() {
    let mut r = rng(8);
    let x = Tensor::randn([4, 4, 2], 1.0, &mut r);
    let k = Tensor::randn([3, 3, 2], 1.0, &mut r);
    let (alpha, beta) = (0.7, -1.3);

    let grad_of = |which: u8| {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let f = {
            let c = g.conv2d_depthwise(xv, g.constant(k.clone())).unwrap();
            g.sum(g.silu(c))
        };
        let h = g.mean(g.tanh(xv));
        let out = match which {
            0 => f,
            1 => h,
            _ => g.add(g.scale(f, alpha), g.scale(h, beta)).unwrap(),
        };
        g.backward(out).unwrap().tensor(xv).unwrap()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gc.numel() {
        let expect = alpha * gf.data()[i] + beta * gh.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn log_sigmoid_is_clamped_and_finite() {
    let x = Tensor::new([3], vec![-800.0, 0.0, 800.0]).unwrap();
    let y = eval1(|g, v| Ok(g.log_sigmoid_clamped(v, 1e-7)), &x);
    assert!(y.is_finite());
    assert!((y.data()[0] - 1e-7f64.ln()).abs() < 1e-12);
    assert!((y.data()[1] + std::f64::consts::LN_2).abs() < 1e-15);
    assert!(y.data()[2] < 0.0 && y.data()[2] > -1e-6);
}

#[test]
fn forward_ops_preserve_finiteness() {
    let mut r = rng(9);
    let x = Tensor::randn([6, 6, 2], 50.0, &mut r);
    let g = Graph::new();
    let v = g.constant(x);
    let k = g.constant(Tensor::randn([3, 3, 2], 1.0, &mut r));
    let y = g.conv2d_depthwise(v, k).unwrap();
    let y = g.silu(y);
    let y = g.tanh(y);
    let y = g.upsample2x(y).unwrap();
    let y = g.avg_pool(y, 4).unwrap();
    let y = g.log_sigmoid_clamped(y, 1e-7);
    let _ = g.mean(y);
    assert!(g.first_non_finite().is_none());
}
