//! Central-finite-difference oracle for every differentiable op.
//!
//! The analytic gradient produced by the tape must match the numerical
//! estimate (f(x+h) − f(x−h)) / 2h within 1e-3 relative error on random small
//! tensors. The oracle only ever calls the forward path, so it stays
//! independent of the backward rules it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tokenmark::rng::SeedHub;
use tokenmark::tensor::{Graph, NodeId, Tensor};

const REL_TOL: f32 = 1e-3;
/// fp32 central differences carry roundoff noise of roughly eps·|f|/h; this
/// floor absorbs it for the O(1)-scale losses used below.
const ABS_FLOOR: f32 = 3e-4;

/// Scalar loss built from graph ops, as a function of one variable tensor.
type LossFn = dyn Fn(&Graph, NodeId) -> NodeId;

/// Compare analytic and central-difference gradients of `loss` at `x0`.
fn check_with(name: &str, x0: &Tensor, loss: &LossFn, h: f32) {
    // analytic
    let g = Graph::new();
    let x = g.variable(x0);
    let l = loss(&g, x);
    g.backward(l).unwrap();
    let analytic = g.grad_of(x).unwrap_or_else(|| vec![0.0; x0.numel()]);

    // numerical, one coordinate at a time
    let eval = |data: &[f32]| -> f32 {
        let t = Tensor::from_vec(x0.shape(), data.to_vec()).unwrap();
        let g = Graph::inference();
        let x = g.input(&t);
        g.value(loss(&g, x))
    };
    let mut worst = 0.0f32;
    let mut worst_idx = 0;
    for i in 0..x0.numel() {
        let mut plus = x0.data().to_vec();
        let mut minus = x0.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let diff = (analytic[i] - fd).abs();
        let excess = diff - ABS_FLOOR;
        let rel = excess.max(0.0) / fd.abs().max(analytic[i].abs()).max(ABS_FLOOR);
        if rel > worst {
            worst = rel;
            worst_idx = i;
        }
    }
    assert!(
        worst < REL_TOL,
        "{name}: gradient mismatch at index {worst_idx}: analytic {} vs finite-diff \
         (worst relative error {worst:.3e})",
        analytic[worst_idx],
    );
}

fn check(name: &str, x0: &Tensor, loss: &LossFn) {
    check_with(name, x0, loss, 5e-3);
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::randn(rng, shape, std)
}

#[test]
fn matmul_left_and_right() {
    let hub = SeedHub::new(11);
    let mut rng = hub.stream("gradcheck.matmul");
    let a0 = randn(&mut rng, &[3, 3], 0.8);
    let b0 = randn(&mut rng, &[3, 3], 0.8);
    // the loss is linear in each operand, so the spec's h = 1e-3 applies as-is
    let b = b0.clone();
    check_with(
        "matmul wrt A",
        &a0,
        &move |g, x| {
            let bn = g.input(&b);
            g.sum_all(g.matmul(x, bn).unwrap())
        },
        1e-3,
    );
    let a = a0.clone();
    check_with(
        "matmul wrt B",
        &b0,
        &move |g, x| {
            let an = g.input(&a);
            g.sum_all(g.matmul(an, x).unwrap())
        },
        1e-3,
    );
}

#[test]
fn elementwise_ops() {
    let hub = SeedHub::new(12);
    let mut rng = hub.stream("gradcheck.elementwise");
    let x0 = randn(&mut rng, &[2, 4], 0.7);
    let c = randn(&mut rng, &[2, 4], 0.9);

    let cc = c.clone();
    check("mul", &x0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.mul(x, cn).unwrap())
    });
    let cc = c.clone();
    check("div", &x0, &move |g, x| {
        let cn = g.add_const(g.input(&cc), 3.0); // keep denominator away from 0
        g.sum_all(g.div(x, cn).unwrap())
    });
    let cc = c.clone();
    check("div wrt denominator", &x0, &move |g, x| {
        let cn = g.input(&cc);
        let xn = g.add_const(x, 3.0);
        g.sum_all(g.div(cn, xn).unwrap())
    });
    let cc = c.clone();
    check("sub+scale", &x0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.scale(g.sub(x, cn).unwrap(), -1.7))
    });
    check("sqrt", &x0, &move |g, x| {
        // square first so the argument is positive and away from 0
        let sq = g.add_const(g.mul(x, x).unwrap(), 0.5);
        g.sum_all(g.sqrt(sq))
    });
}

#[test]
fn activations() {
    let hub = SeedHub::new(13);
    let mut rng = hub.stream("gradcheck.act");
    // keep values away from the ReLU kink at 0
    let mut x0 = randn(&mut rng, &[3, 5], 1.0);
    for v in x0.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    check("relu", &x0, &|g, x| g.sum_all(g.relu(x)));
    check("gelu", &x0, &|g, x| g.sum_all(g.gelu(x)));
}

#[test]
fn softmax_and_cross_entropy() {
    let hub = SeedHub::new(14);
    let mut rng = hub.stream("gradcheck.softmax");
    let x0 = randn(&mut rng, &[3, 4], 1.0);
    let c = randn(&mut rng, &[3, 4], 1.0);
    let cc = c.clone();
    check("softmax_rows", &x0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.mul(g.softmax_rows(x), cn).unwrap())
    });
    check("cross_entropy", &x0, &|g, x| g.cross_entropy(x, &[1, 3, 0]).unwrap());
}

#[test]
fn layernorm_all_three_inputs() {
    let hub = SeedHub::new(15);
    let mut rng = hub.stream("gradcheck.ln");
    let x0 = randn(&mut rng, &[3, 6], 1.0);
    let gamma0 = randn(&mut rng, &[6], 0.5);
    let beta0 = randn(&mut rng, &[6], 0.5);
    let c = randn(&mut rng, &[3, 6], 1.0);

    let (ga, be, cc) = (gamma0.clone(), beta0.clone(), c.clone());
    check("layernorm wrt x", &x0, &move |g, x| {
        let (gn, bn, cn) = (g.input(&ga), g.input(&be), g.input(&cc));
        g.sum_all(g.mul(g.layernorm(x, gn, bn).unwrap(), cn).unwrap())
    });
    let (xx, be, cc) = (x0.clone(), beta0.clone(), c.clone());
    check("layernorm wrt gamma", &gamma0, &move |g, x| {
        let (xn, bn, cn) = (g.input(&xx), g.input(&be), g.input(&cc));
        g.sum_all(g.mul(g.layernorm(xn, x, bn).unwrap(), cn).unwrap())
    });
    let (xx, ga, cc) = (x0.clone(), gamma0.clone(), c.clone());
    check("layernorm wrt beta", &beta0, &move |g, x| {
        let (xn, gn, cn) = (g.input(&xx), g.input(&ga), g.input(&cc));
        g.sum_all(g.mul(g.layernorm(xn, gn, x).unwrap(), cn).unwrap())
    });
}

#[test]
fn structural_ops() {
    let hub = SeedHub::new(16);
    let mut rng = hub.stream("gradcheck.struct");
    let x0 = randn(&mut rng, &[4, 6], 0.8);
    let c6 = randn(&mut rng, &[1, 6], 1.0);
    let c3 = randn(&mut rng, &[4, 3], 1.0);

    let cc = c6.clone();
    check("transpose", &x0, &move |g, x| {
        let cn = g.input(&cc);
        let xt = g.transpose(g.transpose(x));
        g.sum_all(g.mul(g.select_row(xt, 1).unwrap(), cn).unwrap())
    });
    let cc = c6.clone();
    check("select_row", &x0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.mul(g.select_row(x, 2).unwrap(), cn).unwrap())
    });
    let cc = c6.clone();
    check("mean_rows", &x0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.mul(g.mean_rows(x), cn).unwrap())
    });
    let cc = c6.clone();
    check("gather_cols", &x0, &move |g, x| {
        let cn = g.input(&cc);
        let p = g.gather_cols(x, &[5, 3, 0, 1, 2, 4]).unwrap();
        g.sum_all(g.mul(g.select_row(p, 0).unwrap(), cn).unwrap())
    });
    let cc = c3.clone();
    check("slice_cols", &x0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.mul(g.slice_cols(x, 2, 3).unwrap(), cn).unwrap())
    });
    let cc = c6.clone();
    check("concat_cols", &x0, &move |g, x| {
        let cn = g.input(&cc);
        let left = g.slice_cols(x, 0, 3).unwrap();
        let right = g.slice_cols(x, 3, 3).unwrap();
        let whole = g.concat_cols(&[right, left]).unwrap();
        g.sum_all(g.mul(g.select_row(whole, 1).unwrap(), cn).unwrap())
    });
}

#[test]
fn embedding_and_bias() {
    let hub = SeedHub::new(17);
    let mut rng = hub.stream("gradcheck.embed");
    let table0 = randn(&mut rng, &[5, 4], 0.8);
    let bias0 = randn(&mut rng, &[1, 4], 0.8);
    let c = randn(&mut rng, &[3, 4], 1.0);

    let cc = c.clone();
    check("gather_rows", &table0, &move |g, x| {
        let cn = g.input(&cc);
        let rows = g.gather_rows(x, &[4, 0, 4]).unwrap();
        g.sum_all(g.mul(rows, cn).unwrap())
    });
    let (tt, cc) = (table0.clone(), c.clone());
    check("add_bias", &bias0, &move |g, x| {
        let cn = g.input(&cc);
        let rows = g.gather_rows(g.input(&tt), &[1, 2, 3]).unwrap();
        g.sum_all(g.mul(g.add_bias(rows, x).unwrap(), cn).unwrap())
    });
}

#[test]
fn cosine_and_kron() {
    let hub = SeedHub::new(18);
    let mut rng = hub.stream("gradcheck.cosine");
    let u0 = randn(&mut rng, &[1, 6], 1.0);
    let v = randn(&mut rng, &[1, 6], 1.0);
    let vv = v.clone();
    check("cosine wrt u", &u0, &move |g, x| {
        let vn = g.input(&vv);
        g.cosine(x, vn).unwrap()
    });

    let h0 = randn(&mut rng, &[2, 2], 1.0);
    let c = randn(&mut rng, &[6, 6], 0.5);
    let cc = c.clone();
    check("kron_identity", &h0, &move |g, x| {
        let cn = g.input(&cc);
        g.sum_all(g.mul(g.kron_identity(x, 3), cn).unwrap())
    });
}

#[test]
fn composite_attention_like_chain() {
    // One attention-shaped expression exercising many ops together.
    let hub = SeedHub::new(19);
    let mut rng = hub.stream("gradcheck.chain");
    let w0 = randn(&mut rng, &[4, 4], 0.5);
    let z = randn(&mut rng, &[3, 4], 0.8);
    let c = randn(&mut rng, &[3, 4], 1.0);
    let (zz, cc) = (z.clone(), c.clone());
    check("attention chain wrt W", &w0, &move |g, x| {
        let zn = g.input(&zz);
        let cn = g.input(&cc);
        let q = g.matmul(zn, g.transpose(x)).unwrap();
        let k = g.matmul(zn, g.transpose(x)).unwrap();
        let s = g.softmax_rows(g.scale(g.matmul(q, g.transpose(k)).unwrap(), 0.5));
        let a = g.matmul(s, zn).unwrap();
        g.sum_all(g.mul(a, cn).unwrap())
    });
}

#[test]
fn determinism_same_seed_same_bits() {
    let run = || -> Vec<f32> {
        let hub = SeedHub::new(99);
        let mut rng = hub.stream("determinism");
        let a = Tensor::randn(&mut rng, &[4, 4], 1.0);
        let b = Tensor::randn(&mut rng, &[4, 4], 1.0);
        let g = Graph::new();
        let (an, bn) = (g.variable(&a), g.input(&b));
        let prod = g.matmul(g.softmax_rows(an), bn).unwrap();
        let loss = g.sum_all(g.mul(prod, prod).unwrap());
        g.backward(loss).unwrap();
        let mut out = g.data(prod);
        out.extend(g.grad_of(an).unwrap());
        out
    };
    let x = run();
    let y = run();
    assert_eq!(x, y, "same seed and op sequence must be bit-identical");
}

#[test]
fn dropout_mask_scales_gradient() {
    let hub = SeedHub::new(20);
    let mut rng = hub.stream("gradcheck.dropout");
    let x = Tensor::randn(&mut rng, &[4, 4], 1.0);
    let g = Graph::new();
    let xn = g.variable(&x);
    let y = g.dropout(xn, 0.5, &mut rng);
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    let grad = g.grad_of(xn).unwrap();
    let out = g.data(y);
    for (i, (&gv, &ov)) in grad.iter().zip(&out).enumerate() {
        if ov == 0.0 {
            assert_eq!(gv, 0.0, "dropped element {i} must have zero grad");
        } else {
            assert_eq!(gv, 2.0, "kept element {i} must have grad 1/keep");
        }
    }
}
