//! Finite-difference verification of every tape op's backward rule.
//!
//! Each case builds a small graph ending in a scalar, compares the analytic
//! input gradient against central differences, and requires 1e-6 relative
//! agreement (inputs are kept away from kinks of relu/maxpool).

use mimic_core::nn::check::{finite_diff_grad, max_rel_err};
use mimic_core::nn::layers::Activation;
use mimic_core::nn::{Conv2dLayer, Linear, Mlp, ParamGroup, ParamStore, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

fn rand_arr(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = mimic_core::rng::seeded(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}

/// Gradient-check a graph builder against finite differences on input `x`.
fn check<F>(x: ArrayD<f64>, tol: f64, build: F)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let f = |xv: &ArrayD<f64>| -> f64 {
        let mut tape = Tape::new();
        let xin = tape.input(xv.clone());
        let out = build(&mut tape, xin);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let out = build(&mut tape, xin);
    let grads = tape.backward(out);
    let analytic = grads.wrt(xin).expect("input got no gradient").clone();
    let numeric = finite_diff_grad(f, &x, 1e-5);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "gradient mismatch: rel err {err}");
}

#[test]
fn elementwise_ops() {
    let x = rand_arr(&[3, 4], 1, 0.2, 1.5); // positive for ln/pow
    check(x.clone(), 1e-6, |t, v| {
        let a = t.mul(v, v);
        let b = t.add(a, v);
        let c = t.sub(b, v);
        let d = t.add_scalar(c, 0.7);
        let e = t.mul_scalar(d, -1.3);
        let f = t.neg(e);
        t.mean(f)
    });
    check(x.clone(), 1e-6, |t, v| {
        let a = t.ln(v);
        let b = t.exp(a);
        let c = t.pow_scalar(b, 1.7);
        t.sum(c)
    });
    check(x.clone(), 1e-6, |t, v| {
        let r = t.recip(v);
        t.mean(r)
    });
    check(x, 1e-6, |t, v| {
        let a = t.sigmoid(v);
        let b = t.tanh(a);
        t.mean(b)
    });
}

#[test]
fn activations_away_from_kinks() {
    // keep |x| > 0.1 so relu/elu kinks do not disturb finite differences
    let mut x = rand_arr(&[4, 5], 2, 0.1, 1.0);
    for (i, v) in x.iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check(x.clone(), 1e-6, |t, v| {
        let a = t.relu(v);
        t.sum(a)
    });
    check(x.clone(), 1e-6, |t, v| {
        let a = t.elu(v, 1.0);
        t.mean(a)
    });
    check(x, 1e-6, |t, v| {
        let c = t.clip(v, -0.5, 0.5);
        let e = t.exp(c);
        t.mean(e)
    });
}

#[test]
fn matmul_and_transpose() {
    let x = rand_arr(&[3, 4], 3, -1.0, 1.0);
    let w = rand_arr(&[4, 2], 4, -1.0, 1.0);
    check(x.clone(), 1e-6, |t, v| {
        let wv = t.input(w.clone());
        let y = t.matmul(v, wv);
        let y2 = t.mul(y, y);
        t.sum(y2)
    });
    // gradient w.r.t. the right operand, through a transpose
    let a = rand_arr(&[4, 3], 5, -1.0, 1.0);
    check(w, 1e-6, |t, v| {
        let av = t.input(a.clone());
        let vt = t.transpose2(v); // (2,4)
        let y = t.matmul(vt, av); // (2,3)
        let y2 = t.mul(y, y);
        t.sum(y2)
    });
}

#[test]
fn reductions_and_rows() {
    let x = rand_arr(&[4, 6], 6, -2.0, 2.0);
    check(x.clone(), 1e-6, |t, v| {
        let l = t.log_sum_exp_rows(v);
        t.mean(l)
    });
    check(x.clone(), 1e-6, |t, v| {
        let p = t.take_per_row(v, &[1, 0, 5, 3]);
        t.sum(p)
    });
    check(x.clone(), 2e-6, |t, v| {
        let n = t.row_normalize(v);
        let sq = t.mul(n, n);
        t.mean(sq)
    });
    let row = rand_arr(&[6], 7, -1.0, 1.0);
    check(x, 1e-6, |t, v| {
        let r = t.input(row.clone());
        let y = t.add_row(v, r);
        let y2 = t.mul(y, y);
        t.mean(y2)
    });
}

#[test]
fn bce_with_logits_grad() {
    let x = rand_arr(&[2, 1, 4, 4], 8, -2.0, 2.0);
    let targets = rand_arr(&[2, 1, 4, 4], 9, 0.0, 1.0).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
    check(x, 1e-6, |t, v| t.bce_with_logits(v, &targets));
}

#[test]
fn conv2d_grads() {
    for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
        let x = rand_arr(&[2, 3, 6, 6], 10 + stride as u64, -1.0, 1.0);
        let w = rand_arr(&[4, 3, 3, 3], 20 + pad as u64, -0.5, 0.5);
        let b = rand_arr(&[4], 30, -0.2, 0.2);
        // w.r.t. input
        check(x.clone(), 1e-6, |t, v| {
            let wv = t.input(w.clone());
            let bv = t.input(b.clone());
            let y = t.conv2d(v, wv, Some(bv), stride, pad);
            let y2 = t.mul(y, y);
            t.mean(y2)
        });
        // w.r.t. weight
        check(w.clone(), 1e-6, |t, v| {
            let xv = t.input(x.clone());
            let bv = t.input(b.clone());
            let y = t.conv2d(xv, v, Some(bv), stride, pad);
            let y2 = t.mul(y, y);
            t.mean(y2)
        });
        // w.r.t. bias
        check(b.clone(), 1e-6, |t, v| {
            let xv = t.input(x.clone());
            let wv = t.input(w.clone());
            let y = t.conv2d(xv, wv, Some(v), stride, pad);
            let y2 = t.mul(y, y);
            t.mean(y2)
        });
    }
}

#[test]
fn pool_upsample_gap_concat_reshape() {
    // distinct values so maxpool argmax is stable under probing
    let mut x = rand_arr(&[2, 2, 4, 4], 11, -1.0, 1.0);
    for (i, v) in x.iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    check(x.clone(), 1e-6, |t, v| {
        let p = t.max_pool2(v);
        let s = t.mul(p, p);
        t.sum(s)
    });
    check(x.clone(), 1e-6, |t, v| {
        let u = t.upsample2(v);
        let s = t.mul(u, u);
        t.mean(s)
    });
    check(x.clone(), 1e-6, |t, v| {
        let g = t.global_avg_pool(v);
        let s = t.mul(g, g);
        t.sum(s)
    });
    check(x.clone(), 1e-6, |t, v| {
        let c = t.concat_axis1(&[v, v]);
        let s = t.mul(c, c);
        t.mean(s)
    });
    check(x, 1e-6, |t, v| {
        let r = t.reshape(v, &[2, 32]);
        let l = t.log_sum_exp_rows(r);
        t.sum(l)
    });
}

#[test]
fn embed_lookup_grad() {
    let table = rand_arr(&[5, 3], 12, -1.0, 1.0);
    check(table, 1e-6, |t, v| {
        let e = t.embed_lookup(v, &[0, 2, 2, 4]);
        let s = t.mul(e, e);
        t.sum(s)
    });
}

#[test]
fn layer_params_get_gradients() {
    let mut store = ParamStore::new();
    let mut rng = mimic_core::rng::seeded(13);
    let lin = Linear::new(&mut store, "l", 4, 3, ParamGroup::Model, &mut rng);
    let mlp = Mlp::new(
        &mut store,
        "m",
        &[3, 8, 2],
        Activation::Tanh,
        ParamGroup::Model,
        &mut rng,
    );
    let conv = Conv2dLayer::new(&mut store, "c", 2, 3, 3, 1, 1, ParamGroup::Model, &mut rng);

    // dense path
    let x = rand_arr(&[5, 4], 14, -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let h = lin.fwd(&mut tape, &store, xv);
    let y = mlp.fwd(&mut tape, &store, h);
    let sq = tape.mul(y, y);
    let loss = tape.mean(sq);
    let grads = tape.backward(loss);
    store.zero_grads();
    grads.accumulate_params(&tape, &mut store);

    // every dense parameter received a nonzero gradient
    for id in store.ids() {
        if store.name(id).starts_with("l.") || store.name(id).starts_with("m.") {
            let gnorm: f64 = store.grad(id).iter().map(|g| g * g).sum();
            assert!(gnorm > 0.0, "no grad for {}", store.name(id));
        }
    }

    // finite-difference check of one weight entry through the layer stack
    let wid = lin.w;
    let base = store.value(wid).clone();
    let eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let x = rand_arr(&[5, 4], 14, -1.0, 1.0);
        let xv = tape.input(x);
        let h = lin.fwd(&mut tape, store, xv);
        let y = mlp.fwd(&mut tape, store, h);
        let sq = tape.mul(y, y);
        let l = tape.mean(sq);
        tape.scalar(l)
    };
    let eps = 1e-5;
    let analytic = store.grad(wid).as_slice().unwrap()[0];
    store_probe(&mut store, wid, &base, 0, eps);
    let fp = eval(&store);
    store_probe(&mut store, wid, &base, 0, -eps);
    let fm = eval(&store);
    store_probe(&mut store, wid, &base, 0, 0.0);
    let numeric = (fp - fm) / (2.0 * eps);
    assert!(
        (analytic - numeric).abs() / numeric.abs().max(1e-9) < 1e-5,
        "lin.w[0]: analytic {analytic} vs numeric {numeric}"
    );

    // conv path smoke: gradients exist
    let xi = rand_arr(&[1, 2, 4, 4], 15, -1.0, 1.0);
    let mut tape = Tape::new();
    let xv = tape.input(xi);
    let y = conv.fwd(&mut tape, &store, xv);
    let sq = tape.mul(y, y);
    let loss = tape.sum(sq);
    let grads = tape.backward(loss);
    store.zero_grads();
    grads.accumulate_params(&tape, &mut store);
    let gnorm: f64 = store.grad(conv.w).iter().map(|g| g * g).sum();
    assert!(gnorm > 0.0);
}

fn store_probe(
    store: &mut ParamStore,
    id: mimic_core::nn::ParamId,
    base: &ArrayD<f64>,
    idx: usize,
    delta: f64,
) {
    let mut v = base.clone();
    v.as_slice_mut().unwrap()[idx] += delta;
    *store.value_mut(id) = v;
}
