use std::sync::Arc;

use super::gradcheck::{central_difference, max_relative_error};
use super::rng::{normal_vec, stream, Purpose};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn eval1(x: &Tensor, op: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = op(&mut g, v);
    g.value(y).clone()
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let (va, vi) = (g.input(a.clone()), g.input(eye));
    let y = g.matmul(va, vi).unwrap();
    assert_eq!(g.value(y), &a);

    let p = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let s = g.input(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let y = g.matmul(p, s).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0, 0.0]);

    let r = g.input(Tensor::full(&[1, 3], 1.0));
    let c = g.input(Tensor::full(&[3, 1], 1.0));
    let y = g.matmul(r, c).unwrap();
    assert_eq!(g.value(y).data(), &[3.0]);

    assert!(matches!(g.matmul(r, r), Err(crate::Error::Dimension(_))));
}

#[test]
fn layer_norm_examples() {
    let y = eval1(&t(&[1, 3], &[5.0, 5.0, 5.0]), |g, v| g.layer_norm(v, 1e-5));
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

    let y = eval1(&t(&[1, 2], &[1.0, -1.0]), |g, v| g.layer_norm(v, 1e-5));
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y.data()[0] - expect).abs() < 1e-15 && (y.data()[1] + expect).abs() < 1e-15);

    // [0,2,4]: mean 2, population variance 8/3.
    let y = eval1(&t(&[1, 3], &[0.0, 2.0, 4.0]), |g, v| g.layer_norm(v, 0.0));
    let s = (8.0f64 / 3.0).sqrt();
    for (got, want) in y.data().iter().zip([-2.0 / s, 0.0, 2.0 / s]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = stream(3, Purpose::Test, 0);
    let x = Tensor::new(vec![16, 12], normal_vec(&mut rng, 192).iter().map(|v| 3.0 * v + 1.0).collect()).unwrap();
    let y = eval1(&x, |g, v| g.layer_norm(v, 0.0));
    for r in 0..16 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 12.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn softmax_and_attention_examples() {
    let y = eval1(&t(&[1, 2], &[0.0, 0.0]), |g, v| g.softmax(v));
    assert_eq!(y.data(), &[0.5, 0.5]);

    // Single key: output equals its value row for any query.
    let mut g = Graph::new();
    let q = g.input(t(&[3, 2], &[1.0, -4.0, 0.3, 9.0, -2.0, 2.0]));
    let kv = g.input(t(&[1, 2], &[0.7, -1.1]));
    let layout = Arc::new(AttentionLayout::dense(3, 1));
    let out = g.multi_head_attention(q, kv, kv, 2, layout).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(out).row(r), &[0.7, -1.1]);
    }

    // Two tokens, one head, d=1: scores q·k, weights softmax, mix of v.
    let mut g = Graph::new();
    let q = g.input(t(&[1, 1], &[2.0]));
    let k = g.input(t(&[2, 1], &[1.0, 0.0]));
    let v = g.input(t(&[2, 1], &[10.0, 20.0]));
    let out = g
        .multi_head_attention(q, k, v, 1, Arc::new(AttentionLayout::dense(1, 2)))
        .unwrap();
    let w0 = 2f64.exp() / (2f64.exp() + 1.0);
    let expect = w0 * 10.0 + (1.0 - w0) * 20.0;
    assert!((g.value(out).data()[0] - expect).abs() < 1e-12);

    let bad = g.multi_head_attention(q, k, v, 2, Arc::new(AttentionLayout::dense(1, 2)));
    assert!(matches!(bad, Err(crate::Error::Config(_))));
}

#[test]
fn masked_keys_are_ignored() {
    let mut g = Graph::new();
    let q = g.input(t(&[1, 2], &[1.0, 1.0]));
    let k = g.input(t(&[2, 2], &[5.0, 5.0, 0.0, 0.0]));
    let v = g.input(t(&[2, 2], &[100.0, 100.0, 1.0, 2.0]));
    let layout = AttentionLayout {
        blocks: vec![AttentionBlock { q_start: 0, q_len: 1, kv_start: 0, kv_len: 2 }],
        key_valid: vec![false, true],
    };
    let out = g.multi_head_attention(q, k, v, 1, Arc::new(layout)).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let p = g.leaf(t(&[3], &[0.3, -2.0, 7.0]));
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let p = g.leaf(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(p, p).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(g.backward(sq), Err(crate::Error::Contract(_))));
}

/// Checks d/dx of `Σ w ⊙ op(x)` against central differences.
fn check_unary(x: Tensor, op: impl Fn(&mut Graph, Var) -> Var) {
    let mut rng = stream(11, Purpose::Test, x.numel() as u64);
    let y0 = eval1(&x, &op);
    let w = Tensor::new(y0.shape().to_vec(), normal_vec(&mut rng, y0.numel())).unwrap();
    let f = |xs: &[f64]| {
        let y = eval1(&Tensor::new(x.shape().to_vec(), xs.to_vec()).unwrap(), &op);
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = op(&mut g, xv);
    let wv = g.input(w.clone());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let analytic = g.grad(xv).unwrap().data().to_vec();
    let numeric = central_difference(f, x.data(), 1e-5);
    let err = max_relative_error(&analytic, &numeric, 1e-6);
    assert!(err < 1e-4, "relative error {err}");
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, Purpose::Test, 0), n)).unwrap()
}

#[test]
fn elementwise_gradients() {
    check_unary(random(&[3, 4], 1), |g, v| g.gelu(v));
    check_unary(random(&[3, 4], 2), |g, v| g.silu(v));
    check_unary(random(&[3, 4], 3), |g, v| g.scale(v, -1.7));
    check_unary(random(&[3, 4], 4), |g, v| g.abs(v));
    check_unary(random(&[3, 4], 5), |g, v| {
        let w = g.input(random(&[3, 4], 50));
        let a = g.mul(v, w).unwrap();
        let b = g.add(a, v).unwrap();
        g.sub(b, w).unwrap()
    });
}

#[test]
fn normalization_gradients() {
    check_unary(random(&[4, 6], 6), |g, v| g.layer_norm(v, 1e-5));
    check_unary(random(&[4, 6], 7), |g, v| g.softmax(v));
}

#[test]
fn structural_gradients() {
    check_unary(random(&[4, 5], 8), |g, v| {
        let a = g.slice_cols(v, 1, 4).unwrap();
        let b = g.slice_cols(v, 0, 2).unwrap();
        let c = g.concat_cols(&[a, b, a]).unwrap();
        let d = g.concat_rows(&[c, c]).unwrap();
        g.gather_rows(d, Arc::new(vec![7, 0, 0, 3])).unwrap()
    });
    check_unary(random(&[6, 3], 9), |g, v| {
        g.max_pool_rows(v, 2, &[true, false, true, true, true, false]).unwrap()
    });
    check_unary(random(&[6, 3], 10), |g, v| g.mean_pool_rows(v, 3).unwrap());
    check_unary(random(&[6], 11), |g, v| {
        let m = g.mean(v);
        let r = g.reshape(v, vec![2, 3]).unwrap();
        let s = g.sum(r);
        let both = g.concat_cols(&[m, s]).unwrap();
        g.bce_with_logits_sum(both, vec![1.0, 0.0]).unwrap()
    });
}

#[test]
fn linear_and_attention_gradients() {
    let w = random(&[5, 4], 12);
    let b = random(&[4], 13);
    check_unary(random(&[3, 5], 14), |g, v| {
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        g.linear(v, wv, bv).unwrap()
    });
    // Gradient w.r.t. the weight operand.
    let x = random(&[3, 5], 15);
    check_unary(w.clone(), |g, wv| {
        let xv = g.input(x.clone());
        g.matmul(xv, wv).unwrap()
    });

    let layout = Arc::new(AttentionLayout {
        blocks: vec![
            AttentionBlock { q_start: 0, q_len: 2, kv_start: 0, kv_len: 3 },
            AttentionBlock { q_start: 2, q_len: 3, kv_start: 3, kv_len: 2 },
        ],
        key_valid: vec![true, false, true, true, true],
    });
    let k = random(&[5, 4], 16);
    let vv = random(&[5, 4], 17);
    let q = random(&[5, 4], 18);
    let l = layout.clone();
    let (k1, v1) = (k.clone(), vv.clone());
    check_unary(q.clone(), move |g, qv| {
        let kk = g.input(k1.clone());
        let vvv = g.input(v1.clone());
        g.multi_head_attention(qv, kk, vvv, 2, l.clone()).unwrap()
    });
    let l = layout.clone();
    let (q1, v1) = (q.clone(), vv.clone());
    check_unary(k.clone(), move |g, kv| {
        let qq = g.input(q1.clone());
        let vvv = g.input(v1.clone());
        g.multi_head_attention(qq, kv, vvv, 2, l.clone()).unwrap()
    });
    let (q1, k1) = (q, k);
    check_unary(vv, move |g, vv| {
        let qq = g.input(q1.clone());
        let kk = g.input(k1.clone());
        g.multi_head_attention(qq, kk, vv, 2, layout.clone()).unwrap()
    });
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut store = ParamStore::new();
    let id = store.add("p", t(&[2], &[1.5, -0.5]));
    let mut g = Graph::with_params(&store);
    let a = g.param(id);
    let b = g.param(id);
    assert_eq!(a, b);
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.param_grads()[0].data(), &[3.0, -1.0]);
}

#[test]
fn forward_is_deterministic() {
    let x = random(&[8, 8], 21);
    let run = || eval1(&x, |g, v| {
        let n = g.layer_norm(v, 1e-5);
        let a = g.gelu(n);
        g.multi_head_attention(a, a, a, 4, Arc::new(AttentionLayout::self_blocks(8, 4))).unwrap()
    });
    let (a, b) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}
