use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.item(y), 0.5);
}

#[test]
fn uniform_cross_entropy_is_log_vocab() {
    let v = 7;
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::full([3, v], 0.25));
    let ce = g.cross_entropy(logits, &[0, 3, 6]).unwrap();
    assert!((g.item(ce) - (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    let c = g.matmul_nt(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(0.0).with_grad(true));
    let y = g.sigmoid(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.25]);
}

#[test]
fn abs_subgradient_convention() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[3], &[-2.0, 0.0, 5.0]).with_grad(true));
    let y = g.abs(x);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.constant(Tensor::zeros([3]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros([2]).with_grad(true));
    let b = g.sigmoid(a);
    assert!(matches!(g.backward(b), Err(Error::NonScalarLoss(_))));
}

#[test]
fn frozen_leaves_get_no_buffer() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let w = g.constant(random(&mut rng, &[3, 4]));
    let p = g.leaf(random(&mut rng, &[3, 4]).with_grad(true));
    let m = g.sigmoid(p);
    let wt = g.mul(m, w).unwrap();
    let x = g.constant(random(&mut rng, &[5, 4]));
    let y = g.matmul_nt(x, wt).unwrap();
    let y = g.abs(y);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(w).is_none());
    assert!(grads.get(x).is_none());
    assert!(grads.get(p).is_some());
}

#[test]
fn ops_without_trainable_inputs_are_not_recorded() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(1.0));
    let b = g.sigmoid(a);
    assert!(!g.requires_grad(b));
    let p = g.leaf(Tensor::scalar(1.0).with_grad(true));
    let c = g.mul(b, p).unwrap();
    assert!(g.requires_grad(c));
}

#[test]
fn repeated_backward_is_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f64>::new();
    let p = g.leaf(random(&mut rng, &[4, 4]).with_grad(true));
    let q = g.matmul(p, p).unwrap();
    let s = g.sigmoid(q);
    let l = g.sum(s);
    let first = g.backward(l).unwrap().get(p).unwrap().to_vec();
    let second = g.backward(l).unwrap().get(p).unwrap().to_vec();
    assert_eq!(first, second);
}

#[test]
fn constant_function_passes_grad_check() {
    let point = t64(&[3], &[0.1, -0.4, 2.0]);
    let report = grad_check(
        |g, x| {
            let z = g.scale(x, 0.0);
            let z = g.add_scalar(z, 3.0);
            Ok(g.sum(z))
        },
        &point,
        1e-5,
        1e-5,
    );
    assert!(report.passed, "{report:?}");
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn sum_sigmoid_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let point = random(&mut rng, &[6]);
        let report = grad_check(
            |g, x| {
                let s = g.sigmoid(x);
                Ok(g.sum(s))
            },
            &point,
            1e-5,
            1e-5,
        );
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[5, 4]);
    let w1 = random(&mut rng, &[6, 4]);
    let w2 = random(&mut rng, &[6, 6]);
    let w3 = random(&mut rng, &[3, 6]);
    let targets = [0usize, 2, 1, 1, 0];
    let coords: Vec<(usize, usize)> = (0..3)
        .flat_map(|i| (0..[24, 36, 18][i]).map(move |j| (i, j)))
        .collect();
    let report = grad_check_multi(
        |g, v| {
            let x = g.constant(x.clone());
            let h = g.matmul_nt(x, v[0])?;
            let h = g.gelu(h);
            let h = g.matmul_nt(h, v[1])?;
            let h = g.sigmoid(h);
            let o = g.matmul_nt(h, v[2])?;
            g.cross_entropy(o, &targets)
        },
        &[w1, w2, w3],
        &coords,
        GradCheckOptions::default(),
    );
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 78);
}

/// One random instance of each differentiable op, checked against central
/// differences. Returns the worst relative error.
fn check_op(op: usize, rng: &mut ChaCha8Rng) -> f64 {
    let opts = GradCheckOptions::default();
    let a = random(rng, &[3, 4]);
    let b = random(rng, &[3, 4]);
    let c = random(rng, &[4, 5]);
    let gain = random(rng, &[4]);
    let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    let weights = random(rng, &[3, 4]);
    fn w_at(i: usize) -> f64 {
        0.3 + 0.1 * (i % 7) as f64
    }
    // Weighted sum so every output coordinate contributes differently.
    let weigh = |g: &mut Graph<f64>, y: Var| -> crate::Result<Var> {
        let w = g.constant(Tensor::from_fn(g.value(y).shape().to_vec(), w_at));
        let z = g.mul(y, w)?;
        Ok(g.sum(z))
    };
    let all = |t: &Tensor<f64>, i: usize| (0..t.numel()).map(move |j| (i, j));
    let report = match op {
        0 => grad_check_multi(|g, v| { let y = g.matmul(v[0], v[1])?; weigh(g, y) }, &[a.clone(), c.clone()], &all(&a, 0).chain(all(&c, 1)).collect::<Vec<_>>(), opts),
        1 => grad_check_multi(|g, v| { let y = g.matmul_nt(v[0], v[1])?; weigh(g, y) }, &[a.clone(), b.clone()], &all(&a, 0).chain(all(&b, 1)).collect::<Vec<_>>(), opts),
        2 => grad_check_multi(|g, v| { let y = g.add(v[0], v[1])?; weigh(g, y) }, &[a.clone(), b.clone()], &all(&a, 0).chain(all(&b, 1)).collect::<Vec<_>>(), opts),
        3 => grad_check_multi(|g, v| { let y = g.mul(v[0], v[1])?; weigh(g, y) }, &[a.clone(), b.clone()], &all(&a, 0).chain(all(&b, 1)).collect::<Vec<_>>(), opts),
        4 => {
            let s = Tensor::scalar(rng.gen_range(-1.0..1.0));
            grad_check_multi(|g, v| { let y = g.mul(v[0], v[1])?; let y = g.add(y, v[1])?; weigh(g, y) }, &[a.clone(), s.clone()], &all(&a, 0).chain(all(&s, 1)).collect::<Vec<_>>(), opts)
        }
        5 => grad_check_multi(|g, v| { let y = g.sigmoid(v[0]); weigh(g, y) }, &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts),
        6 => {
            // keep away from the kink at 0
            let a = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
            grad_check_multi(|g, v| { let y = g.abs(v[0]); weigh(g, y) }, &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts)
        }
        7 => grad_check_multi(|g, v| { let y = g.gelu(v[0]); weigh(g, y) }, &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts),
        8 => grad_check_multi(|g, v| { let y = g.scale(v[0], -1.7); let y = g.add_scalar(y, 0.4); let y = g.mean(y)?; Ok(g.sigmoid(y)) }, &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts),
        9 => grad_check_multi(|g, v| { let y = g.softmax(v[0])?; weigh(g, y) }, &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts),
        10 => grad_check_multi(|g, v| { let y = g.log_softmax(v[0])?; weigh(g, y) }, &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts),
        11 => grad_check_multi(|g, v| g.cross_entropy(v[0], &targets), &[a.clone()], &all(&a, 0).collect::<Vec<_>>(), opts),
        12 => grad_check_multi(|g, v| { let y = g.embedding(v[0], &ids)?; weigh(g, y) }, &[weights.clone()], &all(&weights, 0).collect::<Vec<_>>(), opts),
        13 => grad_check_multi(|g, v| { let y = g.rms_norm(v[0], v[1], 1e-5)?; weigh(g, y) }, &[a.clone(), gain.clone()], &all(&a, 0).chain(all(&gain, 1)).collect::<Vec<_>>(), opts),
        14 => {
            let (batch, seq, heads, d) = (2, 3, 2, 4);
            let q = random(rng, &[batch * seq, d]);
            let k = random(rng, &[batch * seq, d]);
            let v = random(rng, &[batch * seq, d]);
            let coords: Vec<_> = all(&q, 0).chain(all(&k, 1)).chain(all(&v, 2)).collect();
            grad_check_multi(|g, x| { let y = g.causal_attention(x[0], x[1], x[2], batch, seq, heads)?; weigh(g, y) }, &[q, k, v], &coords, opts)
        }
        _ => unreachable!(),
    };
    assert!(report.failure.is_none(), "op {op}: {report:?}");
    report.max_rel_error
}

#[test]
fn every_op_matches_finite_differences_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for op in 0..15 {
        let worst = (0..100).map(|_| check_op(op, &mut rng)).fold(0.0, f64::max);
        assert!(worst <= 1e-5, "op {op}: worst relative error {worst}");
    }
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (seq, d) = (5, 4);
    let q = random(&mut rng, &[seq, d]);
    let k = random(&mut rng, &[seq, d]);
    let v = random(&mut rng, &[seq, d]);
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.causal_attention(a, b, c, 1, seq, 2).unwrap();
        g.value(o).data().to_vec()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 0..d {
        k2.data_mut()[(seq - 1) * d + j] += 3.0;
        v2.data_mut()[(seq - 1) * d + j] -= 2.0;
    }
    let pert = run(&k2, &v2);
    assert_eq!(&base[..(seq - 1) * d], &pert[..(seq - 1) * d]);
    assert_ne!(&base[(seq - 1) * d..], &pert[(seq - 1) * d..]);
}
