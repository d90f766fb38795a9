use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_params;
use super::*;
use crate::array::DenseArray;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> DenseArray<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    DenseArray::new(shape.to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.input(DenseArray::scalar(0.0));
    let sp = g.softplus(z).unwrap();
    let sg = g.sigmoid(z).unwrap();
    assert!((g.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
    assert_eq!(g.value(sg).data()[0], 0.5);
    let v = g.input(DenseArray::from_f64(&[2], &[0.0, -1.0]).unwrap());
    let e = g.exp(v).unwrap();
    close(g.value(e).data(), &[1.0, 0.367879], 1e-6);
}

#[test]
fn binary_broadcast_and_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.input(DenseArray::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = g.input(DenseArray::scalar(2.0));
    let m = g.mul(a, s).unwrap();
    close(g.value(m).data(), &[2.0, 4.0, 6.0, 8.0], 0.0);
    let r = g.sub(s, a).unwrap();
    close(g.value(r).data(), &[1.0, 0.0, -1.0, -2.0], 0.0);
    let b = g.input(DenseArray::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
}

#[test]
fn layer_norm_examples() {
    let eps = 1e-12;
    let cases: [(&[f64], &[f64], &[f64], &[f64]); 3] = [
        (&[5.0, 5.0, 5.0], &[1.0; 3], &[0.0; 3], &[0.0, 0.0, 0.0]),
        (&[1.0, -1.0], &[1.0; 2], &[0.0; 2], &[1.0, -1.0]),
        (&[0.0, 2.0], &[2.0; 2], &[1.0; 2], &[-1.0, 3.0]),
    ];
    for (row, gamma, beta, expected) in cases {
        let c = row.len();
        let mut g = Graph::<f64>::new();
        let x = g.input(DenseArray::from_f64(&[1, c], row).unwrap());
        let ga = g.input(DenseArray::from_f64(&[c], gamma).unwrap());
        let be = g.input(DenseArray::from_f64(&[c], beta).unwrap());
        let y = g.layer_norm(x, ga, be, eps).unwrap();
        close(g.value(y).data(), expected, 1e-9);
    }
}

#[test]
fn layer_norm_rejects_zero_channels_and_bad_eps() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::zeros(&[3, 0]));
    let ga = g.input(DenseArray::zeros(&[0]));
    assert!(g.layer_norm(x, ga, ga, 1e-5).is_err());
    let x = g.input(DenseArray::zeros(&[3, 2]));
    let ga = g.input(DenseArray::zeros(&[2]));
    assert!(g.layer_norm(x, ga, ga, 0.0).is_err());
}

#[test]
fn layer_norm_row_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::<f64>::new();
    let x = g.input(random(&mut rng, &[20, 16], 3.0));
    let ga = g.input(DenseArray::full(&[16], 1.0));
    let beta = random(&mut rng, &[16], 1.0);
    let beta_mean = beta.sum() / 16.0;
    let be = g.input(beta.clone());
    let y = g.layer_norm(x, ga, be, 1e-12).unwrap();
    let yv = g.value(y);
    for r in 0..20 {
        let row = yv.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        assert!((mean - beta_mean).abs() < 1e-6);
        let centered: Vec<f64> = row.iter().zip(beta.data()).map(|(v, b)| v - b).collect();
        let var = centered.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn conv_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap());
    let k = g.input(DenseArray::from_f64(&[3, 1], &[1.0, 1.0, 1.0]).unwrap());
    let y = g.conv1d_depthwise(x, k).unwrap();
    close(g.value(y).data(), &[3.0, 6.0, 5.0], 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = random(&mut rng, &[7, 4], 1.0);
    let x = g.input(xv.clone());
    let mut ident = vec![0.0; 12];
    ident[4..8].fill(1.0);
    let k = g.input(DenseArray::new(vec![3, 4], ident).unwrap());
    let y = g.conv1d_depthwise(x, k).unwrap();
    assert_eq!(g.value(y), &xv);

    let k1 = g.input(DenseArray::full(&[1, 4], 2.5));
    let y = g.conv1d_depthwise(x, k1).unwrap();
    assert_eq!(g.value(y), &xv.map(|v| 2.5 * v));
}

#[test]
fn conv_rejects_even_and_oversized_kernels() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::zeros(&[2, 1]));
    let even = g.input(DenseArray::zeros(&[2, 1]));
    assert!(g.conv1d_depthwise(x, even).is_err());
    let big = g.input(DenseArray::zeros(&[5, 1]));
    assert!(g.conv1d_depthwise(x, big).is_err());
    let ok = g.input(DenseArray::zeros(&[3, 1]));
    assert!(g.conv1d_depthwise(x, ok).is_ok());
    let wrong_c = g.input(DenseArray::zeros(&[3, 2]));
    assert!(g.conv1d_depthwise(x, wrong_c).is_err());
}

#[test]
fn linear_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
    let w = g.input(DenseArray::from_f64(&[2, 1], &[1.0, 1.0]).unwrap());
    let b = g.input(DenseArray::zeros(&[1]));
    let y = g.linear(x, w, b).unwrap();
    close(g.value(y).data(), &[3.0], 0.0);

    let x = g.input(DenseArray::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let w = g.input(DenseArray::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 2.0]).unwrap());
    let b = g.input(DenseArray::full(&[2], 1.0));
    let y = g.linear(x, w, b).unwrap();
    close(g.value(y).data(), &[3.0, 1.0, 1.0, 3.0], 0.0);

    let bad = g.input(DenseArray::zeros(&[3, 1]));
    assert!(g.linear(x, bad, b).is_err());
}

#[test]
fn dropout_modes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::full(&[100_000], 1.0));
    assert_eq!(g.dropout(x, 0.0, 1, true).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, 1, false).unwrap(), x);
    assert!(g.dropout(x, 1.0, 1, true).is_err());
    let y = g.dropout(x, 0.5, 42, true).unwrap();
    let vals = g.value(y).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.5).abs() < 0.01, "survivor fraction {kept}");
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn backward_simple_losses() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", DenseArray::from_f64(&[3], &[1.0, -2.0, 4.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let l = g.sum(x).unwrap();
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.data(), &[1.0, 1.0, 1.0]);

    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", DenseArray::from_f64(&[1], &[3.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    g.backward_into(l, &mut store).unwrap();
    assert_eq!(store.get(id).grad.data(), &[6.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));

    let mut inf = Graph::<f64>::inference();
    let x = inf.input(DenseArray::zeros(&[2]));
    let l = inf.sum(x).unwrap();
    assert!(inf.backward(l).is_err());
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::scalar(1000.0));
    assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
}

#[test]
fn backward_visits_in_reverse_order() {
    let mut g = Graph::<f64>::new();
    let x = g.input(DenseArray::full(&[3], 0.3));
    let a = g.sigmoid(x).unwrap();
    let b = g.exp(a).unwrap();
    let c = g.mul(a, b).unwrap();
    let l = g.sum(c).unwrap();
    g.trace_backward();
    g.backward(l).unwrap();
    let trace = g.backward_trace().unwrap();
    assert_eq!(trace, &[4, 3, 2, 1, 0]);
}

#[test]
fn parameter_registered_once_per_graph() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", DenseArray::full(&[2], 1.0)).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let s = g.add(a, b).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(id).unwrap().data(), &[2.0, 2.0]);
}

/// Builds a random store for one op, and a loss `sum(op(...) * R)` with
/// a fixed random projection `R` so every output element matters.
fn gradcheck_op<B>(shapes: &[(&str, Vec<usize>, f64)], seed: u64, build: B)
where
    B: Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, scale) in shapes {
        store.add(*name, random(&mut rng, shape, *scale)).unwrap();
    }
    let proj_seed = rng.random::<u64>();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let vars: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect();
        let out = build(g, &vars)?;
        let shape = g.shape(out).to_vec();
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let r = g.input(random(&mut prng, &shape, 1.0));
        let m = g.mul(out, r)?;
        g.sum(m)
    };
    let reports = check_params(&mut store, 1e-6, 1e-8, loss).unwrap();
    for r in reports {
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}

#[test]
fn gradcheck_elementwise() {
    let s = vec![4, 3];
    for kind in [UnaryKind::Sigmoid, UnaryKind::Softplus, UnaryKind::Exp, UnaryKind::Neg, UnaryKind::Relu] {
        gradcheck_op(&[("x", s.clone(), 2.0)], 1, |g, v| g.unary(kind, v[0]));
    }
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
        gradcheck_op(&[("a", s.clone(), 1.0), ("b", s.clone(), 1.0)], 2, |g, v| {
            g.binary(kind, v[0], v[1])
        });
        gradcheck_op(&[("a", s.clone(), 1.0), ("b", vec![1], 1.0)], 3, |g, v| {
            g.binary(kind, v[0], v[1])
        });
    }
    gradcheck_op(&[("x", s.clone(), 1.0)], 4, |g, v| g.affine(v[0], -0.7, 0.3));
}

#[test]
fn gradcheck_structured_ops() {
    gradcheck_op(
        &[("x", vec![6, 5], 2.0), ("g", vec![5], 1.0), ("b", vec![5], 1.0)],
        5,
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    for k in [1, 3, 5] {
        gradcheck_op(&[("x", vec![7, 3], 1.0), ("k", vec![k, 3], 1.0)], 6, |g, v| {
            g.conv1d_depthwise(v[0], v[1])
        });
    }
    gradcheck_op(
        &[("x", vec![5, 4], 1.0), ("w", vec![4, 3], 1.0), ("b", vec![3], 1.0)],
        7,
        |g, v| g.linear(v[0], v[1], v[2]),
    );
    gradcheck_op(&[("x", vec![8, 3], 1.0)], 8, |g, v| g.max_pool(v[0], 2));
    gradcheck_op(&[("x", vec![6, 3], 1.0)], 9, |g, v| g.dropout(v[0], 0.3, 77, true));
}

#[test]
fn gradcheck_relaxation_ops() {
    // Sigmoid keeps the coefficients inside (0, 1) for any raw value.
    for alpha_len in [1, 4] {
        gradcheck_op(
            &[("x", vec![6, 4], 1.0), ("s", vec![6, 4], 1.0), ("a", vec![alpha_len], 2.0)],
            10,
            |g, v| {
                let a = g.sigmoid(v[2])?;
                g.relax(v[0], v[1], a)
            },
        );
        gradcheck_op(
            &[("x", vec![6, 4], 1.0), ("s", vec![6, 4], 1.0), ("a", vec![alpha_len], 2.0)],
            11,
            |g, v| {
                let a = g.sigmoid(v[2])?;
                g.cfc_scan(v[0], v[1], a)
            },
        );
        gradcheck_op(
            &[("x", vec![6, 4], 1.0), ("s", vec![6, 4], 1.0), ("l", vec![alpha_len], 1.0)],
            12,
            |g, v| {
                let l = g.softplus(v[2])?;
                g.euler_scan(v[0], v[1], l, 0.4, 3)
            },
        );
    }
}

#[test]
fn gradcheck_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let targets = DenseArray::new(
        vec![5, 3],
        (0..15).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let weights = vec![1.0, 0.0, 1.0, 0.5, 1.0];
    gradcheck_op(&[("z", vec![5, 3], 3.0)], 14, |g, v| {
        g.focal_loss(v[0], &targets, &weights, 0.25, 2.0)
    });
    let reg_targets = DenseArray::from_f64(&[3, 2], &[1.0, 2.0, 0.5, 0.7, 3.0, 1.0]).unwrap();
    gradcheck_op(&[("o", vec![3, 2], 1.0)], 15, |g, v| {
        let o = g.softplus(v[0])?;
        g.iou_loss(o, &reg_targets, &[1.0, 1.0, 0.0])
    });
}

#[test]
fn focal_single_token_by_hand() {
    // z = 0 gives p = 0.5: positive term -a (0.5)^2 ln 0.5, negative term -(1-a)(0.5)^2 ln 0.5.
    let mut g = Graph::<f64>::new();
    let z = g.input(DenseArray::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let t = DenseArray::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
    let l = g.focal_loss(z, &t, &[1.0], 0.25, 2.0).unwrap();
    let expected = -0.25 * 0.25 * 0.5f64.ln() - 0.75 * 0.25 * 0.5f64.ln();
    assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
}

#[test]
fn gradients_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", random(&mut rng, &[9, 4], 1.0)).unwrap();
        let w = store.add("w", random(&mut rng, &[4, 4], 1.0)).unwrap();
        let b = store.add("b", random(&mut rng, &[4], 1.0)).unwrap();
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(&store, x), g.param(&store, w), g.param(&store, b));
        let y = g.linear(xv, wv, bv).unwrap();
        let d = g.dropout(y, 0.4, 5, true).unwrap();
        let s = g.sigmoid(d).unwrap();
        let l = g.sum(s).unwrap();
        g.backward_into(l, &mut store).unwrap();
        store
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn depthwise_conv_is_linear(seed in any::<u64>(), t in 3usize..12, c in 1usize..5, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = random(&mut rng, &[t, c], 1.0);
        let ys = random(&mut rng, &[t, c], 1.0);
        let k = random(&mut rng, &[3, c], 1.0);
        let mut g = Graph::<f64>::new();
        let combo = DenseArray::new(
            vec![t, c],
            xs.data().iter().zip(ys.data()).map(|(x, y)| a * x + b * y).collect(),
        ).unwrap();
        let (xv, yv, cv, kv) = (g.input(xs), g.input(ys), g.input(combo), g.input(k));
        let cx = g.conv1d_depthwise(xv, kv).unwrap();
        let cy = g.conv1d_depthwise(yv, kv).unwrap();
        let cc = g.conv1d_depthwise(cv, kv).unwrap();
        for i in 0..t * c {
            let lhs = g.value(cc).data()[i];
            let rhs = a * g.value(cx).data()[i] + b * g.value(cy).data()[i];
            prop_assert!((lhs - rhs).abs() <= 1e-6);
        }
    }
}
