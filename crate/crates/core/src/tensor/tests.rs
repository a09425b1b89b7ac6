use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let i = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let v = t.constant(m(&[&[3.0], &[4.0]]));
    let out = t.matmul(i, v).unwrap();
    assert_eq!(t.value(out).data(), &[3.0, 4.0]);

    let a = t.constant(m(&[&[1.0, 2.0]]));
    let out = t.matmul(a, v).unwrap();
    assert_eq!(t.value(out).data(), &[11.0]);

    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = t.softmax(x);
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);

    let x = t.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = t.softmax(x);
    let d = t.value(y).data();
    assert_eq!(d[0], 1.0);
    assert!(d[1] < 1e-300 && d[1].is_finite());

    let x = t.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let y = t.softmax(x);
    let d = t.value(y).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn cosine_examples() {
    let mut t = Tape::new();
    let mut cos = |u: Vec<f64>, v: Vec<f64>| {
        let a = t.constant(Tensor::vector(u));
        let b = t.constant(Tensor::vector(v));
        t.cosine_sim(a, b).map(|s| t.value(s).item())
    };
    assert!((cos(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap(), 0.0);
    assert!((cos(vec![1.0, 1.0], vec![1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(matches!(cos(vec![0.0, 0.0], vec![1.0, 0.0]), Err(Error::Domain(_))));
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let sure = t.variable(m(&[&[0.0, 800.0, 0.0]]));
    let l = t.cross_entropy(sure, &[1], None).unwrap();
    assert_eq!(t.value(l).item(), 0.0);

    let uniform = t.variable(Tensor::zeros(&[2, 4]));
    let l = t.cross_entropy(uniform, &[1, 3], None).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let x = t.variable(m(&[&[0.3, 0.1], &[0.5, 0.9]]));
    let l = t.cross_entropy(x, &[0, 0], Some(0)).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
    let g = t.backward(l).unwrap();
    assert!(g.get_or_zeros(x, 4).iter().all(|&v| v == 0.0));

    assert!(matches!(t.cross_entropy(x, &[0, 5], None), Err(Error::Index(_))));
}

#[test]
fn reduce_examples() {
    let mut t = Tape::new();
    let x = t.constant(m(&[&[1.0, 3.0], &[3.0, 5.0]]));
    let mean = t.mean(x, 0).unwrap();
    assert_eq!(t.value(mean).data(), &[2.0, 4.0]);

    let d = 3;
    let parts: Vec<Var> = [2, 3, 5]
        .iter()
        .map(|&r| t.constant(Tensor::zeros(&[r, d])))
        .collect();
    let cat = t.concat_rows(&parts).unwrap();
    assert_eq!(t.shape(cat), &[10, d]);

    let x = t.constant(m(&[&[1.0, 1.0, 1.0]]));
    let g = t.constant(Tensor::vector(vec![2.0, 2.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![0.5, -0.5, 1.0]));
    let ln = t.layer_norm(x, g, b).unwrap();
    assert_eq!(t.value(ln).data(), &[0.5, -0.5, 1.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.variable(Tensor::vector(vec![1.0, 2.0]));
    let y = t.scale(x, 3.0);
    let loss = t.sum(y);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);

    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(2.0));
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4.0]);

    let mut t = Tape::new();
    let x = t.variable(Tensor::scalar(5.0));
    let y = t.add(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0]);
}

#[test]
fn backward_on_detached_is_usage_error() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::scalar(1.0));
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y), Err(Error::Usage(_))));
    let v = t.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(v), Err(Error::Usage(_))));
}

#[test]
fn params_accumulate_across_passes() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![1.0, -1.0])).unwrap();
    for _ in 0..2 {
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        assert_eq!(a, b);
        let s = t.scale(a, 2.0);
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        store.accumulate(&t, &g);
    }
    assert_eq!(store.grad(w), &[4.0, 4.0]);
    store.zero_grad();
    assert_eq!(store.grad(w), &[0.0, 0.0]);
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut t = Tape::new();
        let x = t.variable(m(&[&[0.1, 0.2, 0.3], &[-0.4, 0.5, 0.6]]));
        let w = t.variable(m(&[&[0.7, -0.1], &[0.2, 0.3], &[-0.5, 0.9]]));
        let h = t.matmul(x, w).unwrap();
        let s = t.softmax(h);
        let l = t.cross_entropy(s, &[1, 0], None).unwrap();
        let g = t.backward(l).unwrap();
        (g.get(x).unwrap().to_vec(), g.get(w).unwrap().to_vec())
    };
    assert_eq!(build(), build());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], 30.0, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax(v);
        for r in 0..rows {
            let row = t.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        v in prop::collection::vec(-5.0f64..5.0, 4),
        alpha in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(u.clone()));
        let b = t.constant(Tensor::vector(v));
        let au = t.constant(Tensor::vector(u.iter().map(|x| x * alpha).collect()));
        let s1 = t.cosine_sim(a, b).unwrap();
        let s2 = t.cosine_sim(au, b).unwrap();
        prop_assert!((t.value(s1).item() - t.value(s2).item()).abs() < 1e-12);
        prop_assert!(t.value(s1).item().abs() <= 1.0 + 1e-12);
    }
}
