use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsleep_autodiff::{grad_check, Graph, NodeId, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `sum(out * weights)` so every output entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, out: NodeId, weights: Tensor) -> NodeId {
    let w = g.constant(weights);
    let prod = g.mul(out, w);
    g.sum(prod)
}

type Builder = fn(&mut Graph, &mut ChaCha8Rng, &mut BTreeMap<String, Tensor>) -> (NodeId, Vec<usize>);

fn unary(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    params: &mut BTreeMap<String, Tensor>,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> NodeId {
    params.insert("x".into(), random(rng, shape, lo, hi));
    g.param("x")
}

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |g, rng, p| {
            p.insert("a".into(), random(rng, &[3, 4], -1.0, 1.0));
            p.insert("b".into(), random(rng, &[4, 2], -1.0, 1.0));
            let (a, b) = (g.param("a"), g.param("b"));
            (g.matmul(a, b), vec![3, 2])
        }),
        ("transpose", |g, rng, p| {
            let x = unary(g, rng, p, &[2, 3], -1.0, 1.0);
            (g.transpose(x), vec![3, 2])
        }),
        ("add", |g, rng, p| {
            p.insert("a".into(), random(rng, &[2, 3], -1.0, 1.0));
            p.insert("b".into(), random(rng, &[2, 3], -1.0, 1.0));
            let (a, b) = (g.param("a"), g.param("b"));
            (g.add(a, b), vec![2, 3])
        }),
        ("sub", |g, rng, p| {
            p.insert("a".into(), random(rng, &[2, 3], -1.0, 1.0));
            p.insert("b".into(), random(rng, &[2, 3], -1.0, 1.0));
            let (a, b) = (g.param("a"), g.param("b"));
            (g.sub(a, b), vec![2, 3])
        }),
        ("mul", |g, rng, p| {
            p.insert("a".into(), random(rng, &[2, 3], -1.0, 1.0));
            p.insert("b".into(), random(rng, &[2, 3], -1.0, 1.0));
            let (a, b) = (g.param("a"), g.param("b"));
            (g.mul(a, b), vec![2, 3])
        }),
        ("add_row", |g, rng, p| {
            p.insert("a".into(), random(rng, &[4, 3], -1.0, 1.0));
            p.insert("r".into(), random(rng, &[3], -1.0, 1.0));
            let (a, r) = (g.param("a"), g.param("r"));
            (g.add_row(a, r), vec![4, 3])
        }),
        ("mul_row", |g, rng, p| {
            p.insert("a".into(), random(rng, &[4, 3], -1.0, 1.0));
            p.insert("r".into(), random(rng, &[1, 3], -1.0, 1.0));
            let (a, r) = (g.param("a"), g.param("r"));
            (g.mul_row(a, r), vec![4, 3])
        }),
        ("mul_col", |g, rng, p| {
            p.insert("a".into(), random(rng, &[4, 3], -1.0, 1.0));
            p.insert("c".into(), random(rng, &[4, 1], -1.0, 1.0));
            let (a, c) = (g.param("a"), g.param("c"));
            (g.mul_col(a, c), vec![4, 3])
        }),
        ("scale", |g, rng, p| {
            let x = unary(g, rng, p, &[5], -1.0, 1.0);
            (g.scale(x, -2.5), vec![5])
        }),
        ("sigmoid", |g, rng, p| {
            let x = unary(g, rng, p, &[2, 3], -3.0, 3.0);
            (g.sigmoid(x), vec![2, 3])
        }),
        ("tanh", |g, rng, p| {
            let x = unary(g, rng, p, &[2, 3], -2.0, 2.0);
            (g.tanh(x), vec![2, 3])
        }),
        ("exp", |g, rng, p| {
            let x = unary(g, rng, p, &[2, 3], -2.0, 1.0);
            (g.exp(x), vec![2, 3])
        }),
        ("log", |g, rng, p| {
            let x = unary(g, rng, p, &[2, 3], 0.2, 3.0);
            (g.log(x, 1e-12), vec![2, 3])
        }),
        ("square", |g, rng, p| {
            let x = unary(g, rng, p, &[2, 3], -2.0, 2.0);
            (g.square(x), vec![2, 3])
        }),
        ("softmax", |g, rng, p| {
            let x = unary(g, rng, p, &[3, 5], -3.0, 3.0);
            (g.softmax(x), vec![3, 5])
        }),
        ("concat", |g, rng, p| {
            p.insert("a".into(), random(rng, &[2, 3], -1.0, 1.0));
            p.insert("b".into(), random(rng, &[2, 2], -1.0, 1.0));
            let (a, b) = (g.param("a"), g.param("b"));
            (g.concat(&[a, b, a], 1), vec![2, 8])
        }),
        ("slice", |g, rng, p| {
            let x = unary(g, rng, p, &[4, 3], -1.0, 1.0);
            (g.slice(x, 0, 1, 3), vec![2, 3])
        }),
        ("reshape", |g, rng, p| {
            let x = unary(g, rng, p, &[4, 3], -1.0, 1.0);
            (g.reshape(x, &[2, 6]), vec![2, 6])
        }),
        ("sum", |g, rng, p| {
            let x = unary(g, rng, p, &[4, 3], -1.0, 1.0);
            (g.sum(x), vec![1])
        }),
        ("mean", |g, rng, p| {
            let x = unary(g, rng, p, &[4, 3], -1.0, 1.0);
            (g.mean(x), vec![1])
        }),
        ("sum_rows", |g, rng, p| {
            let x = unary(g, rng, p, &[4, 3], -1.0, 1.0);
            (g.sum_rows(x), vec![1, 3])
        }),
        ("batch_norm_cols", |g, rng, p| {
            let x = unary(g, rng, p, &[6, 3], -2.0, 2.0);
            (g.batch_norm_cols(x, 1e-5), vec![6, 3])
        }),
    ]
}

fn check_primitive(name: &str, build: Builder, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let mut params = BTreeMap::new();
    let (out, shape) = build(&mut g, &mut rng, &mut params);
    let weights = random(&mut rng, &shape, -1.0, 1.0);
    let loss = weighted_sum(&mut g, out, weights);
    let empty: BTreeMap<String, Tensor> = BTreeMap::new();
    let report = grad_check(&g, loss, &params, &empty, STEP, TOL, |n| n.to_string())
        .unwrap_or_else(|e| panic!("{name}: {e}"));
    report.max_rel_error()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for (name, build) in primitives() {
            let err = check_primitive(name, build, seed);
            prop_assert!(err < TOL, "{} relative error {:e} (seed {})", name, err, seed);
        }
    }

    #[test]
    fn backprop_is_linear_over_summed_losses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let w = g.param("w");
        let x = g.input("x");
        let h = g.matmul(x, w);
        let t = g.tanh(h);
        let s = g.softmax(h);
        let l1 = g.sum(t);
        let ls = g.log(s, 1e-12);
        let l2 = g.mean(ls);
        let total = g.add(l1, l2);
        let feed: BTreeMap<String, Tensor> = [
            ("w".to_string(), random(&mut rng, &[3, 4], -1.0, 1.0)),
            ("x".to_string(), random(&mut rng, &[5, 3], -1.0, 1.0)),
        ].into();
        let e = g.evaluate(&feed).unwrap();
        let g1 = g.backprop(&e, l1).unwrap();
        let g2 = g.backprop(&e, l2).unwrap();
        let gt = g.backprop(&e, total).unwrap();
        let sum: Vec<f64> = g1.get("w").unwrap().data().iter()
            .zip(g2.get("w").unwrap().data())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in sum.iter().zip(gt.get("w").unwrap().data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

/// Three stacked affine + nonlinearity layers with a softmax cross-entropy head.
#[test]
fn three_layer_graph_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let mut h = x;
        let mut params = BTreeMap::new();
        let dims = [6, 5, 4, 3];
        for layer in 0..3 {
            let wn = format!("l{layer}.w");
            let bn = format!("l{layer}.b");
            params.insert(wn.clone(), random(&mut rng, &[dims[layer], dims[layer + 1]], -0.8, 0.8));
            params.insert(bn.clone(), random(&mut rng, &[dims[layer + 1]], -0.2, 0.2));
            let w = g.param(&wn);
            let b = g.param(&bn);
            let z = g.matmul(h, w);
            let z = g.add_row(z, b);
            h = if layer == 2 { g.softmax(z) } else if layer == 1 { g.sigmoid(z) } else { g.tanh(z) };
        }
        let logp = g.log(h, 1e-12);
        let picked = g.mul(logp, y);
        let s = g.sum(picked);
        let loss = g.scale(s, -1.0);
        let mut labels = vec![0.0; 4 * 3];
        for r in 0..4 {
            labels[r * 3 + rng.gen_range(0..3)] = 1.0;
        }
        let inputs: BTreeMap<String, Tensor> = [
            ("x".to_string(), random(&mut rng, &[4, 6], -1.0, 1.0)),
            ("y".to_string(), Tensor::new(vec![4, 3], labels)),
        ]
        .into();
        let report = grad_check(&g, loss, &params, &inputs, STEP, TOL, |n| {
            n.split('.').next().unwrap().to_string()
        })
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w");
    let h = g.matmul(x, w);
    let h = g.tanh(h);
    let s = g.softmax(h);
    let feed: BTreeMap<String, Tensor> = [
        ("x".to_string(), random(&mut rng, &[8, 6], -1.0, 1.0)),
        ("w".to_string(), random(&mut rng, &[6, 5], -1.0, 1.0)),
    ]
    .into();
    let a = g.evaluate(&feed).unwrap().value(s).clone();
    let b = g.evaluate(&feed).unwrap().value(s).clone();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}
