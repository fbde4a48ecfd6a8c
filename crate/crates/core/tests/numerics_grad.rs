mod common;

use common::{contract, probe, rng};
use ctvr::numerics::{Graph, ParameterSet, Tensor};
use ctvr::Error;

const PROBES: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn check(name: &str, inputs: &[Tensor], build: impl Fn(&mut Graph, &[ctvr::numerics::Var]) -> ctvr::Result<ctvr::numerics::Var>) {
    let r = probe(inputs, PROBES, 99, H, |g, v| {
        let out = build(g, v)?;
        contract(g, out, 1234)
    });
    assert!(
        r.max_rel_err <= TOL,
        "{name}: max rel err {} over {} probes",
        r.max_rel_err,
        r.probes
    );
}

#[test]
fn matmul_family() {
    check("matmul", &[randn(&[4, 3], 1), randn(&[3, 5], 2)], |g, v| g.matmul(v[0], v[1]));
    check("matmul_bt", &[randn(&[4, 3], 1), randn(&[5, 3], 2)], |g, v| {
        g.matmul_bt(v[0], v[1])
    });
    check("matmul chain", &[randn(&[3, 4], 3), randn(&[4, 4], 4), randn(&[4, 2], 5)], |g, v| {
        let ab = g.matmul(v[0], v[1])?;
        g.matmul(ab, v[2])
    });
    check("transpose", &[randn(&[3, 5], 6)], |g, v| g.transpose(v[0]));
}

#[test]
fn elementwise_family() {
    let a = randn(&[3, 4], 10);
    let b = randn(&[3, 4], 11);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("scale", &[a.clone()], |g, v| g.scale(v[0], -2.5));
    check("scale_by", &[a.clone(), randn(&[1], 12)], |g, v| g.scale_by(v[0], v[1]));
    check("gelu", &[a.clone()], |g, v| g.gelu(v[0]));
    check("sum", &[a.clone()], |g, v| g.sum(v[0]));
    check("add_tiled", &[randn(&[6, 4], 13), randn(&[3, 4], 14)], |g, v| {
        g.add_tiled(v[0], v[1])
    });
    check("add_tiled bias", &[randn(&[6, 4], 13), randn(&[4], 15)], |g, v| {
        g.add_tiled(v[0], v[1])
    });
}

#[test]
fn normalization_family() {
    check(
        "layer_norm",
        &[randn(&[5, 6], 20), randn(&[6], 21), randn(&[6], 22)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check("softmax", &[randn(&[4, 5], 23)], |g, v| g.softmax(v[0]));
    check("normalize_rows", &[randn(&[4, 5], 24)], |g, v| g.normalize_rows(v[0]));
    check("topk_softmax", &[randn(&[6, 5], 25)], |g, v| g.topk_softmax(v[0], 2));
}

#[test]
fn attention_family() {
    for (groups, heads, causal) in [(1, 1, false), (2, 2, false), (3, 2, true)] {
        let lq = 4;
        let inputs = [
            randn(&[groups * lq, 6], 30),
            randn(&[groups * lq, 6], 31),
            randn(&[groups * lq, 6], 32),
        ];
        check("attention", &inputs, |g, v| {
            g.attention(v[0], v[1], v[2], groups, heads, causal)
        });
    }
    check(
        "cross attention lengths",
        &[randn(&[2 * 3, 4], 33), randn(&[2 * 5, 4], 34), randn(&[2 * 5, 4], 35)],
        |g, v| g.attention(v[0], v[1], v[2], 2, 2, false),
    );
    check(
        "multi_head_attention",
        &[
            randn(&[5, 4], 36),
            randn(&[5, 4], 37),
            randn(&[4, 4], 38),
            randn(&[4, 4], 39),
            randn(&[4, 4], 40),
        ],
        |g, v| g.multi_head_attention(v[0], v[1], v[2], v[3], v[4], 2, 1, false),
    );
}

#[test]
fn indexing_family() {
    check("gather_rows", &[randn(&[4, 3], 50)], |g, v| {
        g.gather_rows(v[0], vec![3, 0, 0, 2])
    });
    check("group_mean", &[randn(&[6, 3], 51)], |g, v| g.group_mean(v[0], 3));
    check("concat_cols", &[randn(&[3, 2], 52), randn(&[3, 4], 53)], |g, v| {
        g.concat_cols(v[0], v[1])
    });
    check("column", &[randn(&[3, 4], 54)], |g, v| g.column(v[0], 2));
    check("expand_rows", &[randn(&[2, 3], 55)], |g, v| g.expand_rows(v[0], 3));
    check("mul_col", &[randn(&[4, 3], 56), randn(&[4, 1], 57)], |g, v| {
        g.mul_col(v[0], v[1])
    });
    check("cross_entropy", &[randn(&[4, 6], 58)], |g, v| {
        g.cross_entropy(v[0], vec![0, 5, 2, 2])
    });
}

#[test]
fn sum_of_squares_gradient_is_two_x() {
    let x = randn(&[3, 3], 60);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    for (gv, xv) in g.grad(v).unwrap().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let v = g.leaf(randn(&[2, 2], 61));
    assert!(matches!(g.backward(v), Err(Error::Usage(_))));
}

#[test]
fn unreachable_and_frozen_params() {
    let mut set = ParameterSet::new();
    set.insert("used", randn(&[2, 2], 62)).unwrap();
    set.insert("unused", randn(&[2, 2], 63)).unwrap();
    set.insert("frozen", randn(&[2, 2], 64)).unwrap();
    set.freeze("frozen").unwrap();
    let mut g = Graph::new();
    let a = g.use_param(&set, "used").unwrap();
    let _b = g.use_param(&set, "unused").unwrap();
    let c = g.use_param(&set, "frozen").unwrap();
    let p = g.matmul(a, c).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.contains_key("used"));
    assert!(grads["unused"].data().iter().all(|&v| v == 0.0));
    assert!(!grads.contains_key("frozen"));
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[16, 9], 30.0, &mut rng(70)));
    let s = g.softmax(x).unwrap();
    let t = g.value(s);
    for i in 0..16 {
        let row = t.row(i);
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn attention_degenerate_cases() {
    let mut g = Graph::new();
    // single key: output equals that value row
    let q = g.constant(randn(&[3, 4], 80));
    let k = g.constant(randn(&[1, 4], 81));
    let v = g.constant(randn(&[1, 4], 82));
    let out = g.attention(q, k, v, 1, 2, false).unwrap();
    for i in 0..3 {
        assert_eq!(g.value(out).row(i), g.value(v).row(0));
    }
    // identical keys: output is the mean of the value rows
    let keys = Tensor::from_rows(&vec![vec![0.3, -0.1, 0.2, 0.5]; 4]).unwrap();
    let k = g.constant(keys);
    let vals = randn(&[4, 4], 83);
    let v = g.constant(vals.clone());
    let q = g.constant(randn(&[2, 4], 84));
    let out = g.attention(q, k, v, 1, 2, false).unwrap();
    for j in 0..4 {
        let mean: f64 = (0..4).map(|i| vals.get2(i, j)).sum::<f64>() / 4.0;
        for i in 0..2 {
            assert!((g.value(out).get2(i, j) - mean).abs() < 1e-14);
        }
    }
    // heads must divide the width
    assert!(matches!(
        g.attention(q, k, v, 1, 3, false),
        Err(Error::Config(_))
    ));
}

#[test]
fn single_head_matches_dense_formula() {
    let x = randn(&[5, 4], 90);
    let kv = randn(&[6, 4], 91);
    let wq = randn(&[4, 4], 92);
    let wk = randn(&[4, 4], 93);
    let wv = randn(&[4, 4], 94);
    let mut g = Graph::new();
    let vars: Vec<_> = [&x, &kv, &wq, &wk, &wv]
        .iter()
        .map(|t| g.constant((*t).clone()))
        .collect();
    let out = g
        .multi_head_attention(vars[0], vars[1], vars[2], vars[3], vars[4], 1, 1, false)
        .unwrap();
    let q = x.matmul(&wq.transpose().unwrap()).unwrap();
    let k = kv.matmul(&wk.transpose().unwrap()).unwrap();
    let v = kv.matmul(&wv.transpose().unwrap()).unwrap();
    let scores = q
        .matmul(&k.transpose().unwrap())
        .unwrap()
        .map(|s| s / 4f64.sqrt());
    let expected = scores.softmax(1).unwrap().matmul(&v).unwrap();
    assert!(g.value(out).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn layer_norm_moments() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[1, 64], 3.0, &mut rng(100)));
    let one = g.constant(Tensor::full(&[64], 1.0));
    let zero = g.constant(Tensor::zeros(&[64]));
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 64.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-5);

    let c = g.constant(Tensor::full(&[1, 64], 4.2));
    let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));

    let y2 = g.layer_norm(y, one, zero, 1e-5).unwrap();
    let y3 = g.layer_norm(x, one, zero, 1e-5).unwrap();
    let y4 = g.layer_norm(y3, one, zero, 1e-5).unwrap();
    assert!(g.value(y2).data().iter().all(|&v| v.abs() < 1e-9));
    // eps shifts the scale by about eps/2 relative
    assert!(g.value(y3).max_abs_diff(g.value(y4)) < 1e-4);
}

#[test]
fn graph_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.leaf(randn(&[6, 8], 110));
        let b = g.leaf(randn(&[8, 8], 111));
        let h = g.matmul(a, b).unwrap();
        let s = g.softmax(h).unwrap();
        let l = g.sum(s).unwrap();
        let l2 = g.mul(s, s).unwrap();
        let l2 = g.sum(l2).unwrap();
        let tot = g.add(l, l2).unwrap();
        g.backward(tot).unwrap();
        (g.value(tot).clone(), g.grad(a).unwrap().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}
