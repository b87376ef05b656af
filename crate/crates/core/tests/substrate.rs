#![allow(clippy::needless_range_loop)]

mod common;

use common::{rng, uniform_vec};
use echocast::tensor::{causal_mask, scaled_dot_product_attention, Graph, Tensor, Var};
use echocast::Result;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn scalar_out(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    // A fixed random projection makes every output element matter.
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Largest elementwise |analytic - numeric| / max(1, |numeric|).
fn check(shapes: &[Vec<usize>], build: &Build, seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| Tensor::from_f64(s.clone(), &uniform_vec(&mut r, s.iter().product(), -1.0, 1.0)).unwrap())
        .collect();
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.variable(t.clone())).collect();
    let y = build(&mut probe, &vars).unwrap();
    let out_shape = probe.shape(y).to_vec();
    let proj = Tensor::from_f64(out_shape.clone(), &uniform_vec(&mut r, out_shape.iter().product(), -1.0, 1.0)).unwrap();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let v: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
        let y = build(&mut g, &v).unwrap();
        let l = scalar_out(&mut g, y, &proj).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let v: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = build(&mut g, &v).unwrap();
    let l = scalar_out(&mut g, y, &proj).unwrap();
    let grads = g.backward(l).unwrap();

    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (n, var) in v.iter().enumerate() {
        let analytic = grads.wrt(*var).expect("leaf gradient").data().to_vec();
        for i in 0..inputs[n].len() {
            let mut up = inputs.clone();
            up[n].data_mut()[i] += eps;
            let mut down = inputs.clone();
            down[n].data_mut()[i] -= eps;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * eps);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn batched_matmul_gradients() {
    let e = check(&[vec![2, 3, 4], vec![4, 5]], &|g, v| g.matmul(v[0], v[1]), 1);
    assert!(e < 1e-7, "{e}");
    let e = check(&[vec![2, 3, 4], vec![2, 4, 2]], &|g, v| g.matmul(v[0], v[1]), 2);
    assert!(e < 1e-7, "{e}");
}

#[test]
fn broadcast_arithmetic_gradients() {
    let e = check(
        &[vec![2, 3, 4], vec![4], vec![3, 4]],
        &|g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.mul(a, v[2])?;
            g.sub(b, v[1])
        },
        3,
    );
    assert!(e < 1e-7, "{e}");
}

#[test]
fn nonlinear_gradients() {
    let e = check(&[vec![3, 5]], &|g, v| g.softmax(v[0], 1), 4);
    assert!(e < 1e-7, "{e}");
    let e = check(&[vec![2, 3, 5]], &|g, v| g.softmax(v[0], 1), 5);
    assert!(e < 1e-7, "{e}");
    let e = check(&[vec![4, 6]], &|g, v| Ok(g.gelu(v[0])), 6);
    assert!(e < 1e-6, "{e}");
    let e = check(&[vec![3, 6], vec![6], vec![6]], &|g, v| g.layer_norm(v[0], v[1], v[2]), 7);
    assert!(e < 1e-6, "{e}");
    let e = check(&[vec![2, 3]], &|g, v| Ok(g.scale(v[0], -2.5)), 8);
    assert!(e < 1e-8, "{e}");
}

#[test]
fn shape_op_gradients() {
    let e = check(
        &[vec![2, 4, 6], vec![2, 1, 6]],
        &|g, v| {
            let a = g.slice(v[0], 1, 1, 3)?;
            let c = g.concat(&[a, v[1]], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            g.reshape(p, &[6, 6])
        },
        9,
    );
    assert!(e < 1e-8, "{e}");
    let e = check(&[vec![3, 4]], &|g, v| g.transpose(v[0]), 10);
    assert!(e < 1e-8, "{e}");
}

#[test]
fn loss_gradients() {
    let e = check(&[vec![3, 4], vec![3, 4]], &|g, v| g.mse(v[0], v[1]), 11);
    assert!(e < 1e-7, "{e}");
    let e = check(&[vec![2, 5]], &|g, v| Ok(g.mean(v[0])), 12);
    assert!(e < 1e-8, "{e}");
}

#[test]
fn attention_gradients_with_mask() {
    let mask = causal_mask::<f64>(4);
    let e = check(
        &[vec![2, 4, 6], vec![2, 4, 6], vec![2, 4, 6]],
        &move |g, v| {
            let m = g.constant(mask.clone());
            scaled_dot_product_attention(g, v[0], v[1], v[2], 2, Some(m))
        },
        13,
    );
    assert!(e < 1e-6, "{e}");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(21);
    for &(b, m, k, n) in &[(1, 1, 1, 1), (2, 3, 5, 4), (3, 17, 9, 33), (1, 64, 64, 64)] {
        let a = uniform_vec(&mut r, b * m * k, -1.0, 1.0);
        let w = uniform_vec(&mut r, k * n, -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let av = g.constant(Tensor::from_f64(vec![b, m, k], &a).unwrap());
        let wv = g.constant(Tensor::from_f64(vec![k, n], &w).unwrap());
        let out = g.matmul(av, wv).unwrap();
        assert_eq!(g.shape(out), &[b, m, n]);
        let got = g.value(out).data();
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[(bi * m + i) * k + p] * w[p * n + j];
                    }
                    let v = got[(bi * m + i) * n + j];
                    assert!((v - acc).abs() < 1e-12 * (1.0 + acc.abs()), "{v} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn single_precision_matmul_matches_double() {
    let mut r = rng(22);
    let a = uniform_vec(&mut r, 5 * 7, -1.0, 1.0);
    let b = uniform_vec(&mut r, 7 * 3, -1.0, 1.0);
    let run = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut g = Graph::<f32>::new();
        let av = g.constant(Tensor::from_f64(vec![5, 7], a).unwrap());
        let bv = g.constant(Tensor::from_f64(vec![7, 3], b).unwrap());
        let o = g.matmul(av, bv).unwrap();
        g.value(o).to_f64()
    };
    let mut g = Graph::<f64>::new();
    let av = g.constant(Tensor::from_f64(vec![5, 7], &a).unwrap());
    let bv = g.constant(Tensor::from_f64(vec![7, 3], &b).unwrap());
    let o = g.matmul(av, bv).unwrap();
    for (x, y) in run(&a, &b).iter().zip(g.value(o).data()) {
        assert!((x - y).abs() < 1e-5);
    }
}
