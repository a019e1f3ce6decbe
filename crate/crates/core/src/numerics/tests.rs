use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::gradcheck::{max_rel_error, GradCheck};
use super::*;
use crate::error::{Error, Result};

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Contracts `y` with a fixed random weight so every output entry matters.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = (g.value(y).rows(), g.value(y).cols());
    let mut rng = SeedStream::new(seed).rng();
    let w = g.constant(randn(&mut rng, r, c));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

type Build = fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>;

fn check(name: &str, shapes: &[(usize, usize)], build: Build) {
    let mut rng = SeedStream::new(11).child(name.len() as u64).rng();
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&(r, c)| randn(&mut rng, r, c)).collect();
    let probes = GradCheck::default()
        .run(&inputs, build, Some(100), &mut rng)
        .unwrap();
    let worst = max_rel_error(&probes);
    assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
}

#[test]
fn product_rule() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(2.0));
    let y = g.variable(Tensor::scalar(3.0));
    let p = g.mul(x, y).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
}

#[test]
fn logsumexp_gradient_is_half_at_symmetry() {
    // d/dx log(e^x + e^0) at x = 0; log-softmax backward seeds sum to 1
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(0.0));
    let zero = g.constant(Tensor::scalar(0.0));
    let row = g.concat_cols(&[x, zero]).unwrap();
    let lp = g.log_softmax_rows(row);
    // logsumexp = x - log_softmax(x)
    let first = g.slice_cols(lp, 0, 1).unwrap();
    let lse = g.weighted_sum(&[(x, 1.0), (first, -1.0)]).unwrap();
    assert!((g.value(lse).data()[0] - 2f64.ln()).abs() < 1e-15);
    let grads = g.backward(lse).unwrap();
    assert!((grads.get(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let p = g.mul(x, c).unwrap();
    let grads = g.backward(p).unwrap();
    assert!(grads.get(c).is_none());
}

#[test]
fn non_scalar_seed_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2, 2]));
    let s = g.sum(x);
    let seed = Tensor::zeros(&[1, 2]);
    assert!(matches!(
        g.backward_with_seed(s, &seed),
        Err(Error::NonScalarSeed(_))
    ));
    assert!(matches!(g.backward(x), Err(Error::NonScalarSeed(_))));
}

#[test]
fn backward_twice_is_identical() {
    let mut rng = SeedStream::new(5).rng();
    let mut g = Graph::<f64>::new();
    let a = g.variable(randn(&mut rng, 3, 4));
    let b = g.variable(randn(&mut rng, 4, 2));
    let m = g.matmul(a, b).unwrap();
    let t = g.tanh(m);
    let out = project(&mut g, t, 3).unwrap();
    let g1 = g.backward(out).unwrap();
    let g2 = g.backward(out).unwrap();
    assert_eq!(g1.get(a), g2.get(a));
    assert_eq!(g1.get(b), g2.get(b));
}

#[test]
fn matmul_variants_match_finite_differences() {
    check("mm", &[(3, 4), (4, 5)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    });
    check("mm_ta", &[(4, 3), (4, 5)], |g, v| {
        let y = g.matmul_t(v[0], v[1], true, false)?;
        project(g, y, 2)
    });
    check("mm_tb", &[(3, 4), (5, 4)], |g, v| {
        let y = g.matmul_t(v[0], v[1], false, true)?;
        project(g, y, 3)
    });
    check("mm_tatb", &[(4, 3), (5, 4)], |g, v| {
        let y = g.matmul_t(v[0], v[1], true, true)?;
        project(g, y, 4)
    });
}

#[test]
fn elementwise_ops_match_finite_differences() {
    check("add", &[(3, 4), (3, 4)], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 5)
    });
    check("add_row", &[(3, 4), (1, 4)], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        project(g, y, 6)
    });
    check("mul", &[(3, 4), (3, 4)], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 7)
    });
    check("scale", &[(3, 4)], |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, 8)
    });
    check("tanh", &[(3, 4)], |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, 9)
    });
    check("sigmoid", &[(3, 4)], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 10)
    });
    check("gelu", &[(3, 4)], |g, v| {
        let y = g.gelu(v[0]);
        project(g, y, 11)
    });
}

#[test]
fn normalisations_match_finite_differences() {
    check("softmax", &[(3, 5)], |g, v| {
        let y = g.softmax_rows(v[0]);
        project(g, y, 12)
    });
    check("log_softmax", &[(3, 5)], |g, v| {
        let y = g.log_softmax_rows(v[0]);
        project(g, y, 13)
    });
    check("layer_norm", &[(3, 6), (1, 6), (1, 6)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 14)
    });
}

#[test]
fn structural_ops_match_finite_differences() {
    check("slices", &[(4, 6)], |g, v| {
        let a = g.slice_rows(v[0], 1, 2)?;
        let b = g.slice_cols(a, 2, 3)?;
        project(g, b, 15)
    });
    check("concats", &[(2, 3), (3, 3), (5, 2)], |g, v| {
        let r = g.concat_rows(&[v[0], v[1]])?;
        let c = g.concat_cols(&[r, v[2]])?;
        project(g, c, 16)
    });
    check("gather", &[(5, 3)], |g, v| {
        let y = g.gather(v[0], &[4, 0, 4, 2])?;
        project(g, y, 17)
    });
    check("pairwise", &[(3, 4), (2, 4)], |g, v| {
        let y = g.pairwise_add(v[0], v[1])?;
        project(g, y, 18)
    });
    check("weighted_sum", &[(2, 2), (2, 2)], |g, v| {
        let y = g.weighted_sum(&[(v[0], 0.3), (v[1], -2.0)])?;
        project(g, y, 19)
    });
}

#[test]
fn random_three_layer_composition_matches_finite_differences() {
    check("mlp", &[(4, 6), (6, 8), (1, 8), (8, 5)], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h);
        let h = g.matmul(h, v[3])?;
        let h = g.tanh(h);
        let y = g.log_softmax_rows(h);
        project(g, y, 20)
    });
}

#[test]
fn random_probes_cover_all_inputs() {
    let mut rng = SeedStream::new(1).rng();
    let _: u32 = rng.random();
    let inputs = vec![randn(&mut rng, 1, 1), randn(&mut rng, 2, 2)];
    let probes = GradCheck::default()
        .run(
            &inputs,
            |g, v| {
                let a = g.sum(v[1]);
                let y = g.mul(v[0], a)?;
                Ok(y)
            },
            None,
            &mut rng,
        )
        .unwrap();
    assert_eq!(probes.len(), 5);
}
