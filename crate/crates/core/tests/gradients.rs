mod common;

use common::{arch, normal_matrix, random_component, rng};
use gbnf::boost::{GBNFModel, MixtureMode};
use gbnf::diffcore::{
    central_difference, evaluate, finite_diff_check, grad_scalar, mlp_forward, Matrix, MlpSpec, Tape, Var,
};
use gbnf::error::Result;
use gbnf::objectives::{additive_de_objective, boosted_reverse_kl_objective, tape_nll, FixedTerm};
use gbnf::targets::EnergyTarget;
use proptest::prelude::*;
use rand::Rng;

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Straight-line single-hidden-layer evaluation.
fn mlp_oracle(p: &[f64], input: usize, hidden: usize, output: usize, x: &[f64]) -> Vec<f64> {
    let w1 = &p[..hidden * input];
    let b1 = &p[hidden * input..hidden * input + hidden];
    let w2 = &p[hidden * input + hidden..hidden * input + hidden + output * hidden];
    let b2 = &p[hidden * input + hidden + output * hidden..];
    let h: Vec<f64> = (0..hidden)
        .map(|j| (b1[j] + (0..input).map(|i| w1[j * input + i] * x[i]).sum::<f64>()).tanh())
        .collect();
    (0..output)
        .map(|o| b2[o] + (0..hidden).map(|j| w2[o * hidden + j] * h[j]).sum::<f64>())
        .collect()
}

#[test]
fn mlp_matches_straight_line_oracle() {
    let mut r = rng(2);
    let spec = MlpSpec {
        input: 3,
        hidden: 7,
        output: 2,
    };
    for _ in 0..20 {
        let p: Vec<f64> = (0..spec.n_params()).map(|_| r.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let got = mlp_forward(&p, &spec, &x).unwrap();
        let want = mlp_oracle(&p, 3, 7, 2, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Unary graphs over a 2×3 parameter block, reduced to a scalar.
fn unary(kind: usize) -> impl Fn(&mut Tape<'_>) -> Result<Var> {
    move |t: &mut Tape<'_>| {
        let a = t.param_range(0, 2, 3)?;
        let y = match kind {
            0 => t.tanh(a)?,
            1 => t.exp(a)?,
            2 => {
                let e = t.exp(a)?;
                t.log(e)?
            }
            3 => t.sin(a)?,
            4 => t.affine(a, -1.7, 0.3)?,
            5 => t.log_sum_exp(a)?,
            6 => t.square(a)?,
            _ => {
                let s = t.sum_cols(a)?;
                t.tanh(s)?
            }
        };
        // weight outputs unevenly so every coordinate's gradient is distinct
        let w = t.constant(Matrix::filled(t.value(y).rows(), t.value(y).cols(), 0.7))?;
        let wy = t.mul(y, w)?;
        let sq = t.square(wy)?;
        let mix = t.add(wy, sq)?;
        t.sum_all(mix)
    }
}

/// Binary graphs over two parameter blocks.
fn binary(kind: usize) -> impl Fn(&mut Tape<'_>) -> Result<Var> {
    move |t: &mut Tape<'_>| {
        let a = t.param_range(0, 3, 2)?;
        let b = t.param_range(6, 2, 2)?;
        let y = match kind {
            0 => t.matvec(a, b)?,
            1 => {
                let row = t.param_range(6, 1, 2)?;
                t.mul(a, row)?
            }
            2 => {
                let row = t.param_range(8, 1, 2)?;
                t.add(a, row)?
            }
            3 => {
                let c0 = t.select_cols(a, &[1])?;
                let c1 = t.select_cols(a, &[0])?;
                let p = t.mul(c0, c1)?;
                t.concat_cols(&[p, c0])?
            }
            _ => {
                let c0 = t.select_cols(a, &[0])?;
                let c1 = t.select_cols(a, &[1])?;
                let e = t.exp(c1)?;
                t.scatter_cols(&[(e, &[0]), (c0, &[1])], 2)?
            }
        };
        let sq = t.square(y)?;
        let m = t.mean_all(sq)?;
        let s = t.sum_all(y)?;
        t.sub(m, s)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn unary_primitives_match_finite_differences(kind in 0usize..8, p in prop::collection::vec(-1.5f64..1.5, 6)) {
        let err = finite_diff_check(&unary(kind), &p, FD_EPS).unwrap();
        prop_assert!(err < FD_TOL, "kind {} error {}", kind, err);
    }

    #[test]
    fn binary_primitives_match_finite_differences(kind in 0usize..5, p in prop::collection::vec(-1.5f64..1.5, 10)) {
        let err = finite_diff_check(&binary(kind), &p, FD_EPS).unwrap();
        prop_assert!(err < FD_TOL, "kind {} error {}", kind, err);
    }

    #[test]
    fn gradient_of_a_sum_is_the_sum_of_gradients(a in 0usize..8, b in 0usize..8, p in prop::collection::vec(-1.0f64..1.0, 6)) {
        let (fa, fb) = (unary(a), unary(b));
        let both = |t: &mut Tape<'_>| {
            let x = fa(t)?;
            let y = fb(t)?;
            t.add(x, y)
        };
        let g = grad_scalar(&both, &p).unwrap().gradient;
        let ga = grad_scalar(&fa, &p).unwrap().gradient;
        let gb = grad_scalar(&fb, &p).unwrap().gradient;
        for i in 0..p.len() {
            prop_assert!((g[i] - ga[i] - gb[i]).abs() <= 1e-12 * (1.0 + g[i].abs()));
        }
    }
}

#[test]
fn gradients_are_deterministic() {
    let p: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
    let a = grad_scalar(&unary(7), &p).unwrap();
    let b = grad_scalar(&unary(7), &p).unwrap();
    assert_eq!(a, b);
}

#[test]
fn central_difference_of_linear_loss_is_exact() {
    let f = |t: &mut Tape<'_>| {
        let a = t.param_range(0, 1, 4)?;
        let s = t.affine(a, 3.0, 1.0)?;
        t.sum_all(s)
    };
    let g = central_difference(&f, &[0.1, 0.2, 0.3, 0.4], 1e-3).unwrap();
    for v in g {
        assert!((v - 3.0).abs() < 1e-8);
    }
    assert!(evaluate(&f, &[0.0; 4]).unwrap() == 4.0);
}

#[test]
fn flow_nll_on_a_batch_of_16() {
    let mut r = rng(40);
    let c = random_component(arch(2, 2, 6), 0.5, &mut r);
    let x = normal_matrix(16, 2, &mut r);
    let f = |t: &mut Tape<'_>| tape_nll(t, &c, true, &x, None);
    let err = finite_diff_check(&f, c.params().values(), FD_EPS).unwrap();
    assert!(err < FD_TOL, "{err}");
}

#[test]
fn weighted_nll_gradient() {
    let mut r = rng(41);
    let c = random_component(arch(3, 1, 5), 0.5, &mut r);
    let x = normal_matrix(8, 3, &mut r);
    let w: Vec<f64> = (1..=8).map(|i| i as f64 / 36.0).collect();
    let f = |t: &mut Tape<'_>| tape_nll(t, &c, true, &x, Some(&w));
    assert!(finite_diff_check(&f, c.params().values(), FD_EPS).unwrap() < FD_TOL);
}

#[test]
fn additive_objective_gradient() {
    let mut r = rng(42);
    let c = random_component(arch(2, 1, 6), 0.5, &mut r);
    let fixed = random_component(arch(2, 1, 6), 0.5, &mut r);
    let x = normal_matrix(12, 2, &mut r);
    let lf = fixed.log_prob_batch(&x).unwrap();
    let f = |t: &mut Tape<'_>| additive_de_objective(t, &c, true, &x, &lf, 1.0);
    assert!(finite_diff_check(&f, c.params().values(), FD_EPS).unwrap() < FD_TOL);
}

#[test]
fn boosted_reverse_kl_gradient_with_two_fixed_components() {
    let mut r = rng(43);
    let c = random_component(arch(2, 1, 6), 0.4, &mut r);
    let fixed = GBNFModel::from_parts(
        MixtureMode::Additive,
        vec![random_component(arch(2, 1, 6), 0.4, &mut r), random_component(arch(2, 1, 6), 0.4, &mut r)],
        vec![1.0, 0.3],
    )
    .unwrap();
    let z0 = normal_matrix(10, 2, &mut r);
    for target in EnergyTarget::ALL {
        let f = |t: &mut Tape<'_>| {
            boosted_reverse_kl_objective(t, &c, true, Some((&fixed, FixedTerm::Exact)), target, 0.8, &z0)
        };
        let err = finite_diff_check(&f, c.params().values(), FD_EPS).unwrap();
        assert!(err < FD_TOL, "{target}: {err}");
    }
}
