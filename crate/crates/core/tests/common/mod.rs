#![allow(dead_code)]

use gbnf::diffcore::Matrix;
use gbnf::flows::{FlowArchitecture, FlowComponent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn arch(dim: usize, steps: usize, hidden: usize) -> FlowArchitecture {
    FlowArchitecture { dim, steps, hidden }
}

/// Component with every parameter uniform in `±scale`, so no layer is the identity.
pub fn random_component(a: FlowArchitecture, scale: f64, rng: &mut impl Rng) -> FlowComponent {
    let n = a.n_params().unwrap();
    let values = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    FlowComponent::from_values(a, values).unwrap()
}

pub fn normal_matrix(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(n, d, data).unwrap()
}

/// Riemann sum of `exp(lp)` over cell centers of a `res × res` grid on `[lo, hi]²`.
pub fn quadrature(lo: f64, hi: f64, res: usize, mut lp: impl FnMut(&Matrix) -> Vec<f64>) -> f64 {
    let h = (hi - lo) / res as f64;
    let mut pts = Vec::with_capacity(res * res * 2);
    for i in 0..res {
        for j in 0..res {
            pts.push(lo + (j as f64 + 0.5) * h);
            pts.push(lo + (i as f64 + 0.5) * h);
        }
    }
    let m = Matrix::new(res * res, 2, pts).unwrap();
    lp(&m).iter().map(|v| v.exp()).sum::<f64>() * h * h
}
