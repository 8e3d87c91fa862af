mod common;

use common::{arch, normal_matrix, quadrature, random_component, rng};
use gbnf::boost::{
    estimate_log_partition, fine_tune, recursion_check, rho_line_search, rho_sgd, weights_from_rho, ComponentRefit,
    GBNFModel, GammaTerms, LogPartition, MixtureMode, PartitionSampler, RhoObjective, RhoSgdConfig,
};
use gbnf::diffcore::Matrix;
use gbnf::error::{Error, Result};
use gbnf::flows::FlowComponent;
use proptest::prelude::*;
use rand::{Rng, RngCore};

fn two_component_additive(seed: u64, rho: f64) -> GBNFModel {
    let mut r = rng(seed);
    let a = random_component(arch(2, 1, 6), 0.5, &mut r);
    let b = random_component(arch(2, 1, 6), 0.5, &mut r);
    GBNFModel::from_parts(MixtureMode::Additive, vec![a, b], vec![1.0, rho]).unwrap()
}

fn multiplicative(seed: u64, rho2: f64) -> GBNFModel {
    let mut r = rng(seed);
    let a = random_component(arch(2, 1, 6), 0.4, &mut r);
    let b = random_component(arch(2, 1, 6), 0.4, &mut r);
    GBNFModel::from_parts(MixtureMode::Multiplicative, vec![a, b], vec![1.0, rho2]).unwrap()
}

#[test]
fn stagewise_weights_follow_the_rule() {
    let mut m = GBNFModel::new(MixtureMode::Additive);
    let c = FlowComponent::zeros(arch(2, 1, 2)).unwrap();
    m.append_component(c.clone(), 0.3).unwrap();
    assert_eq!(m.weights(), &[1.0]);
    m.append_component(c.clone(), 0.25).unwrap();
    assert_eq!(m.weights(), &[0.75, 0.25]);
    assert_eq!(weights_from_rho(&[0.9, 0.5, 0.5]), vec![0.25, 0.25, 0.5]);
    assert!(matches!(m.append_component(c, 1.5), Err(Error::Domain(_))));
}

#[test]
fn additive_log_prob_matches_linear_space_sum() {
    let m = two_component_additive(1, 0.35);
    let x = normal_matrix(50, 2, &mut rng(2));
    let got = m.log_prob_batch(&x).unwrap();
    for (i, row) in x.iter_rows().enumerate() {
        let direct: f64 = m
            .components()
            .iter()
            .zip(m.weights())
            .map(|(c, w)| w * c.log_prob(row).unwrap().exp())
            .sum();
        assert!((got[i] - direct.ln()).abs() < 1e-10);
    }
}

#[test]
fn single_component_mixture_is_the_component() {
    let c = random_component(arch(2, 2, 4), 0.5, &mut rng(3));
    let m = GBNFModel::from_parts(MixtureMode::Additive, vec![c.clone()], vec![1.0]).unwrap();
    let x = [0.3, -0.4];
    assert_eq!(m.log_prob(&x).unwrap(), c.log_prob(&x).unwrap());
    let same = GBNFModel::from_weights(vec![c.clone(), c.clone()], vec![0.3, 0.7]).unwrap();
    assert!((same.log_prob(&x).unwrap() - c.log_prob(&x).unwrap()).abs() < 1e-12);
}

#[test]
fn leave_one_out_matches_direct_subtraction() {
    let mut r = rng(4);
    let comps: Vec<FlowComponent> = (0..3).map(|_| random_component(arch(2, 1, 4), 0.5, &mut r)).collect();
    let m = GBNFModel::from_weights(comps, vec![0.25, 0.25, 0.5]).unwrap();
    let rest = m.leave_one_out(2).unwrap();
    assert_eq!(rest.weights(), &[0.5, 0.5]);
    let x = normal_matrix(20, 2, &mut r);
    let lo = rest.log_prob_batch(&x).unwrap();
    for (i, row) in x.iter_rows().enumerate() {
        let g = m.log_prob(row).unwrap().exp();
        let gi = m.components()[2].log_prob(row).unwrap().exp();
        let want = ((g - 0.5 * gi) / 0.5).ln();
        assert!((lo[i] - want).abs() < 1e-10);
    }
    let two = two_component_additive(5, 0.4);
    assert_eq!(two.leave_one_out(1).unwrap().weights(), &[1.0]);
    let full = GBNFModel::from_weights(two.components().to_vec(), vec![0.0, 1.0]).unwrap();
    assert!(full.leave_one_out(1).is_err());
}

#[test]
fn additive_model_is_permutation_invariant() {
    let m = two_component_additive(6, 0.3);
    let swapped =
        GBNFModel::from_weights(vec![m.components()[1].clone(), m.components()[0].clone()], vec![0.3, 0.7]).unwrap();
    let x = normal_matrix(30, 2, &mut rng(7));
    let a = m.log_prob_batch(&x).unwrap();
    let b = swapped.log_prob_batch(&x).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn mixture_sampling_frequencies() {
    let m = GBNFModel::from_weights(
        vec![FlowComponent::zeros(arch(2, 1, 2)).unwrap(), FlowComponent::zeros(arch(2, 1, 2)).unwrap()],
        vec![0.5, 0.5],
    )
    .unwrap();
    let n = 1_000_000;
    let (_, ids) = m.sample_mixture(n, &mut rng(8)).unwrap();
    let f = ids.iter().filter(|&&i| i == 0).count() as f64 / n as f64;
    assert!((f - 0.5).abs() < 0.002, "{f}");
    let (a, ia) = m.sample_mixture(100, &mut rng(9)).unwrap();
    let (b, ib) = m.sample_mixture(100, &mut rng(9)).unwrap();
    assert_eq!((a, ia), (b, ib));
    let single = GBNFModel::from_parts(MixtureMode::Additive, vec![m.components()[0].clone()], vec![1.0]).unwrap();
    assert!(single.sample_mixture(50, &mut rng(1)).unwrap().1.iter().all(|&i| i == 0));
}

#[test]
fn multiplicative_requires_a_fresh_partition() {
    let mut m = multiplicative(10, 0.5);
    assert!(matches!(m.log_prob(&[0.0, 0.0]), Err(Error::State(_))));
    m.set_log_partition(LogPartition { value: 0.1, stderr: 0.0 }).unwrap();
    let x = [0.2, 0.1];
    let want = m.components()[0].log_prob(&x).unwrap() + 0.5 * m.components()[1].log_prob(&x).unwrap() - 0.1;
    assert!((m.log_prob(&x).unwrap() - want).abs() < 1e-12);
    m.append_component(m.components()[0].clone(), 0.2).unwrap();
    assert!(m.log_partition().is_none());
    assert!(matches!(m.sample_mixture(5, &mut rng(1)), Err(Error::UnsupportedMode { .. })));
}

#[test]
fn zero_exponents_give_a_constant_unnormalized_density() {
    let mut r = rng(11);
    let c = random_component(arch(2, 1, 4), 0.5, &mut r);
    let m = GBNFModel::from_parts(MixtureMode::Multiplicative, vec![c.clone(), c], vec![0.0, 0.0]).unwrap();
    let x = normal_matrix(10, 2, &mut r);
    assert!(m.unnormalized_log_prob_batch(&x).unwrap().iter().all(|&v| v == 0.0));
    assert!(estimate_log_partition(&m, 2000, &mut r).is_err());
}

#[test]
fn partition_estimate_agrees_with_quadrature() {
    let mut m = multiplicative(12, 0.6);
    let lp = estimate_log_partition(&m, 100_000, &mut rng(13)).unwrap();
    let unnorm = quadrature(-8.0, 8.0, 400, |x| m.unnormalized_log_prob_batch(x).unwrap());
    assert!((lp.value - unnorm.ln()).abs() < 3.0 * lp.stderr.max(1e-4), "{} vs {}", lp.value, unnorm.ln());
    m.set_log_partition(lp).unwrap();
    let total = quadrature(-8.0, 8.0, 400, |x| m.log_prob_batch(x).unwrap());
    assert!((total - 1.0).abs() < 0.03, "{total}");
}

#[test]
fn partition_sampler_is_reproducible_and_symmetric() {
    let m = multiplicative(14, 0.5);
    let a = PartitionSampler::new(&m, 5000, &mut rng(15)).unwrap();
    let b = PartitionSampler::new(&m, 5000, &mut rng(15)).unwrap();
    assert_eq!(a.log_partition(&[1.0, 0.5]).unwrap(), b.log_partition(&[1.0, 0.5]).unwrap());
    let c = m.components()[0].clone();
    let twins = GBNFModel::from_parts(MixtureMode::Multiplicative, vec![c.clone(), c], vec![1.0, 0.0]).unwrap();
    let s = PartitionSampler::new(&twins, 5000, &mut rng(16)).unwrap();
    let x = s.log_partition(&[1.0, 0.0]).unwrap();
    let y = s.log_partition(&[0.0, 1.0]).unwrap();
    assert!((x.value - y.value).abs() < 1e-12);
    assert!(PartitionSampler::new(&twins, 999, &mut rng(1)).is_err());
}

#[test]
fn partition_stderr_shrinks_with_samples() {
    let m = multiplicative(17, 0.7);
    let small = estimate_log_partition(&m, 1000, &mut rng(18)).unwrap();
    let large = estimate_log_partition(&m, 100_000, &mut rng(19)).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((5.0..20.0).contains(&ratio), "{ratio}");
}

#[test]
fn recursion_holds_for_zero_and_positive_exponents() {
    for rho in [0.0, 0.6] {
        let m = multiplicative(20, rho);
        let chk = recursion_check(&m, 50_000, &mut rng(21)).unwrap();
        assert!(chk.discrepancy < 3.0 * chk.combined_stderr, "{chk:?}");
        if rho == 0.0 {
            assert_eq!(chk.expectation.value, 0.0);
        }
    }
}

#[test]
fn line_search_cases() {
    let flat = rho_line_search(26, &[], |_| Ok(2.0)).unwrap();
    assert_eq!(flat.rho, 0.0);
    let ends = rho_line_search(2, &[], |r| Ok(if r == 0.0 { 1.0 } else { 2.0 })).unwrap();
    assert_eq!(ends.rho, 0.0);
    let quad = rho_line_search(21, &[], |r| Ok((r - 0.6) * (r - 0.6))).unwrap();
    assert!((quad.rho - 0.6).abs() < 1e-12);
    let extra = rho_line_search(3, &[0.37], |r| Ok((r - 0.37f64).abs())).unwrap();
    assert_eq!(extra.rho, 0.37);
    assert!(rho_line_search(5, &[], |_| Ok(f64::NAN)).is_err());
    let infeasible = rho_line_search(5, &[], |r| {
        if r < 0.5 {
            Err(Error::Numeric("x".into()))
        } else {
            Ok(r)
        }
    })
    .unwrap();
    assert_eq!(infeasible.rho, 0.5);
}

/// γ terms for a linear-in-ρ synthetic case: `log_fixed = log_new = 0`, so
/// `mean γ = −mean log_target` and the gradient is `b − a` for constant
/// target offsets `a` (fixed draws) and `b` (new draws).
struct ConstantGamma {
    fixed_target: f64,
    new_target: f64,
}

impl RhoObjective for ConstantGamma {
    fn sample_fixed(&mut self, n: usize, _rng: &mut dyn RngCore) -> Result<GammaTerms> {
        Ok(GammaTerms {
            log_fixed: vec![0.0; n],
            log_new: vec![0.0; n],
            log_target: vec![self.fixed_target; n],
        })
    }

    fn sample_new(&mut self, n: usize, _rng: &mut dyn RngCore) -> Result<GammaTerms> {
        Ok(GammaTerms {
            log_fixed: vec![0.0; n],
            log_new: vec![0.0; n],
            log_target: vec![self.new_target; n],
        })
    }
}

/// γ with log G and log g differing in sign, giving a root strictly inside (0,1).
struct QuadraticRoot {
    shift: f64,
}

impl RhoObjective for QuadraticRoot {
    fn sample_fixed(&mut self, n: usize, _rng: &mut dyn RngCore) -> Result<GammaTerms> {
        Ok(GammaTerms {
            log_fixed: vec![0.0; n],
            log_new: vec![-self.shift; n],
            log_target: vec![0.0; n],
        })
    }

    fn sample_new(&mut self, n: usize, _rng: &mut dyn RngCore) -> Result<GammaTerms> {
        Ok(GammaTerms {
            log_fixed: vec![-self.shift; n],
            log_new: vec![0.0; n],
            log_target: vec![0.0; n],
        })
    }
}

#[test]
fn rho_sgd_clips_at_zero() {
    // the new component explains the target worse, so the gradient is positive
    let mut obj = ConstantGamma {
        fixed_target: 0.0,
        new_target: -50.0,
    };
    let cfg = RhoSgdConfig {
        step: 0.5,
        ..RhoSgdConfig::default()
    };
    let out = rho_sgd(&mut obj, &cfg, &mut rng(1)).unwrap();
    assert!(out.trace.iter().all(|r| (0.0..=1.0).contains(r)));
    assert_eq!(out.rho, 0.0);
    assert!(out.converged);
}

#[test]
fn rho_sgd_finds_the_analytic_root() {
    // γ_new(ρ) − γ_fixed(ρ) = log(ρ + (1−ρ)e^{−s}) − log((1−ρ) + ρe^{−s}), zero at ρ = 1/2
    let mut obj = QuadraticRoot { shift: 2.0 };
    let cfg = RhoSgdConfig {
        step: 0.2,
        tolerance: 1e-6,
        max_iters: 5000,
        decay: 0.0,
        batch: 4,
        total_components: 4,
    };
    let out = rho_sgd(&mut obj, &cfg, &mut rng(2)).unwrap();
    assert!(out.converged);
    assert!((out.rho - 0.5).abs() < 2.0 * cfg.tolerance / cfg.step + 1e-6, "{}", out.rho);
}

#[test]
fn rho_sgd_reports_non_convergence() {
    let mut obj = QuadraticRoot { shift: 2.0 };
    let cfg = RhoSgdConfig {
        max_iters: 3,
        tolerance: 1e-12,
        total_components: 4,
        ..RhoSgdConfig::default()
    };
    let out = rho_sgd(&mut obj, &cfg, &mut rng(3)).unwrap();
    assert!(!out.converged);
    assert_eq!(out.iterations, 3);
}

/// Identical distributions: the update is a bounded random walk.
struct Sampled {
    comp: FlowComponent,
}

impl RhoObjective for Sampled {
    fn sample_fixed(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<GammaTerms> {
        let (z, lp) = self.comp.sample(n, rng)?;
        Ok(GammaTerms {
            log_fixed: lp.clone(),
            log_new: lp,
            log_target: z.iter_rows().map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>()).collect(),
        })
    }

    fn sample_new(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<GammaTerms> {
        self.sample_fixed(n, rng)
    }
}

#[test]
fn rho_sgd_on_identical_components_stays_in_range() {
    let comp = random_component(arch(2, 1, 4), 0.3, &mut rng(22));
    let mut obj = Sampled { comp };
    let out = rho_sgd(&mut obj, &RhoSgdConfig::default(), &mut rng(23)).unwrap();
    assert!((0.0..=1.0).contains(&out.rho));
}

/// Refit that swaps in a fixed replacement and scores models by NLL on fixed data.
struct Scripted {
    replacement: FlowComponent,
    data: Matrix,
}

impl ComponentRefit for Scripted {
    fn refit(&mut self, _rest: &GBNFModel, _current: &FlowComponent, _i: usize, _e: usize) -> Result<FlowComponent> {
        Ok(self.replacement.clone())
    }

    fn validation_loss(&mut self, model: &GBNFModel) -> Result<f64> {
        gbnf::objectives::nll_loss(model, &self.data)
    }
}

#[test]
fn fine_tune_never_increases_validation_loss() {
    let mut r = rng(24);
    let data = normal_matrix(200, 2, &mut r);
    let mut m = two_component_additive(25, 0.5);
    let mut t = Scripted {
        replacement: FlowComponent::zeros(arch(2, 1, 6)).unwrap(),
        data: data.clone(),
    };
    let before = t.validation_loss(&m).unwrap();
    let steps = fine_tune(&mut m, 2, 1, 11, &mut t).unwrap();
    assert_eq!(steps.len(), 4);
    let mut prev = before;
    for s in &steps {
        assert!(s.loss_after <= s.loss_before + 1e-12);
        assert!(s.loss_before <= prev + 1e-12);
        prev = s.loss_after;
    }
    assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut untouched = two_component_additive(25, 0.5);
    let copy = untouched.clone();
    assert!(fine_tune(&mut untouched, 1, 0, 11, &mut t).unwrap().is_empty());
    assert_eq!(untouched, copy);
    let mut mult = multiplicative(1, 0.5);
    assert!(matches!(fine_tune(&mut mult, 1, 1, 11, &mut t), Err(Error::UnsupportedMode { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_always_sum_to_one(rhos in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let w = weights_from_rho(&rhos);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let back = gbnf::boost::rho_from_weights(&w);
        let again = weights_from_rho(&back);
        for (a, b) in w.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn leave_one_out_weights_sum_to_one(raw in prop::collection::vec(0.05f64..1.0, 2..8), pick in any::<prop::sample::Index>()) {
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let drift = 1.0 - w.iter().sum::<f64>();
        let mut w = w;
        w[0] += drift;
        let comps = vec![FlowComponent::zeros(arch(2, 1, 1)).unwrap(); w.len()];
        let m = GBNFModel::from_weights(comps, w.clone()).unwrap();
        let i = pick.index(w.len());
        let rest = m.leave_one_out(i).unwrap();
        prop_assert!((rest.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_search_returns_the_grid_argmin(target in 0usize..=20) {
        let t = target as f64 / 20.0;
        let out = rho_line_search(21, &[], |r| Ok((r - t).powi(2))).unwrap();
        prop_assert!((out.rho - t).abs() < 1e-12);
        prop_assert!(out.loss <= out.loss_at_zero);
    }

    #[test]
    fn sampling_ids_follow_weights(seed in any::<u64>()) {
        let mut r = rng(seed);
        let w0: f64 = r.random_range(0.1..0.9);
        let comps = vec![FlowComponent::zeros(arch(2, 1, 1)).unwrap(); 2];
        let m = GBNFModel::from_weights(comps, vec![w0, 1.0 - w0]).unwrap();
        let n = 20_000;
        let (_, ids) = m.sample_mixture(n, &mut r).unwrap();
        let f = ids.iter().filter(|&&i| i == 0).count() as f64 / n as f64;
        let sd = (w0 * (1.0 - w0) / n as f64).sqrt();
        prop_assert!((f - w0).abs() < 5.0 * sd);
    }
}
