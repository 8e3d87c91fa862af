//! Importance-sampling estimates of the multiplicative partition function.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use super::model::{draw_mixture, weighted_sum, GBNFModel, LogPartition, MixtureMode};
use crate::diffcore::{log_sum_exp, Matrix};
use crate::error::{Error, Result};

/// Smallest proposal sample count accepted by the estimator.
pub const MIN_PARTITION_SAMPLES: usize = 1000;
/// Smallest effective sample size before the proposal is declared degenerate.
pub const MIN_ESS: f64 = 10.0;

/// Draws from the equal-weight additive mixture of a set of components, with
/// every component's log-density cached so any exponent vector can be scored
/// on the same draws.
#[derive(Debug, Clone)]
pub struct PartitionSampler {
    points: Matrix,
    log_probs: Matrix,
    log_q: Vec<f64>,
}

impl PartitionSampler {
    pub fn new<R: Rng + ?Sized>(model: &GBNFModel, n: usize, rng: &mut R) -> Result<Self> {
        if n < MIN_PARTITION_SAMPLES {
            return Err(Error::Domain(format!(
                "partition estimation needs at least {MIN_PARTITION_SAMPLES} samples, got {n}"
            )));
        }
        if model.is_empty() {
            return Err(Error::State("model has no components".into()));
        }
        let c = model.len();
        let (points, _) = draw_mixture(model.components(), &vec![1.0; c], n, rng)?;
        let log_probs = component_log_probs(model, &points)?;
        let ln_c = (c as f64).ln();
        let log_q = log_probs.iter_rows().map(|r| log_sum_exp(r) - ln_c).collect();
        Ok(Self {
            points,
            log_probs,
            log_q,
        })
    }

    pub fn len(&self) -> usize {
        self.log_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_q.is_empty()
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    /// `log Γ̂` for `Π g_j^{ρ_j}` on the cached draws.
    pub fn log_partition(&self, rho: &[f64]) -> Result<LogPartition> {
        if rho.len() != self.log_probs.cols() {
            return Err(Error::shape("exponent count must match component count"));
        }
        if rho.iter().all(|&r| r == 0.0) {
            return Err(Error::Domain(
                "all exponents are zero; the unnormalized density is not integrable".into(),
            ));
        }
        let log_r: Vec<f64> = self
            .log_probs
            .iter_rows()
            .zip(&self.log_q)
            .map(|(row, lq)| weighted_sum(rho, row) - lq)
            .collect();
        log_mean_exp(&log_r)
    }
}

fn component_log_probs(model: &GBNFModel, x: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), model.len());
    for (j, comp) in model.components().iter().enumerate() {
        for (i, lp) in comp.log_prob_batch(x)?.into_iter().enumerate() {
            out.set(i, j, lp);
        }
    }
    Ok(out)
}

/// `log((1/n) Σ exp(v_i))` with a delta-method standard error, rejecting a
/// sample whose effective size is below [`MIN_ESS`].
pub fn log_mean_exp(log_r: &[f64]) -> Result<LogPartition> {
    let n = log_r.len() as f64;
    let value = log_sum_exp(log_r) - n.ln();
    if !value.is_finite() {
        return Err(Error::Numeric("importance weights are not finite".into()));
    }
    let m = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_r.iter().map(|v| (v - m).exp()).collect();
    let s1: f64 = scaled.iter().sum();
    let s2: f64 = scaled.iter().map(|v| v * v).sum();
    let ess = s1 * s1 / s2;
    if ess < MIN_ESS {
        return Err(Error::DegenerateProposal { ess, min: MIN_ESS });
    }
    let mean = s1 / n;
    let var = scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let stderr = (var / n).sqrt() / mean;
    Ok(LogPartition { value, stderr })
}

/// Estimate `log Γ̂` for a multiplicative model with `n` proposal draws.
pub fn estimate_log_partition<R: Rng + ?Sized>(
    model: &GBNFModel,
    n: usize,
    rng: &mut R,
) -> Result<LogPartition> {
    require_multiplicative(model)?;
    PartitionSampler::new(model, n, rng)?.log_partition(model.rho())
}

/// Estimate and store `log Γ̂` on the model.
pub fn refresh_log_partition<R: Rng + ?Sized>(model: &mut GBNFModel, n: usize, rng: &mut R) -> Result<LogPartition> {
    let lp = estimate_log_partition(model, n, rng)?;
    model.set_log_partition(lp)?;
    Ok(lp)
}

fn require_multiplicative(model: &GBNFModel) -> Result<()> {
    if model.mode() != MixtureMode::Multiplicative {
        return Err(Error::UnsupportedMode {
            mode: model.mode().name(),
            what: "partition estimation".into(),
        });
    }
    Ok(())
}

/// Two independent routes to `log Γ_(c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionCheck {
    /// Importance-sampling estimate over all `c` factors.
    pub direct: LogPartition,
    /// `log Γ̂_(c−1)` over the first `c − 1` factors.
    pub previous: LogPartition,
    /// `log Ê_{G^{(c−1)}}[g_c^{ρ_c}]` by sampling-importance-resampling.
    pub expectation: LogPartition,
    /// `|direct − (previous + expectation)|`.
    pub discrepancy: f64,
    pub combined_stderr: f64,
}

/// Compare the direct partition estimate to the stage recursion
/// `Γ_(c) = Γ_(c−1) · E_{G^{(c−1)}}[g_c^{ρ_c}]`.
pub fn recursion_check<R: Rng + ?Sized>(model: &GBNFModel, n: usize, rng: &mut R) -> Result<RecursionCheck> {
    require_multiplicative(model)?;
    let c = model.len();
    if c < 2 {
        return Err(Error::Domain("recursion check needs at least two components".into()));
    }
    let direct = estimate_log_partition(model, n, rng)?;
    let prev_model = model.truncated(c - 1)?;
    let prev_sampler = PartitionSampler::new(&prev_model, n, rng)?;
    let previous = prev_sampler.log_partition(prev_model.rho())?;

    // Resample the proposal draws in proportion to G̃^{(c−1)}/q, then average g_c^{ρ_c}.
    let rho_prev = prev_model.rho();
    let log_iw: Vec<f64> = prev_sampler
        .log_probs
        .iter_rows()
        .zip(&prev_sampler.log_q)
        .map(|(row, lq)| weighted_sum(rho_prev, row) - lq)
        .collect();
    let m = log_iw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let iw: Vec<f64> = log_iw.iter().map(|v| (v - m).exp()).collect();
    let pick = WeightedIndex::new(&iw).map_err(|e| Error::Numeric(e.to_string()))?;
    let idx: Vec<usize> = (0..n).map(|_| pick.sample(rng)).collect();
    let resampled = prev_sampler.points.select_rows(&idx);
    let rho_c = model.rho()[c - 1];
    let log_h: Vec<f64> = if rho_c == 0.0 {
        vec![0.0; n]
    } else {
        model.components()[c - 1]
            .log_prob_batch(&resampled)?
            .into_iter()
            .map(|lp| rho_c * lp)
            .collect()
    };
    let mut expectation = log_mean_exp(&log_h)?;
    // Resampling duplicates draws; scale the error to the proposal's effective size.
    let s1: f64 = iw.iter().sum();
    let s2: f64 = iw.iter().map(|v| v * v).sum();
    let ess = (s1 * s1 / s2).min(n as f64);
    expectation.stderr *= (n as f64 / ess).sqrt();

    let discrepancy = (direct.value - (previous.value + expectation.value)).abs();
    let combined_stderr =
        (direct.stderr.powi(2) + previous.stderr.powi(2) + expectation.stderr.powi(2)).sqrt();
    Ok(RecursionCheck {
        direct,
        previous,
        expectation,
        discrepancy,
        combined_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{FlowArchitecture, FlowComponent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn component(seed: u64) -> FlowComponent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = FlowComponent::new(
            FlowArchitecture {
                dim: 2,
                steps: 1,
                hidden: 4,
            },
            &mut rng,
        )
        .unwrap();
        for v in c.params_mut().values_mut() {
            *v += 0.2 * rng.random_range(-1.0..1.0);
        }
        c
    }

    #[test]
    fn self_normalized_single_factor_is_exactly_zero() {
        let m = GBNFModel::from_parts(MixtureMode::Multiplicative, vec![component(1)], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lp = estimate_log_partition(&m, 2000, &mut rng).unwrap();
        assert_eq!(lp.value, 0.0);
        assert_eq!(lp.stderr, 0.0);
    }

    #[test]
    fn zero_exponents_are_rejected() {
        let m = GBNFModel::from_parts(MixtureMode::Multiplicative, vec![component(1)], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(estimate_log_partition(&m, 2000, &mut rng), Err(Error::Domain(_))));
    }

    #[test]
    fn too_few_samples_are_rejected() {
        let m = GBNFModel::from_parts(MixtureMode::Multiplicative, vec![component(1)], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(estimate_log_partition(&m, 999, &mut rng).is_err());
    }

    #[test]
    fn degenerate_weights_raise() {
        let mut log_r = vec![-1e4; 2000];
        log_r[0] = 0.0;
        assert!(matches!(log_mean_exp(&log_r), Err(Error::DegenerateProposal { .. })));
    }

    #[test]
    fn unit_integrand_recursion() {
        let m = GBNFModel::from_parts(
            MixtureMode::Multiplicative,
            vec![component(3), component(4)],
            vec![1.0, 0.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rc = recursion_check(&m, 20_000, &mut rng).unwrap();
        assert_eq!(rc.expectation.value, 0.0);
        assert!(rc.discrepancy < 3.0 * rc.combined_stderr.max(1e-12), "{rc:?}");
    }
}
