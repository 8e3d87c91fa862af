//! Training losses for a new component: plain and reweighted likelihood, the
//! additive functional objective, and the entropy-regularized reverse KL.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use crate::boost::{GBNFModel, MixtureMode};
use crate::diffcore::{log_sum_exp, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::flows::{std_normal_log_prob, tape_std_normal_log_prob, FlowComponent};
use crate::targets::EnergyTarget;

/// Log-densities below this are raised to it before forming density ratios.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

/// Mean `−log G(x)` over a batch.
pub fn nll_loss(model: &GBNFModel, batch: &Matrix) -> Result<f64> {
    mean_neg(&model.log_prob_batch(batch)?)
}

/// Mean `−log g(x)` over a batch for one component.
pub fn component_nll(component: &FlowComponent, batch: &Matrix) -> Result<f64> {
    mean_neg(&component.log_prob_batch(batch)?)
}

fn mean_neg(lps: &[f64]) -> Result<f64> {
    if lps.is_empty() {
        return Err(Error::Domain("batch must be non-empty".into()));
    }
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
}

/// Graph `mean −log g(x)`; with `weights`, `Σ w_i·(−log g(x_i))` instead.
pub fn tape_nll(
    tape: &mut Tape<'_>,
    component: &FlowComponent,
    trainable: bool,
    batch: &Matrix,
    weights: Option<&[f64]>,
) -> Result<Var> {
    if batch.rows() == 0 {
        return Err(Error::Domain("batch must be non-empty".into()));
    }
    let x = tape.constant(batch.clone())?;
    let lp = component.tape_log_prob(tape, trainable, x)?;
    match weights {
        None => {
            let m = tape.mean_all(lp)?;
            tape.neg(m)
        }
        Some(w) => {
            if w.len() != batch.rows() {
                return Err(Error::shape("one weight per row is required"));
            }
            let wv = tape.constant(Matrix::new(w.len(), 1, w.to_vec())?)?;
            let weighted = tape.mul(lp, wv)?;
            let s = tape.sum_all(weighted)?;
            tape.neg(s)
        }
    }
}

/// Normalized sampling weights over a data set, with the fixed model they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleWeights {
    weights: Vec<f64>,
    source: u64,
}

impl ResampleWeights {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("cannot weight an empty data set".into()));
        }
        Ok(Self {
            weights: vec![1.0 / n as f64; n],
            source: 0,
        })
    }

    /// Weights `∝ exp(−β·max(log G(x_i), −700))`.
    pub fn from_log_probs(log_probs: &[f64], beta: f64, source: u64) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::Domain("cannot weight an empty data set".into()));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("beta must be finite and >= 0, got {beta}")));
        }
        if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("fixed-model log-density is NaN or +inf".into()));
        }
        if beta == 0.0 {
            return Self::uniform(log_probs.len()).map(|w| Self { source, ..w });
        }
        let logits: Vec<f64> = log_probs.iter().map(|lp| -beta * lp.max(LOG_DENSITY_FLOOR)).collect();
        let total = log_sum_exp(&logits);
        let mut weights: Vec<f64> = logits.iter().map(|l| (l - total).exp()).collect();
        let s: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= s;
        }
        Ok(Self { weights, source })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Fingerprint of the fixed model (0 for uniform weights).
    pub fn source(&self) -> u64 {
        self.source
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Effective sample size `(Σw)² / Σw²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Stable in-process fingerprint of a model's parameters and weights.
pub fn model_fingerprint(model: &GBNFModel) -> u64 {
    let mut h = DefaultHasher::new();
    model.mode().hash(&mut h);
    for c in model.components() {
        for v in c.params().values() {
            v.to_bits().hash(&mut h);
        }
    }
    for r in model.rho() {
        r.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Residual-fitting weights `w_i ∝ G(x_i)^{−β}`; uniform when there is no fixed model.
pub fn compute_resample_weights(fixed: Option<&GBNFModel>, data: &Matrix, beta: f64) -> Result<ResampleWeights> {
    match fixed {
        None => ResampleWeights::uniform(data.rows()),
        Some(model) => {
            let lps = model.log_prob_batch(data)?;
            ResampleWeights::from_log_probs(&lps, beta, model_fingerprint(model))
        }
    }
}

/// `n` draws with replacement; returns the rows and their indices.
pub fn resample<R: Rng + ?Sized>(
    data: &Matrix,
    weights: &ResampleWeights,
    n: usize,
    rng: &mut R,
) -> Result<(Matrix, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Domain("resample size must be >= 1".into()));
    }
    if weights.len() != data.rows() {
        return Err(Error::shape("one weight per data row is required"));
    }
    let pick = WeightedIndex::new(weights.weights()).map_err(|e| Error::Domain(e.to_string()))?;
    let idx: Vec<usize> = (0..n).map(|_| pick.sample(rng)).collect();
    Ok((data.select_rows(&idx), idx))
}

/// Graph `−(1/n) Σ g(x_i)/G(x_i) + λ Σ g(x_i) log g(x_i)`, where
/// `fixed_log_probs` holds `log G(x_i)`.
pub fn additive_de_objective(
    tape: &mut Tape<'_>,
    component: &FlowComponent,
    trainable: bool,
    batch: &Matrix,
    fixed_log_probs: &[f64],
    lambda: f64,
) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if fixed_log_probs.len() != batch.rows() || batch.rows() == 0 {
        return Err(Error::shape("one fixed log-density per row of a non-empty batch"));
    }
    let x = tape.constant(batch.clone())?;
    let lg = component.tape_log_prob(tape, trainable, x)?;
    let floored: Vec<f64> = fixed_log_probs.iter().map(|v| v.max(LOG_DENSITY_FLOOR)).collect();
    let neg_lgf = tape.constant(Matrix::new(floored.len(), 1, floored.iter().map(|v| -v).collect())?)?;
    let log_ratio = tape.add(lg, neg_lgf)?;
    let ratio = tape.exp(log_ratio)?;
    let fit = tape.mean_all(ratio)?;
    let g = tape.exp(lg)?;
    let glogg = tape.mul(g, lg)?;
    let ent = tape.sum_all(glogg)?;
    let ent = tape.affine(ent, lambda, 0.0)?;
    tape.sub(ent, fit)
}

/// How `log G^{(c−1)}(z)` enters the reverse-KL objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedTerm {
    /// Exact mixture over every fixed component.
    Exact,
    /// `log g_j(z)` of one component `j` drawn by the caller from the weights.
    SingleComponent(usize),
}

/// Graph `log G(z)` for a frozen model, differentiable in `z`.
pub fn tape_fixed_log_prob(tape: &mut Tape<'_>, fixed: &GBNFModel, z: Var, term: FixedTerm) -> Result<Var> {
    match term {
        FixedTerm::SingleComponent(j) => {
            let comp = fixed
                .components()
                .get(j)
                .ok_or_else(|| Error::Domain(format!("fixed component {j} out of range")))?;
            comp.tape_log_prob(tape, false, z)
        }
        FixedTerm::Exact => {
            let mut cols = Vec::with_capacity(fixed.len());
            for c in fixed.components() {
                cols.push(c.tape_log_prob(tape, false, z)?);
            }
            match fixed.mode() {
                MixtureMode::Additive => {
                    let lps = tape.concat_cols(&cols)?;
                    let log_w: Vec<f64> = fixed.weights().iter().map(|w| w.max(f64::MIN_POSITIVE).ln()).collect();
                    let lw = tape.constant(Matrix::row_vector(&log_w))?;
                    let shifted = tape.add(lps, lw)?;
                    tape.log_sum_exp(shifted)
                }
                MixtureMode::Multiplicative => {
                    let log_gamma = fixed
                        .log_partition()
                        .ok_or_else(|| Error::State("fixed model needs a partition estimate".into()))?
                        .value;
                    let lps = tape.concat_cols(&cols)?;
                    let rho = tape.constant(Matrix::row_vector(fixed.rho()))?;
                    let s = tape.matvec(lps, rho)?;
                    tape.affine(s, 1.0, -log_gamma)
                }
            }
        }
    }
}

/// Graph MC mean of `λ·log g(z) − log p̃(z) + log G^{(c−1)}(z)` over
/// `z = f(z0)` for the given base draws `z0`. The fixed term is dropped when
/// `fixed` is `None`.
pub fn boosted_reverse_kl_objective(
    tape: &mut Tape<'_>,
    component: &FlowComponent,
    trainable: bool,
    fixed: Option<(&GBNFModel, FixedTerm)>,
    target: EnergyTarget,
    lambda: f64,
    z0: &Matrix,
) -> Result<Var> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if z0.rows() == 0 {
        return Err(Error::Domain("need at least one Monte Carlo draw".into()));
    }
    let base = tape.constant(z0.clone())?;
    let (z, logdet) = component.tape_forward(tape, trainable, base)?;
    let lp0 = tape_std_normal_log_prob(tape, base)?;
    let log_g = tape.sub(lp0, logdet)?;
    let log_p = target.tape_log_unnorm(tape, z).map_err(|e| match e {
        Error::NumericOverflow { .. } | Error::Numeric(_) => Error::Numeric(format!(
            "target {} is not finite at a sample; first draws: {:?}",
            target.name(),
            &tape.value(z).data()[..z0.cols().min(tape.value(z).data().len())]
        )),
        other => other,
    })?;
    let scaled = tape.affine(log_g, lambda, 0.0)?;
    let mut per = tape.sub(scaled, log_p)?;
    if let Some((model, term)) = fixed {
        let lf = tape_fixed_log_prob(tape, model, z, term)?;
        per = tape.add(per, lf)?;
    }
    tape.mean_all(per)
}

/// Reverse-KL surrogate `E_G[log G(z) − log p̃(z)]` of a whole additive model
/// from `n` of its own draws: mean and standard error.
pub fn reverse_kl_surrogate<R: Rng + ?Sized>(
    model: &GBNFModel,
    target: EnergyTarget,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::Domain("need at least two draws".into()));
    }
    let (z, _) = model.sample_mixture(n, rng)?;
    let lg = model.log_prob_batch(&z)?;
    let mut vals = Vec::with_capacity(n);
    for (row, l) in z.iter_rows().zip(&lg) {
        vals.push(l - target.log_unnorm(row)?);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok((mean, (var / n as f64).sqrt()))
}

/// Plain value of the reverse-KL objective for one component, for validation.
pub fn reverse_kl_value(
    component: &FlowComponent,
    fixed: Option<&GBNFModel>,
    target: EnergyTarget,
    lambda: f64,
    z0: &Matrix,
) -> Result<f64> {
    let (z, logdet) = component.forward_batch(z0)?;
    let fixed_lp = match fixed {
        Some(m) => Some(m.log_prob_batch(&z)?),
        None => None,
    };
    let mut total = 0.0;
    for (i, (row0, row)) in z0.iter_rows().zip(z.iter_rows()).enumerate() {
        let log_g = std_normal_log_prob(row0) - logdet[i];
        let mut v = lambda * log_g - target.log_unnorm(row)?;
        if let Some(f) = &fixed_lp {
            v += f[i];
        }
        total += v;
    }
    Ok(total / z0.rows() as f64)
}
