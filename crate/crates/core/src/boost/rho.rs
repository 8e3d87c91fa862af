//! Choosing the stagewise weight `ρ` of a new component.

use rand::Rng;

use crate::diffcore::log_sum_exp;
use crate::error::{Error, Result};

/// Outcome of a grid search over `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch {
    pub rho: f64,
    pub loss: f64,
    /// Objective at `ρ = 0`, i.e. with the new component ignored.
    pub loss_at_zero: f64,
    /// Every evaluated `(ρ, loss)` pair in ascending `ρ`; failed candidates carry `+∞`.
    pub evaluations: Vec<(f64, f64)>,
}

/// Uniform grid on `[0, 1]` with both endpoints.
pub fn rho_grid(grid_size: usize) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(Error::Domain(format!("grid size must be >= 2, got {grid_size}")));
    }
    let last = (grid_size - 1) as f64;
    Ok((0..grid_size).map(|i| i as f64 / last).collect())
}

/// Minimize `objective` over a uniform `ρ` grid plus any `extra` candidates.
///
/// Candidates whose objective is non-finite or fails numerically are skipped.
/// Losses within `1e-12·max(1, |min|)` of the minimum count as ties, and ties
/// go to the smallest `ρ`.
pub fn rho_line_search<F>(grid_size: usize, extra: &[f64], mut objective: F) -> Result<LineSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut candidates = rho_grid(grid_size)?;
    for &r in extra {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("extra candidate {r} outside [0, 1]")));
        }
        candidates.push(r);
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut evaluations = Vec::with_capacity(candidates.len());
    for &r in &candidates {
        let loss = match objective(r) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Numeric(_)) | Err(Error::NumericOverflow { .. }) => f64::INFINITY,
            Err(Error::DegenerateProposal { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        evaluations.push((r, loss));
    }
    let min = evaluations.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Numeric("objective is non-finite at every rho candidate".into()));
    }
    let tol = 1e-12 * min.abs().max(1.0);
    let &(rho, loss) = evaluations
        .iter()
        .find(|e| e.1 <= min + tol)
        .expect("a finite minimum exists");
    Ok(LineSearch {
        rho,
        loss,
        loss_at_zero: evaluations[0].1,
        evaluations,
    })
}

/// Log-densities at a set of points, as needed by the `ρ` gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GammaTerms {
    /// `log G^{(c−1)}(z)`.
    pub log_fixed: Vec<f64>,
    /// `log g^{(c)}(z)`.
    pub log_new: Vec<f64>,
    /// `log p̃(z)`, the (possibly unnormalized) target.
    pub log_target: Vec<f64>,
}

/// Sampling access for the stochastic `ρ` update.
pub trait RhoObjective {
    /// Draw `n` points from the fixed model `G^{(c−1)}`.
    fn sample_fixed(&mut self, n: usize, rng: &mut dyn rand::RngCore) -> Result<GammaTerms>;
    /// Draw `n` points from the new component `g^{(c)}`.
    fn sample_new(&mut self, n: usize, rng: &mut dyn rand::RngCore) -> Result<GammaTerms>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoSgdConfig {
    /// Initial step `δ`.
    pub step: f64,
    /// Stop once `|ρ_t − ρ_{t−1}| < tolerance`.
    pub tolerance: f64,
    pub max_iters: usize,
    /// Step at iteration `t` is `δ / (1 + decay·t)`.
    pub decay: f64,
    /// Draws from each distribution per iteration.
    pub batch: usize,
    /// Number of components `C`; the search starts at `1/C`.
    pub total_components: usize,
}

impl Default for RhoSgdConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            tolerance: 1e-4,
            max_iters: 500,
            decay: 0.05,
            batch: 256,
            total_components: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoSgd {
    pub rho: f64,
    pub iterations: usize,
    /// `false` when `max_iters` ran out before the tolerance was met.
    pub converged: bool,
    pub trace: Vec<f64>,
}

/// `γ(z) = log((1−ρ)G(z) + ρ g(z)) − log p̃(z)`, averaged.
pub(crate) fn mean_gamma(rho: f64, t: &GammaTerms) -> Result<f64> {
    let (a, b) = ((1.0 - rho).ln(), rho.ln());
    let mut total = 0.0;
    for ((lf, ln), lt) in t.log_fixed.iter().zip(&t.log_new).zip(&t.log_target) {
        let g = log_sum_exp(&[a + lf, b + ln]) - lt;
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gamma at rho = {rho}")));
        }
        total += g;
    }
    Ok(total / t.log_fixed.len() as f64)
}

/// Stochastic gradient descent on `ρ` with the gradient
/// `E_g[γ] − E_G[γ]`, clipped to `[0, 1]`, starting from `1/C`.
pub fn rho_sgd<O, R>(objective: &mut O, config: &RhoSgdConfig, rng: &mut R) -> Result<RhoSgd>
where
    O: RhoObjective + ?Sized,
    R: Rng,
{
    if !(config.step > 0.0) || !(config.tolerance > 0.0) {
        return Err(Error::Domain("rho SGD needs a positive step and tolerance".into()));
    }
    if config.batch == 0 || config.total_components == 0 {
        return Err(Error::Domain("rho SGD needs a positive batch and component count".into()));
    }
    if config.decay < 0.0 {
        return Err(Error::Domain("rho SGD decay must be non-negative".into()));
    }
    let mut rho = 1.0 / config.total_components as f64;
    let mut trace = vec![rho];
    for t in 0..config.max_iters {
        let fixed = objective.sample_fixed(config.batch, rng)?;
        let new = objective.sample_new(config.batch, rng)?;
        let grad = mean_gamma(rho, &new)? - mean_gamma(rho, &fixed)?;
        let lr = config.step / (1.0 + config.decay * t as f64);
        let next = (rho - lr * grad).clamp(0.0, 1.0);
        let moved = (next - rho).abs();
        rho = next;
        trace.push(rho);
        if moved < config.tolerance {
            return Ok(RhoSgd {
                rho,
                iterations: t + 1,
                converged: true,
                trace,
            });
        }
    }
    Ok(RhoSgd {
        rho,
        iterations: config.max_iters,
        converged: false,
        trace,
    })
}
