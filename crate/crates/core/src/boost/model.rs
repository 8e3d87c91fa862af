use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{log_sum_exp, Matrix};
use crate::error::{Error, Result};
use crate::flows::FlowComponent;

/// How components combine into one density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixtureMode {
    /// `G = Σ w_j g_j`.
    Additive,
    /// `G ∝ Π g_j^{ρ_j}`, normalized by an estimated partition function.
    Multiplicative,
}

impl MixtureMode {
    pub fn name(self) -> &'static str {
        match self {
            MixtureMode::Additive => "additive",
            MixtureMode::Multiplicative => "multiplicative",
        }
    }
}

/// Monte Carlo estimate of `log Γ` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LogPartition {
    pub value: f64,
    pub stderr: f64,
}

/// Boosted mixture of flow components.
///
/// Component indices are 0-based. The first component is the unboosted stage
/// and always carries `ρ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GBNFModel {
    mode: MixtureMode,
    components: Vec<FlowComponent>,
    rho: Vec<f64>,
    weights: Vec<f64>,
    log_partition: Option<LogPartition>,
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!("rho must lie in [0, 1], got {rho}")));
    }
    Ok(())
}

/// Normalized weights implied by stagewise `ρ` (the first entry is ignored).
pub fn weights_from_rho(rho: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = Vec::with_capacity(rho.len());
    for (j, &r) in rho.iter().enumerate() {
        if j == 0 {
            w.push(1.0);
        } else {
            for v in w.iter_mut() {
                *v *= 1.0 - r;
            }
            w.push(r);
        }
    }
    w
}

/// Stagewise `ρ_j = w_j / Σ_{k≤j} w_k`, the inverse of [`weights_from_rho`].
pub fn rho_from_weights(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    w.iter()
        .enumerate()
        .map(|(j, &wj)| {
            acc += wj;
            if j == 0 || acc <= 0.0 {
                if j == 0 { 1.0 } else { 0.0 }
            } else {
                (wj / acc).clamp(0.0, 1.0)
            }
        })
        .collect()
}

impl GBNFModel {
    pub fn new(mode: MixtureMode) -> Self {
        Self {
            mode,
            components: Vec::new(),
            rho: Vec::new(),
            weights: Vec::new(),
            log_partition: None,
        }
    }

    /// Assemble a model from explicit stagewise values. In additive mode the
    /// weights are derived from `rho`; in multiplicative mode `rho` are the
    /// exponents verbatim.
    pub fn from_parts(mode: MixtureMode, components: Vec<FlowComponent>, rho: Vec<f64>) -> Result<Self> {
        if components.len() != rho.len() {
            return Err(Error::shape(format!(
                "{} components but {} rho values",
                components.len(),
                rho.len()
            )));
        }
        for &r in &rho {
            check_rho(r)?;
        }
        if let Some(first) = components.first() {
            if components.iter().any(|c| c.dim() != first.dim()) {
                return Err(Error::shape("components disagree on dimension"));
            }
        }
        let weights = weights_from_rho(&rho);
        Ok(Self {
            mode,
            components,
            rho,
            weights,
            log_partition: None,
        })
    }

    /// Reassemble a model from stored fields without recomputing anything.
    pub(crate) fn from_raw(
        mode: MixtureMode,
        components: Vec<FlowComponent>,
        rho: Vec<f64>,
        weights: Vec<f64>,
        log_partition: Option<LogPartition>,
    ) -> Result<Self> {
        let mut m = Self::from_parts(mode, components, rho)?;
        if weights.len() != m.len() {
            return Err(Error::shape("weight count must match component count"));
        }
        m.weights = weights;
        m.log_partition = log_partition;
        Ok(m)
    }

    /// Additive model with explicit normalized weights.
    pub fn from_weights(components: Vec<FlowComponent>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::from_parts(MixtureMode::Additive, components, vec![1.0; weights.len()])?;
        m.set_weights(weights)?;
        Ok(m)
    }

    pub fn mode(&self) -> MixtureMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.components.first().map(FlowComponent::dim)
    }

    pub fn components(&self) -> &[FlowComponent] {
        &self.components
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Normalized mixture weights (additive mode).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_partition(&self) -> Option<LogPartition> {
        self.log_partition
    }

    pub fn set_log_partition(&mut self, lp: LogPartition) -> Result<()> {
        if !lp.value.is_finite() || !lp.stderr.is_finite() {
            return Err(Error::Numeric("log partition estimate is not finite".into()));
        }
        self.log_partition = Some(lp);
        Ok(())
    }

    /// Replace the additive weights; stagewise `ρ` is recomputed to match.
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.components.len() {
            return Err(Error::shape("weight count must match component count"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("weights must sum to 1, got {total}")));
        }
        self.rho = rho_from_weights(&weights);
        self.weights = weights;
        Ok(())
    }

    /// Add a component. The first component always gets weight (or exponent) 1.
    /// Multiplicative models lose their partition estimate.
    pub fn append_component(&mut self, component: FlowComponent, rho: f64) -> Result<()> {
        check_rho(rho)?;
        if let Some(d) = self.dim() {
            if component.dim() != d {
                return Err(Error::shape(format!(
                    "component dimension {} does not match model dimension {d}",
                    component.dim()
                )));
            }
        }
        let rho = if self.components.is_empty() { 1.0 } else { rho };
        if self.components.is_empty() {
            self.weights.push(1.0);
        } else {
            for w in self.weights.iter_mut() {
                *w *= 1.0 - rho;
            }
            self.weights.push(rho);
        }
        self.components.push(component);
        self.rho.push(rho);
        self.log_partition = None;
        Ok(())
    }

    /// The first `c` components with their stagewise values.
    pub fn truncated(&self, c: usize) -> Result<Self> {
        if c == 0 || c > self.len() {
            return Err(Error::Domain(format!("cannot keep {c} of {} components", self.len())));
        }
        Self::from_parts(self.mode, self.components[..c].to_vec(), self.rho[..c].to_vec())
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        match self.dim() {
            None => Err(Error::State("model has no components".into())),
            Some(d) if d != cols => Err(Error::shape(format!(
                "input has {cols} coordinates, model expects {d}"
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Row-major `n × c` matrix of per-component log-densities.
    pub fn component_log_probs(&self, x: &Matrix) -> Result<Matrix> {
        self.check_dim(x.cols())?;
        let c = self.len();
        let mut out = Matrix::zeros(x.rows(), c);
        for (j, comp) in self.components.iter().enumerate() {
            for (i, lp) in comp.log_prob_batch(x)?.into_iter().enumerate() {
                out.set(i, j, lp);
            }
        }
        Ok(out)
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let m = Matrix::row_vector(x);
        Ok(self.log_prob_batch(&m)?[0])
    }

    /// Normalized log-density of each row under the model's mode.
    pub fn log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self.mode {
            MixtureMode::Additive => self.additive_log_prob_batch(x),
            MixtureMode::Multiplicative => self.multiplicative_log_prob_batch(x),
        }
    }

    fn require(&self, mode: MixtureMode, what: &str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::UnsupportedMode {
                mode: self.mode.name(),
                what: what.into(),
            });
        }
        Ok(())
    }

    pub fn additive_log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.additive_log_prob_batch(&Matrix::row_vector(x))?[0])
    }

    /// `log Σ_j w_j g_j(x)` per row.
    pub fn additive_log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.require(MixtureMode::Additive, "additive log-density")?;
        let lps = self.component_log_probs(x)?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        mix_rows(&lps, &log_w)
    }

    pub fn multiplicative_log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.multiplicative_log_prob_batch(&Matrix::row_vector(x))?[0])
    }

    /// `Σ_j ρ_j log g_j(x) − log Γ̂` per row.
    pub fn multiplicative_log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.require(MixtureMode::Multiplicative, "multiplicative log-density")?;
        let log_gamma = self
            .log_partition
            .ok_or_else(|| {
                Error::State("partition estimate is stale; re-estimate the log partition".into())
            })?
            .value;
        Ok(self
            .unnormalized_log_prob_batch(x)?
            .into_iter()
            .map(|v| v - log_gamma)
            .collect())
    }

    /// `Σ_j ρ_j log g_j(x)` per row.
    pub fn unnormalized_log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.require(MixtureMode::Multiplicative, "unnormalized log-density")?;
        let lps = self.component_log_probs(x)?;
        Ok(lps.iter_rows().map(|row| weighted_sum(&self.rho, row)).collect())
    }

    /// Draw `n` points: component `j ~ Categorical(w)`, then a draw from it.
    /// Returns points and 0-based component ids.
    pub fn sample_mixture<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Matrix, Vec<usize>)> {
        self.require(MixtureMode::Additive, "sampling")?;
        if self.is_empty() {
            return Err(Error::State("model has no components".into()));
        }
        draw_mixture(&self.components, &self.weights, n, rng)
    }

    /// Additive mixture over every component except `i`, weights renormalized by `1 − w_i`.
    pub fn leave_one_out(&self, i: usize) -> Result<Self> {
        self.require(MixtureMode::Additive, "leave-one-out")?;
        if self.len() < 2 {
            return Err(Error::Domain("leave-one-out needs at least two components".into()));
        }
        if i >= self.len() {
            return Err(Error::Domain(format!("component {i} out of range ({})", self.len())));
        }
        let rest = 1.0 - self.weights[i];
        if rest <= 0.0 {
            return Err(Error::Domain(format!(
                "component {i} carries all the weight; the remainder is empty"
            )));
        }
        let mut comps = self.components.clone();
        comps.remove(i);
        let mut w: Vec<f64> = self
            .weights
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, w)| w / rest)
            .collect();
        let total: f64 = w.iter().sum();
        for v in w.iter_mut() {
            *v /= total;
        }
        Self::from_weights(comps, w)
    }

    /// `rest` blended with `component` placed at position `i` with weight `rho`.
    pub fn with_inserted(rest: &Self, i: usize, component: FlowComponent, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        rest.require(MixtureMode::Additive, "insertion")?;
        if i > rest.len() {
            return Err(Error::Domain(format!("position {i} out of range")));
        }
        let mut comps = rest.components.clone();
        comps.insert(i, component);
        let mut w: Vec<f64> = rest.weights.iter().map(|w| w * (1.0 - rho)).collect();
        w.insert(i, rho);
        Self::from_weights(comps, w)
    }

}

/// `Σ_j a_j b_j` that treats `0 · (−∞)` as 0.
pub(crate) fn weighted_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, v)| w * v)
        .sum()
}

/// Row-wise `log Σ_j exp(log_w_j + lps_ij)`.
pub(crate) fn mix_rows(lps: &Matrix, log_w: &[f64]) -> Result<Vec<f64>> {
    let mut terms = vec![0.0; log_w.len()];
    let mut out = Vec::with_capacity(lps.rows());
    for row in lps.iter_rows() {
        for ((t, lw), lp) in terms.iter_mut().zip(log_w).zip(row) {
            *t = lw + lp;
        }
        let v = log_sum_exp(&terms);
        if !v.is_finite() {
            return Err(Error::Numeric("mixture log-density is not finite".into()));
        }
        out.push(v);
    }
    Ok(out)
}

/// Categorical-then-component draws. `weights` need not be normalized.
pub(crate) fn draw_mixture<R: Rng + ?Sized>(
    components: &[FlowComponent],
    weights: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<(Matrix, Vec<usize>)> {
    let d = components[0].dim();
    let pick = WeightedIndex::new(weights).map_err(|e| Error::Domain(e.to_string()))?;
    let mut data = Vec::with_capacity(n * d);
    let mut ids = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        let j = pick.sample(rng);
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let (x, _) = components[j].forward(&z)?;
        data.extend_from_slice(&x);
        ids.push(j);
    }
    Ok((Matrix::new(n, d, data)?, ids))
}
