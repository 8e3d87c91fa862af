use rand::RngCore;
use serde::Serialize;

use super::config::{RhoStrategy, TrainConfig};
use super::rng::{derived_rng, Purpose};
use super::stage::{refit_component, train_stage, EpochTrace, Problem, StageTrace};
use crate::boost::{
    fine_tune, mean_gamma, mix_rows, rho_line_search, rho_sgd, ComponentRefit, FineTuneStep, GBNFModel, GammaTerms,
    LogPartition, MixtureMode, PartitionSampler, RhoObjective, RhoSgdConfig,
};
use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::flows::FlowComponent;
use crate::objectives::nll_loss;
use crate::targets::EnergyTarget;

/// One line of the stage log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    /// 1-based stage index.
    pub stage: usize,
    pub rho: f64,
    /// Validation loss of the model with the new component at `ρ = 0`.
    pub val_before: Option<f64>,
    pub val_after: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub trace: Vec<EpochTrace>,
    pub log_partition: Option<LogPartition>,
    /// `1 − ρ`, the contraction factor the stage's KL is expected to respect.
    pub geometric_bound: Option<f64>,
    /// `KL(G_c ‖ p) / KL(G_{c−1} ‖ p)` for energy targets.
    pub kl_ratio: Option<f64>,
    pub rho_converged: Option<bool>,
    pub resample_ess: Option<f64>,
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct BoostingRun {
    pub model: GBNFModel,
    pub stages: Vec<StageRecord>,
    pub fine_tune: Vec<FineTuneStep>,
}

/// Validation loss of a whole model: mean NLL on the validation rows, or the
/// reverse-KL surrogate on fixed mixture draws for energy targets.
pub fn validation_loss(cfg: &TrainConfig, problem: &Problem, model: &GBNFModel) -> Result<f64> {
    match problem {
        Problem::Estimation { val, .. } => nll_loss(model, val),
        Problem::Matching { target, .. } => {
            let mut rng = derived_rng(cfg.run.seed, Purpose::Validation, u32::MAX as u64);
            let (z, _) = model.sample_mixture(cfg.train.val_mc, &mut rng)?;
            let lg = model.log_prob_batch(&z)?;
            let lt = target_log_probs(*target, &z)?;
            Ok(lg.iter().zip(&lt).map(|(g, t)| g - t).sum::<f64>() / lg.len() as f64)
        }
    }
}

fn target_log_probs(target: EnergyTarget, z: &Matrix) -> Result<Vec<f64>> {
    z.iter_rows().map(|r| target.log_unnorm(r)).collect()
}

fn gamma_terms(fixed: &GBNFModel, new: &FlowComponent, target: EnergyTarget, z: &Matrix) -> Result<GammaTerms> {
    Ok(GammaTerms {
        log_fixed: fixed.log_prob_batch(z)?,
        log_new: new.log_prob_batch(z)?,
        log_target: target_log_probs(target, z)?,
    })
}

/// Reverse-KL surrogate of `(1−ρ)G + ρg`, split into draws from `G` and from `g`.
fn blended_kl(rho: f64, from_fixed: &GammaTerms, from_new: &GammaTerms) -> Result<f64> {
    let mut v = 0.0;
    if rho < 1.0 {
        v += (1.0 - rho) * mean_gamma(rho, from_fixed)?;
    }
    if rho > 0.0 {
        v += rho * mean_gamma(rho, from_new)?;
    }
    Ok(v)
}

struct SampledGamma<'a> {
    fixed: &'a GBNFModel,
    new: &'a FlowComponent,
    target: EnergyTarget,
}

impl RhoObjective for SampledGamma<'_> {
    fn sample_fixed(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<GammaTerms> {
        let (z, _) = self.fixed.sample_mixture(n, rng)?;
        gamma_terms(self.fixed, self.new, self.target, &z)
    }

    fn sample_new(&mut self, n: usize, rng: &mut dyn RngCore) -> Result<GammaTerms> {
        let (z, _) = self.new.sample(n, rng)?;
        gamma_terms(self.fixed, self.new, self.target, &z)
    }
}

/// Chosen weight for a new component with the losses around it.
struct RhoChoice {
    rho: f64,
    val_before: f64,
    val_after: f64,
    log_partition: Option<LogPartition>,
    converged: Option<bool>,
}

fn choose_rho(
    cfg: &TrainConfig,
    problem: &Problem,
    fixed: &GBNFModel,
    new: &FlowComponent,
    stage: usize,
) -> Result<RhoChoice> {
    let seed = cfg.run.seed;
    let grid = cfg.boost.grid_size;
    match (problem, fixed.mode()) {
        (Problem::Estimation { val, .. }, MixtureMode::Additive) => {
            let mut full = fixed.clone();
            full.append_component(new.clone(), 0.0)?;
            let lps = full.component_log_probs(val)?;
            let search = rho_line_search(grid, &[], |r| {
                let mut w: Vec<f64> = fixed.weights().iter().map(|w| w * (1.0 - r)).collect();
                w.push(r);
                let log_w: Vec<f64> = w.iter().map(|w| w.ln()).collect();
                let lp = mix_rows(&lps, &log_w)?;
                Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
            })?;
            Ok(RhoChoice {
                rho: search.rho,
                val_before: search.loss_at_zero,
                val_after: search.loss,
                log_partition: None,
                converged: None,
            })
        }
        (Problem::Estimation { val, .. }, MixtureMode::Multiplicative) => {
            let mut full = fixed.clone();
            full.append_component(new.clone(), 0.0)?;
            let mut rng = derived_rng(seed, Purpose::Partition, stage as u64);
            let sampler = PartitionSampler::new(&full, cfg.boost.partition_samples, &mut rng)?;
            let lps = full.component_log_probs(val)?;
            let rho_with = |r: f64| {
                let mut rho = fixed.rho().to_vec();
                rho.push(r);
                rho
            };
            let previous = fixed
                .log_partition()
                .ok_or_else(|| Error::State("previous stage has no partition estimate".into()))?;
            // ρ = 0 is the previous model, whose estimate is already known
            let partition = |r: f64| -> Result<LogPartition> {
                if r == 0.0 {
                    Ok(previous)
                } else {
                    sampler.log_partition(&rho_with(r))
                }
            };
            let search = rho_line_search(grid, &[], |r| {
                let rho = rho_with(r);
                let gamma = partition(r)?.value;
                let total: f64 = lps
                    .iter_rows()
                    .map(|row| row.iter().zip(&rho).filter(|(_, p)| **p != 0.0).map(|(l, p)| l * p).sum::<f64>())
                    .sum();
                Ok(gamma - total / lps.rows() as f64)
            })?;
            Ok(RhoChoice {
                rho: search.rho,
                val_before: search.loss_at_zero,
                val_after: search.loss,
                log_partition: Some(partition(search.rho)?),
                converged: None,
            })
        }
        (Problem::Matching { target, .. }, _) => {
            let n = cfg.train.val_mc;
            let mut vrng = derived_rng(seed, Purpose::Validation, stage as u64);
            let (zf, _) = fixed.sample_mixture(n, &mut vrng)?;
            let (zn, _) = new.sample(n, &mut vrng)?;
            let from_fixed = gamma_terms(fixed, new, *target, &zf)?;
            let from_new = gamma_terms(fixed, new, *target, &zn)?;
            let loss = |r: f64| blended_kl(r, &from_fixed, &from_new);
            match cfg.rho_strategy() {
                RhoStrategy::Grid => {
                    let search = rho_line_search(grid, &[], loss)?;
                    Ok(RhoChoice {
                        rho: search.rho,
                        val_before: search.loss_at_zero,
                        val_after: search.loss,
                        log_partition: None,
                        converged: None,
                    })
                }
                RhoStrategy::Sgd => {
                    let b = &cfg.boost;
                    let sgd_cfg = RhoSgdConfig {
                        step: b.sgd_step,
                        tolerance: b.sgd_tolerance,
                        max_iters: b.sgd_max_iters,
                        decay: b.sgd_decay,
                        batch: b.sgd_batch,
                        total_components: b.components,
                    };
                    let mut objective = SampledGamma {
                        fixed,
                        new,
                        target: *target,
                    };
                    let mut rng = derived_rng(seed, Purpose::Rho, stage as u64);
                    let sgd = rho_sgd(&mut objective, &sgd_cfg, &mut rng)?;
                    Ok(RhoChoice {
                        rho: sgd.rho,
                        val_before: loss(0.0)?,
                        val_after: loss(sgd.rho)?,
                        log_partition: None,
                        converged: Some(sgd.converged),
                    })
                }
            }
        }
    }
}

/// Validation loss of a single first-stage component.
fn first_stage_loss(problem: &Problem, model: &GBNFModel) -> Result<f64> {
    match problem {
        Problem::Estimation { val, .. } => nll_loss(model, val),
        Problem::Matching { target, val_z0, .. } => {
            let comp = &model.components()[0];
            let (z, logdet) = comp.forward_batch(val_z0)?;
            let lt = target_log_probs(*target, &z)?;
            let mut total = 0.0;
            for (i, row0) in val_z0.iter_rows().enumerate() {
                total += crate::flows::std_normal_log_prob(row0) - logdet[i] - lt[i];
            }
            Ok(total / val_z0.rows() as f64)
        }
    }
}

fn record(stage: usize, rho: f64, trace: StageTrace) -> StageRecord {
    StageRecord {
        stage,
        rho,
        val_before: None,
        val_after: trace.best_val,
        steps: trace.steps_run,
        stopped_early: trace.stopped_early,
        trace: trace.epochs,
        log_partition: None,
        geometric_bound: None,
        kl_ratio: None,
        rho_converged: None,
        resample_ess: trace.resample_ess,
    }
}

/// Fit `C` components stagewise, then run the configured fine-tuning passes.
/// `observer` sees the model and record after every stage.
pub fn run_boosting<F>(cfg: &TrainConfig, problem: &Problem, mut observer: F) -> Result<BoostingRun>
where
    F: FnMut(&GBNFModel, &StageRecord) -> Result<()>,
{
    cfg.validate()?;
    if cfg.task() != problem.task() {
        return Err(Error::config("data.kind", "problem does not match the configured task"));
    }
    let log_z = match problem {
        Problem::Matching { log_z, .. } => Some(*log_z),
        Problem::Estimation { .. } => None,
    };
    let mut model = GBNFModel::new(cfg.mode());
    let mut stages: Vec<StageRecord> = Vec::new();
    for stage in 1..=cfg.boost.components {
        let fixed = (stage > 1).then_some(&model);
        let (component, trace) = train_stage(cfg, problem, fixed, stage)?;
        let rec = if stage == 1 {
            model.append_component(component, 1.0)?;
            if model.mode() == MixtureMode::Multiplicative {
                // a single normalized component with exponent 1
                model.set_log_partition(LogPartition { value: 0.0, stderr: 0.0 })?;
            }
            let mut rec = record(stage, 1.0, trace);
            rec.val_after = first_stage_loss(problem, &model)?;
            rec.log_partition = model.log_partition();
            rec
        } else {
            let choice = choose_rho(cfg, problem, &model, &component, stage)?;
            model.append_component(component, choice.rho)?;
            if let Some(lp) = choice.log_partition {
                model.set_log_partition(lp)?;
            }
            let mut rec = record(stage, choice.rho, trace);
            rec.val_before = Some(choice.val_before);
            rec.val_after = choice.val_after;
            rec.log_partition = choice.log_partition;
            rec.geometric_bound = Some(1.0 - choice.rho);
            rec.rho_converged = choice.converged;
            if let (Some(lz), Some(prev)) = (log_z, stages.last()) {
                rec.kl_ratio = Some((rec.val_after + lz) / (prev.val_after + lz));
            }
            rec
        };
        observer(&model, &rec)?;
        stages.push(rec);
    }
    let mut steps = Vec::new();
    if cfg.boost.fine_tune_passes > 0 && model.len() >= 2 {
        let mut refitter = Refitter {
            cfg,
            problem,
            calls: 0,
        };
        steps = fine_tune(
            &mut model,
            cfg.boost.fine_tune_passes,
            cfg.boost.fine_tune_epochs,
            cfg.boost.grid_size,
            &mut refitter,
        )?;
    }
    Ok(BoostingRun {
        model,
        stages,
        fine_tune: steps,
    })
}

/// Fine-tuning hooks backed by the stage trainer.
struct Refitter<'a> {
    cfg: &'a TrainConfig,
    problem: &'a Problem,
    calls: u64,
}

impl ComponentRefit for Refitter<'_> {
    fn refit(&mut self, rest: &GBNFModel, current: &FlowComponent, _index: usize, epochs: usize) -> Result<FlowComponent> {
        self.calls += 1;
        let (comp, _) = refit_component(self.cfg, self.problem, rest, current, epochs, self.calls)?;
        Ok(comp)
    }

    fn validation_loss(&mut self, model: &GBNFModel) -> Result<f64> {
        validation_loss(self.cfg, self.problem, model)
    }
}
