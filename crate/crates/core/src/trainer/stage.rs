use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::config::{DataKind, DeObjective, FixedTermName, Schedule, Task, TrainConfig};
use super::optim::{adam_step, clip_global_norm, cosine_lr, AdamState};
use super::rng::{derived_rng, Purpose};
use crate::boost::GBNFModel;
use crate::diffcore::{evaluate, grad_scalar, Matrix, Tape};
use crate::error::{Error, Result};
use crate::flows::{FlowArchitecture, FlowComponent};
use crate::objectives::{
    additive_de_objective, boosted_reverse_kl_objective, compute_resample_weights, resample, reverse_kl_value,
    tape_nll, FixedTerm,
};
use crate::targets::{energy_log_normalizer, load_tabular, EnergyTarget, TabularOptions, ToySampler};

/// Quadrature resolution for energy normalizers.
const LOG_Z_RESOLUTION: usize = 400;

/// Data prepared for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Estimation {
        train: Matrix,
        val: Matrix,
        test: Matrix,
    },
    Matching {
        target: EnergyTarget,
        /// Fixed base draws for validation.
        val_z0: Matrix,
        /// `log ∫ p̃` by quadrature on the target's box.
        log_z: f64,
    },
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Matrix> {
    let data = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::new(n, d, data)
}

impl Problem {
    /// Build the data for `cfg`; relative tabular paths resolve against `base_dir`.
    pub fn prepare(cfg: &TrainConfig, base_dir: &Path) -> Result<Self> {
        let seed = cfg.run.seed;
        let d = &cfg.data;
        match d.kind {
            DataKind::Toy => {
                let sampler: ToySampler = d.name.as_deref().unwrap_or_default().parse()?;
                Ok(Problem::Estimation {
                    train: sampler.sample(d.n_train, &mut derived_rng(seed, Purpose::Data, 0))?,
                    val: sampler.sample(d.n_val, &mut derived_rng(seed, Purpose::Data, 1))?,
                    test: sampler.sample(d.n_test, &mut derived_rng(seed, Purpose::Data, 2))?,
                })
            }
            DataKind::Energy => {
                let target: EnergyTarget = d.name.as_deref().unwrap_or_default().parse()?;
                let val_z0 = standard_normal_matrix(cfg.train.val_mc, 2, &mut derived_rng(seed, Purpose::Validation, 0))?;
                Ok(Problem::Matching {
                    target,
                    val_z0,
                    log_z: energy_log_normalizer(target, LOG_Z_RESOLUTION)?,
                })
            }
            DataKind::Tabular => {
                let rel = d.path.as_ref().expect("validated");
                let path = if rel.is_absolute() { rel.clone() } else { base_dir.join(rel) };
                let ds = load_tabular(
                    &path,
                    &TabularOptions {
                        has_header: d.has_header,
                        split: d.split,
                        standardize: d.standardize,
                        seed,
                    },
                )
                .map_err(|e| match e {
                    Error::Io(io) => Error::config("data.path", format!("{}: {io}", path.display())),
                    other => other,
                })?;
                Ok(Problem::Estimation {
                    train: ds.train,
                    val: ds.val,
                    test: ds.test,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Estimation { train, .. } => train.cols(),
            Problem::Matching { .. } => 2,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Problem::Estimation { .. } => Task::DensityEstimation,
            Problem::Matching { .. } => Task::DensityMatching,
        }
    }
}

/// Summary of one validation epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTrace {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// What happened while training one component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTrace {
    pub epochs: Vec<EpochTrace>,
    pub steps_run: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    /// Effective sample size of the residual weights, when resampling.
    pub resample_ess: Option<f64>,
}

/// Loss surface for one component given the frozen rest of the model.
#[derive(Debug)]
enum StageLoss<'a> {
    /// Minibatches drawn from `train` with `weights`; validation uses the same
    /// weighting computed on `val`.
    Likelihood {
        train: &'a Matrix,
        weights: crate::objectives::ResampleWeights,
        val: &'a Matrix,
        val_weights: Option<Vec<f64>>,
    },
    Functional {
        train: &'a Matrix,
        train_fixed: Vec<f64>,
        val: &'a Matrix,
        val_fixed: Vec<f64>,
        lambda: f64,
    },
    ReverseKl {
        target: EnergyTarget,
        fixed: Option<&'a GBNFModel>,
        single: bool,
        lambda: f64,
        n_mc: usize,
        val_z0: &'a Matrix,
    },
}

impl StageLoss<'_> {
    fn step(&self, component: &FlowComponent, batch_size: usize, rng: &mut impl Rng) -> Result<(f64, Vec<f64>)> {
        let params = component.params().values();
        let g = match self {
            StageLoss::Likelihood { train, weights, .. } => {
                let (batch, _) = resample(train, weights, batch_size, rng)?;
                grad_scalar(&|t: &mut Tape<'_>| tape_nll(t, component, true, &batch, None), params)?
            }
            StageLoss::Functional {
                train,
                train_fixed,
                lambda,
                ..
            } => {
                let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..train.rows())).collect();
                let batch = train.select_rows(&idx);
                let fixed: Vec<f64> = idx.iter().map(|&i| train_fixed[i]).collect();
                grad_scalar(
                    &|t: &mut Tape<'_>| additive_de_objective(t, component, true, &batch, &fixed, *lambda),
                    params,
                )?
            }
            StageLoss::ReverseKl {
                target,
                fixed,
                single,
                lambda,
                n_mc,
                ..
            } => {
                let z0 = standard_normal_matrix(*n_mc, component.dim(), rng)?;
                let fixed = match fixed {
                    Some(m) if *single => {
                        let j = rand::distr::weighted::WeightedIndex::new(m.weights())
                            .map_err(|e| Error::Domain(e.to_string()))?
                            .sample(rng);
                        Some((*m, FixedTerm::SingleComponent(j)))
                    }
                    Some(m) => Some((*m, FixedTerm::Exact)),
                    None => None,
                };
                grad_scalar(
                    &|t: &mut Tape<'_>| boosted_reverse_kl_objective(t, component, true, fixed, *target, *lambda, &z0),
                    params,
                )?
            }
        };
        Ok((g.loss, g.gradient))
    }

    fn validate(&self, component: &FlowComponent) -> Result<f64> {
        match self {
            StageLoss::Likelihood { val, val_weights, .. } => {
                let lps = component.log_prob_batch(val)?;
                Ok(match val_weights {
                    None => -lps.iter().sum::<f64>() / lps.len() as f64,
                    Some(w) => -lps.iter().zip(w).map(|(l, w)| l * w).sum::<f64>(),
                })
            }
            StageLoss::Functional {
                val, val_fixed, lambda, ..
            } => evaluate(
                &|t: &mut Tape<'_>| additive_de_objective(t, component, true, val, val_fixed, *lambda),
                component.params().values(),
            ),
            StageLoss::ReverseKl {
                target,
                fixed,
                lambda,
                val_z0,
                ..
            } => reverse_kl_value(component, *fixed, *target, *lambda, val_z0),
        }
    }

    fn resample_ess(&self) -> Option<f64> {
        match self {
            StageLoss::Likelihood { weights, .. } => Some(weights.ess()),
            _ => None,
        }
    }
}

/// Optimizer settings for one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOptions {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub max_steps: usize,
    pub steps_per_epoch: usize,
    pub patience: usize,
    pub clip_norm: f64,
}

impl StageOptions {
    pub fn from_config(cfg: &TrainConfig, problem: &Problem) -> Self {
        let t = &cfg.train;
        let steps_per_epoch = t.steps_per_epoch.unwrap_or(match problem {
            Problem::Estimation { train, .. } => train.rows().div_ceil(t.batch_size).max(1),
            Problem::Matching { .. } => 100,
        });
        Self {
            learning_rate: t.learning_rate,
            schedule: t.schedule,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            steps_per_epoch,
            patience: t.patience,
            clip_norm: t.clip_norm,
        }
    }
}

fn build_loss<'a>(
    cfg: &TrainConfig,
    problem: &'a Problem,
    fixed: Option<&'a GBNFModel>,
    boosted: bool,
) -> Result<StageLoss<'a>> {
    match problem {
        Problem::Estimation { train, val, .. } => {
            let fixed = fixed.filter(|_| boosted);
            match (fixed, cfg.de_objective()) {
                (Some(model), DeObjective::Additive) => Ok(StageLoss::Functional {
                    train,
                    train_fixed: model.log_prob_batch(train)?,
                    val,
                    val_fixed: model.log_prob_batch(val)?,
                    lambda: cfg.lambda(),
                }),
                (fixed, _) => {
                    let weights = compute_resample_weights(fixed, train, cfg.boost.beta)?;
                    let val_weights = match fixed {
                        Some(_) => Some(compute_resample_weights(fixed, val, cfg.boost.beta)?.weights().to_vec()),
                        None => None,
                    };
                    Ok(StageLoss::Likelihood {
                        train,
                        weights,
                        val,
                        val_weights,
                    })
                }
            }
        }
        Problem::Matching { target, val_z0, .. } => Ok(StageLoss::ReverseKl {
            target: *target,
            fixed: fixed.filter(|_| boosted),
            single: cfg.boost.fixed_term == FixedTermName::Single,
            // the first component is fit with the plain reverse KL
            lambda: if boosted { cfg.lambda() } else { 1.0 },
            n_mc: cfg.train.n_mc,
            val_z0,
        }),
    }
}

/// Run the optimizer on `component` against `loss`, keeping the parameters
/// with the best validation loss.
fn optimize<R: Rng>(
    mut component: FlowComponent,
    loss: &StageLoss<'_>,
    opts: &StageOptions,
    stage: usize,
    rng: &mut R,
) -> Result<(FlowComponent, StageTrace)> {
    let diverged = |step: usize, message: String| Error::Divergence { stage, step, message };
    let mut best_val = loss.validate(&component).map_err(|e| diverged(0, e.to_string()))?;
    let mut best = component.params().values().to_vec();
    let mut state = AdamState::new(best.len());
    let mut epochs = Vec::new();
    let (mut since_best, mut acc, mut acc_n) = (0usize, 0.0, 0usize);
    let mut steps_run = 0;
    let mut stopped_early = false;
    for step in 0..opts.max_steps {
        let lr = match opts.schedule {
            Schedule::Constant => opts.learning_rate,
            Schedule::Cosine => cosine_lr(step, opts.max_steps, opts.learning_rate),
        };
        let (value, mut grad) = loss
            .step(&component, opts.batch_size, rng)
            .map_err(|e| diverged(step, e.to_string()))?;
        if !value.is_finite() {
            return Err(diverged(step, "non-finite training loss".into()));
        }
        clip_global_norm(&mut grad, opts.clip_norm);
        // the final cosine step has zero rate
        if lr > 0.0 {
            adam_step(component.params_mut().values_mut(), &grad, &mut state, lr)
                .map_err(|e| diverged(step, e.to_string()))?;
        }
        acc += value;
        acc_n += 1;
        steps_run = step + 1;
        if steps_run % opts.steps_per_epoch == 0 || steps_run == opts.max_steps {
            let val = match loss.validate(&component) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Numeric(_)) | Err(Error::NumericOverflow { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            epochs.push(EpochTrace {
                step: steps_run,
                train_loss: acc / acc_n as f64,
                val_loss: val,
            });
            (acc, acc_n) = (0.0, 0);
            if val < best_val {
                best_val = val;
                best.copy_from_slice(component.params().values());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= opts.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    component.params_mut().set_values(&best)?;
    Ok((
        component,
        StageTrace {
            epochs,
            steps_run,
            best_val,
            stopped_early,
            resample_ess: loss.resample_ess(),
        },
    ))
}

pub fn architecture(cfg: &TrainConfig, dim: usize) -> FlowArchitecture {
    FlowArchitecture {
        dim,
        steps: cfg.flow.steps,
        hidden: cfg.flow.hidden,
    }
}

/// Train the component for stage `stage` (1-based). `fixed` is the model of
/// the previous stages; stage 1 ignores it and fits the plain objective.
pub fn train_stage(
    cfg: &TrainConfig,
    problem: &Problem,
    fixed: Option<&GBNFModel>,
    stage: usize,
) -> Result<(FlowComponent, StageTrace)> {
    let seed = cfg.run.seed;
    let init = FlowComponent::new(architecture(cfg, problem.dim()), &mut derived_rng(seed, Purpose::Init, stage as u64))?;
    let boosted = stage > 1 && fixed.is_some();
    let loss = build_loss(cfg, problem, fixed, boosted)?;
    let opts = StageOptions::from_config(cfg, problem);
    optimize(init, &loss, &opts, stage, &mut derived_rng(seed, Purpose::Train, stage as u64))
}

/// Continue training `current` against the frozen `rest` for `epochs` epochs.
pub fn refit_component(
    cfg: &TrainConfig,
    problem: &Problem,
    rest: &GBNFModel,
    current: &FlowComponent,
    epochs: usize,
    stream: u64,
) -> Result<(FlowComponent, StageTrace)> {
    let loss = build_loss(cfg, problem, Some(rest), true)?;
    let mut opts = StageOptions::from_config(cfg, problem);
    opts.max_steps = epochs * opts.steps_per_epoch;
    optimize(
        current.clone(),
        &loss,
        &opts,
        0,
        &mut derived_rng(cfg.run.seed, Purpose::FineTune, stream),
    )
}
