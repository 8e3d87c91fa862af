use super::model::{GBNFModel, MixtureMode};
use super::rho::rho_line_search;
use crate::error::{Error, Result};
use crate::flows::FlowComponent;

/// Retraining hooks used by [`fine_tune`].
pub trait ComponentRefit {
    /// Retrain `current` (which sat at position `index`) against the frozen
    /// mixture `rest` for `epochs` epochs and return the new parameters.
    fn refit(&mut self, rest: &GBNFModel, current: &FlowComponent, index: usize, epochs: usize) -> Result<FlowComponent>;

    /// Validation loss of a complete model.
    fn validation_loss(&mut self, model: &GBNFModel) -> Result<f64>;
}

/// Per-component outcome of one fine-tuning pass.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FineTuneStep {
    pub pass: usize,
    pub index: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub weight: f64,
    /// `true` when the retrained component lost to the original and was discarded.
    pub reverted: bool,
    /// `true` when the component held all the weight and could not be isolated.
    pub skipped: bool,
}

/// Sequentially retrain each component of an additive model against the
/// frozen mixture of the others, then re-choose its weight by line search
/// (the previous weight is always a candidate). A retrained component that
/// does not improve validation loss is discarded.
pub fn fine_tune<T: ComponentRefit + ?Sized>(
    model: &mut GBNFModel,
    passes: usize,
    epochs_per_component: usize,
    grid_size: usize,
    trainer: &mut T,
) -> Result<Vec<FineTuneStep>> {
    if model.mode() != MixtureMode::Additive {
        return Err(Error::UnsupportedMode {
            mode: model.mode().name(),
            what: "fine-tuning".into(),
        });
    }
    if model.len() < 2 {
        return Err(Error::Domain("fine-tuning needs at least two components".into()));
    }
    let mut steps = Vec::new();
    if passes == 0 || epochs_per_component == 0 {
        return Ok(steps);
    }
    for pass in 0..passes {
        for i in 0..model.len() {
            let loss_before = trainer.validation_loss(model)?;
            let w_prev = model.weights()[i];
            if w_prev >= 1.0 {
                steps.push(FineTuneStep {
                    pass,
                    index: i,
                    loss_before,
                    loss_after: loss_before,
                    weight: w_prev,
                    reverted: false,
                    skipped: true,
                });
                continue;
            }
            let rest = model.leave_one_out(i)?;
            let current = model.components()[i].clone();
            let refit = trainer.refit(&rest, &current, i, epochs_per_component)?;
            let search = rho_line_search(grid_size, &[w_prev], |r| {
                let candidate = GBNFModel::with_inserted(&rest, i, refit.clone(), r)?;
                trainer.validation_loss(&candidate)
            })?;
            let (loss_after, weight, reverted) = if search.loss <= loss_before {
                *model = GBNFModel::with_inserted(&rest, i, refit, search.rho)?;
                (search.loss, search.rho, false)
            } else {
                (loss_before, w_prev, true)
            };
            steps.push(FineTuneStep {
                pass,
                index: i,
                loss_before,
                loss_after,
                weight,
                reverted,
                skipped: false,
            });
        }
    }
    Ok(steps)
}
