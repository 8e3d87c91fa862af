//! Boosted mixtures of flow components: density evaluation, partition
//! estimation, weight selection, sampling and fine-tuning.

mod finetune;
mod model;
mod partition;
mod rho;

pub use finetune::{fine_tune, ComponentRefit, FineTuneStep};
pub use model::{rho_from_weights, weights_from_rho, GBNFModel, LogPartition, MixtureMode};
pub use partition::{
    estimate_log_partition, log_mean_exp, recursion_check, refresh_log_partition, PartitionSampler,
    RecursionCheck, MIN_ESS, MIN_PARTITION_SAMPLES,
};
pub(crate) use model::mix_rows;
pub(crate) use rho::mean_gamma;
pub use rho::{rho_grid, rho_line_search, rho_sgd, GammaTerms, LineSearch, RhoObjective, RhoSgd, RhoSgdConfig};
