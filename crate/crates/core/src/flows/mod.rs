//! Affine coupling flows over a standard-normal base.

mod component;
mod coupling;

pub use component::{std_normal_log_prob, tape_std_normal_log_prob, FlowArchitecture, FlowComponent};
pub use coupling::CouplingLayer;
