//! Data sources: 2D toy samplers, unnormalized 2D energies, and numeric CSV tables.

mod energy;
mod grid;
mod tabular;
mod toy;

pub use energy::{EnergyTarget, ENERGY_LOG_UPPER_BOUND};
pub use grid::{log_integral, BoundingBox, Grid};
pub use tabular::{
    load_tabular, read_csv_matrix, split_counts, split_matrix, write_csv_matrix, TabularDataset, TabularOptions,
};
pub use toy::ToySampler;

use crate::error::Result;

/// Anything a run can be fitted to.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    /// Density estimation from a 2D generator.
    Toy(ToySampler),
    /// Density matching against an unnormalized 2D target.
    Energy(EnergyTarget),
    /// Density estimation on a table.
    Tabular(TabularDataset),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Toy(_) | Dataset::Energy(_) => 2,
            Dataset::Tabular(t) => t.dim(),
        }
    }
}

/// `log Z = log ∫ p̃` of an energy target by midpoint quadrature on its box.
pub fn energy_log_normalizer(target: EnergyTarget, resolution: usize) -> Result<f64> {
    let grid = Grid::new(BoundingBox::from_array(target.bounding_box())?, resolution)?;
    let values = grid
        .centers()
        .iter_rows()
        .map(|z| target.log_unnorm(z))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_integral(&values, grid.cell_area()))
}
