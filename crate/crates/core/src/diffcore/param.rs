use crate::error::{Error, Result};

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    /// Coupling-layer index the tensor belongs to.
    pub layer: usize,
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage addressed through a layout of named slots.
///
/// The layout is validated on construction: slots are disjoint and tile the
/// value vector exactly, and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamSlot>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<ParamSlot>) -> Result<Self> {
        check_layout(&layout, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<ParamSlot>) -> Result<Self> {
        let len = layout.iter().map(ParamSlot::len).sum();
        Self::new(vec![0.0; len], layout)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn slot(&self, layer: usize, name: &str) -> Option<&ParamSlot> {
        self.layout
            .iter()
            .find(|s| s.layer == layer && s.name == name)
    }

    pub fn slice(&self, slot: &ParamSlot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn slice_mut(&mut self, slot: &ParamSlot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    /// Replace all values; the layout is kept.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Mutable access for optimizers. Callers must keep values finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

fn check_layout(layout: &[ParamSlot], len: usize) -> Result<()> {
    let mut spans: Vec<(usize, usize)> = layout.iter().map(|s| (s.offset, s.len())).collect();
    spans.sort_unstable();
    let mut cursor = 0;
    for (offset, n) in spans {
        if offset != cursor {
            return Err(Error::shape(format!(
                "layout gap or overlap at offset {offset} (expected {cursor})"
            )));
        }
        cursor += n;
    }
    if cursor != len {
        return Err(Error::shape(format!(
            "layout covers {cursor} values but vector has {len}"
        )));
    }
    Ok(())
}
