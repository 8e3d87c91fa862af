use std::str::FromStr;

use crate::diffcore::{log_sum_exp, Matrix};
use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        let ok = [x0, x1, y0, y1].iter().all(|v| v.is_finite()) && x0 < x1 && y0 < y1;
        if !ok {
            return Err(Error::Domain(format!("invalid bounding box {x0},{x1},{y0},{y1}")));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn from_array(b: [f64; 4]) -> Result<Self> {
        Self::new(b[0], b[1], b[2], b[3])
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// `"x0,x1,y0,y1"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config("bbox", format!("`{s}` is not four comma-separated numbers")))?;
        match parts.as_slice() {
            [a, b, c, d] => Self::new(*a, *b, *c, *d).map_err(|e| Error::config("bbox", e.to_string())),
            _ => Err(Error::config("bbox", format!("`{s}` is not four comma-separated numbers"))),
        }
    }
}

/// `res × res` cells over a box. Rows run from the top (largest `y`) down,
/// columns from left to right; points are cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    bbox: BoundingBox,
    res: usize,
}

impl Grid {
    pub fn new(bbox: BoundingBox, res: usize) -> Result<Self> {
        if res < 2 {
            return Err(Error::config("res", format!("grid resolution must be >= 2, got {res}")));
        }
        Ok(Self { bbox, res })
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    fn step(&self) -> (f64, f64) {
        let n = self.res as f64;
        ((self.bbox.x1 - self.bbox.x0) / n, (self.bbox.y1 - self.bbox.y0) / n)
    }

    pub fn cell_area(&self) -> f64 {
        let (dx, dy) = self.step();
        dx * dy
    }

    /// All `res²` cell centers in image order.
    pub fn centers(&self) -> Matrix {
        let (dx, dy) = self.step();
        let mut data = Vec::with_capacity(2 * self.res * self.res);
        for i in 0..self.res {
            let y = self.bbox.y1 - (i as f64 + 0.5) * dy;
            for j in 0..self.res {
                data.push(self.bbox.x0 + (j as f64 + 0.5) * dx);
                data.push(y);
            }
        }
        Matrix::new(self.res * self.res, 2, data).expect("grid shape")
    }
}

/// `log Σ_i exp(v_i)·area`, the midpoint-rule log-integral of cell values.
pub fn log_integral(log_values: &[f64], cell_area: f64) -> f64 {
    log_sum_exp(log_values) + cell_area.ln()
}
