use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::coupling::{CouplingLayer, Scratch};
use crate::diffcore::{Matrix, ParamSource, ParamVector, Tape, Var};
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log N(u; 0, I)`.
pub fn std_normal_log_prob(u: &[f64]) -> f64 {
    -(u.len() as f64) * HALF_LN_2PI - 0.5 * u.iter().map(|v| v * v).sum::<f64>()
}

/// Shape of one flow component.
///
/// A flow step is a pair of coupling layers with complementary masks, so every
/// coordinate is transformed once per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowArchitecture {
    pub dim: usize,
    /// Flow steps `K`.
    pub steps: usize,
    /// Hidden width of every scale and shift network.
    pub hidden: usize,
}

impl FlowArchitecture {
    pub fn n_layers(&self) -> usize {
        2 * self.steps
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("a flow needs at least one step".into()));
        }
        if self.dim < 2 {
            return Err(Error::Domain(format!("flow dimension must be >= 2, got {}", self.dim)));
        }
        Ok(())
    }

    fn layers(&self) -> Result<Vec<CouplingLayer>> {
        self.validate()?;
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.n_layers());
        for i in 0..self.n_layers() {
            let layer = CouplingLayer::new(i, self.dim, self.hidden, offset)?;
            offset += layer.n_params();
            layers.push(layer);
        }
        Ok(layers)
    }

    pub fn n_params(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(CouplingLayer::n_params).sum())
    }
}

/// One invertible coupling flow over a fixed standard-normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowComponent {
    arch: FlowArchitecture,
    layers: Vec<CouplingLayer>,
    params: ParamVector,
}

impl FlowComponent {
    /// Freshly initialized component that starts as the identity map: every
    /// scale gate and shift output layer is zero; the remaining weights are
    /// uniform in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(arch: FlowArchitecture, rng: &mut R) -> Result<Self> {
        let mut c = Self::zeros(arch)?;
        let slots = c.params.layout().to_vec();
        for slot in &slots {
            let fan_in = match slot.name {
                "scale.W1" | "shift.W1" => slot.cols,
                "scale.b1" | "shift.b1" => c.layers[slot.layer].scale_spec().input,
                "scale.W2" | "scale.b2" => c.layers[slot.layer].scale_spec().hidden,
                _ => continue,
            };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound)
                .map_err(|e| Error::Domain(e.to_string()))?;
            for v in c.params.slice_mut(slot) {
                *v = dist.sample(rng);
            }
        }
        Ok(c)
    }

    /// All parameters zero: the identity map.
    pub fn zeros(arch: FlowArchitecture) -> Result<Self> {
        let layers = arch.layers()?;
        let layout = layers.iter().flat_map(CouplingLayer::slots).collect();
        let params = ParamVector::zeros(layout)?;
        Ok(Self { arch, layers, params })
    }

    pub fn from_values(arch: FlowArchitecture, values: Vec<f64>) -> Result<Self> {
        let mut c = Self::zeros(arch)?;
        c.params.set_values(&values)?;
        Ok(c)
    }

    pub fn arch(&self) -> &FlowArchitecture {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::shape(format!(
                "point has {} coordinates, component expects {}",
                p.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn layer_forward(&self, k: usize, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.layer(k)?.forward(self.params.values(), z)
    }

    pub fn layer_inverse(&self, k: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.layer(k)?.inverse(self.params.values(), x)
    }

    fn layer(&self, k: usize) -> Result<&CouplingLayer> {
        self.layers
            .get(k)
            .ok_or_else(|| Error::shape(format!("layer {k} out of range ({})", self.layers.len())))
    }

    fn forward_in_place(&self, z: &mut [f64], buf: &mut Scratch) -> f64 {
        let p = self.params.values();
        self.layers.iter().map(|l| l.forward_in_place(p, z, buf)).sum()
    }

    fn inverse_in_place(&self, x: &mut [f64], buf: &mut Scratch) -> f64 {
        let p = self.params.values();
        self.layers.iter().rev().map(|l| l.inverse_in_place(p, x, buf)).sum()
    }

    /// `z0 → zK` with the summed log-determinant.
    pub fn forward(&self, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(z0)?;
        let mut z = z0.to_vec();
        let logdet = self.forward_in_place(&mut z, &mut Scratch::default());
        finite_point("forward", &z, logdet)?;
        Ok((z, logdet))
    }

    /// `x → z0` with the summed inverse log-determinant.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_point(x)?;
        let mut z = x.to_vec();
        let logdet = self.inverse_in_place(&mut z, &mut Scratch::default());
        finite_point("inverse", &z, logdet)?;
        Ok((z, logdet))
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (u, logdet) = self.inverse(x)?;
        Ok(std_normal_log_prob(&u) + logdet)
    }

    /// Log-density of every row of `x`.
    pub fn log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!(
                "batch has {} columns, component expects {}",
                x.cols(),
                self.dim()
            )));
        }
        let mut buf = Scratch::default();
        let mut work = vec![0.0; self.dim()];
        let mut out = Vec::with_capacity(x.rows());
        for row in x.iter_rows() {
            work.copy_from_slice(row);
            let logdet = self.inverse_in_place(&mut work, &mut buf);
            let lp = std_normal_log_prob(&work) + logdet;
            if !lp.is_finite() {
                return Err(Error::Numeric("component log-density is not finite".into()));
            }
            out.push(lp);
        }
        Ok(out)
    }

    /// Push base draws through the flow. Returns points and their log-densities.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Matrix, Vec<f64>)> {
        if n == 0 {
            return Err(Error::Domain("sample count must be >= 1".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut log_probs = Vec::with_capacity(n);
        let mut buf = Scratch::default();
        let mut z = vec![0.0; d];
        for _ in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let base = std_normal_log_prob(&z);
            let logdet = self.forward_in_place(&mut z, &mut buf);
            finite_point("sample", &z, logdet)?;
            data.extend_from_slice(&z);
            log_probs.push(base - logdet);
        }
        Ok((Matrix::new(n, d, data)?, log_probs))
    }

    /// Push given base points through the flow.
    pub fn forward_batch(&self, z0: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let mut out = z0.clone();
        let mut logdets = Vec::with_capacity(z0.rows());
        let mut buf = Scratch::default();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let logdet = self.forward_in_place(row, &mut buf);
            finite_point("forward", row, logdet)?;
            logdets.push(logdet);
        }
        Ok((out, logdets))
    }

    fn source(&self, trainable: bool) -> ParamSource<'_> {
        if trainable {
            ParamSource::Tape
        } else {
            ParamSource::Frozen(self.params.values())
        }
    }

    /// Graph forward `z0: n×d → (x: n×d, logdet: n×1)`. When `trainable` the
    /// tape's parameter vector is this component's layout.
    pub fn tape_forward(&self, tape: &mut Tape<'_>, trainable: bool, z0: Var) -> Result<(Var, Var)> {
        let src = self.source(trainable);
        let mut z = z0;
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let (next, ld) = layer.tape_forward(tape, src, z)?;
            z = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld)?,
                None => ld,
            });
        }
        Ok((z, total.expect("at least one layer")))
    }

    /// Graph inverse `x: n×d → (u: n×d, logdet_inv: n×1)`.
    pub fn tape_inverse(&self, tape: &mut Tape<'_>, trainable: bool, x: Var) -> Result<(Var, Var)> {
        let src = self.source(trainable);
        let mut u = x;
        let mut total: Option<Var> = None;
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.tape_inverse(tape, src, u)?;
            u = next;
            total = Some(match total {
                Some(t) => tape.add(t, ld)?,
                None => ld,
            });
        }
        Ok((u, total.expect("at least one layer")))
    }

    /// Graph log-density of each row of `x`, `n×1`.
    pub fn tape_log_prob(&self, tape: &mut Tape<'_>, trainable: bool, x: Var) -> Result<Var> {
        let (u, logdet) = self.tape_inverse(tape, trainable, x)?;
        let base = tape_std_normal_log_prob(tape, u)?;
        tape.add(base, logdet)
    }
}

/// Graph `log N(u; 0, I)` per row.
pub fn tape_std_normal_log_prob(tape: &mut Tape<'_>, u: Var) -> Result<Var> {
    let d = tape.value(u).cols() as f64;
    let sq = tape.square(u)?;
    let s = tape.sum_cols(sq)?;
    tape.affine(s, -0.5, -d * HALF_LN_2PI)
}

fn finite_point(what: &str, v: &[f64], logdet: f64) -> Result<()> {
    if logdet.is_finite() && v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("component {what} produced a non-finite value")))
    }
}
