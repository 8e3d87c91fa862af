use crate::diffcore::{mlp_forward_into, mlp_tape, MlpSpec, ParamSlot, ParamSource, Tape, Var};
use crate::error::{Error, Result};

pub(crate) const SLOT_NAMES: [&str; 9] = [
    "scale.W1",
    "scale.b1",
    "scale.W2",
    "scale.b2",
    "scale.gate",
    "shift.W1",
    "shift.b1",
    "shift.W2",
    "shift.b2",
];

/// Affine coupling layer.
///
/// Pass-through coordinates are copied; the others are mapped by
/// `x_t = z_t ⊙ exp(s(z_p)) + t(z_p)` with `s = gate · tanh(S(z_p))`.
/// Parameters live in the owning component's flat vector starting at `offset`,
/// in the order scale `W1, b1, W2, b2, gate`, then shift `W1, b1, W2, b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    index: usize,
    dim: usize,
    pass: Vec<usize>,
    transform: Vec<usize>,
    scale: MlpSpec,
    shift: MlpSpec,
    offset: usize,
}

impl CouplingLayer {
    /// Layer `index` of a flow over `dim` coordinates. Even layers pass the
    /// even coordinates through; odd layers pass the odd ones.
    pub(crate) fn new(index: usize, dim: usize, hidden: usize, offset: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::shape(format!("coupling layers need dim >= 2, got {dim}")));
        }
        let parity = index % 2;
        let (pass, transform): (Vec<usize>, Vec<usize>) =
            (0..dim).partition(|c| c % 2 == parity);
        let scale = MlpSpec {
            input: pass.len(),
            hidden,
            output: transform.len(),
        };
        Ok(Self {
            index,
            dim,
            pass,
            transform,
            scale,
            shift: scale,
            offset,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `true` for pass-through coordinates.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim];
        for &c in &self.pass {
            m[c] = true;
        }
        m
    }

    pub fn passthrough(&self) -> &[usize] {
        &self.pass
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transform
    }

    pub fn n_params(&self) -> usize {
        self.scale.n_params() + 1 + self.shift.n_params()
    }

    fn scale_offset(&self) -> usize {
        self.offset
    }

    fn gate_offset(&self) -> usize {
        self.offset + self.scale.n_params()
    }

    fn shift_offset(&self) -> usize {
        self.gate_offset() + 1
    }

    pub(crate) fn slots(&self) -> Vec<ParamSlot> {
        let mut slots = Vec::with_capacity(SLOT_NAMES.len());
        let mut offset = self.offset;
        let mut push = |name, rows, cols| {
            slots.push(ParamSlot {
                layer: self.index,
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        for (net, prefix) in [(&self.scale, 0), (&self.shift, 5)] {
            push(SLOT_NAMES[prefix], net.hidden, net.input);
            push(SLOT_NAMES[prefix + 1], 1, net.hidden);
            push(SLOT_NAMES[prefix + 2], net.output, net.hidden);
            push(SLOT_NAMES[prefix + 3], 1, net.output);
            if prefix == 0 {
                push(SLOT_NAMES[4], 1, 1);
            }
        }
        slots
    }

    pub(crate) fn scale_spec(&self) -> &MlpSpec {
        &self.scale
    }

    /// Scale and shift for the transformed coordinates given the pass-through
    /// values of `point`. Writes into `s` and `t`.
    fn conditioner(&self, params: &[f64], point: &[f64], buf: &mut Scratch, s: &mut [f64], t: &mut [f64]) {
        buf.cond.clear();
        buf.cond.extend(self.pass.iter().map(|&c| point[c]));
        let scale_params = &params[self.scale_offset()..self.gate_offset()];
        mlp_forward_into(scale_params, &self.scale, &buf.cond, s);
        let gate = params[self.gate_offset()];
        for v in s.iter_mut() {
            *v = gate * v.tanh();
        }
        let shift_params = &params[self.shift_offset()..self.shift_offset() + self.shift.n_params()];
        mlp_forward_into(shift_params, &self.shift, &buf.cond, t);
    }

    /// In-place forward map of one point; returns the log-determinant.
    pub(crate) fn forward_in_place(&self, params: &[f64], z: &mut [f64], buf: &mut Scratch) -> f64 {
        let (mut s, mut t) = buf.take_st(self.transform.len());
        self.conditioner(params, z, buf, &mut s, &mut t);
        let mut logdet = 0.0;
        for (j, &c) in self.transform.iter().enumerate() {
            z[c] = z[c] * s[j].exp() + t[j];
            logdet += s[j];
        }
        buf.give_st(s, t);
        logdet
    }

    /// In-place inverse map of one point; returns the inverse log-determinant.
    pub(crate) fn inverse_in_place(&self, params: &[f64], x: &mut [f64], buf: &mut Scratch) -> f64 {
        let (mut s, mut t) = buf.take_st(self.transform.len());
        self.conditioner(params, x, buf, &mut s, &mut t);
        let mut logdet = 0.0;
        for (j, &c) in self.transform.iter().enumerate() {
            x[c] = (x[c] - t[j]) * (-s[j]).exp();
            logdet -= s[j];
        }
        buf.give_st(s, t);
        logdet
    }

    /// Forward map of one point: `(z', log|det ∂z'/∂z|)`.
    pub fn forward(&self, params: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(params, z)?;
        let mut out = z.to_vec();
        let logdet = self.forward_in_place(params, &mut out, &mut Scratch::default());
        finite("coupling forward", &out, logdet)?;
        Ok((out, logdet))
    }

    /// Exact inverse of [`forward`](Self::forward): `(z, log|det ∂z/∂x|)`.
    pub fn inverse(&self, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(params, x)?;
        let mut out = x.to_vec();
        let logdet = self.inverse_in_place(params, &mut out, &mut Scratch::default());
        finite("coupling inverse", &out, logdet)?;
        Ok((out, logdet))
    }

    fn check(&self, params: &[f64], point: &[f64]) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::shape(format!(
                "point has {} coordinates, layer expects {}",
                point.len(),
                self.dim
            )));
        }
        if params.len() < self.offset + self.n_params() {
            return Err(Error::shape("parameter vector too short for layer"));
        }
        Ok(())
    }

    fn tape_conditioner(&self, tape: &mut Tape<'_>, src: ParamSource<'_>, pass: Var) -> Result<(Var, Var)> {
        let raw = mlp_tape(tape, src, self.scale_offset(), &self.scale, pass)?;
        let squashed = tape.tanh(raw)?;
        let gate = src.leaf(tape, self.gate_offset(), 1, 1)?;
        let s = tape.mul(squashed, gate)?;
        let t = mlp_tape(tape, src, self.shift_offset(), &self.shift, pass)?;
        Ok((s, t))
    }

    /// Graph forward over a batch `z: n×dim`; returns `(z', logdet: n×1)`.
    pub fn tape_forward(&self, tape: &mut Tape<'_>, src: ParamSource<'_>, z: Var) -> Result<(Var, Var)> {
        let zp = tape.select_cols(z, &self.pass)?;
        let zt = tape.select_cols(z, &self.transform)?;
        let (s, t) = self.tape_conditioner(tape, src, zp)?;
        let es = tape.exp(s)?;
        let scaled = tape.mul(zt, es)?;
        let xt = tape.add(scaled, t)?;
        let out = tape.scatter_cols(&[(zp, &self.pass), (xt, &self.transform)], self.dim)?;
        let logdet = tape.sum_cols(s)?;
        Ok((out, logdet))
    }

    /// Graph inverse over a batch `x: n×dim`; returns `(z, logdet_inv: n×1)`.
    pub fn tape_inverse(&self, tape: &mut Tape<'_>, src: ParamSource<'_>, x: Var) -> Result<(Var, Var)> {
        let xp = tape.select_cols(x, &self.pass)?;
        let xt = tape.select_cols(x, &self.transform)?;
        let (s, t) = self.tape_conditioner(tape, src, xp)?;
        let centered = tape.sub(xt, t)?;
        let neg_s = tape.neg(s)?;
        let ens = tape.exp(neg_s)?;
        let zt = tape.mul(centered, ens)?;
        let out = tape.scatter_cols(&[(xp, &self.pass), (zt, &self.transform)], self.dim)?;
        let logdet = tape.sum_cols(neg_s)?;
        Ok((out, logdet))
    }
}

fn finite(what: &str, v: &[f64], logdet: f64) -> Result<()> {
    if logdet.is_finite() && v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced a non-finite value")))
    }
}

/// Reusable buffers for the per-point fast path.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    cond: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
}

impl Scratch {
    fn take_st(&mut self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut s = std::mem::take(&mut self.s);
        let mut t = std::mem::take(&mut self.t);
        s.resize(n, 0.0);
        t.resize(n, 0.0);
        (s, t)
    }

    fn give_st(&mut self, s: Vec<f64>, t: Vec<f64>) {
        self.s = s;
        self.t = t;
    }
}
