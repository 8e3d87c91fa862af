use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Single-hidden-layer perceptron shape: `out = W2·tanh(W1·x + b1) + b2`.
///
/// Parameters are stored contiguously as `W1 (hidden×input)`, `b1 (hidden)`,
/// `W2 (output×hidden)`, `b2 (output)`, matrices row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpSpec {
    pub fn n_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    pub(crate) fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        [w1, b1, w2, b2]
    }
}

/// Where a block of weights comes from when building a graph.
#[derive(Debug, Clone, Copy)]
pub enum ParamSource<'a> {
    /// Read from the tape's own parameter vector and receive gradients.
    Tape,
    /// Frozen values entered as constants.
    Frozen(&'a [f64]),
}

impl ParamSource<'_> {
    pub fn leaf(&self, tape: &mut Tape<'_>, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        match self {
            ParamSource::Tape => tape.param_range(offset, rows, cols),
            ParamSource::Frozen(values) => {
                let end = offset + rows * cols;
                if end > values.len() {
                    return Err(Error::shape(format!(
                        "frozen range {offset}..{end} exceeds {} values",
                        values.len()
                    )));
                }
                tape.constant(Matrix::new(rows, cols, values[offset..end].to_vec())?)
            }
        }
    }
}

/// Plain evaluation for one input vector. `params` must hold exactly
/// `spec.n_params()` values.
pub fn mlp_forward(params: &[f64], spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    if params.len() != spec.n_params() {
        return Err(Error::shape(format!(
            "mlp expects {} parameters, got {}",
            spec.n_params(),
            params.len()
        )));
    }
    if input.len() != spec.input {
        return Err(Error::shape(format!(
            "mlp input width {} does not match {}",
            input.len(),
            spec.input
        )));
    }
    let mut out = vec![0.0; spec.output];
    mlp_forward_into(params, spec, input, &mut out);
    Ok(out)
}

/// Unchecked inner loop shared by the flow fast paths.
pub(crate) fn mlp_forward_into(params: &[f64], spec: &MlpSpec, input: &[f64], out: &mut [f64]) {
    let [w1, b1, w2, b2] = spec.offsets();
    out.copy_from_slice(&params[b2..b2 + spec.output]);
    for h in 0..spec.hidden {
        let row = &params[w1 + h * spec.input..w1 + (h + 1) * spec.input];
        let mut a = params[b1 + h];
        for (w, x) in row.iter().zip(input) {
            a += w * x;
        }
        let a = a.tanh();
        for (o, y) in out.iter_mut().enumerate() {
            *y += params[w2 + o * spec.hidden + h] * a;
        }
    }
}

/// Graph version over a batch `input: n×spec.input`; weights start at `offset`
/// within `source`.
pub fn mlp_tape(
    tape: &mut Tape<'_>,
    source: ParamSource<'_>,
    offset: usize,
    spec: &MlpSpec,
    input: Var,
) -> Result<Var> {
    let [w1, b1, w2, b2] = spec.offsets();
    let w1 = source.leaf(tape, offset + w1, spec.hidden, spec.input)?;
    let b1 = source.leaf(tape, offset + b1, 1, spec.hidden)?;
    let w2 = source.leaf(tape, offset + w2, spec.output, spec.hidden)?;
    let b2 = source.leaf(tape, offset + b2, 1, spec.output)?;
    let pre = tape.matvec(input, w1)?;
    let pre = tape.add(pre, b1)?;
    let hidden = tape.tanh(pre)?;
    let out = tape.matvec(hidden, w2)?;
    tape.add(out, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec {
            input: 3,
            hidden: 5,
            output: 2,
        };
        let params = vec![0.0; spec.n_params()];
        assert_eq!(mlp_forward(&params, &spec, &[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_input_with_zero_b1_returns_b2() {
        let spec = MlpSpec {
            input: 2,
            hidden: 2,
            output: 2,
        };
        let [w1, _, _, b2] = spec.offsets();
        let mut params = vec![0.0; spec.n_params()];
        // W1 = 0.01·I, W2 arbitrary
        params[w1] = 0.01;
        params[w1 + 3] = 0.01;
        for v in &mut params[spec.offsets()[2]..b2] {
            *v = 0.7;
        }
        params[b2] = 1.5;
        params[b2 + 1] = -0.25;
        assert_eq!(mlp_forward(&params, &spec, &[0.0, 0.0]).unwrap(), vec![1.5, -0.25]);
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec {
            input: 2,
            hidden: 1,
            output: 1,
        };
        let params = vec![0.0; spec.n_params()];
        assert!(mlp_forward(&params, &spec, &[1.0]).is_err());
        assert!(mlp_forward(&params[1..], &spec, &[1.0, 2.0]).is_err());
    }
}
