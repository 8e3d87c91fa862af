use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::diffcore::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};

/// Unnormalized 2D log-densities `log p̃(z) = −U(z)`.
///
/// With `w1 = sin(πz₁/2)`, `w2 = 3·exp(−½((z₁−1)/0.6)²)`, `w3 = 3·σ((z₁−1)/0.3)`:
///
/// | name | `U(z)` |
/// |------|--------|
/// | `u1` | `½((‖z‖−2)/0.4)² − log(e^{−½((z₁−2)/0.6)²} + e^{−½((z₁+2)/0.6)²})` |
/// | `u2` | `½((z₂−w1)/0.4)² + W(z₁)` |
/// | `u3` | `−log(e^{−½((z₂−w1)/0.35)²} + e^{−½((z₂−w1+w2)/0.35)²}) + W(z₁)` |
/// | `u4` | `−log(e^{−½((z₂−w1)/0.4)²} + e^{−½((z₂−w1+w3)/0.35)²}) + W(z₁)` |
///
/// `u2`–`u4` are flat along `z₁`, so they carry the confining wall
/// `W(z₁) = ½(sp(z₁−4)/0.4)² + ½(sp(−z₁−4)/0.4)²` with `sp(x) = log(1 + eˣ)`,
/// which is below `2e-3` on `[−4, 4]` and makes every target normalizable.
/// Every target satisfies `log p̃ ≤ log 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnergyTarget {
    U1,
    U2,
    U3,
    U4,
}

/// Upper bound on every target's log-density.
pub const ENERGY_LOG_UPPER_BOUND: f64 = std::f64::consts::LN_2;

const WALL_EDGE: f64 = 4.0;
const WALL_WIDTH: f64 = 0.4;

fn softplus(x: f64) -> f64 {
    log_sum_exp(&[0.0, x])
}

fn sigmoid(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}

fn wall(z1: f64) -> f64 {
    let a = softplus(z1 - WALL_EDGE) / WALL_WIDTH;
    let b = softplus(-z1 - WALL_EDGE) / WALL_WIDTH;
    0.5 * (a * a + b * b)
}

fn half_sq(x: f64, s: f64) -> f64 {
    0.5 * (x / s).powi(2)
}

impl EnergyTarget {
    pub const ALL: [EnergyTarget; 4] = [EnergyTarget::U1, EnergyTarget::U2, EnergyTarget::U3, EnergyTarget::U4];

    pub fn name(self) -> &'static str {
        match self {
            EnergyTarget::U1 => "u1",
            EnergyTarget::U2 => "u2",
            EnergyTarget::U3 => "u3",
            EnergyTarget::U4 => "u4",
        }
    }

    /// Box used for density grids and for quadrature of `log Z`.
    pub fn bounding_box(self) -> [f64; 4] {
        [-6.0, 6.0, -6.0, 6.0]
    }

    /// `U(z)`.
    pub fn energy(self, z: &[f64]) -> Result<f64> {
        if z.len() != 2 || !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("energy targets take a finite 2D point, got {z:?}")));
        }
        let (z1, z2) = (z[0], z[1]);
        let w1 = (PI * z1 / 2.0).sin();
        let u = match self {
            EnergyTarget::U1 => {
                let r = (z1 * z1 + z2 * z2).sqrt();
                half_sq(r - 2.0, 0.4) - log_sum_exp(&[-half_sq(z1 - 2.0, 0.6), -half_sq(z1 + 2.0, 0.6)])
            }
            EnergyTarget::U2 => half_sq(z2 - w1, 0.4) + wall(z1),
            EnergyTarget::U3 => {
                let w2 = 3.0 * (-half_sq(z1 - 1.0, 0.6)).exp();
                -log_sum_exp(&[-half_sq(z2 - w1, 0.35), -half_sq(z2 - w1 + w2, 0.35)]) + wall(z1)
            }
            EnergyTarget::U4 => {
                let w3 = 3.0 * sigmoid((z1 - 1.0) / 0.3);
                -log_sum_exp(&[-half_sq(z2 - w1, 0.4), -half_sq(z2 - w1 + w3, 0.35)]) + wall(z1)
            }
        };
        if !u.is_finite() {
            return Err(Error::Numeric(format!("energy {} is not finite at {z:?}", self.name())));
        }
        Ok(u)
    }

    /// `log p̃(z) = −U(z)`.
    pub fn log_unnorm(self, z: &[f64]) -> Result<f64> {
        Ok(-self.energy(z)?)
    }

    /// Graph `log p̃` for a batch `z: n×2`, returning `n×1`.
    pub fn tape_log_unnorm(self, tape: &mut Tape<'_>, z: Var) -> Result<Var> {
        if tape.value(z).cols() != 2 {
            return Err(Error::shape("energy targets take 2 columns"));
        }
        let z1 = tape.select_cols(z, &[0])?;
        let z2 = tape.select_cols(z, &[1])?;
        let neg_u = match self {
            EnergyTarget::U1 => {
                let sq = tape.square(z)?;
                let r2 = tape.sum_cols(sq)?;
                let log_r2 = tape.log(r2)?;
                let half_log = tape.affine(log_r2, 0.5, 0.0)?;
                let r = tape.exp(half_log)?;
                let ring = neg_half_sq(tape, r, -2.0, 0.4)?;
                let a = neg_half_sq(tape, z1, -2.0, 0.6)?;
                let b = neg_half_sq(tape, z1, 2.0, 0.6)?;
                let lse = lse2(tape, a, b)?;
                tape.add(ring, lse)?
            }
            EnergyTarget::U2 => {
                let d = valley(tape, z1, z2)?;
                let core = neg_half_sq(tape, d, 0.0, 0.4)?;
                let w = tape_wall(tape, z1)?;
                tape.sub(core, w)?
            }
            EnergyTarget::U3 => {
                let d = valley(tape, z1, z2)?;
                let t = tape.affine(z1, 1.0, -1.0)?;
                let g = neg_half_sq(tape, t, 0.0, 0.6)?;
                let g = tape.exp(g)?;
                let w2 = tape.affine(g, 3.0, 0.0)?;
                let d2 = tape.add(d, w2)?;
                let a = neg_half_sq(tape, d, 0.0, 0.35)?;
                let b = neg_half_sq(tape, d2, 0.0, 0.35)?;
                let lse = lse2(tape, a, b)?;
                let w = tape_wall(tape, z1)?;
                tape.sub(lse, w)?
            }
            EnergyTarget::U4 => {
                let d = valley(tape, z1, z2)?;
                // 3σ(x) = 1.5·(1 + tanh(x/2)) with x = (z₁ − 1)/0.3
                let half = tape.affine(z1, 0.5 / 0.3, -0.5 / 0.3)?;
                let th = tape.tanh(half)?;
                let w3 = tape.affine(th, 1.5, 1.5)?;
                let d3 = tape.add(d, w3)?;
                let a = neg_half_sq(tape, d, 0.0, 0.4)?;
                let b = neg_half_sq(tape, d3, 0.0, 0.35)?;
                let lse = lse2(tape, a, b)?;
                let w = tape_wall(tape, z1)?;
                tape.sub(lse, w)?
            }
        };
        Ok(neg_u)
    }
}

/// `−½((x + shift)/scale)²`.
fn neg_half_sq(tape: &mut Tape<'_>, x: Var, shift: f64, scale: f64) -> Result<Var> {
    let t = tape.affine(x, 1.0 / scale, shift / scale)?;
    let sq = tape.square(t)?;
    tape.affine(sq, -0.5, 0.0)
}

fn lse2(tape: &mut Tape<'_>, a: Var, b: Var) -> Result<Var> {
    let ab = tape.concat_cols(&[a, b])?;
    tape.log_sum_exp(ab)
}

/// `z₂ − sin(πz₁/2)`.
fn valley(tape: &mut Tape<'_>, z1: Var, z2: Var) -> Result<Var> {
    let arg = tape.affine(z1, PI / 2.0, 0.0)?;
    let w1 = tape.sin(arg)?;
    tape.sub(z2, w1)
}

fn tape_softplus(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let zero = tape.affine(x, 0.0, 0.0)?;
    lse2(tape, zero, x)
}

fn tape_wall(tape: &mut Tape<'_>, z1: Var) -> Result<Var> {
    let right = tape.affine(z1, 1.0, -WALL_EDGE)?;
    let left = tape.affine(z1, -1.0, -WALL_EDGE)?;
    let a = tape_softplus(tape, right)?;
    let b = tape_softplus(tape, left)?;
    let a = neg_half_sq(tape, a, 0.0, WALL_WIDTH)?;
    let b = neg_half_sq(tape, b, 0.0, WALL_WIDTH)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

impl fmt::Display for EnergyTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnergyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u1" => Ok(EnergyTarget::U1),
            "u2" => Ok(EnergyTarget::U2),
            "u3" => Ok(EnergyTarget::U3),
            "u4" => Ok(EnergyTarget::U4),
            other => Err(Error::config("data.name", format!("unknown energy target `{other}`"))),
        }
    }
}
