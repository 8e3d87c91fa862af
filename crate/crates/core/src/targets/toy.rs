use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

/// Named 2D sample generators.
///
/// | name           | definition |
/// |----------------|------------|
/// | `8gaussians`   | `(4·c_k + 0.5·ε) / 1.414` for one of eight unit directions `c_k` |
/// | `checkerboard` | alternating unit cells of a 4×4 board, scaled by 2 onto `[−4, 4]²` |
/// | `pinwheel`     | five blades, radial std 0.3, tangential std 0.1, twist rate 0.25, scaled by 2 |
/// | `2spirals`     | two Archimedean arms to 540°, uniform jitter 0.5, scaled by 1/3, noise std 0.1 |
///
/// All four keep at least 99.9% of their mass inside `[−4, 4]²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ToySampler {
    EightGaussians,
    Checkerboard,
    Pinwheel,
    Spiral,
}

const EIGHT_RADIUS: f64 = 4.0;
const EIGHT_STD: f64 = 0.5;
const EIGHT_SHRINK: f64 = 1.414;

impl ToySampler {
    pub const ALL: [ToySampler; 4] = [
        ToySampler::EightGaussians,
        ToySampler::Checkerboard,
        ToySampler::Pinwheel,
        ToySampler::Spiral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ToySampler::EightGaussians => "8gaussians",
            ToySampler::Checkerboard => "checkerboard",
            ToySampler::Pinwheel => "pinwheel",
            ToySampler::Spiral => "2spirals",
        }
    }

    /// Mode centers of `8gaussians`, after shrinking (radius ≈ 2.83).
    pub fn eight_gaussian_centers() -> [[f64; 2]; 8] {
        let s = EIGHT_RADIUS / EIGHT_SHRINK;
        let h = FRAC_1_SQRT_2;
        [
            [s, 0.0],
            [-s, 0.0],
            [0.0, s],
            [0.0, -s],
            [s * h, s * h],
            [s * h, -s * h],
            [-s * h, s * h],
            [-s * h, -s * h],
        ]
    }

    /// Per-coordinate noise std of each `8gaussians` mode.
    pub fn eight_gaussian_std() -> f64 {
        EIGHT_STD / EIGHT_SHRINK
    }

    /// Box used for density grids.
    pub fn bounding_box(self) -> [f64; 4] {
        [-4.0, 4.0, -4.0, 4.0]
    }

    /// `n` i.i.d. draws as an `n × 2` matrix.
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Result<Matrix> {
        if n == 0 {
            return Err(Error::Domain("sample count must be >= 1".into()));
        }
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let p = match self {
                ToySampler::EightGaussians => eight_gaussians(rng),
                ToySampler::Checkerboard => checkerboard(rng),
                ToySampler::Pinwheel => pinwheel(rng),
                ToySampler::Spiral => spiral(rng),
            };
            data.extend_from_slice(&p);
        }
        Matrix::new(n, 2, data)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn eight_gaussians<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let unit = ToySampler::eight_gaussian_centers();
    let k = rng.random_range(0..8);
    let (ex, ey) = (normal(rng), normal(rng));
    // centers are already shrunk; shrink only the noise here
    [
        unit[k][0] + EIGHT_STD * ex / EIGHT_SHRINK,
        unit[k][1] + EIGHT_STD * ey / EIGHT_SHRINK,
    ]
}

fn checkerboard<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let x1 = rng.random::<f64>() * 4.0 - 2.0;
    let x2 = rng.random::<f64>() - 2.0 * rng.random_range(0..2) as f64;
    let x2 = x2 + x1.floor().rem_euclid(2.0);
    [2.0 * x1, 2.0 * x2]
}

fn pinwheel<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    const CLASSES: usize = 5;
    let label = rng.random_range(0..CLASSES);
    let f0 = 1.0 + 0.3 * normal(rng);
    let f1 = 0.1 * normal(rng);
    let angle = TAU * label as f64 / CLASSES as f64 + 0.25 * f0.exp();
    let (s, c) = angle.sin_cos();
    [2.0 * (f0 * c + f1 * s), 2.0 * (-f0 * s + f1 * c)]
}

fn spiral<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let t = rng.random::<f64>().sqrt() * 540.0 * PI / 180.0;
    let dx = -t.cos() * t + rng.random::<f64>() * 0.5;
    let dy = t.sin() * t + rng.random::<f64>() * 0.5;
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    [
        sign * dx / 3.0 + 0.1 * normal(rng),
        sign * dy / 3.0 + 0.1 * normal(rng),
    ]
}

impl fmt::Display for ToySampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToySampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "8gaussians" | "eight_gaussians" => Ok(ToySampler::EightGaussians),
            "checkerboard" => Ok(ToySampler::Checkerboard),
            "pinwheel" => Ok(ToySampler::Pinwheel),
            "2spirals" | "spiral" => Ok(ToySampler::Spiral),
            other => Err(Error::config("data.name", format!("unknown toy dataset `{other}`"))),
        }
    }
}
