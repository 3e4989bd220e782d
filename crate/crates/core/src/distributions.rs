//! Location-scale noise families and the reparameterized read-out
//! `y = location + scale·ε`.
//!
//! All randomness flows through [`Rng`], a ChaCha8 stream seeded from a
//! 64-bit integer. Uniforms are built from the top 53 bits of each 64-bit
//! output, so draw streams are identical on every platform.

use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;
use core::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{invalid, Error, Result};

/// Degrees of freedom used for Student's t when none is given.
pub const DEFAULT_STUDENT_T_DOF: f64 = 3.0;

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// Deterministic random source (ChaCha8, seeded via `seed_from_u64`).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream derived from `seed` and a stream index.
    pub fn derived(seed: u64, stream: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_M53
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * TWO_POW_M53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n` by 128-bit multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw by the Box–Muller transform. Each pair of
    /// uniforms yields two normals; the second is cached for the next call.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = TAU * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Gamma(shape, 1) by Marsaglia–Tsang, with the `shape < 1` boost.
    fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let u = self.uniform_open();
            return self.gamma(shape + 1.0) * libm::pow(u, 1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / libm::sqrt(9.0 * d);
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            if libm::log(u) < 0.5 * x * x + d - d * v + d * libm::log(v) {
                return d * v;
            }
        }
    }

    fn chi_square(&mut self, dof: f64) -> f64 {
        if libm::trunc(dof) == dof && dof <= 64.0 {
            (0..dof as usize)
                .map(|_| {
                    let z = self.standard_normal();
                    z * z
                })
                .sum()
        } else {
            2.0 * self.gamma(dof / 2.0)
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard auxiliary-noise family (location 0) for the reparameterized
/// read-out.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum DistributionFamily {
    #[default]
    Gaussian,
    Laplace,
    Logistic,
    StudentT { dof: f64 },
    /// Symmetric triangular on `[-1, 1]`.
    Triangular,
    /// `sigmoid(z) - 0.5` with `z ~ N(0, 1)`; bounded in `(-0.5, 0.5)`.
    LogisticNormal,
}

impl DistributionFamily {
    pub const ALL_NAMES: [&'static str; 6] = [
        "gaussian",
        "laplace",
        "logistic",
        "student-t",
        "triangular",
        "logistic-normal",
    ];

    pub fn student_t() -> Self {
        DistributionFamily::StudentT {
            dof: DEFAULT_STUDENT_T_DOF,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistributionFamily::StudentT { dof } if !(dof > 2.0 && dof.is_finite()) => Err(
                invalid("student-t degrees of freedom must be finite and > 2"),
            ),
            _ => Ok(()),
        }
    }

    /// One standard draw.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            DistributionFamily::Gaussian => rng.standard_normal(),
            DistributionFamily::Laplace => {
                // inverse CDF: F⁻¹(u) = -sgn(u-½)·ln(1 - 2|u-½|)
                let u = rng.uniform_open() - 0.5;
                -u.signum() * libm::log(1.0 - 2.0 * u.abs())
            }
            DistributionFamily::Logistic => {
                let u = rng.uniform_open();
                libm::log(u / (1.0 - u))
            }
            DistributionFamily::StudentT { dof } => {
                let z = rng.standard_normal();
                z / libm::sqrt(rng.chi_square(dof) / dof)
            }
            DistributionFamily::Triangular => rng.uniform() - rng.uniform(),
            DistributionFamily::LogisticNormal => sigmoid(rng.standard_normal()) - 0.5,
        }
    }

    /// Density of the standard member at `z`.
    pub fn standard_density(&self, z: f64) -> f64 {
        match *self {
            DistributionFamily::Gaussian => libm::exp(-0.5 * z * z) / libm::sqrt(TAU),
            DistributionFamily::Laplace => 0.5 * libm::exp(-z.abs()),
            DistributionFamily::Logistic => {
                let e = libm::exp(-z.abs());
                e / ((1.0 + e) * (1.0 + e))
            }
            DistributionFamily::StudentT { dof } => {
                let log_norm = libm::lgamma(0.5 * (dof + 1.0))
                    - libm::lgamma(0.5 * dof)
                    - 0.5 * libm::log(dof * PI);
                libm::exp(log_norm - 0.5 * (dof + 1.0) * libm::log1p(z * z / dof))
            }
            DistributionFamily::Triangular => (1.0 - z.abs()).max(0.0),
            DistributionFamily::LogisticNormal => {
                // change of variables through v = z + ½, x = logit(v)
                let v = z + 0.5;
                if v <= 0.0 || v >= 1.0 {
                    return 0.0;
                }
                let x = libm::log(v / (1.0 - v));
                libm::exp(-0.5 * x * x) / libm::sqrt(TAU) / (v * (1.0 - v))
            }
        }
    }
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionFamily::Gaussian => f.write_str("gaussian"),
            DistributionFamily::Laplace => f.write_str("laplace"),
            DistributionFamily::Logistic => f.write_str("logistic"),
            DistributionFamily::StudentT { dof } if *dof == DEFAULT_STUDENT_T_DOF => {
                f.write_str("student-t")
            }
            DistributionFamily::StudentT { dof } => write!(f, "student-t:{dof}"),
            DistributionFamily::Triangular => f.write_str("triangular"),
            DistributionFamily::LogisticNormal => f.write_str("logistic-normal"),
        }
    }
}

impl FromStr for DistributionFamily {
    type Err = Error;

    /// Accepts the names in [`DistributionFamily::ALL_NAMES`]; Student's t
    /// takes an optional `:dof` suffix (`student-t:5`).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let family = match (name.replace('_', "-").as_str(), arg) {
            ("gaussian" | "normal", None) => DistributionFamily::Gaussian,
            ("laplace", None) => DistributionFamily::Laplace,
            ("logistic", None) => DistributionFamily::Logistic,
            ("student-t" | "studentt" | "t", dof) => DistributionFamily::StudentT {
                dof: match dof {
                    Some(d) => d
                        .parse()
                        .map_err(|_| invalid("student-t degrees of freedom is not a number"))?,
                    None => DEFAULT_STUDENT_T_DOF,
                },
            },
            ("triangular", None) => DistributionFamily::Triangular,
            ("logistic-normal" | "logisticnormal", None) => DistributionFamily::LogisticNormal,
            _ => return Err(invalid(alloc::format!("unknown distribution family `{s}`"))),
        };
        family.validate()?;
        Ok(family)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `n` i.i.d. draws from the standard member of `family`.
pub fn sample_standard(family: &DistributionFamily, rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
    family.validate()?;
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    Ok((0..n).map(|_| family.sample(rng)).collect())
}

/// `μ + ε·σ`.
pub fn reparameterize(mu: f64, sigma: f64, eps: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(invalid("sigma must be non-negative"));
    }
    Ok(mu + eps * sigma)
}

/// Gaussian log-likelihood `-½ln(2π) - ½ln σ² - (y-μ)²/(2σ²)`.
pub fn gaussian_log_pdf(y: f64, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(invalid("variance must be positive"));
    }
    let r = y - mu;
    Ok(-0.5 * libm::log(TAU) - 0.5 * libm::log(sigma2) - r * r / (2.0 * sigma2))
}

/// Evaluation grid: `points` equally spaced abscissae on `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl Grid {
    /// `μ ± half_width·σ`.
    pub fn around(mu: f64, sigma: f64, half_width: f64, points: usize) -> Self {
        Grid {
            start: mu - half_width * sigma,
            end: mu + half_width * sigma,
            points,
        }
    }

    pub fn abscissae(&self) -> Vec<f64> {
        match self.points {
            0 => Vec::new(),
            1 => alloc::vec![0.5 * (self.start + self.end)],
            n => {
                let step = (self.end - self.start) / (n - 1) as f64;
                (0..n)
                    .map(|i| if i == n - 1 { self.end } else { self.start + step * i as f64 })
                    .collect()
            }
        }
    }
}

/// Density of the location-scale member `μ + σ·ε` at each grid point.
pub fn density_curve(
    mu: f64,
    sigma: f64,
    family: &DistributionFamily,
    grid: &Grid,
) -> Result<Vec<(f64, f64)>> {
    family.validate()?;
    if grid.points == 0 {
        return Err(invalid("density grid must have at least one point"));
    }
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    Ok(grid
        .abscissae()
        .into_iter()
        .map(|y| (y, family.standard_density((y - mu) / sigma) / sigma))
        .collect())
}
