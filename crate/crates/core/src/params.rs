//! The Heston parameter vector, its feasible box and samplers.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest value `clamp` lets through for the long-run and initial variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Number of calibrated parameters.
pub const DIM: usize = 5;

/// Parameter names in genome order.
pub const NAMES: [&str; DIM] = ["kappa", "lambda", "sigma", "rho", "v0"];

/// Heston variance-process parameters `(kappa, lambda, sigma, rho, v0)`.
///
/// `kappa` is the mean-reversion speed, `lambda` the long-run variance,
/// `sigma` the volatility of variance, `rho` the spot/variance correlation
/// and `v0` the initial variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub kappa: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub rho: f64,
    pub v0: f64,
}

impl HestonParams {
    pub const fn new(kappa: f64, lambda: f64, sigma: f64, rho: f64, v0: f64) -> Self {
        Self {
            kappa,
            lambda,
            sigma,
            rho,
            v0,
        }
    }

    pub fn to_array(&self) -> [f64; DIM] {
        [self.kappa, self.lambda, self.sigma, self.rho, self.v0]
    }

    pub fn from_array(a: [f64; DIM]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3], s[4])
    }

    /// Model-level admissibility: positive rates and variances, `|rho| <= 1`.
    pub fn is_admissible(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.kappa > 0.0
            && self.lambda > 0.0
            && self.sigma > 0.0
            && self.v0 > 0.0
            && (-1.0..=1.0).contains(&self.rho)
    }

    /// Component-wise relative error `|self - truth| / |truth|`.
    pub fn relative_errors(&self, truth: &HestonParams) -> [f64; DIM] {
        let a = self.to_array();
        let b = truth.to_array();
        std::array::from_fn(|i| (a[i] - b[i]).abs() / b[i].abs())
    }
}

impl fmt::Display for HestonParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "kappa={:.6} lambda={:.6} sigma={:.6} rho={:.6} v0={:.6}",
            self.kappa, self.lambda, self.sigma, self.rho, self.v0
        )
    }
}

/// Sufficient condition for a strictly positive variance process,
/// `2 kappa lambda > sigma^2`. Only reported, never enforced.
pub fn feller_satisfied(p: &HestonParams) -> bool {
    2.0 * p.kappa * p.lambda > p.sigma * p.sigma
}

#[derive(Debug, Error, PartialEq)]
pub enum BoxError {
    #[error("bound for {name} is not finite")]
    NonFinite { name: &'static str },
    #[error("lower bound {lower} exceeds upper bound {upper} for {name}")]
    Inverted {
        name: &'static str,
        lower: f64,
        upper: f64,
    },
    #[error("box config: {0}")]
    Parse(String),
}

/// Component-wise bounds on [`HestonParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: HestonParams,
    pub upper: HestonParams,
}

impl Default for ParamBox {
    fn default() -> Self {
        Self::standard()
    }
}

impl ParamBox {
    /// The standard synthetic-experiment ranges.
    pub const fn standard() -> Self {
        Self {
            lower: HestonParams::new(0.005, 0.0, 0.1, -0.95, 0.0),
            upper: HestonParams::new(5.0, 1.0, 1.0, 0.0, 1.0),
        }
    }

    /// Validated constructor. Equal bounds are accepted and pin a component.
    pub fn new(lower: HestonParams, upper: HestonParams) -> Result<Self, BoxError> {
        let lo = lower.to_array();
        let hi = upper.to_array();
        for i in 0..DIM {
            if !lo[i].is_finite() || !hi[i].is_finite() {
                return Err(BoxError::NonFinite { name: NAMES[i] });
            }
            if lo[i] > hi[i] {
                return Err(BoxError::Inverted {
                    name: NAMES[i],
                    lower: lo[i],
                    upper: hi[i],
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// Degenerate box containing exactly `p`.
    pub fn point(p: HestonParams) -> Self {
        Self { lower: p, upper: p }
    }

    pub fn ranges(&self) -> [f64; DIM] {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        std::array::from_fn(|i| hi[i] - lo[i])
    }

    pub fn midpoint(&self) -> HestonParams {
        self.from_unit(&[0.5; DIM])
    }

    pub fn contains(&self, p: &HestonParams) -> bool {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        p.to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= lo[i] && *v <= hi[i])
    }

    /// Affine map from the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> HestonParams {
        let lo = self.lower.to_array();
        let r = self.ranges();
        HestonParams::from_array(std::array::from_fn(|i| lo[i] + u[i] * r[i]))
    }

    /// Inverse of [`ParamBox::from_unit`]; pinned components map to 0.5.
    pub fn to_unit(&self, p: &HestonParams) -> [f64; DIM] {
        let lo = self.lower.to_array();
        let r = self.ranges();
        let v = p.to_array();
        std::array::from_fn(|i| if r[i] > 0.0 { (v[i] - lo[i]) / r[i] } else { 0.5 })
    }

    /// Serializes as `name = [low, high]` lines.
    pub fn to_config_string(&self) -> String {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        let mut out = String::new();
        for i in 0..DIM {
            out.push_str(&format!("{} = [{:?}, {:?}]\n", NAMES[i], lo[i], hi[i]));
        }
        out
    }
}

impl FromStr for ParamBox {
    type Err = BoxError;

    /// Parses `name = [low, high]` lines. Missing names keep the standard
    /// bounds; unknown names are rejected.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let table: toml::Table = s.parse().map_err(|e| BoxError::Parse(format!("{e}")))?;
        let mut lo = Self::standard().lower.to_array();
        let mut hi = Self::standard().upper.to_array();
        for (key, value) in &table {
            let idx = NAMES
                .iter()
                .position(|n| n == key)
                .ok_or_else(|| BoxError::Parse(format!("unknown parameter `{key}`")))?;
            let pair = value
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| BoxError::Parse(format!("`{key}` must be [low, high]")))?;
            let num = |v: &toml::Value| {
                v.as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| BoxError::Parse(format!("`{key}` bounds must be numbers")))
            };
            lo[idx] = num(&pair[0])?;
            hi[idx] = num(&pair[1])?;
        }
        Self::new(HestonParams::from_array(lo), HestonParams::from_array(hi))
    }
}

/// Clips every component into the box, then floors `lambda` and `v0` at
/// [`VARIANCE_FLOOR`] so the pricer never sees a zero variance.
pub fn clamp(p: &HestonParams, bounds: &ParamBox) -> HestonParams {
    let lo = bounds.lower.to_array();
    let hi = bounds.upper.to_array();
    let v = p.to_array();
    let mut out: [f64; DIM] = std::array::from_fn(|i| v[i].clamp(lo[i], hi[i]));
    out[1] = out[1].max(VARIANCE_FLOOR);
    out[4] = out[4].max(VARIANCE_FLOOR);
    HestonParams::from_array(out)
}

/// `n` independent uniform draws from the box, each clamped.
pub fn sample_uniform<R: Rng + ?Sized>(
    bounds: &ParamBox,
    n: usize,
    rng: &mut R,
) -> Vec<HestonParams> {
    (0..n)
        .map(|_| {
            let u: [f64; DIM] = std::array::from_fn(|_| rng.random::<f64>());
            clamp(&bounds.from_unit(&u), bounds)
        })
        .collect()
}

/// Latin hypercube stratum assignment: `strata[d][j]` is the stratum of
/// sample `j` along dimension `d`. Each row is a permutation of `0..n`.
pub fn lhs_strata<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..DIM)
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            perm
        })
        .collect()
}

/// A point drawn uniformly from the cell given by one stratum per dimension.
pub fn lhs_point_in_cell<R: Rng + ?Sized>(
    bounds: &ParamBox,
    n: usize,
    cell: [usize; DIM],
    rng: &mut R,
) -> HestonParams {
    let u: [f64; DIM] = std::array::from_fn(|d| (cell[d] as f64 + rng.random::<f64>()) / n as f64);
    clamp(&bounds.from_unit(&u), bounds)
}

/// Latin hypercube sample of size `n`: one point per stratum in every
/// dimension, strata paired by independent random permutations.
pub fn sample_lhs<R: Rng + ?Sized>(bounds: &ParamBox, n: usize, rng: &mut R) -> Vec<HestonParams> {
    let strata = lhs_strata(n, rng);
    (0..n)
        .map(|j| lhs_point_in_cell(bounds, n, std::array::from_fn(|d| strata[d][j]), rng))
        .collect()
}
