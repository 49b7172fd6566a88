//! European option pricing under Heston and the calibration objective.

mod heston;
pub mod mc;
pub mod quadrature;

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use heston::{characteristic_fn, log_char_exponent, put_from_call, Pricer};

use crate::market::MarketContext;
use crate::params::HestonParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricingError {
    #[error("characteristic function not finite at u={u} (tau={tau})")]
    Unstable { tau: f64, u: f64 },
    #[error("quadrature not converged at K={strike}, tau={tau}: {coarse} vs {fine}")]
    NonConvergent {
        strike: f64,
        tau: f64,
        coarse: f64,
        fine: f64,
    },
    #[error("cell (strike {strike_index}, maturity {maturity_index}): {source}")]
    Cell {
        strike_index: usize,
        maturity_index: usize,
        #[source]
        source: Box<PricingError>,
    },
    #[error("invalid pricing input: {0}")]
    InvalidInput(String),
}

/// Truncation and panel layout of the Fourier integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    pub u_max: f64,
    pub n_nodes: usize,
    pub n_panels: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            u_max: 200.0,
            n_nodes: 64,
            n_panels: 4,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<(), PricingError> {
        if !(self.u_max > 0.0 && self.u_max.is_finite()) || self.n_nodes < 2 || self.n_panels < 1 {
            return Err(PricingError::InvalidInput(format!("quadrature {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error("grid: {0}")]
    Grid(String),
    #[error("surface has {got} prices, grid needs {expected}")]
    Shape { got: usize, expected: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Strike–maturity lattice, both axes strictly ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    strikes: Vec<f64>,
    maturities: Vec<f64>,
}

fn strictly_ascending_positive(v: &[f64]) -> bool {
    !v.is_empty()
        && v.iter().all(|x| x.is_finite() && *x > 0.0)
        && v.windows(2).all(|w| w[0] < w[1])
}

impl SurfaceGrid {
    pub fn new(strikes: Vec<f64>, maturities: Vec<f64>) -> Result<Self, SurfaceError> {
        if !strictly_ascending_positive(&strikes) {
            return Err(SurfaceError::Grid(
                "strikes must be positive and strictly ascending".into(),
            ));
        }
        if !strictly_ascending_positive(&maturities) {
            return Err(SurfaceError::Grid(
                "maturities must be positive and strictly ascending".into(),
            ));
        }
        Ok(Self {
            strikes,
            maturities,
        })
    }

    /// `n_strikes` strikes evenly spaced in log-moneyness over
    /// `[-0.3, 0.2]` and `n_maturities` maturities evenly spaced over
    /// `[0.05, 1]` years.
    pub fn synthetic(spot: f64, n_strikes: usize, n_maturities: usize) -> Result<Self, SurfaceError> {
        let strikes = linspace(-0.3, 0.2, n_strikes)
            .into_iter()
            .map(|m| spot * m.exp())
            .collect();
        Self::new(strikes, linspace(0.05, 1.0, n_maturities))
    }

    pub fn strikes(&self) -> &[f64] {
        &self.strikes
    }

    pub fn maturities(&self) -> &[f64] {
        &self.maturities
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn n_maturities(&self) -> usize {
        self.maturities.len()
    }

    /// Length of a flattened surface, `K * T`.
    pub fn size(&self) -> usize {
        self.strikes.len() * self.maturities.len()
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (a + b)],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Call prices on a [`SurfaceGrid`], stored strike-major: the price at
/// strike `i` and maturity `j` sits at `i * T + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSurface {
    grid: SurfaceGrid,
    prices: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SurfaceRecord {
    strikes: Vec<f64>,
    maturities: Vec<f64>,
    prices_row_major: Vec<f64>,
}

impl PriceSurface {
    pub fn new(grid: SurfaceGrid, prices: Vec<f64>) -> Result<Self, SurfaceError> {
        if prices.len() != grid.size() {
            return Err(SurfaceError::Shape {
                got: prices.len(),
                expected: grid.size(),
            });
        }
        Ok(Self { grid, prices })
    }

    pub fn grid(&self) -> &SurfaceGrid {
        &self.grid
    }

    pub fn get(&self, strike_idx: usize, maturity_idx: usize) -> f64 {
        self.prices[strike_idx * self.grid.n_maturities() + maturity_idx]
    }

    /// Row-major (strike-major) view of length `K * T`.
    pub fn flatten(&self) -> &[f64] {
        &self.prices
    }

    /// Prices at one maturity, in strike order.
    pub fn column(&self, maturity_idx: usize) -> Vec<f64> {
        (0..self.grid.n_strikes())
            .map(|i| self.get(i, maturity_idx))
            .collect()
    }

    /// CSV with a header of maturities and one row per strike.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), SurfaceError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["strike".to_string()];
        header.extend(self.grid.maturities.iter().map(|t| format!("{t}")));
        out.write_record(&header)?;
        for (i, k) in self.grid.strikes.iter().enumerate() {
            let mut row = vec![format!("{k}")];
            row.extend((0..self.grid.n_maturities()).map(|j| format!("{}", self.get(i, j))));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, SurfaceError> {
        let mut rdr = csv::Reader::from_reader(r);
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| SurfaceError::Grid(format!("`{s}`: {e}")))
        };
        let maturities = rdr
            .headers()?
            .iter()
            .skip(1)
            .map(parse)
            .collect::<Result<Vec<_>, _>>()?;
        let mut strikes = Vec::new();
        let mut prices = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut fields = rec.iter();
            strikes.push(parse(fields.next().unwrap_or(""))?);
            for f in fields {
                prices.push(parse(f)?);
            }
        }
        Self::new(SurfaceGrid::new(strikes, maturities)?, prices)
    }

    pub fn to_json(&self) -> Result<String, SurfaceError> {
        Ok(serde_json::to_string_pretty(&SurfaceRecord {
            strikes: self.grid.strikes.clone(),
            maturities: self.grid.maturities.clone(),
            prices_row_major: self.prices.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self, SurfaceError> {
        let rec: SurfaceRecord = serde_json::from_str(s)?;
        Self::new(SurfaceGrid::new(rec.strikes, rec.maturities)?, rec.prices_row_major)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<(), SurfaceError> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, self.to_json()?)?;
        Ok(())
    }
}

/// Prices every grid cell; the rate of column `j` comes from the context's
/// curve at `maturities[j]`.
pub fn price_surface(
    p: &HestonParams,
    ctx: &MarketContext,
    grid: &SurfaceGrid,
    pricer: &Pricer,
) -> Result<PriceSurface, PricingError> {
    let n_t = grid.n_maturities();
    let mut prices = vec![0.0; grid.size()];
    for (j, &tau) in grid.maturities().iter().enumerate() {
        let column = pricer
            .call_slice(p, ctx.spot, ctx.rate(tau), tau, grid.strikes())
            .map_err(|e| {
                let strike_index = match &e {
                    PricingError::NonConvergent { strike, .. } => grid
                        .strikes()
                        .iter()
                        .position(|k| k == strike)
                        .unwrap_or(0),
                    _ => 0,
                };
                PricingError::Cell {
                    strike_index,
                    maturity_index: j,
                    source: Box::new(e),
                }
            })?;
        for (i, v) in column.into_iter().enumerate() {
            prices[i * n_t + j] = v;
        }
    }
    Ok(PriceSurface {
        grid: grid.clone(),
        prices,
    })
}

/// Quotes sharing one maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturitySlice {
    pub tau: f64,
    pub rate: f64,
    pub strikes: Vec<f64>,
    pub prices: Vec<f64>,
}

/// Scattered call-price targets grouped by maturity. Rectangular surfaces
/// and real option chains both reduce to this form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub spot: f64,
    pub slices: Vec<MaturitySlice>,
}

impl CalibrationTarget {
    pub fn from_surface(surface: &PriceSurface, ctx: &MarketContext) -> Self {
        let grid = surface.grid();
        let slices = grid
            .maturities()
            .iter()
            .enumerate()
            .map(|(j, &tau)| MaturitySlice {
                tau,
                rate: ctx.rate(tau),
                strikes: grid.strikes().to_vec(),
                prices: surface.column(j),
            })
            .collect();
        Self {
            spot: ctx.spot,
            slices,
        }
    }

    /// Number of quoted cells `M`.
    pub fn len(&self) -> usize {
        self.slices.iter().map(|s| s.prices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model prices in slice order.
    pub fn model_prices(
        &self,
        p: &HestonParams,
        pricer: &Pricer,
    ) -> Result<Vec<Vec<f64>>, PricingError> {
        self.slices
            .iter()
            .map(|s| pricer.call_slice(p, self.spot, s.rate, s.tau, &s.strikes))
            .collect()
    }

    /// Mean squared pricing error over all cells; any pricing failure maps
    /// to `+inf`.
    pub fn loss(&self, p: &HestonParams, pricer: &Pricer) -> f64 {
        let m = self.len();
        if m == 0 {
            return f64::INFINITY;
        }
        let mut sum = 0.0;
        for s in &self.slices {
            match pricer.call_slice(p, self.spot, s.rate, s.tau, &s.strikes) {
                Ok(model) => {
                    sum += model
                        .iter()
                        .zip(&s.prices)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                }
                Err(e) => {
                    log::debug!("pricing failed for {p}: {e}");
                    return f64::INFINITY;
                }
            }
        }
        let loss = sum / m as f64;
        if loss.is_finite() {
            loss
        } else {
            f64::INFINITY
        }
    }
}

/// Mean squared misfit between the model surface at `p` and `target`.
pub fn calibration_loss(
    p: &HestonParams,
    target: &PriceSurface,
    ctx: &MarketContext,
    pricer: &Pricer,
) -> f64 {
    CalibrationTarget::from_surface(target, ctx).loss(p, pricer)
}
