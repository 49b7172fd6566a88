//! Market context, risk-free curves and option-chain ingestion.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::HestonParams;
use crate::pricing::{CalibrationTarget, MaturitySlice, PriceSurface, Pricer, SurfaceGrid};

/// Calendar-day count for year fractions (ACT/365 fixed).
pub const DAYS_PER_YEAR: f64 = 365.0;
const WEEKS_PER_YEAR: f64 = 52.0;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("chain file lacks required column `{0}`")]
    MissingColumn(&'static str),
    #[error("rate curve: {0}")]
    Curve(String),
    #[error("no usable quotes")]
    NoQuotes,
    #[error("invalid spot {0}")]
    Spot(f64),
}

/// Piecewise-linear risk-free curve, flat beyond its end knots.
///
/// Knots are `(maturity in weeks, rate in percent)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    knots: Vec<(f64, f64)>,
}

impl Default for RateCurve {
    /// U.S. Treasury bill curve used for the SPX experiments.
    fn default() -> Self {
        Self {
            knots: vec![
                (4.0, 4.24),
                (6.0, 4.23),
                (13.0, 4.23),
                (17.0, 4.19),
                (26.0, 4.07),
                (52.0, 3.77),
            ],
        }
    }
}

impl RateCurve {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, MarketError> {
        if knots.is_empty() {
            return Err(MarketError::Curve("no knots".into()));
        }
        if knots.iter().any(|(w, r)| !w.is_finite() || !r.is_finite()) {
            return Err(MarketError::Curve("non-finite knot".into()));
        }
        if !knots.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(MarketError::Curve("maturities must ascend".into()));
        }
        Ok(Self { knots })
    }

    /// Constant curve at `rate` (decimal).
    pub fn flat(rate: f64) -> Self {
        Self {
            knots: vec![(1.0, rate * 100.0)],
        }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Rate in percent at `weeks`.
    pub fn percent_at_weeks(&self, weeks: f64) -> f64 {
        let k = &self.knots;
        if weeks <= k[0].0 {
            return k[0].1;
        }
        if weeks >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let hi = k.partition_point(|(w, _)| *w <= weeks);
        let (w0, r0) = k[hi - 1];
        let (w1, r1) = k[hi];
        r0 + (r1 - r0) * (weeks - w0) / (w1 - w0)
    }

    /// Continuously compounded decimal rate for a maturity in years.
    pub fn rate_at(&self, tau: f64) -> f64 {
        self.percent_at_weeks(tau * WEEKS_PER_YEAR) / 100.0
    }

    /// Reads a CSV with columns `weeks, rate_percent`.
    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, MarketError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &'static str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or(MarketError::MissingColumn(name))
        };
        let (wi, ri) = (col("weeks")?, col("rate_percent")?);
        let mut knots = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| {
                rec.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| MarketError::Curve(format!("bad row {rec:?}")))
            };
            knots.push((parse(wi)?, parse(ri)?));
        }
        Self::new(knots)
    }

    pub fn load(path: &Path) -> Result<Self, MarketError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Spot and discounting curve shared by every quote of a surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketContext {
    pub spot: f64,
    pub rate_curve: RateCurve,
}

impl MarketContext {
    pub fn new(spot: f64, rate_curve: RateCurve) -> Result<Self, MarketError> {
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(MarketError::Spot(spot));
        }
        Ok(Self { spot, rate_curve })
    }

    pub fn flat(spot: f64, rate: f64) -> Self {
        Self {
            spot,
            rate_curve: RateCurve::flat(rate),
        }
    }

    pub fn rate(&self, tau: f64) -> f64 {
        self.rate_curve.rate_at(tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionType {
    Call,
    Put,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub option_type: OptionType,
    pub strike: f64,
    pub expiry_days: u32,
    pub mid_price: f64,
}

impl OptionQuote {
    pub fn tau(&self) -> f64 {
        self.expiry_days as f64 / DAYS_PER_YEAR
    }
}

/// Row accounting from [`load_chain`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows: usize,
    pub kept: usize,
    pub malformed: usize,
    pub non_positive_mid: usize,
    pub crossed: usize,
}

fn parse_type(s: &str) -> Option<OptionType> {
    match s.trim().to_ascii_lowercase().as_str() {
        "c" | "call" | "calls" => Some(OptionType::Call),
        "p" | "put" | "puts" => Some(OptionType::Put),
        _ => None,
    }
}

/// Parses an option chain with columns `type, strike, expiry_days` and
/// either `bid, ask` or `mid`. Malformed rows, non-positive mids and crossed
/// markets are skipped and counted.
pub fn read_chain<R: io::Read>(r: R) -> Result<(Vec<OptionQuote>, LoadReport), MarketError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(r);
    let headers = match rdr.headers() {
        Ok(h) if !h.is_empty() => h.clone(),
        Ok(_) => return Ok((Vec::new(), LoadReport::default())),
        Err(e) => return Err(e.into()),
    };
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let ti = find("type").ok_or(MarketError::MissingColumn("type"))?;
    let ki = find("strike").ok_or(MarketError::MissingColumn("strike"))?;
    let ei = find("expiry_days").ok_or(MarketError::MissingColumn("expiry_days"))?;
    let (bi, ai, mi) = (find("bid"), find("ask"), find("mid"));
    if mi.is_none() && (bi.is_none() || ai.is_none()) {
        return Err(MarketError::MissingColumn("mid (or bid and ask)"));
    }

    let mut report = LoadReport::default();
    let mut quotes = Vec::new();
    for rec in rdr.records() {
        report.rows += 1;
        let Ok(rec) = rec else {
            report.malformed += 1;
            continue;
        };
        let num = |i: Option<usize>| {
            i.and_then(|i| rec.get(i))
                .filter(|s| !s.is_empty())
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let option_type = rec.get(ti).and_then(parse_type);
        let strike = num(Some(ki)).filter(|k| *k > 0.0);
        let expiry = num(Some(ei)).filter(|d| *d >= 1.0 && d.fract() == 0.0);
        let (Some(option_type), Some(strike), Some(expiry)) = (option_type, strike, expiry) else {
            report.malformed += 1;
            continue;
        };
        let mid = match (num(bi), num(ai)) {
            (Some(bid), Some(ask)) => {
                if bid > ask {
                    report.crossed += 1;
                    continue;
                }
                0.5 * (bid + ask)
            }
            _ => match num(mi) {
                Some(m) => m,
                None => {
                    report.malformed += 1;
                    continue;
                }
            },
        };
        if mid <= 0.0 {
            report.non_positive_mid += 1;
            continue;
        }
        quotes.push(OptionQuote {
            option_type,
            strike,
            expiry_days: expiry as u32,
            mid_price: mid,
        });
    }
    report.kept = quotes.len();
    if report.kept < report.rows {
        log::info!(
            "chain: kept {} of {} rows ({} malformed, {} non-positive mid, {} crossed)",
            report.kept,
            report.rows,
            report.malformed,
            report.non_positive_mid,
            report.crossed
        );
    }
    Ok((quotes, report))
}

/// Loads a chain file; `spot` is only validated here.
pub fn load_chain(path: &Path, spot: f64) -> Result<(Vec<OptionQuote>, LoadReport), MarketError> {
    if !(spot > 0.0 && spot.is_finite()) {
        return Err(MarketError::Spot(spot));
    }
    read_chain(std::fs::File::open(path)?)
}

/// Sample envelope: maturity range in days and log-moneyness range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuoteFilter {
    pub min_days: u32,
    pub max_days: u32,
    pub min_log_moneyness: f64,
    pub max_log_moneyness: f64,
}

impl Default for QuoteFilter {
    /// The SPX sample envelope.
    fn default() -> Self {
        Self {
            min_days: 3,
            max_days: 255,
            min_log_moneyness: -3.31,
            max_log_moneyness: 0.774,
        }
    }
}

impl QuoteFilter {
    pub fn accepts(&self, q: &OptionQuote, spot: f64) -> bool {
        let m = (q.strike / spot).ln();
        (self.min_days..=self.max_days).contains(&q.expiry_days)
            && m >= self.min_log_moneyness
            && m <= self.max_log_moneyness
    }

    pub fn apply(&self, quotes: &[OptionQuote], spot: f64) -> Vec<OptionQuote> {
        quotes
            .iter()
            .copied()
            .filter(|q| self.accepts(q, spot))
            .collect()
    }
}

/// One calibration cell of a real target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetCell {
    pub strike: f64,
    pub tau: f64,
    pub rate: f64,
    pub call_price: f64,
}

/// `(tau, rate, [(strike, call price)])` of one quoted maturity.
type MaturityGroup = (f64, f64, Vec<(f64, f64)>);

/// Scattered call-price target built from quotes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketTarget {
    pub ctx: MarketContext,
    pub cells: Vec<TargetCell>,
}

/// Put price converted to a call via parity, `P + S0 - K e^{-r tau}`.
pub fn synthetic_call(put: f64, spot: f64, rate: f64, tau: f64, strike: f64) -> f64 {
    put + spot - strike * (-rate * tau).exp()
}

/// Builds the calibration cells: calls as quoted, puts through parity,
/// `tau = expiry_days / 365`.
pub fn assemble_target(
    quotes: &[OptionQuote],
    spot: f64,
    curve: &RateCurve,
) -> Result<MarketTarget, MarketError> {
    let ctx = MarketContext::new(spot, curve.clone())?;
    if quotes.is_empty() {
        return Err(MarketError::NoQuotes);
    }
    let cells = quotes
        .iter()
        .map(|q| {
            let tau = q.tau();
            let rate = curve.rate_at(tau);
            let call_price = match q.option_type {
                OptionType::Call => q.mid_price,
                OptionType::Put => synthetic_call(q.mid_price, spot, rate, tau, q.strike),
            };
            TargetCell {
                strike: q.strike,
                tau,
                rate,
                call_price,
            }
        })
        .collect();
    Ok(MarketTarget { ctx, cells })
}

impl MarketTarget {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cells grouped by maturity (ascending), strikes ascending within a
    /// maturity.
    fn by_maturity(&self) -> Vec<MaturityGroup> {
        let mut groups: BTreeMap<u64, MaturityGroup> = BTreeMap::new();
        for c in &self.cells {
            groups
                .entry(c.tau.to_bits())
                .or_insert_with(|| (c.tau, c.rate, Vec::new()))
                .2
                .push((c.strike, c.call_price));
        }
        groups
            .into_values()
            .map(|(tau, rate, mut pts)| {
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                (tau, rate, pts)
            })
            .collect()
    }

    /// Scattered-cell objective for the GA.
    pub fn calibration_target(&self) -> CalibrationTarget {
        let slices = self
            .by_maturity()
            .into_iter()
            .map(|(tau, rate, pts)| MaturitySlice {
                tau,
                rate,
                strikes: pts.iter().map(|p| p.0).collect(),
                prices: pts.iter().map(|p| p.1).collect(),
            })
            .collect();
        CalibrationTarget {
            spot: self.ctx.spot,
            slices,
        }
    }

    /// Fixed-width network input: quotes interpolated onto `grid`, linear in
    /// log-strike within each quoted maturity, then linear in maturity across
    /// slices, nearest-neighbour beyond the quoted range on both axes. The
    /// interpolated quantity is the time value over the discounted intrinsic
    /// bound `max(S0 - K e^{-r tau}, 0)`, which is added back per grid cell.
    pub fn interpolate_to_grid(&self, grid: &SurfaceGrid) -> PriceSurface {
        let spot = self.ctx.spot;
        let bound = |k: f64, tau: f64, rate: f64| (spot - k * (-rate * tau).exp()).max(0.0);
        let groups = self.by_maturity();
        // Per quoted maturity, time values at the grid strikes.
        let slices: Vec<(f64, Vec<f64>)> = groups
            .iter()
            .map(|(tau, rate, pts)| {
                let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
                let ys: Vec<f64> = pts.iter().map(|p| p.1 - bound(p.0, *tau, *rate)).collect();
                let row = grid
                    .strikes()
                    .iter()
                    .map(|k| interp_flat(&xs, &ys, k.ln()))
                    .collect();
                (*tau, row)
            })
            .collect();
        let taus: Vec<f64> = slices.iter().map(|s| s.0).collect();
        let mut prices = vec![0.0; grid.size()];
        let n_t = grid.n_maturities();
        for (i, &k) in grid.strikes().iter().enumerate() {
            let ys: Vec<f64> = slices.iter().map(|s| s.1[i]).collect();
            for (j, &tau) in grid.maturities().iter().enumerate() {
                let tv = interp_flat(&taus, &ys, tau).max(0.0);
                prices[i * n_t + j] = tv + bound(k, tau, self.ctx.rate(tau));
            }
        }
        PriceSurface::new(grid.clone(), prices).expect("grid-shaped interpolation")
    }
}

/// Linear interpolation on ascending `xs`, flat beyond the ends.
fn interp_flat(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|v| *v <= x);
    let (x0, x1) = (xs[hi - 1], xs[hi]);
    ys[hi - 1] + (ys[hi] - ys[hi - 1]) * (x - x0) / (x1 - x0)
}

/// Model-generated chain: for every `(expiry_days, strike)` pair, an
/// out-of-the-money quote (puts below the forward, calls above), priced
/// under `params` with the curve's rate at that maturity. Bid/ask straddle
/// the model mid by `half_spread`.
pub fn synthesize_chain(
    params: &HestonParams,
    spot: f64,
    curve: &RateCurve,
    expiries_days: &[u32],
    strikes: &[f64],
    half_spread: f64,
    pricer: &Pricer,
) -> Result<Vec<(OptionQuote, f64, f64)>, crate::pricing::PricingError> {
    let mut rows = Vec::new();
    for &days in expiries_days {
        let tau = days as f64 / DAYS_PER_YEAR;
        let rate = curve.rate_at(tau);
        let calls = pricer.call_slice(params, spot, rate, tau, strikes)?;
        let fwd = spot * (rate * tau).exp();
        for (&k, &c) in strikes.iter().zip(&calls) {
            let (option_type, mid) = if k < fwd {
                (
                    OptionType::Put,
                    crate::pricing::put_from_call(c, spot, rate, tau, k),
                )
            } else {
                (OptionType::Call, c)
            };
            let q = OptionQuote {
                option_type,
                strike: k,
                expiry_days: days,
                mid_price: mid,
            };
            rows.push((q, (mid - half_spread).max(0.0), mid + half_spread));
        }
    }
    Ok(rows)
}

/// Writes quotes as `type,strike,expiry_days,bid,ask`.
pub fn write_chain<W: io::Write>(w: W, rows: &[(OptionQuote, f64, f64)]) -> Result<(), MarketError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["type", "strike", "expiry_days", "bid", "ask"])?;
    for (q, bid, ask) in rows {
        let t = match q.option_type {
            OptionType::Call => "call",
            OptionType::Put => "put",
        };
        out.write_record([
            t.to_string(),
            format!("{:?}", q.strike),
            q.expiry_days.to_string(),
            format!("{:?}", bid),
            format!("{:?}", ask),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_knots_and_interpolation() {
        let c = RateCurve::default();
        assert!((c.rate_at(4.0 / 52.0) - 0.0424).abs() < 1e-15);
        assert!((c.rate_at(5.0 / 52.0) - 0.04235).abs() < 1e-15);
        assert!((c.rate_at(2.0) - 0.0377).abs() < 1e-15);
        assert!((c.rate_at(1.0 / 52.0) - 0.0424).abs() < 1e-15);
        for &(w, r) in c.knots() {
            assert!((c.percent_at_weeks(w) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_is_continuous() {
        let c = RateCurve::default();
        for &(w, _) in c.knots() {
            let l = c.percent_at_weeks(w - 1e-9);
            let r = c.percent_at_weeks(w + 1e-9);
            assert!((l - r).abs() < 1e-8);
        }
    }

    #[test]
    fn curve_csv() {
        let c = RateCurve::read_csv("weeks,rate_percent\n4,4.24\n52,3.77\n".as_bytes()).unwrap();
        assert_eq!(c.knots(), &[(4.0, 4.24), (52.0, 3.77)]);
        assert!(RateCurve::read_csv("weeks,rate_percent\n52,1\n4,2\n".as_bytes()).is_err());
    }

    #[test]
    fn empty_chain_is_empty() {
        let (q, _) = read_chain("".as_bytes()).unwrap();
        assert!(q.is_empty());
        let (q, _) = read_chain("type,strike,expiry_days,bid,ask\n".as_bytes()).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn bid_ask_mid_and_filters() {
        let csv = "type,strike,expiry_days,bid,ask\n\
                   call,100,30,10,12\n\
                   put,90,30,3,2\n\
                   put,90,30,0,0\n\
                   call,abc,30,1,2\n\
                   call,100,0,1,2\n\
                   call,110,30,1\n";
        let (q, rep) = read_chain(csv.as_bytes()).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].mid_price, 11.0);
        assert_eq!(rep.crossed, 1);
        assert_eq!(rep.non_positive_mid, 1);
        assert_eq!(rep.malformed, 3);
        assert_eq!(rep.rows, 6);
    }

    #[test]
    fn mid_column_accepted() {
        let (q, _) = read_chain("type,strike,expiry_days,mid\nP,95,10,1.5\n".as_bytes()).unwrap();
        assert_eq!(q[0].option_type, OptionType::Put);
        assert_eq!(q[0].mid_price, 1.5);
    }

    #[test]
    fn missing_columns_rejected() {
        assert!(read_chain("type,strike,bid,ask\ncall,1,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn single_call_target() {
        let q = OptionQuote {
            option_type: OptionType::Call,
            strike: 100.0,
            expiry_days: 73,
            mid_price: 5.0,
        };
        let t = assemble_target(&[q], 100.0, &RateCurve::default()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.cells[0].tau, 0.2);
        assert_eq!(t.cells[0].call_price, 5.0);
        assert!(assemble_target(&[], 100.0, &RateCurve::default()).is_err());
    }

    #[test]
    fn put_parity_conversion_round_trips() {
        let curve = RateCurve::default();
        let q = OptionQuote {
            option_type: OptionType::Put,
            strike: 95.0,
            expiry_days: 90,
            mid_price: 2.5,
        };
        let t = assemble_target(&[q], 100.0, &curve).unwrap();
        let c = t.cells[0];
        let expected = 2.5 + 100.0 - 95.0 * (-c.rate * c.tau).exp();
        assert!((c.call_price - expected).abs() < 1e-12);
        let back = c.call_price - 100.0 + 95.0 * (-c.rate * c.tau).exp();
        assert!((back - 2.5).abs() < 1e-12);
    }

    #[test]
    fn envelope_filter() {
        let f = QuoteFilter::default();
        let mk = |strike, days| OptionQuote {
            option_type: OptionType::Call,
            strike,
            expiry_days: days,
            mid_price: 1.0,
        };
        assert!(f.accepts(&mk(100.0, 3), 100.0));
        assert!(!f.accepts(&mk(100.0, 2), 100.0));
        assert!(!f.accepts(&mk(100.0, 256), 100.0));
        assert!(!f.accepts(&mk(250.0, 30), 100.0));
        assert!(f.accepts(&mk(4.0, 30), 100.0));
    }

    #[test]
    fn interpolation_reproduces_grid_quotes() {
        let grid = SurfaceGrid::new(vec![90.0, 100.0, 110.0], vec![0.1, 0.5]).unwrap();
        let mut cells = Vec::new();
        for (i, &k) in grid.strikes().iter().enumerate() {
            for (j, &tau) in grid.maturities().iter().enumerate() {
                cells.push(TargetCell {
                    strike: k,
                    tau,
                    rate: 0.0,
                    call_price: (100.0 - k).max(0.0) + (i * 10 + j) as f64,
                });
            }
        }
        let t = MarketTarget {
            ctx: MarketContext::flat(100.0, 0.0),
            cells,
        };
        let s = t.interpolate_to_grid(&grid);
        assert_eq!(s.flatten(), &[10.0, 11.0, 10.0, 11.0, 20.0, 21.0]);
        // Off-grid: midpoint in maturity, time value flat beyond the strike
        // range with the intrinsic bound added back.
        let g2 = SurfaceGrid::new(vec![50.0, 200.0], vec![0.3]).unwrap();
        let s2 = t.interpolate_to_grid(&g2);
        assert!((s2.flatten()[0] - 50.5).abs() < 1e-12);
        assert!((s2.flatten()[1] - 20.5).abs() < 1e-12);
    }
}
