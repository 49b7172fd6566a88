//! Heston characteristic function and Fourier-inversion call prices.
//!
//! The characteristic function uses the rotation-free form with
//! `g = (beta - d) / (beta + d)` and `exp(-d tau)`, which keeps the complex
//! logarithm on its principal branch. `beta - d` is evaluated as
//! `-sigma^2 (iu + u^2) / (beta + d)` so small vol-of-vol does not cancel.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;

use super::quadrature::composite_rule;
use super::{PricingError, QuadratureSpec};
use crate::market::MarketContext;
use crate::params::HestonParams;

const I: Complex64 = Complex64::new(0.0, 1.0);

fn ln_1p(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        let z2 = z * z;
        z - z2 / 2.0 + z2 * z / 3.0 - z2 * z2 / 4.0
    } else {
        (Complex64::new(1.0, 0.0) + z).ln()
    }
}

/// `1 - exp(-w)`.
fn one_minus_exp_neg(w: Complex64) -> Complex64 {
    if w.norm() < 1e-3 {
        let w2 = w * w;
        w - w2 / 2.0 + w2 * w / 6.0 - w2 * w2 / 24.0
    } else {
        Complex64::new(1.0, 0.0) - (-w).exp()
    }
}

/// `C_tau(u) + D_tau(u) v0`, the log of the characteristic function of
/// `ln(S_tau / S_0)`.
pub fn log_char_exponent(p: &HestonParams, rate: f64, tau: f64, u: Complex64) -> Complex64 {
    let s2 = p.sigma * p.sigma;
    let iu = I * u;
    let a = iu + u * u;
    let beta = Complex64::new(p.kappa, 0.0) - I * (p.rho * p.sigma) * u;
    let d = (beta * beta + s2 * a).sqrt();
    let beta_plus_d = beta + d;
    // (beta - d) / sigma^2
    let bmd_over_s2 = -a / beta_plus_d;
    let g = bmd_over_s2 * s2 / beta_plus_d;
    let one_minus_e = one_minus_exp_neg(d * tau);
    let e = Complex64::new(1.0, 0.0) - one_minus_e;
    let one_minus_g = Complex64::new(1.0, 0.0) - g;
    let one_minus_ge = Complex64::new(1.0, 0.0) - g * e;

    // ln((1 - g e) / (1 - g)) = ln(1 + z), z = g (1 - e) / (1 - g).
    let z_over_s2 = bmd_over_s2 / beta_plus_d * one_minus_e / one_minus_g;
    let z = z_over_s2 * s2;
    let log_term_over_s2 = if z.norm() == 0.0 {
        z_over_s2
    } else {
        ln_1p(z) / z * z_over_s2
    };

    let c = iu * (rate * tau) + p.kappa * p.lambda * (bmd_over_s2 * tau - 2.0 * log_term_over_s2);
    let dd = bmd_over_s2 * one_minus_e / one_minus_ge;
    c + dd * p.v0
}

/// Characteristic function of `ln S_tau` under the pricing measure.
pub fn characteristic_fn(
    p: &HestonParams,
    ctx: &MarketContext,
    tau: f64,
    u: Complex64,
) -> Result<Complex64, PricingError> {
    let rate = ctx.rate(tau);
    let phi = (log_char_exponent(p, rate, tau, u) + I * u * ctx.spot.ln()).exp();
    if phi.re.is_finite() && phi.im.is_finite() {
        Ok(phi)
    } else {
        Err(PricingError::Unstable { tau, u: u.re })
    }
}

/// Quadrature-backed European option pricer.
#[derive(Debug, Clone)]
pub struct Pricer {
    spec: QuadratureSpec,
    nodes: Arc<[f64]>,
    weights: Arc<[f64]>,
    refined: Option<Arc<Pricer>>,
}

/// Per-maturity transforms at every quadrature node.
struct SliceTransform {
    /// `psi(u - i) e^{-r tau}`
    p1: Vec<Complex64>,
    /// `psi(u)`
    p2: Vec<Complex64>,
}

impl Default for Pricer {
    fn default() -> Self {
        Self::new(QuadratureSpec::default())
    }
}

impl Pricer {
    pub fn new(spec: QuadratureSpec) -> Self {
        let (nodes, weights) = composite_rule(spec.u_max, spec.n_nodes, spec.n_panels);
        Self {
            spec,
            nodes: nodes.into(),
            weights: weights.into(),
            refined: None,
        }
    }

    /// Enables the panel-doubling convergence check on every price.
    pub fn strict(mut self, on: bool) -> Self {
        self.refined = on.then(|| {
            Arc::new(Self::new(QuadratureSpec {
                n_panels: 2 * self.spec.n_panels,
                ..self.spec
            }))
        });
        self
    }

    pub fn is_strict(&self) -> bool {
        self.refined.is_some()
    }

    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    fn transform(
        &self,
        p: &HestonParams,
        rate: f64,
        tau: f64,
    ) -> Result<SliceTransform, PricingError> {
        let n = self.nodes.len();
        let mut p1 = Vec::with_capacity(n);
        let mut p2 = Vec::with_capacity(n);
        for &u in self.nodes.iter() {
            let a = (log_char_exponent(p, rate, tau, Complex64::new(u, -1.0)) - rate * tau).exp();
            let b = log_char_exponent(p, rate, tau, Complex64::new(u, 0.0)).exp();
            if !(a.re.is_finite() && a.im.is_finite() && b.re.is_finite() && b.im.is_finite()) {
                return Err(PricingError::Unstable { tau, u });
            }
            p1.push(a);
            p2.push(b);
        }
        Ok(SliceTransform { p1, p2 })
    }

    fn probabilities_from(&self, t: &SliceTransform, spot: f64, strike: f64) -> (f64, f64) {
        let x = (spot / strike).ln();
        let mut i1 = 0.0;
        let mut i2 = 0.0;
        for (k, (&u, &w)) in self.nodes.iter().zip(self.weights.iter()).enumerate() {
            // Re(z e^{iux} / (iu)) = Im(z e^{iux}) / u
            let (s, c) = (u * x).sin_cos();
            let rot = Complex64::new(c, s);
            i1 += w * (t.p1[k] * rot).im / u;
            i2 += w * (t.p2[k] * rot).im / u;
        }
        (0.5 + i1 / PI, 0.5 + i2 / PI)
    }

    /// In-the-money probabilities `(Pi1, Pi2)` for one strike and maturity.
    pub fn probabilities(
        &self,
        p: &HestonParams,
        spot: f64,
        rate: f64,
        tau: f64,
        strike: f64,
    ) -> Result<(f64, f64), PricingError> {
        check_inputs(spot, tau, strike)?;
        let t = self.transform(p, rate, tau)?;
        Ok(self.probabilities_from(&t, spot, strike))
    }

    fn raw_slice(
        &self,
        p: &HestonParams,
        spot: f64,
        rate: f64,
        tau: f64,
        strikes: &[f64],
    ) -> Result<Vec<f64>, PricingError> {
        let t = self.transform(p, rate, tau)?;
        let df = (-rate * tau).exp();
        strikes
            .iter()
            .map(|&k| {
                let (pi1, pi2) = self.probabilities_from(&t, spot, k);
                let price = spot * pi1 - k * df * pi2;
                if !price.is_finite() {
                    return Err(PricingError::Unstable { tau, u: f64::NAN });
                }
                let intrinsic = (spot - k * df).max(0.0);
                Ok(price.max(intrinsic).min(spot))
            })
            .collect()
    }

    /// Call prices for several strikes sharing one maturity and rate. The
    /// characteristic function is evaluated once per node for the whole
    /// slice.
    pub fn call_slice(
        &self,
        p: &HestonParams,
        spot: f64,
        rate: f64,
        tau: f64,
        strikes: &[f64],
    ) -> Result<Vec<f64>, PricingError> {
        for &k in strikes {
            check_inputs(spot, tau, k)?;
        }
        let prices = self.raw_slice(p, spot, rate, tau, strikes)?;
        if let Some(fine) = &self.refined {
            let check = fine.raw_slice(p, spot, rate, tau, strikes)?;
            for ((&coarse, &fine), &strike) in prices.iter().zip(&check).zip(strikes) {
                if (coarse - fine).abs() > 1e-6 * spot {
                    return Err(PricingError::NonConvergent {
                        strike,
                        tau,
                        coarse,
                        fine,
                    });
                }
            }
        }
        Ok(prices)
    }

    /// European call `S0 Pi1 - K e^{-r tau} Pi2`, floored at the
    /// no-arbitrage lower bound and capped at the spot.
    pub fn call_price(
        &self,
        p: &HestonParams,
        ctx: &MarketContext,
        tau: f64,
        strike: f64,
    ) -> Result<f64, PricingError> {
        Ok(self.call_slice(p, ctx.spot, ctx.rate(tau), tau, &[strike])?[0])
    }

    /// European put from call–put parity, floored at `max(K e^{-r tau} - S0, 0)`.
    pub fn put_price(
        &self,
        p: &HestonParams,
        ctx: &MarketContext,
        tau: f64,
        strike: f64,
    ) -> Result<f64, PricingError> {
        let call = self.call_price(p, ctx, tau, strike)?;
        Ok(put_from_call(call, ctx.spot, ctx.rate(tau), tau, strike))
    }
}

/// Parity put `C - S0 + K e^{-r tau}`, floored at its intrinsic bound.
pub fn put_from_call(call: f64, spot: f64, rate: f64, tau: f64, strike: f64) -> f64 {
    let fwd_strike = strike * (-rate * tau).exp();
    (call - spot + fwd_strike).max((fwd_strike - spot).max(0.0))
}

fn check_inputs(spot: f64, tau: f64, strike: f64) -> Result<(), PricingError> {
    if !(spot > 0.0 && spot.is_finite()) {
        return Err(PricingError::InvalidInput(format!("spot {spot}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PricingError::InvalidInput(format!("maturity {tau}")));
    }
    if !(strike > 0.0 && strike.is_finite()) {
        return Err(PricingError::InvalidInput(format!("strike {strike}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> MarketContext {
        MarketContext::flat(100.0, 0.03)
    }

    fn sample() -> HestonParams {
        HestonParams::new(1.5, 0.08, 0.5, -0.6, 0.06)
    }

    #[test]
    fn char_fn_is_one_at_zero() {
        let phi = characteristic_fn(&sample(), &ctx(), 0.7, Complex64::new(0.0, 0.0)).unwrap();
        assert!((phi - Complex64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn char_fn_at_minus_i_is_forward() {
        let c = ctx();
        let tau = 0.5;
        let phi = characteristic_fn(&sample(), &c, tau, Complex64::new(0.0, -1.0)).unwrap();
        let fwd = c.spot * (0.03f64 * tau).exp();
        assert!((phi.re - fwd).abs() < 1e-10 * fwd, "{phi}");
        assert!(phi.im.abs() < 1e-10 * fwd);
    }

    #[test]
    fn small_vol_of_vol_has_no_cancellation() {
        let p = HestonParams::new(2.0, 0.04, 1e-4, 0.0, 0.04);
        let e = log_char_exponent(&p, 0.0, 1.0, Complex64::new(3.0, 0.0));
        // Deterministic variance 0.04: exponent -> -0.5 * 0.04 * (iu + u^2)
        let u = Complex64::new(3.0, 0.0);
        let bs = -0.5 * 0.04 * (I * u + u * u);
        assert!((e - bs).norm() < 1e-6, "{e} vs {bs}");
    }

    #[test]
    fn deep_itm_call_is_forward_intrinsic() {
        let pr = Pricer::default();
        let c = ctx();
        let k = 1e-6;
        let price = pr.call_price(&sample(), &c, 0.5, k).unwrap();
        let expected = c.spot - k * (-0.03f64 * 0.5).exp();
        assert!((price - expected).abs() < 1e-6 * c.spot);
    }

    #[test]
    fn worthless_put_limit() {
        let pr = Pricer::default();
        let put = pr.put_price(&sample(), &ctx(), 0.5, 1e-6).unwrap();
        assert!(put.abs() < 1e-6);
    }

    #[test]
    fn parity_is_exact_by_construction() {
        let pr = Pricer::default();
        let c = ctx();
        for k in [80.0, 100.0, 120.0] {
            let call = pr.call_price(&sample(), &c, 0.5, k).unwrap();
            let put = pr.put_price(&sample(), &c, 0.5, k).unwrap();
            let rhs = c.spot - k * (-0.03f64 * 0.5).exp();
            assert!((call - put - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn strict_mode_accepts_converged_prices() {
        let pr = Pricer::default().strict(true);
        assert!(pr.is_strict());
        assert!(pr.call_price(&sample(), &ctx(), 0.5, 100.0).is_ok());
    }

    #[test]
    fn strict_mode_flags_truncated_integrals() {
        // Two nodes over the whole range cannot resolve the integrand.
        let spec = QuadratureSpec {
            u_max: 200.0,
            n_nodes: 2,
            n_panels: 1,
        };
        let pr = Pricer::new(spec).strict(true);
        let err = pr.call_price(&sample(), &ctx(), 0.05, 100.0).unwrap_err();
        assert!(matches!(err, PricingError::NonConvergent { .. }), "{err:?}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        let pr = Pricer::default();
        assert!(pr.call_price(&sample(), &ctx(), 0.0, 100.0).is_err());
        assert!(pr.call_price(&sample(), &ctx(), 0.5, -1.0).is_err());
    }
}
