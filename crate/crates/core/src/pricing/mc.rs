//! Monte Carlo simulation of the Heston dynamics.
//!
//! Full-truncation Euler: the variance enters drift and diffusion as
//! `max(v, 0)`. The log-spot is stepped with the same truncated variance, so
//! the discounted spot is an exact martingale of the discretization.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::market::MarketContext;
use crate::params::HestonParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
    Put,
}

/// Default step count, 252 per year with a floor of 100.
pub fn default_steps(tau: f64) -> usize {
    ((252.0 * tau).ceil() as usize).max(100)
}

/// Terminal log-spots `ln S_tau` of `n_paths` simulated paths.
pub fn simulate_terminal_log_spot<R: Rng + ?Sized>(
    p: &HestonParams,
    ctx: &MarketContext,
    tau: f64,
    n_paths: usize,
    n_steps: usize,
    rng: &mut R,
) -> Vec<f64> {
    let rate = ctx.rate(tau);
    let dt = tau / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let rho_c = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let ln_s0 = ctx.spot.ln();
    (0..n_paths)
        .map(|_| {
            let mut x = ln_s0;
            let mut v = p.v0;
            for _ in 0..n_steps {
                let z1: f64 = rng.sample(StandardNormal);
                let z3: f64 = rng.sample(StandardNormal);
                let z2 = p.rho * z1 + rho_c * z3;
                let vp = v.max(0.0);
                let sv = vp.sqrt() * sqrt_dt;
                x += (rate - 0.5 * vp) * dt + sv * z1;
                v += p.kappa * (p.lambda - vp) * dt + p.sigma * sv * z2;
            }
            x
        })
        .collect()
}

/// Discounted mean payoff and its standard error.
#[allow(clippy::too_many_arguments)]
pub fn mc_price_oracle<R: Rng + ?Sized>(
    p: &HestonParams,
    ctx: &MarketContext,
    tau: f64,
    strike: f64,
    kind: OptionKind,
    n_paths: usize,
    n_steps: usize,
    rng: &mut R,
) -> (f64, f64) {
    let df = (-ctx.rate(tau) * tau).exp();
    let terminal = simulate_terminal_log_spot(p, ctx, tau, n_paths, n_steps, rng);
    let payoffs = terminal.iter().map(|&x| {
        let s = x.exp();
        df * match kind {
            OptionKind::Call => (s - strike).max(0.0),
            OptionKind::Put => (strike - s).max(0.0),
        }
    });
    mean_and_std_error(payoffs, n_paths)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_std_error(values: impl Iterator<Item = f64>, n: usize) -> (f64, f64) {
    // Welford, stable for the 10^6-sample oracles.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut count = 0usize;
    for v in values {
        count += 1;
        let delta = v - mean;
        mean += delta / count as f64;
        m2 += delta * (v - mean);
    }
    debug_assert_eq!(count, n);
    if count < 2 {
        return (mean, f64::INFINITY);
    }
    let var = m2 / (count - 1) as f64;
    (mean, (var / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_rate_deep_itm_call_is_spot() {
        let ctx = MarketContext::flat(100.0, 0.0);
        let p = HestonParams::new(1.5, 0.08, 0.5, -0.6, 0.06);
        let (price, se) = mc_price_oracle(
            &p,
            &ctx,
            0.5,
            1e-6,
            OptionKind::Call,
            20_000,
            100,
            &mut rng::stream(1, 0),
        );
        assert!((price - 100.0).abs() < 3.0 * se + 1e-6, "{price} ± {se}");
    }

    #[test]
    fn std_error_scales_with_paths() {
        let ctx = MarketContext::flat(100.0, 0.02);
        let p = HestonParams::new(1.5, 0.08, 0.5, -0.6, 0.06);
        let (_, se1) =
            mc_price_oracle(&p, &ctx, 0.5, 100.0, OptionKind::Call, 20_000, 100, &mut rng::stream(2, 0));
        let (_, se2) =
            mc_price_oracle(&p, &ctx, 0.5, 100.0, OptionKind::Call, 40_000, 100, &mut rng::stream(3, 0));
        let ratio = se2 / se1;
        let target = 1.0 / 2f64.sqrt();
        assert!((ratio - target).abs() < 0.2 * target, "ratio {ratio}");
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let (m, se) = mean_and_std_error(xs.iter().copied(), 4);
        assert!((m - 3.75).abs() < 1e-15);
        let var = xs.iter().map(|x| (x - 3.75) * (x - 3.75)).sum::<f64>() / 3.0;
        assert!((se - (var / 4.0).sqrt()).abs() < 1e-15);
    }
}
