//! Rényi accounting for the subsampled Gaussian mechanism.
//!
//! The per-step cost at order `alpha` is
//! `ln E_{z ~ N(0, s^2)} [(1 - q + q * mu1(z) / mu0(z))^alpha]` with
//! `mu0 = N(0, s^2)` and `mu1 = N(1, s^2)`. The expectation is evaluated by
//! composite Simpson quadrature in log space, so large orders and small noise
//! multipliers never overflow an intermediate.
//!
//! One upload consumes `tau` DP-SGD steps. After `t` uploads the cost at order
//! `alpha` is converted to an `(eps, delta)` guarantee with the offset
//! `(ln(1/delta) + (alpha - 1) ln(1 - 1/alpha) - ln alpha) / (alpha - 1)`, and
//! the reported budget is the minimum over the order grid.

use crate::error::{invalid, Error, Result};

/// Failure probability used throughout the experiments.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Finer grids are refused as an overflow.
pub const MAX_QUADRATURE_INTERVALS: usize = 20_000_000;
/// Minimum number of quadrature intervals.
pub const MIN_QUADRATURE_INTERVALS: usize = 200_000;

/// Width of the integration window on either side of the mass, in units of sigma.
const TAIL_SIGMAS: f64 = 20.0;

/// Forecasts are capped here when the per-step cost is numerically zero.
pub const MAX_FORECAST_ROUNDS: u64 = 1 << 40;

/// `{1.5, 2, 3, ..., 64}`.
pub fn default_alpha_grid() -> Vec<f64> {
    std::iter::once(1.5).chain((2..=64).map(f64::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdpParams {
    /// Sampling rate `|b| / |D_i|`.
    pub q: f64,
    pub sigma_hat: f64,
    pub alpha_grid: Vec<f64>,
    pub delta: f64,
    /// DP-SGD steps per upload.
    pub tau: usize,
}

impl RdpParams {
    pub fn new(q: f64, sigma_hat: f64, tau: usize) -> Self {
        Self {
            q,
            sigma_hat,
            alpha_grid: default_alpha_grid(),
            delta: DEFAULT_DELTA,
            tau,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_alpha_grid(mut self, grid: Vec<f64>) -> Self {
        self.alpha_grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_q_sigma(self.q, self.sigma_hat)?;
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha grid is empty".into()));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(**a > 1.0) || !a.is_finite()) {
            return Err(invalid("alpha_grid", format!("order {a} is not > 1")));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta", format!("{} not in (0, 1)", self.delta)));
        }
        if self.tau == 0 {
            return Err(invalid("tau", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_q_sigma(q: f64, sigma_hat: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid("q", format!("{q} not in [0, 1]")));
    }
    if !(sigma_hat > 0.0) || !sigma_hat.is_finite() {
        return Err(invalid("sigma_hat", format!("{sigma_hat} must be positive")));
    }
    Ok(())
}

/// `ln(e^a + e^b)` tolerating `a = -inf`.
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln sum_k w_k exp(v_k)` with Simpson weights over a uniform grid.
fn log_simpson(values: impl Iterator<Item = f64> + Clone, n_intervals: usize) -> f64 {
    let peak = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return peak;
    }
    let mut sum = 0.0;
    for (k, v) in values.enumerate() {
        let w = if k == 0 || k == n_intervals {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * (v - peak).exp();
    }
    peak + sum.ln()
}

/// Per-step RDP cost (nats) at a single order.
pub fn per_step_rdp(q: f64, sigma_hat: f64, alpha: f64) -> Result<f64> {
    Ok(per_step_rdp_orders(q, sigma_hat, &[alpha])?[0])
}

/// Per-step RDP cost at every order, sharing one quadrature grid.
pub fn per_step_rdp_orders(q: f64, sigma_hat: f64, orders: &[f64]) -> Result<Vec<f64>> {
    check_q_sigma(q, sigma_hat)?;
    if let Some(a) = orders.iter().find(|a| !(**a > 1.0) || !a.is_finite()) {
        return Err(invalid("alpha", format!("order {a} is not > 1")));
    }
    if orders.is_empty() {
        return Ok(Vec::new());
    }
    if q == 0.0 {
        return Ok(vec![0.0; orders.len()]);
    }

    let sigma2 = sigma_hat * sigma_hat;
    let alpha_max = orders.iter().cloned().fold(1.0, f64::max);
    // The tilted integrand concentrates near z = alpha when q is large.
    let lo = -TAIL_SIGMAS * sigma_hat;
    let hi = alpha_max.max(1.0) + TAIL_SIGMAS * sigma_hat;
    let wanted = ((hi - lo) / (sigma_hat / 50.0)).ceil();
    if !(wanted <= MAX_QUADRATURE_INTERVALS as f64) {
        return Err(Error::AccountantOverflow(format!(
            "sigma_hat={sigma_hat} needs {wanted:e} quadrature intervals"
        )));
    }
    let mut n = MIN_QUADRATURE_INTERVALS.max(wanted as usize);
    if n % 2 == 1 {
        n += 1;
    }
    let h = (hi - lo) / n as f64;

    let log_keep = (1.0 - q).ln();
    let log_q = q.ln();
    let mut base = Vec::with_capacity(n + 1);
    let mut mix = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let z = lo + h * k as f64;
        base.push(-z * z / (2.0 * sigma2));
        let log_ratio = (2.0 * z - 1.0) / (2.0 * sigma2);
        mix.push(log_add_exp(log_keep, log_q + log_ratio));
    }
    let log_norm = log_simpson(base.iter().copied(), n);

    orders
        .iter()
        .map(|&alpha| {
            let log_num = log_simpson(base.iter().zip(&mix).map(|(b, m)| b + alpha * m), n);
            let value = log_num - log_norm;
            if !value.is_finite() {
                return Err(Error::AccountantOverflow(format!(
                    "non-finite integral at q={q}, sigma_hat={sigma_hat}, alpha={alpha}"
                )));
            }
            let full_batch = alpha * (alpha - 1.0) / (2.0 * sigma2);
            Ok(value.clamp(0.0, full_batch))
        })
        .collect()
}

/// Offset that converts an order-`alpha` RDP bound into `(eps, delta)`-DP.
pub fn conversion_offset(alpha: f64, delta: f64) -> f64 {
    ((1.0 / delta).ln() + (alpha - 1.0) * (1.0 - 1.0 / alpha).ln() - alpha.ln()) / (alpha - 1.0)
}

/// Budget spent after some number of uploads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpent {
    pub eps: f64,
    pub alpha: f64,
}

/// Per-step costs over an order grid, precomputed once per client.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    orders: Vec<f64>,
    per_step: Vec<f64>,
    delta: f64,
    tau: usize,
}

impl RdpCurve {
    pub fn new(params: &RdpParams) -> Result<Self> {
        params.validate()?;
        let per_step = per_step_rdp_orders(params.q, params.sigma_hat, &params.alpha_grid)?;
        Ok(Self {
            orders: params.alpha_grid.clone(),
            per_step,
            delta: params.delta,
            tau: params.tau,
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    /// Per-step cost at each grid order, aligned with [`RdpCurve::orders`].
    pub fn per_step(&self) -> &[f64] {
        &self.per_step
    }

    /// The composed RDP term `t * tau * rdp / (alpha - 1)` at grid index `k`.
    pub fn composed(&self, t_bar: u64, k: usize) -> f64 {
        t_bar as f64 * self.tau as f64 * self.per_step[k] / (self.orders[k] - 1.0)
    }

    pub fn accumulate(&self, t_bar: u64) -> PrivacySpent {
        let mut best = PrivacySpent {
            eps: f64::INFINITY,
            alpha: self.orders[0],
        };
        for (k, &alpha) in self.orders.iter().enumerate() {
            let eps = self.composed(t_bar, k) + conversion_offset(alpha, self.delta);
            if eps < best.eps {
                best = PrivacySpent { eps, alpha };
            }
        }
        best
    }

    /// Largest upload count whose accumulated budget stays within `eps_i`.
    pub fn max_rounds(&self, eps_i: f64) -> u64 {
        let mut best = 0u64;
        for (k, &alpha) in self.orders.iter().enumerate() {
            let numer = (alpha - 1.0) * (eps_i - conversion_offset(alpha, self.delta));
            if numer < 0.0 {
                continue;
            }
            let denom = self.tau as f64 * self.per_step[k];
            let rounds = if denom <= 0.0 {
                MAX_FORECAST_ROUNDS
            } else {
                let r = (numer / denom).floor();
                if r >= MAX_FORECAST_ROUNDS as f64 {
                    MAX_FORECAST_ROUNDS
                } else {
                    r as u64
                }
            };
            best = best.max(rounds);
        }
        // Guard the floor against rounding at exact boundaries.
        while best > 0 && self.accumulate(best).eps > eps_i {
            best -= 1;
        }
        while best < MAX_FORECAST_ROUNDS && self.accumulate(best + 1).eps <= eps_i {
            best += 1;
        }
        best
    }
}

/// Accumulated `(eps_hat, best_alpha)` after `t_bar` uploads.
pub fn accumulate_privacy(t_bar: u64, params: &RdpParams) -> Result<(f64, f64)> {
    let spent = RdpCurve::new(params)?.accumulate(t_bar);
    Ok((spent.eps, spent.alpha))
}

/// Forecast of how many uploads a client with level `eps_i` can afford.
pub fn max_participation_rounds(eps_i: f64, params: &RdpParams) -> Result<u64> {
    if !(eps_i > 0.0) {
        return Err(invalid("eps_i", format!("{eps_i} must be positive")));
    }
    Ok(RdpCurve::new(params)?.max_rounds(eps_i))
}

/// Fairness targets `beta_i = min(N * T_i / sum T, 1)`.
pub fn participation_fraction(t_hats: &[u64], n_channels: usize) -> Result<Vec<f64>> {
    let total: f64 = t_hats.iter().map(|&t| t as f64).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateBudget);
    }
    Ok(t_hats
        .iter()
        .map(|&t| (n_channels as f64 * t as f64 / total).min(1.0))
        .collect())
}

/// Per-client privacy state.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    /// `None` for a noiseless client, which is never charged.
    curve: Option<RdpCurve>,
    exposures: u64,
    eps_budget: f64,
    t_hat: u64,
    beta: f64,
    exhausted: bool,
}

impl PrivacyLedger {
    pub fn new(params: &RdpParams, eps_budget: f64) -> Result<Self> {
        if !(eps_budget > 0.0) {
            return Err(invalid("eps_i", format!("{eps_budget} must be positive")));
        }
        Self::with_curve(RdpCurve::new(params)?, eps_budget)
    }

    /// Ledger over an already computed curve.
    pub fn with_curve(curve: RdpCurve, eps_budget: f64) -> Result<Self> {
        if !(eps_budget > 0.0) {
            return Err(invalid("eps_i", format!("{eps_budget} must be positive")));
        }
        let t_hat = curve.max_rounds(eps_budget);
        let mut ledger = Self {
            curve: Some(curve),
            exposures: 0,
            eps_budget,
            t_hat,
            beta: 0.0,
            exhausted: false,
        };
        ledger.refresh_exhausted();
        Ok(ledger)
    }

    /// Ledger that never retires its client; `t_hat` stands in for the horizon.
    pub fn unmetered(eps_budget: f64, t_hat: u64) -> Self {
        Self {
            curve: None,
            exposures: 0,
            eps_budget,
            t_hat,
            beta: 0.0,
            exhausted: false,
        }
    }

    fn refresh_exhausted(&mut self) {
        if let Some(c) = &self.curve {
            self.exhausted = c.accumulate(self.exposures + 1).eps > self.eps_budget;
        }
    }

    pub fn curve(&self) -> Option<&RdpCurve> {
        self.curve.as_ref()
    }

    pub fn exposures(&self) -> u64 {
        self.exposures
    }

    pub fn eps_budget(&self) -> f64 {
        self.eps_budget
    }

    pub fn t_hat(&self) -> u64 {
        self.t_hat
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta.clamp(0.0, 1.0);
    }

    /// True once another upload would push the budget past `eps_i`.
    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    /// Spent budget; `None` when unmetered.
    pub fn spent(&self) -> Option<PrivacySpent> {
        self.curve.as_ref().map(|c| c.accumulate(self.exposures))
    }

    /// Records one completed upload and returns whether the client must quit.
    pub fn record_exposure(&mut self) -> bool {
        self.exposures += 1;
        self.refresh_exhausted();
        self.exhausted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn full_batch_matches_gaussian_divergence() {
        let v = per_step_rdp(1.0, 1.0, 2.0).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
        for &s in &[0.4, 0.5, 0.6, 1.0] {
            for &a in &[2.0, 4.0, 8.0, 16.0] {
                let v = per_step_rdp(1.0, s, a).unwrap();
                let exact = a * (a - 1.0) / (2.0 * s * s);
                assert!(close(v, exact, 1e-6), "s={s} a={a}: {v} vs {exact}");
            }
        }
    }

    #[test]
    fn zero_sampling_costs_nothing() {
        assert_eq!(per_step_rdp(0.0, 0.6, 8.0).unwrap(), 0.0);
    }

    #[test]
    fn real_orders_are_supported() {
        let lo = per_step_rdp(0.1, 0.8, 2.0).unwrap();
        let mid = per_step_rdp(0.1, 0.8, 2.5).unwrap();
        let hi = per_step_rdp(0.1, 0.8, 3.0).unwrap();
        assert!(lo < mid && mid < hi);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(per_step_rdp(1.5, 1.0, 2.0).is_err());
        assert!(per_step_rdp(0.5, 0.0, 2.0).is_err());
        assert!(per_step_rdp(0.5, 1.0, 1.0).is_err());
        let params = RdpParams::new(0.1, 1.0, 1).with_alpha_grid(vec![]);
        assert!(matches!(accumulate_privacy(1, &params), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_noise_is_reported_not_infinite() {
        match per_step_rdp(0.5, 1e-160, 64.0) {
            Err(Error::AccountantOverflow(_)) | Err(Error::InvalidParameter { .. }) => {}
            Ok(v) => assert!(v.is_finite()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn zero_exposures_offset_at_largest_order() {
        let params = RdpParams::new(0.05, 1.0, 1).with_alpha_grid((2..=64).map(f64::from).collect());
        let (eps, alpha) = accumulate_privacy(0, &params).unwrap();
        assert_eq!(alpha, 64.0);
        assert!((eps - 0.027885).abs() < 1e-5, "{eps}");
    }

    #[test]
    fn composed_term_is_linear_in_exposures() {
        let curve = RdpCurve::new(&RdpParams::new(0.2, 0.7, 3)).unwrap();
        for k in 0..curve.orders().len() {
            assert_eq!(curve.composed(2, k), 2.0 * curve.composed(1, k));
        }
    }

    #[test]
    fn analytic_single_order_budget() {
        let params = RdpParams::new(1.0, 1.0, 1).with_alpha_grid(vec![2.0]);
        let (eps, _) = accumulate_privacy(1, &params).unwrap();
        let expected = 1.0 + (1000f64.ln() + 0.5f64.ln() - 2f64.ln());
        assert!((eps - expected).abs() < 1e-6);
        assert!((eps - 6.521461).abs() < 1e-6);
    }

    #[test]
    fn forecast_rounds_analytic() {
        let params = RdpParams::new(1.0, 1.0, 1).with_alpha_grid(vec![2.0]);
        assert_eq!(max_participation_rounds(10.0, &params).unwrap(), 4);
        assert_eq!(max_participation_rounds(20.0, &params).unwrap(), 14);
        assert_eq!(max_participation_rounds(1.0, &params).unwrap(), 0);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(participation_fraction(&[5, 5, 5, 5], 2).unwrap(), vec![0.5; 4]);
        let b = participation_fraction(&[10, 10, 10, 70], 2).unwrap();
        for (x, y) in b.iter().zip([0.2, 0.2, 0.2, 1.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(participation_fraction(&[3, 3, 3], 3).unwrap(), vec![1.0; 3]);
        assert_eq!(participation_fraction(&[0, 0], 1), Err(Error::DegenerateBudget));
    }

    #[test]
    fn ledger_retires_when_next_upload_exceeds_budget() {
        let params = RdpParams::new(1.0, 1.0, 1).with_alpha_grid(vec![2.0]);
        let mut ledger = PrivacyLedger::new(&params, 10.0).unwrap();
        assert_eq!(ledger.t_hat(), 4);
        for k in 1..=4 {
            assert!(!ledger.exhausted());
            let quit = ledger.record_exposure();
            assert_eq!(quit, k == 4);
        }
        assert!(ledger.spent().unwrap().eps <= 10.0);
    }
}
