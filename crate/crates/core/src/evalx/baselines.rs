use nalgebra::{DMatrix, DVector};

use super::metrics::EquityCurve;
use crate::env::MarketData;
use crate::error::{Error, Result};

/// Relative ridge added to the covariance diagonal.
const RIDGE: f64 = 1e-10;
const MAX_ITERS: usize = 200_000;

/// Euclidean projection of `y` onto `{w : 0 <= w_i <= cap, sum w = 1}`,
/// found by bisection on the shift `tau` in `w_i = clamp(y_i - tau, 0, cap)`.
pub fn project_capped_simplex(y: &[f64], cap: f64) -> Result<Vec<f64>> {
    let k = y.len();
    if k == 0 || cap * (k as f64) < 1.0 - 1e-12 || cap <= 0.0 {
        return Err(Error::invalid(format!("cap {cap} is infeasible for {k} assets")));
    }
    let total = |tau: f64| y.iter().map(|v| (v - tau).clamp(0.0, cap)).sum::<f64>();
    let mut lo = y.iter().cloned().fold(f64::INFINITY, f64::min) - cap;
    let mut hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (s_lo, s_hi) = (total(lo), total(hi));
    let tau = if (s_lo - 1.0).abs() <= (s_hi - 1.0).abs() { lo } else { hi };
    Ok(y.iter().map(|v| (v - tau).clamp(0.0, cap)).collect())
}

/// `max mu'w - (rho / 2) w' Sigma w` over the capped simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVariance {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub rho: f64,
}

impl MeanVariance {
    /// Sample mean and covariance of `returns` (rows are periods). The risk
    /// aversion defaults to `1' Sigma^-1 mu`, which makes the unconstrained
    /// optimum the tangency portfolio.
    pub fn from_returns(returns: &[Vec<f64>], rho: Option<f64>) -> Result<Self> {
        let t = returns.len();
        if t < 2 {
            return Err(Error::InsufficientData("mean-variance needs >= 2 return rows".into()));
        }
        let k = returns[0].len();
        if returns.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("ragged return rows"));
        }
        let x = DMatrix::from_fn(t, k, |i, j| returns[i][j]);
        let mu = DVector::from_fn(k, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(t, k, |i, j| x[(i, j)] - mu[j]);
        let mut sigma = centered.transpose() * &centered / (t - 1) as f64;
        let scale = (sigma.trace() / k as f64).max(f64::MIN_POSITIVE);
        for j in 0..k {
            sigma[(j, j)] += RIDGE * scale;
        }
        let rho = match rho {
            Some(r) if r > 0.0 => r,
            Some(_) => return Err(Error::invalid("risk aversion must be > 0")),
            None => {
                let tangency = sigma
                    .clone()
                    .cholesky()
                    .map(|c| c.solve(&mu).sum())
                    .unwrap_or(0.0)
                    .abs();
                if tangency > 0.0 && tangency.is_finite() {
                    tangency
                } else {
                    1.0
                }
            }
        };
        Ok(MeanVariance { mu, sigma, rho })
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let w = DVector::from_column_slice(w);
        self.mu.dot(&w) - 0.5 * self.rho * w.dot(&(&self.sigma * &w))
    }

    /// Projected gradient ascent with step `1 / (rho * lambda_max)`, from
    /// the equal-weight portfolio.
    pub fn solve(&self, cap: f64) -> Result<Vec<f64>> {
        let k = self.mu.len();
        let lmax = self.sigma.clone().symmetric_eigen().eigenvalues.max().max(f64::MIN_POSITIVE);
        let step = 1.0 / (self.rho * lmax);
        let mut w = project_capped_simplex(&vec![1.0 / k as f64; k], cap)?;
        for _ in 0..MAX_ITERS {
            let wv = DVector::from_column_slice(&w);
            let grad = &self.mu - self.rho * (&self.sigma * &wv);
            let y: Vec<f64> = (0..k).map(|i| w[i] + step * grad[i]).collect();
            let next = project_capped_simplex(&y, cap)?;
            let delta = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            w = next;
            if delta < 1e-15 {
                break;
            }
        }
        Ok(w)
    }
}

/// Long-only mean-variance weights with a per-asset cap.
pub fn mean_variance_weights(returns: &[Vec<f64>], cap: f64) -> Result<Vec<f64>> {
    MeanVariance::from_returns(returns, None)?.solve(cap)
}

fn price_rows(data: &MarketData) -> Vec<Vec<f64>> {
    (0..data.n_times()).map(|t| data.prices_at(t).to_vec()).collect()
}

/// Equal-weight buy at the first bar (paying `cost_rate` on the purchase),
/// then hold with fractional shares.
pub fn buy_and_hold(data: &MarketData, initial: f64, cost_rate: f64) -> Result<EquityCurve> {
    let prices = price_rows(data);
    let values = buy_and_hold_values(&prices, initial, cost_rate)?;
    EquityCurve::new(data.timestamps().to_vec(), values, data.time_format())
}

pub fn buy_and_hold_values(prices: &[Vec<f64>], initial: f64, cost_rate: f64) -> Result<Vec<f64>> {
    let first = prices.first().ok_or_else(|| Error::InsufficientData("empty price series".into()))?;
    if prices.iter().flatten().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::invalid("prices must be positive"));
    }
    let k = first.len() as f64;
    let shares: Vec<f64> = first.iter().map(|p| initial / k / (p * (1.0 + cost_rate))).collect();
    Ok(prices
        .iter()
        .map(|row| row.iter().zip(&shares).map(|(p, s)| p * s).sum())
        .collect())
}

/// Rebalances to capped mean-variance weights estimated on the trailing
/// `lookback` returns every `rebalance` periods. Trading starts at bar
/// `lookback`; costs are charged on traded notional.
pub fn mean_variance_strategy(
    data: &MarketData,
    lookback: usize,
    rebalance: usize,
    cap: f64,
    initial: f64,
    cost_rate: f64,
) -> Result<EquityCurve> {
    let prices = price_rows(data);
    let t = prices.len();
    if lookback < 3 || rebalance == 0 || t <= lookback {
        return Err(Error::InsufficientData(format!(
            "mean-variance strategy needs more than {lookback} bars, got {t}"
        )));
    }
    let k = prices[0].len();
    let mut shares = vec![0.0; k];
    let mut cash = initial;
    let mut values = Vec::with_capacity(t - lookback);
    for (i, row) in prices.iter().enumerate().skip(lookback) {
        if (i - lookback).is_multiple_of(rebalance) {
            let rets: Vec<Vec<f64>> = (i - lookback + 1..=i)
                .map(|s| (0..k).map(|j| prices[s][j] / prices[s - 1][j] - 1.0).collect())
                .collect();
            let w = mean_variance_weights(&rets, cap)?;
            let value: f64 = cash + row.iter().zip(&shares).map(|(p, s)| p * s).sum::<f64>();
            let turnover: f64 = (0..k).map(|j| (w[j] * value - shares[j] * row[j]).abs()).sum();
            let investable = value - cost_rate * turnover;
            for j in 0..k {
                shares[j] = w[j] * investable / row[j];
            }
            cash = 0.0;
        }
        values.push(cash + row.iter().zip(&shares).map(|(p, s)| p * s).sum::<f64>());
    }
    EquityCurve::new(data.timestamps()[lookback..].to_vec(), values, data.time_format())
}
