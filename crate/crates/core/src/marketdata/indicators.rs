//! Technical indicators over per-asset price series.
//!
//! Every series function returns a vector aligned with its input; entries
//! before the indicator's first valid index are `NaN`. [`compute_indicators`]
//! trims the leading rows where any requested indicator is still warming up.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use super::panel::{AuxSeries, PanelData};
use super::FeaturePanel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Indicator {
    Macd,
    BollUb,
    BollLb,
    Rsi(usize),
    Cci(usize),
    Dx(usize),
    CloseSma(usize),
    Vix,
    Turbulence,
}

pub const MACD_FAST: usize = 12;
pub const MACD_SLOW: usize = 26;
pub const BOLL_WINDOW: usize = 20;
pub const BOLL_WIDTH: f64 = 2.0;
pub const DEFAULT_TURBULENCE_WINDOW: usize = 252;

impl Indicator {
    /// The ten indicators of the standard feature set.
    pub fn default_set() -> Vec<Indicator> {
        vec![
            Indicator::Macd,
            Indicator::BollUb,
            Indicator::BollLb,
            Indicator::Rsi(30),
            Indicator::Cci(30),
            Indicator::Dx(30),
            Indicator::CloseSma(30),
            Indicator::CloseSma(60),
            Indicator::Vix,
            Indicator::Turbulence,
        ]
    }

    /// Index of the first bar at which the indicator is defined.
    pub fn first_valid(&self, turbulence_window: usize) -> usize {
        match *self {
            Indicator::Macd => MACD_SLOW - 1,
            Indicator::BollUb | Indicator::BollLb => BOLL_WINDOW - 1,
            Indicator::Rsi(n) | Indicator::Dx(n) => n,
            Indicator::Cci(n) | Indicator::CloseSma(n) => n.saturating_sub(1),
            Indicator::Vix => 0,
            Indicator::Turbulence => turbulence_window + 1,
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Indicator::Macd => write!(f, "macd"),
            Indicator::BollUb => write!(f, "boll_ub"),
            Indicator::BollLb => write!(f, "boll_lb"),
            Indicator::Rsi(n) => write!(f, "rsi_{n}"),
            Indicator::Cci(n) => write!(f, "cci_{n}"),
            Indicator::Dx(n) => write!(f, "dx_{n}"),
            Indicator::CloseSma(n) => write!(f, "close_{n}"),
            Indicator::Vix => write!(f, "vix"),
            Indicator::Turbulence => write!(f, "turbulence"),
        }
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownIndicator(s.to_string());
        match s {
            "macd" => return Ok(Indicator::Macd),
            "boll_ub" => return Ok(Indicator::BollUb),
            "boll_lb" => return Ok(Indicator::BollLb),
            "vix" => return Ok(Indicator::Vix),
            "turbulence" => return Ok(Indicator::Turbulence),
            _ => {}
        }
        let (prefix, n) = s.rsplit_once('_').ok_or_else(unknown)?;
        let n: usize = n.parse().map_err(|_| unknown())?;
        if n < 2 {
            return Err(unknown());
        }
        match prefix {
            "rsi" => Ok(Indicator::Rsi(n)),
            "cci" => Ok(Indicator::Cci(n)),
            "dx" => Ok(Indicator::Dx(n)),
            "close" => Ok(Indicator::CloseSma(n)),
            _ => Err(unknown()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndicatorSpec {
    pub indicators: Vec<Indicator>,
    pub turbulence_window: usize,
    /// Required when `Indicator::Vix` is requested.
    pub vix: Option<AuxSeries>,
}

impl Default for IndicatorSpec {
    fn default() -> Self {
        IndicatorSpec {
            indicators: Indicator::default_set(),
            turbulence_window: DEFAULT_TURBULENCE_WINDOW,
            vix: None,
        }
    }
}

impl IndicatorSpec {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let indicators = names
            .iter()
            .map(|n| n.as_ref().parse())
            .collect::<Result<Vec<_>>>()?;
        Ok(IndicatorSpec {
            indicators,
            ..Default::default()
        })
    }

    pub fn warmup(&self) -> usize {
        self.indicators
            .iter()
            .map(|i| i.first_valid(self.turbulence_window))
            .max()
            .unwrap_or(0)
    }
}

pub fn sma(xs: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; xs.len()];
    if n == 0 || xs.len() < n {
        return out;
    }
    for i in (n - 1)..xs.len() {
        out[i] = xs[i + 1 - n..=i].iter().sum::<f64>() / n as f64;
    }
    out
}

/// Rolling sample standard deviation (ddof = 1).
pub fn rolling_std(xs: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; xs.len()];
    if n < 2 || xs.len() < n {
        return out;
    }
    for i in (n - 1)..xs.len() {
        let w = &xs[i + 1 - n..=i];
        let m = w.iter().sum::<f64>() / n as f64;
        let ss: f64 = w.iter().map(|x| (x - m) * (x - m)).sum();
        out[i] = (ss / (n - 1) as f64).sqrt();
    }
    out
}

/// Recursive EMA with `alpha = 2 / (span + 1)`, seeded with the first value.
pub fn ema(xs: &[f64], span: usize) -> Vec<f64> {
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = match xs.first() {
        Some(&x) => x,
        None => return out,
    };
    for &x in xs {
        acc = alpha * x + (1.0 - alpha) * acc;
        out.push(acc);
    }
    out
}

pub fn macd(close: &[f64]) -> Vec<f64> {
    let fast = ema(close, MACD_FAST);
    let slow = ema(close, MACD_SLOW);
    fast.iter()
        .zip(&slow)
        .enumerate()
        .map(|(i, (f, s))| if i + 1 >= MACD_SLOW { f - s } else { f64::NAN })
        .collect()
}

pub fn bollinger(close: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mid = sma(close, BOLL_WINDOW);
    let sd = rolling_std(close, BOLL_WINDOW);
    let ub = mid.iter().zip(&sd).map(|(m, s)| m + BOLL_WIDTH * s).collect();
    let lb = mid.iter().zip(&sd).map(|(m, s)| m - BOLL_WIDTH * s).collect();
    (ub, lb)
}

/// Wilder RSI. The first average gain/loss is the simple mean of the first `n`
/// changes; a window with neither gains nor losses reads 50.
pub fn rsi(close: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; close.len()];
    if n == 0 || close.len() <= n {
        return out;
    }
    let mut avg_gain = 0.0;
    let mut avg_loss = 0.0;
    for i in 1..=n {
        let d = close[i] - close[i - 1];
        avg_gain += d.max(0.0);
        avg_loss += (-d).max(0.0);
    }
    avg_gain /= n as f64;
    avg_loss /= n as f64;
    let value = |g: f64, l: f64| {
        if l == 0.0 {
            if g == 0.0 {
                50.0
            } else {
                100.0
            }
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    out[n] = value(avg_gain, avg_loss);
    for i in (n + 1)..close.len() {
        let d = close[i] - close[i - 1];
        avg_gain = (avg_gain * (n - 1) as f64 + d.max(0.0)) / n as f64;
        avg_loss = (avg_loss * (n - 1) as f64 + (-d).max(0.0)) / n as f64;
        out[i] = value(avg_gain, avg_loss);
    }
    out
}

/// Lambert CCI on the typical price with the 0.015 scaling constant.
pub fn cci(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Vec<f64> {
    let tp: Vec<f64> = (0..close.len())
        .map(|i| (high[i] + low[i] + close[i]) / 3.0)
        .collect();
    let mean = sma(&tp, n);
    let mut out = vec![f64::NAN; tp.len()];
    if n == 0 || tp.len() < n {
        return out;
    }
    for i in (n - 1)..tp.len() {
        let m = mean[i];
        let md = tp[i + 1 - n..=i].iter().map(|x| (x - m).abs()).sum::<f64>() / n as f64;
        out[i] = if md == 0.0 { 0.0 } else { (tp[i] - m) / (0.015 * md) };
    }
    out
}

/// Wilder directional movement index.
pub fn dx(high: &[f64], low: &[f64], close: &[f64], n: usize) -> Vec<f64> {
    let len = close.len();
    let mut out = vec![f64::NAN; len];
    if n == 0 || len <= n {
        return out;
    }
    let mut plus_dm = vec![0.0; len];
    let mut minus_dm = vec![0.0; len];
    let mut tr = vec![0.0; len];
    for i in 1..len {
        let up = high[i] - high[i - 1];
        let down = low[i - 1] - low[i];
        plus_dm[i] = if up > down && up > 0.0 { up } else { 0.0 };
        minus_dm[i] = if down > up && down > 0.0 { down } else { 0.0 };
        tr[i] = (high[i] - low[i])
            .max((high[i] - close[i - 1]).abs())
            .max((low[i] - close[i - 1]).abs());
    }
    let mut s_plus: f64 = plus_dm[1..=n].iter().sum();
    let mut s_minus: f64 = minus_dm[1..=n].iter().sum();
    let mut s_tr: f64 = tr[1..=n].iter().sum();
    let value = |p: f64, m: f64, t: f64| {
        if t == 0.0 {
            return 0.0;
        }
        let (pdi, mdi) = (100.0 * p / t, 100.0 * m / t);
        if pdi + mdi == 0.0 {
            0.0
        } else {
            100.0 * (pdi - mdi).abs() / (pdi + mdi)
        }
    };
    out[n] = value(s_plus, s_minus, s_tr);
    let nf = n as f64;
    for i in (n + 1)..len {
        s_plus = s_plus - s_plus / nf + plus_dm[i];
        s_minus = s_minus - s_minus / nf + minus_dm[i];
        s_tr = s_tr - s_tr / nf + tr[i];
        out[i] = value(s_plus, s_minus, s_tr);
    }
    out
}

/// Mahalanobis distance of each day's cross-asset simple-return vector from the
/// mean and covariance of the preceding `window` return vectors. `closes[k][t]`.
pub fn turbulence(closes: &[Vec<f64>], window: usize) -> Vec<f64> {
    let k = closes.len();
    let len = closes.first().map_or(0, |c| c.len());
    let mut out = vec![f64::NAN; len];
    if k == 0 || window < 2 || len <= window + 1 {
        return out;
    }
    // returns[t] defined for t >= 1
    let ret = |t: usize, a: usize| closes[a][t] / closes[a][t - 1] - 1.0;
    for t in (window + 1)..len {
        let hist = DMatrix::from_fn(window, k, |i, a| ret(t - window + i, a));
        let mean = DVector::from_fn(k, |a, _| hist.column(a).mean());
        let mut cov = DMatrix::zeros(k, k);
        for i in 0..window {
            let d = hist.row(i).transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= (window - 1) as f64;
        let y = DVector::from_fn(k, |a, _| ret(t, a)) - &mean;
        let pinv = cov
            .pseudo_inverse(1e-12)
            .unwrap_or_else(|_| DMatrix::zeros(k, k));
        out[t] = (y.transpose() * pinv * &y)[(0, 0)].max(0.0);
    }
    out
}

/// Computes the requested indicators for every asset and drops the warm-up rows.
pub fn compute_indicators(panel: &PanelData, spec: &IndicatorSpec) -> Result<FeaturePanel> {
    let t_len = panel.n_times();
    let k_len = panel.n_assets();
    let warmup = spec.warmup();
    if t_len <= warmup {
        let worst = spec
            .indicators
            .iter()
            .max_by_key(|i| i.first_valid(spec.turbulence_window))
            .map(|i| i.to_string())
            .unwrap_or_default();
        return Err(Error::Warmup {
            indicator: worst,
            required: warmup,
            available: t_len,
        });
    }
    if spec.indicators.contains(&Indicator::Vix) && spec.vix.as_ref().is_none_or(|v| v.is_empty()) {
        return Err(Error::invalid("vix indicator requested without a vix series"));
    }

    let closes: Vec<Vec<f64>> = (0..k_len).map(|k| panel.closes(k)).collect();
    let turb = if spec.indicators.contains(&Indicator::Turbulence) {
        turbulence(&closes, spec.turbulence_window)
    } else {
        Vec::new()
    };

    let n_feat = spec.indicators.len();
    // columns[k][j] is the full-length series of indicator j for asset k
    let mut columns: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k_len);
    for (k, close) in closes.iter().enumerate() {
        let high = panel.series(k, |b| b.high);
        let low = panel.series(k, |b| b.low);
        let mut boll: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut cols = Vec::with_capacity(n_feat);
        for ind in &spec.indicators {
            let col = match *ind {
                Indicator::Macd => macd(close),
                Indicator::BollUb => boll.get_or_insert_with(|| bollinger(close)).0.clone(),
                Indicator::BollLb => boll.get_or_insert_with(|| bollinger(close)).1.clone(),
                Indicator::Rsi(n) => rsi(close, n),
                Indicator::Cci(n) => cci(&high, &low, close, n),
                Indicator::Dx(n) => dx(&high, &low, close, n),
                Indicator::CloseSma(n) => sma(close, n),
                Indicator::Vix => vix_column(panel, k, spec.vix.as_ref())?,
                Indicator::Turbulence => turb.clone(),
            };
            cols.push(col);
        }
        columns.push(cols);
    }

    let kept = t_len - warmup;
    let mut features = Vec::with_capacity(kept * k_len * n_feat);
    for t in warmup..t_len {
        for cols in &columns {
            for col in cols {
                features.push(col[t]);
            }
        }
    }
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        let name = spec.indicators[pos % n_feat].to_string();
        return Err(Error::invalid(format!("indicator `{name}` produced a non-finite value")));
    }
    FeaturePanel::new(
        panel.slice(warmup..t_len),
        spec.indicators.iter().map(|i| i.to_string()).collect(),
        features,
    )
}

/// Per-bar VIX values, carrying the last observation forward over gaps.
fn vix_column(panel: &PanelData, k: usize, vix: Option<&AuxSeries>) -> Result<Vec<f64>> {
    let vix = vix.ok_or_else(|| Error::invalid("missing vix series"))?;
    let asset = &panel.assets()[k];
    let mut last = None;
    let mut out = Vec::with_capacity(panel.n_times());
    for &ts in panel.timestamps() {
        if let Some(v) = vix.get(ts, asset) {
            last = Some(v);
        }
        out.push(last.ok_or_else(|| {
            Error::invalid(format!("vix series has no value at or before {ts}"))
        })?);
    }
    Ok(out)
}
