use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{TimeFormat, Timestamp};

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
const SECONDS_PER_YEAR: f64 = 365.0 * 86_400.0;

/// Portfolio values over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub timestamps: Vec<Timestamp>,
    pub values: Vec<f64>,
    pub time_format: TimeFormat,
}

impl EquityCurve {
    pub fn new(timestamps: Vec<Timestamp>, values: Vec<f64>, time_format: TimeFormat) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Dimension {
                what: "equity timestamps",
                expected: values.len(),
                got: timestamps.len(),
            });
        }
        Ok(EquityCurve {
            timestamps,
            values,
            time_format,
        })
    }

    /// Values with ordinal timestamps `0..n`.
    pub fn from_values(values: Vec<f64>) -> Self {
        EquityCurve {
            timestamps: (0..values.len() as i64).map(Timestamp).collect(),
            values,
            time_format: TimeFormat::Ordinal,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-period simple returns `v_t / v_{t-1} - 1`.
    pub fn returns(&self) -> Vec<f64> {
        period_returns(&self.values)
    }

    /// Appends `other`, dropping its first point when it repeats our last timestamp.
    pub fn extend(&mut self, other: &EquityCurve) {
        let skip = usize::from(
            matches!((self.timestamps.last(), other.timestamps.first()), (Some(a), Some(b)) if a == b),
        );
        self.timestamps.extend_from_slice(&other.timestamps[skip.min(other.len())..]);
        self.values.extend_from_slice(&other.values[skip.min(other.len())..]);
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["timestamp", "value"])?;
        for (t, v) in self.timestamps.iter().zip(&self.values) {
            w.write_record([t.format(self.time_format), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("equity csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

pub fn period_returns(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

/// Annualization factor: 252 for daily or coarser bars, otherwise seconds
/// per year over the median bar spacing. Ordinal timestamps count as daily.
pub fn periods_per_year(timestamps: &[Timestamp], fmt: TimeFormat) -> f64 {
    if fmt == TimeFormat::Ordinal || timestamps.len() < 2 {
        return TRADING_DAYS_PER_YEAR;
    }
    let mut gaps: Vec<i64> = timestamps.windows(2).map(|w| w[1].0 - w[0].0).collect();
    gaps.sort_unstable();
    let median = if gaps.len() % 2 == 1 {
        gaps[gaps.len() / 2] as f64
    } else {
        (gaps[gaps.len() / 2 - 1] + gaps[gaps.len() / 2]) as f64 / 2.0
    };
    if median >= 86_400.0 || median <= 0.0 {
        TRADING_DAYS_PER_YEAR
    } else {
        SECONDS_PER_YEAR / median
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// `None` derives it from the curve's timestamps.
    pub periods_per_year: Option<f64>,
    /// Per-period risk-free rate.
    pub risk_free: f64,
    pub omega_threshold: f64,
    /// Upper tail probability for the expected tail gain.
    pub rachev_alpha: f64,
    /// Lower tail probability for the expected tail loss.
    pub rachev_beta: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            periods_per_year: None,
            risk_free: 0.0,
            omega_threshold: 0.0,
            rachev_alpha: 0.05,
            rachev_beta: 0.05,
        }
    }
}

impl MetricsConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.periods_per_year.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            out.push("metrics.periods_per_year must be > 0".to_string());
        }
        for (name, v) in [("rachev_alpha", self.rachev_alpha), ("rachev_beta", self.rachev_beta)] {
            if !(v > 0.0 && v <= 1.0) {
                out.push(format!("metrics.{name} must be in (0, 1]"));
            }
        }
        out
    }
}

/// Serializes `None` (and non-finite values) as the string `"NA"`.
mod na {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            _ => s.serialize_str(super::NA),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == super::NA => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or NA, got `{t}`"))),
        }
    }
}

/// Marker for a metric whose denominator vanished.
pub const NA: &str = "NA";

/// The eleven evaluation metrics. `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "na")]
    pub cumulative_return: Option<f64>,
    #[serde(with = "na")]
    pub annualized_return: Option<f64>,
    #[serde(with = "na")]
    pub annualized_volatility: Option<f64>,
    #[serde(with = "na")]
    pub sharpe: Option<f64>,
    #[serde(with = "na")]
    pub sortino: Option<f64>,
    #[serde(with = "na")]
    pub calmar: Option<f64>,
    #[serde(with = "na")]
    pub omega: Option<f64>,
    #[serde(with = "na")]
    pub rachev: Option<f64>,
    #[serde(with = "na")]
    pub max_drawdown: Option<f64>,
    #[serde(with = "na")]
    pub romad: Option<f64>,
    #[serde(with = "na")]
    pub win_loss: Option<f64>,
}

impl MetricsReport {
    pub const NAMES: [&'static str; 11] = [
        "cumulative_return",
        "annualized_return",
        "annualized_volatility",
        "sharpe",
        "sortino",
        "calmar",
        "omega",
        "rachev",
        "max_drawdown",
        "romad",
        "win_loss",
    ];

    /// `(name, value)` pairs in [`Self::NAMES`] order.
    pub fn entries(&self) -> [(&'static str, Option<f64>); 11] {
        let v = [
            self.cumulative_return,
            self.annualized_return,
            self.annualized_volatility,
            self.sharpe,
            self.sortino,
            self.calmar,
            self.omega,
            self.rachev,
            self.max_drawdown,
            self.romad,
            self.win_loss,
        ];
        std::array::from_fn(|i| (Self::NAMES[i], v[i]))
    }

    pub fn get(&self, name: &str) -> Option<Option<f64>> {
        self.entries().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `metric,value` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["metric", "value"])?;
        for (name, v) in self.entries() {
            w.write_record([name.to_string(), format_metric(v)])?;
        }
        w.flush().map_err(|e| Error::io("metrics csv", e))?;
        Ok(())
    }
}

pub fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => NA.to_string(),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (ddof = 1); `None` with fewer than two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

/// Most negative `v_j / peak_j - 1` in one pass, where `peak_j` is the running maximum.
pub fn max_drawdown(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in values {
        peak = peak.max(v);
        worst = worst.min(v / peak - 1.0);
    }
    worst
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0 && den.is_finite()).then(|| num / den).filter(|x| x.is_finite())
}

/// Mean of the `ceil(p * n)` largest (`upper`) or smallest values.
fn tail_mean(sorted: &[f64], p: f64, upper: bool) -> f64 {
    let n = sorted.len();
    let m = ((p * n as f64).ceil() as usize).clamp(1, n);
    let tail = if upper { &sorted[n - m..] } else { &sorted[..m] };
    mean(tail)
}

pub fn compute_metrics(curve: &EquityCurve, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let v = &curve.values;
    if v.len() < 2 {
        return Err(Error::InsufficientData("metrics need at least two values".into()));
    }
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::invalid("equity values must be finite and positive"));
    }
    let ppy = cfg
        .periods_per_year
        .unwrap_or_else(|| periods_per_year(&curve.timestamps, curve.time_format));
    let r = period_returns(v);
    let n = r.len() as f64;
    let rf = cfg.risk_free;
    let growth = v[v.len() - 1] / v[0];
    let cumulative = growth - 1.0;
    let annualized = growth.powf(ppy / n) - 1.0;
    let m = mean(&r);
    let sd = sample_std(&r);
    let mdd = max_drawdown(v);

    let downside = (r.len() >= 2).then(|| {
        (r.iter().map(|x| (x - rf).min(0.0).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    let gains: f64 = r.iter().map(|x| (x - cfg.omega_threshold).max(0.0)).sum();
    let losses: f64 = r.iter().map(|x| (cfg.omega_threshold - x).max(0.0)).sum();
    let mut sorted = r.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let tail_gain = tail_mean(&sorted, cfg.rachev_alpha, true);
    let tail_loss = -tail_mean(&sorted, cfg.rachev_beta, false);
    let wins = r.iter().filter(|x| **x > 0.0).count() as f64;
    let lossn = r.iter().filter(|x| **x < 0.0).count() as f64;

    Ok(MetricsReport {
        cumulative_return: Some(cumulative),
        annualized_return: Some(annualized).filter(|x| x.is_finite()),
        annualized_volatility: sd.map(|s| s * ppy.sqrt()),
        sharpe: sd.and_then(|s| ratio(m - rf, s)).map(|x| x * ppy.sqrt()),
        sortino: downside.and_then(|d| ratio(m - rf, d)).map(|x| x * ppy.sqrt()),
        calmar: ratio(annualized, mdd.abs()),
        omega: ratio(gains, losses),
        rachev: if tail_loss > 0.0 { ratio(tail_gain, tail_loss) } else { None },
        max_drawdown: Some(mdd),
        romad: ratio(cumulative, mdd.abs()),
        win_loss: ratio(wins, lossn),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(values: &[f64]) -> MetricsReport {
        compute_metrics(&EquityCurve::from_values(values.to_vec()), &MetricsConfig::default()).unwrap()
    }

    #[test]
    fn drawdown_example() {
        let r = report(&[100.0, 110.0, 99.0, 120.0]);
        assert!((r.max_drawdown.unwrap() - (99.0 - 110.0) / 110.0).abs() < 1e-15);
    }

    #[test]
    fn constant_curve_has_undefined_ratios() {
        let r = report(&[50.0; 5]);
        assert_eq!(r.cumulative_return, Some(0.0));
        assert_eq!(r.max_drawdown, Some(0.0));
        assert_eq!(r.sharpe, None);
        assert_eq!(r.calmar, None);
        assert_eq!(r.win_loss, None);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"sharpe\": \"NA\""));
        assert_eq!(MetricsReport::from_json(&json).unwrap(), r);
    }

    #[test]
    fn compounding_example() {
        let mut v = vec![100.0];
        for _ in 0..4 {
            let last = *v.last().unwrap();
            v.push(last * 1.01);
        }
        let r = report(&v);
        assert!((r.cumulative_return.unwrap() - (1.01f64.powi(4) - 1.0)).abs() < 1e-12);
        assert!((r.cumulative_return.unwrap() - 0.04060401).abs() < 1e-8);
    }

    #[test]
    fn csv_lists_all_metrics() {
        let mut buf = Vec::new();
        report(&[1.0, 2.0, 1.5]).write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 12);
        assert!(s.starts_with("metric,value\n"));
    }

    #[test]
    fn annualization_from_spacing() {
        let daily: Vec<Timestamp> = (0..5).map(|i| Timestamp(i * 86_400)).collect();
        assert_eq!(periods_per_year(&daily, TimeFormat::Date), 252.0);
        let secs: Vec<Timestamp> = (0..5).map(Timestamp).collect();
        assert_eq!(periods_per_year(&secs, TimeFormat::Epoch), SECONDS_PER_YEAR);
    }

    #[test]
    fn extend_skips_shared_boundary() {
        let mut a = EquityCurve::from_values(vec![1.0, 2.0]);
        let b = EquityCurve::new(vec![Timestamp(1), Timestamp(2)], vec![2.5, 3.0], TimeFormat::Ordinal).unwrap();
        a.extend(&b);
        assert_eq!(a.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_non_positive_values() {
        let c = EquityCurve::from_values(vec![1.0, 0.0]);
        assert!(compute_metrics(&c, &MetricsConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn metric_ranges(steps in proptest::collection::vec(-0.2f64..0.2, 2..200)) {
            let mut v = vec![100.0];
            for s in steps {
                let last = *v.last().unwrap();
                v.push(last * (1.0 + s));
            }
            let r = report(&v);
            let mdd = r.max_drawdown.unwrap();
            prop_assert!((-1.0..=0.0).contains(&mdd));
            prop_assert!(r.omega.is_none_or(|o| o >= 0.0));
            prop_assert!(r.win_loss.is_none_or(|w| w >= 0.0));
            prop_assert_eq!(r.cumulative_return.unwrap(), v[v.len() - 1] / v[0] - 1.0);
        }
    }
}
