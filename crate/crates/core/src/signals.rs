//! Sentiment and risk scores (integers 1 to 5) and the action and reward
//! adjustments derived from them.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{RISK_FEATURE, SENTIMENT_FEATURE};
use crate::error::{Error, Result};
use crate::marketdata::{FeaturePanel, Timestamp};

pub const NEUTRAL_SCORE: f64 = 3.0;

fn check_score(score: f64) -> Result<()> {
    if (1.0..=5.0).contains(&score) {
        Ok(())
    } else {
        Err(Error::ScoreOutOfRange(score))
    }
}

/// `l * a` with `l = 1 + 0.05 (u - 3) sign(a)`.
pub fn sentiment_factor(u: f64, a: f64) -> Result<f64> {
    check_score(u)?;
    let sign = if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((1.0 + 0.05 * (u - NEUTRAL_SCORE) * sign) * a)
}

/// `M = sum_i w_i (1 + 0.05 (q_i - 3))` for portfolio weights `w` on the simplex.
pub fn risk_penalty_factor(q: &[f64], w: &[f64]) -> Result<f64> {
    if q.len() != w.len() {
        return Err(Error::Dimension {
            what: "risk weights",
            expected: q.len(),
            got: w.len(),
        });
    }
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("risk weights must lie on the simplex"));
    }
    let mut m = 0.0;
    for (&qi, &wi) in q.iter().zip(w) {
        check_score(qi)?;
        m += wi * (1.0 + 0.05 * (qi - NEUTRAL_SCORE));
    }
    Ok(m)
}

/// Risk factor of a live portfolio. Each asset is weighted by `p_i h_i / v`
/// and the cash share `b / v` counts as neutral risk, so an all-cash
/// portfolio gives `M = 1`.
pub fn portfolio_risk_factor(q: &[f64], balance: f64, prices: &[f64], holdings: &[f64]) -> Result<f64> {
    let mut w: Vec<f64> = prices.iter().zip(holdings).map(|(p, h)| p * h).collect();
    let v = balance + w.iter().sum::<f64>();
    if v <= 0.0 {
        q.iter().try_for_each(|&s| check_score(s))?;
        return Ok(1.0);
    }
    w.iter_mut().for_each(|x| *x /= v);
    let mut q_ext = q.to_vec();
    q_ext.push(NEUTRAL_SCORE);
    w.push(balance / v);
    risk_penalty_factor(&q_ext, &w)
}

/// `r' = r / M`: identity at `M = 1`, shrinks rewards for risky portfolios.
pub fn apply_risk_penalty(reward: f64, m: f64) -> f64 {
    reward / m
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Bars without a signal get the neutral score 3.
    #[default]
    Neutral,
    /// Bars without a signal repeat the asset's previous score (neutral before the first).
    ForwardFill,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalRecord {
    pub sentiment: Option<f64>,
    pub risk: Option<f64>,
}

/// Scores keyed by `(timestamp, asset)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SignalSeries {
    records: BTreeMap<(String, Timestamp), SignalRecord>,
}

impl SignalSeries {
    pub fn insert(
        &mut self,
        ts: Timestamp,
        asset: &str,
        sentiment: Option<f64>,
        risk: Option<f64>,
    ) -> Result<()> {
        for s in sentiment.iter().chain(risk.iter()) {
            if s.fract() != 0.0 {
                return Err(Error::ScoreOutOfRange(*s));
            }
            check_score(*s)?;
        }
        self.records
            .insert((asset.to_string(), ts), SignalRecord { sentiment, risk });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, ts: Timestamp, asset: &str) -> Option<&SignalRecord> {
        self.records.get(&(asset.to_string(), ts))
    }

    fn for_asset<'a>(&'a self, asset: &str) -> impl Iterator<Item = (Timestamp, &'a SignalRecord)> + 'a {
        let lo = (asset.to_string(), Timestamp(i64::MIN));
        let hi = (asset.to_string(), Timestamp(i64::MAX));
        self.records.range(lo..=hi).map(|((_, t), r)| (*t, r))
    }
}

pub fn load_signals(path: impl AsRef<Path>) -> Result<SignalSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_signals(file)
}

/// Reads `timestamp,asset,sentiment,risk`; either score may be blank.
pub fn parse_signals<R: Read>(reader: R) -> Result<SignalSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut out = SignalSeries::default();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let field = |j: usize| record.get(j).unwrap_or("");
        let (ts, _) = Timestamp::parse(field(0)).ok_or_else(|| Error::Parse {
            line,
            message: format!("unparsable timestamp `{}`", field(0)),
        })?;
        let asset = field(1);
        if asset.is_empty() {
            return Err(Error::Parse {
                line,
                message: "missing asset".into(),
            });
        }
        let score = |raw: &str| -> Result<Option<f64>> {
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("unparsable score `{raw}`"),
            })
        };
        let (u, q) = (score(field(2))?, score(field(3))?);
        out.insert(ts, asset, u, q).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
    }
    Ok(out)
}

/// Appends `sentiment` and `risk` columns to the panel. A signal stamped at
/// `s` belongs to the first bar at or after `s`; later signals for the same
/// bar replace earlier ones. Signals after the last bar are ignored.
pub fn align_signals(signals: &SignalSeries, panel: &FeaturePanel, fill: FillPolicy) -> Result<FeaturePanel> {
    let base = panel.base();
    let (t_len, k_len) = (base.n_times(), base.n_assets());
    let times = base.timestamps();
    let mut u: Vec<Option<f64>> = vec![None; t_len * k_len];
    let mut q: Vec<Option<f64>> = vec![None; t_len * k_len];
    let mut attached = 0usize;
    for (k, asset) in base.assets().iter().enumerate() {
        for (ts, rec) in signals.for_asset(asset) {
            let t = times.partition_point(|bar| *bar < ts);
            if t == t_len {
                continue;
            }
            attached += 1;
            if rec.sentiment.is_some() {
                u[t * k_len + k] = rec.sentiment;
            }
            if rec.risk.is_some() {
                q[t * k_len + k] = rec.risk;
            }
        }
    }
    if attached == 0 {
        return Err(Error::InsufficientData(
            "signal series does not overlap the panel".into(),
        ));
    }
    let mut values = vec![0.0; t_len * k_len * 2];
    for k in 0..k_len {
        let (mut last_u, mut last_q) = (NEUTRAL_SCORE, NEUTRAL_SCORE);
        for t in 0..t_len {
            let c = t * k_len + k;
            let (du, dq) = match fill {
                FillPolicy::Neutral => (NEUTRAL_SCORE, NEUTRAL_SCORE),
                FillPolicy::ForwardFill => (last_u, last_q),
            };
            last_u = u[c].unwrap_or(du);
            last_q = q[c].unwrap_or(dq);
            values[2 * c] = last_u;
            values[2 * c + 1] = last_q;
        }
    }
    panel.append(&[SENTIMENT_FEATURE.to_string(), RISK_FEATURE.to_string()], &values)
}
