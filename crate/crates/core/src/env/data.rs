use std::ops::Range;

use crate::error::{Error, Result};
use crate::marketdata::{FeaturePanel, TimeFormat, Timestamp};

pub const TURBULENCE_FEATURE: &str = "turbulence";
pub const SENTIMENT_FEATURE: &str = "sentiment";
pub const RISK_FEATURE: &str = "risk";

/// Dense price and feature arrays an environment steps over.
///
/// Prices are closes, `prices[t * K + k]`; features are `features[(t * K + k) * I + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    timestamps: Vec<Timestamp>,
    time_format: TimeFormat,
    assets: Vec<String>,
    prices: Vec<f64>,
    features: Vec<f64>,
    feature_names: Vec<String>,
    turbulence: Option<Vec<f64>>,
    sentiment: Option<Vec<f64>>,
    risk: Option<Vec<f64>>,
}

impl MarketData {
    /// Prices only (`prices[t][k]`), ordinal timestamps.
    pub fn from_prices(prices: &[Vec<f64>]) -> Result<Self> {
        let k = prices.first().map_or(0, |r| r.len());
        let t = prices.len();
        Self::from_arrays(
            (0..t).map(|i| Timestamp(i as i64)).collect(),
            (0..k).map(|j| format!("asset{j}")).collect(),
            prices.concat(),
            Vec::new(),
            Vec::new(),
        )
    }

    pub fn from_arrays(
        timestamps: Vec<Timestamp>,
        assets: Vec<String>,
        prices: Vec<f64>,
        features: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (t, k, i) = (timestamps.len(), assets.len(), feature_names.len());
        if k == 0 {
            return Err(Error::invalid("market data needs at least one asset"));
        }
        if prices.len() != t * k {
            return Err(Error::Dimension {
                what: "prices",
                expected: t * k,
                got: prices.len(),
            });
        }
        if features.len() != t * k * i {
            return Err(Error::Dimension {
                what: "features",
                expected: t * k * i,
                got: features.len(),
            });
        }
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::invalid("prices must be finite and positive"));
        }
        let mut data = MarketData {
            timestamps,
            time_format: TimeFormat::Ordinal,
            assets,
            prices,
            features,
            feature_names,
            turbulence: None,
            sentiment: None,
            risk: None,
        };
        data.extract_special_columns();
        Ok(data)
    }

    /// Uses every feature of the panel as part of the state. A `turbulence`
    /// column drives risk gating; `sentiment`/`risk` columns drive the signal
    /// adjustments when enabled in [`super::EnvConfig`].
    pub fn from_panel(fp: &FeaturePanel) -> Result<Self> {
        let base = fp.base();
        let prices = base.bars().iter().map(|b| b.close).collect();
        let mut data = Self::from_arrays(
            base.timestamps().to_vec(),
            base.assets().to_vec(),
            prices,
            fp.values().to_vec(),
            fp.feature_names().to_vec(),
        )?;
        data.time_format = base.time_format();
        Ok(data)
    }

    fn extract_special_columns(&mut self) {
        let (t, k, n) = (self.n_times(), self.n_assets(), self.n_features());
        let column = |name: &str| {
            self.feature_names.iter().position(|f| f == name).map(|i| {
                (0..t * k).map(|c| self.features[c * n + i]).collect::<Vec<f64>>()
            })
        };
        // turbulence is market-wide; read it from the first asset
        self.turbulence = column(TURBULENCE_FEATURE).map(|c| c.into_iter().step_by(k).collect());
        self.sentiment = column(SENTIMENT_FEATURE);
        self.risk = column(RISK_FEATURE);
    }

    pub fn n_times(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn time_format(&self) -> TimeFormat {
        self.time_format
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn prices_at(&self, t: usize) -> &[f64] {
        let k = self.n_assets();
        &self.prices[t * k..(t + 1) * k]
    }

    pub fn features_at(&self, t: usize) -> &[f64] {
        let w = self.n_assets() * self.n_features();
        &self.features[t * w..(t + 1) * w]
    }

    pub fn turbulence_at(&self, t: usize) -> Option<f64> {
        self.turbulence.as_ref().map(|v| v[t])
    }

    pub fn sentiment_at(&self, t: usize) -> Option<&[f64]> {
        let k = self.n_assets();
        self.sentiment.as_ref().map(|v| &v[t * k..(t + 1) * k])
    }

    pub fn risk_at(&self, t: usize) -> Option<&[f64]> {
        let k = self.n_assets();
        self.risk.as_ref().map(|v| &v[t * k..(t + 1) * k])
    }

    /// Dimension of the flattened state, `K(I + 2) + 1`.
    pub fn state_dim(&self) -> usize {
        self.n_assets() * (self.n_features() + 2) + 1
    }

    pub fn slice(&self, range: Range<usize>) -> MarketData {
        let k = self.n_assets();
        let w = k * self.n_features();
        let cut = |v: &Option<Vec<f64>>, width: usize| {
            v.as_ref().map(|v| v[range.start * width..range.end * width].to_vec())
        };
        MarketData {
            timestamps: self.timestamps[range.clone()].to_vec(),
            time_format: self.time_format,
            assets: self.assets.clone(),
            prices: self.prices[range.start * k..range.end * k].to_vec(),
            features: self.features[range.start * w..range.end * w].to_vec(),
            feature_names: self.feature_names.clone(),
            turbulence: cut(&self.turbulence, 1),
            sentiment: cut(&self.sentiment, k),
            risk: cut(&self.risk, k),
        }
    }

    /// Same data with every price scaled by a per-asset factor.
    pub fn scale_prices(&self, factors: &[f64]) -> MarketData {
        let k = self.n_assets();
        let mut out = self.clone();
        for (i, p) in out.prices.iter_mut().enumerate() {
            *p *= factors[i % k];
        }
        out
    }
}
