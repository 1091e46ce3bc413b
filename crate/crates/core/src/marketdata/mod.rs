//! Market data ingestion, indicator computation, feature selection and
//! temporal splitting.

pub mod indicators;
pub mod panel;
mod selection;
mod split;

use std::io::{Read, Write};
use std::path::Path;

pub use indicators::{compute_indicators, Indicator, IndicatorSpec};
pub use panel::{
    load_aux_series, load_ohlcv, parse_aux_series, parse_ohlcv, AuxSeries, Bar, CsvSchema, PanelData,
    TimeFormat, Timestamp,
};
pub use selection::{select_features, FeatureSelection, DEFAULT_CORR_THRESHOLD};
pub use split::{eval_rows, MAX_PERTURBATION, perturb_prices, split_temporal, DataSplit};

use crate::error::{Error, Result};

/// A panel with `I` real-valued features per (timestamp, asset), stored as
/// `features[(t * K + k) * I + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePanel {
    base: PanelData,
    feature_names: Vec<String>,
    features: Vec<f64>,
}

impl FeaturePanel {
    pub fn new(base: PanelData, feature_names: Vec<String>, features: Vec<f64>) -> Result<Self> {
        let expected = base.n_times() * base.n_assets() * feature_names.len();
        if features.len() != expected {
            return Err(Error::Dimension {
                what: "feature values",
                expected,
                got: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature panel contains non-finite values"));
        }
        Ok(FeaturePanel {
            base,
            feature_names,
            features,
        })
    }

    /// A panel with no features; the state then carries only balance, prices and holdings.
    pub fn bare(base: PanelData) -> Self {
        FeaturePanel {
            base,
            feature_names: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn base(&self) -> &PanelData {
        &self.base
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn values(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, t: usize, k: usize, i: usize) -> f64 {
        let kk = self.base.n_assets();
        self.features[(t * kk + k) * self.n_features() + i]
    }

    /// All `K * I` features at time `t`, asset-major.
    pub fn row(&self, t: usize) -> &[f64] {
        let w = self.base.n_assets() * self.n_features();
        &self.features[t * w..(t + 1) * w]
    }

    /// Every (t, asset) sample of feature `i`.
    pub fn column(&self, i: usize) -> Vec<f64> {
        let n = self.n_features();
        self.features.iter().skip(i).step_by(n).copied().collect()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> FeaturePanel {
        let w = self.base.n_assets() * self.n_features();
        FeaturePanel {
            base: self.base.slice(range.clone()),
            feature_names: self.feature_names.clone(),
            features: self.features[range.start * w..range.end * w].to_vec(),
        }
    }

    /// Keeps only the named features, in the order given.
    pub fn select(&self, names: &[String]) -> Result<FeaturePanel> {
        let idx = names
            .iter()
            .map(|n| {
                self.feature_index(n)
                    .ok_or_else(|| Error::invalid(format!("unknown feature `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = self.n_features();
        let features = self
            .features
            .chunks(n.max(1))
            .take(self.base.n_times() * self.base.n_assets())
            .flat_map(|cell| idx.iter().map(move |&i| cell[i]))
            .collect();
        FeaturePanel::new(self.base.clone(), names.to_vec(), features)
    }

    /// Appends features given as `values[(t * K + k) * extra + j]`.
    pub fn append(&self, names: &[String], values: &[f64]) -> Result<FeaturePanel> {
        let cells = self.base.n_times() * self.base.n_assets();
        let extra = names.len();
        if values.len() != cells * extra {
            return Err(Error::Dimension {
                what: "appended feature values",
                expected: cells * extra,
                got: values.len(),
            });
        }
        let n = self.n_features();
        let mut features = Vec::with_capacity(cells * (n + extra));
        for c in 0..cells {
            features.extend_from_slice(&self.features[c * n..(c + 1) * n]);
            features.extend_from_slice(&values[c * extra..(c + 1) * extra]);
        }
        let mut feature_names = self.feature_names.clone();
        feature_names.extend(names.iter().cloned());
        FeaturePanel::new(self.base.clone(), feature_names, features)
    }

    /// Replaces timestamps with ordinal indices `0..T`, hiding calendar dates.
    pub fn with_ordinal_timestamps(&self) -> FeaturePanel {
        let mut out = self.clone();
        out.base.relabel_ordinal();
        out
    }

    pub(crate) fn with_base(&self, base: PanelData) -> FeaturePanel {
        FeaturePanel {
            base,
            feature_names: self.feature_names.clone(),
            features: self.features.clone(),
        }
    }

    /// Writes `timestamp,asset,open,high,low,close,volume,<features...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp", "asset", "open", "high", "low", "close", "volume"];
        header.extend(self.feature_names.iter().map(String::as_str));
        w.write_record(&header)?;
        let fmt = self.base.time_format();
        for t in 0..self.base.n_times() {
            let ts = self.base.timestamps()[t].format(fmt);
            for (k, asset) in self.base.assets().iter().enumerate() {
                let b = self.base.bar(t, k);
                let mut rec = vec![
                    ts.clone(),
                    asset.clone(),
                    b.open.to_string(),
                    b.high.to_string(),
                    b.low.to_string(),
                    b.close.to_string(),
                    b.volume.to_string(),
                ];
                rec.extend((0..self.n_features()).map(|i| self.feature(t, k, i).to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<feature csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<FeaturePanel> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let fixed = ["timestamp", "asset", "open", "high", "low", "close", "volume"];
        if headers.len() < fixed.len() || headers.iter().zip(fixed).any(|(h, f)| h != f) {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature csv must start with {}", fixed.join(",")),
            });
        }
        let names: Vec<String> = headers.iter().skip(fixed.len()).map(str::to_string).collect();
        let mut timestamps = Vec::new();
        let mut assets: Vec<String> = Vec::new();
        let mut bars = Vec::new();
        let mut features = Vec::new();
        let mut time_format = TimeFormat::Epoch;
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let num = |j: usize| -> Result<f64> {
                let raw = rec.get(j).unwrap_or("");
                raw.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("unparsable number `{raw}`"),
                })
            };
            let (ts, fmt) = Timestamp::parse(&rec[0]).ok_or_else(|| Error::Parse {
                line,
                message: format!("unparsable timestamp `{}`", &rec[0]),
            })?;
            time_format = fmt;
            if timestamps.last() != Some(&ts) {
                timestamps.push(ts);
            }
            if timestamps.len() == 1 {
                assets.push(rec[1].to_string());
            } else {
                let k = (bars.len()) % assets.len();
                if rec[1] != assets[k] {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected asset `{}`, found `{}`", assets[k], &rec[1]),
                    });
                }
            }
            bars.push(Bar {
                open: num(2)?,
                high: num(3)?,
                low: num(4)?,
                close: num(5)?,
                volume: num(6)?,
            });
            for j in 0..names.len() {
                features.push(num(fixed.len() + j)?);
            }
        }
        if bars.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let base = PanelData::with_format(timestamps, assets, bars, time_format)?;
        FeaturePanel::new(base, names, features)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<FeaturePanel> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}
