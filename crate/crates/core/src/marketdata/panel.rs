//! OHLCV panels and auxiliary per-timestamp series.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds since the Unix epoch, or an ordinal index once a panel has been relabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

/// How timestamps are rendered when a panel is written back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeFormat {
    Date,
    DateTime,
    Epoch,
    Ordinal,
}

impl Timestamp {
    /// Accepts epoch seconds, `YYYY-MM-DD`, `YYYY-MM-DD HH:MM:SS`, `YYYY-MM-DDTHH:MM:SS` and RFC 3339.
    pub fn parse(raw: &str) -> Option<(Timestamp, TimeFormat)> {
        let raw = raw.trim();
        if let Ok(secs) = raw.parse::<i64>() {
            return Some((Timestamp(secs), TimeFormat::Epoch));
        }
        if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
            let secs = d.and_hms_opt(0, 0, 0)?.and_utc().timestamp();
            return Some((Timestamp(secs), TimeFormat::Date));
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
            return Some((Timestamp(dt.timestamp()), TimeFormat::DateTime));
        }
        for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
            if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
                return Some((Timestamp(dt.and_utc().timestamp()), TimeFormat::DateTime));
            }
        }
        None
    }

    pub fn format(self, fmt: TimeFormat) -> String {
        match fmt {
            TimeFormat::Epoch | TimeFormat::Ordinal => self.0.to_string(),
            TimeFormat::Date => match DateTime::from_timestamp(self.0, 0) {
                Some(dt) => dt.format("%Y-%m-%d").to_string(),
                None => self.0.to_string(),
            },
            TimeFormat::DateTime => match DateTime::from_timestamp(self.0, 0) {
                Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                None => self.0.to_string(),
            },
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    pub fn flat(price: f64) -> Self {
        Bar {
            open: price,
            high: price,
            low: price,
            close: price,
            volume: 0.0,
        }
    }
}

/// Time-ordered OHLCV bars for a fixed asset universe, stored time-major (`t * K + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    timestamps: Vec<Timestamp>,
    assets: Vec<String>,
    bars: Vec<Bar>,
    time_format: TimeFormat,
}

impl PanelData {
    pub fn new(timestamps: Vec<Timestamp>, assets: Vec<String>, bars: Vec<Bar>) -> Result<Self> {
        Self::with_format(timestamps, assets, bars, TimeFormat::Epoch)
    }

    pub fn with_format(
        timestamps: Vec<Timestamp>,
        assets: Vec<String>,
        bars: Vec<Bar>,
        time_format: TimeFormat,
    ) -> Result<Self> {
        if timestamps.is_empty() || assets.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if bars.len() != timestamps.len() * assets.len() {
            return Err(Error::Dimension {
                what: "panel bars",
                expected: timestamps.len() * assets.len(),
                got: bars.len(),
            });
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("timestamps must be strictly increasing"));
        }
        for b in &bars {
            let prices = [b.open, b.high, b.low, b.close];
            if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return Err(Error::invalid("prices must be finite and positive"));
            }
            if !(b.volume.is_finite() && b.volume >= 0.0) {
                return Err(Error::invalid("volume must be finite and non-negative"));
            }
        }
        Ok(PanelData {
            timestamps,
            assets,
            bars,
            time_format,
        })
    }

    /// Builds a panel whose bars are all flat at the given close prices (`prices[t][k]`).
    pub fn from_closes(timestamps: Vec<Timestamp>, assets: Vec<String>, prices: &[Vec<f64>]) -> Result<Self> {
        let bars = prices
            .iter()
            .flat_map(|row| row.iter().map(|&p| Bar::flat(p)))
            .collect();
        Self::new(timestamps, assets, bars)
    }

    pub fn n_times(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn time_format(&self) -> TimeFormat {
        self.time_format
    }

    pub fn bar(&self, t: usize, k: usize) -> &Bar {
        &self.bars[t * self.assets.len() + k]
    }

    pub fn bar_row(&self, t: usize) -> &[Bar] {
        let k = self.assets.len();
        &self.bars[t * k..(t + 1) * k]
    }

    pub fn series(&self, k: usize, field: impl Fn(&Bar) -> f64) -> Vec<f64> {
        (0..self.n_times()).map(|t| field(self.bar(t, k))).collect()
    }

    pub fn closes(&self, k: usize) -> Vec<f64> {
        self.series(k, |b| b.close)
    }

    /// Rows `range` of the panel; timestamps keep their values.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PanelData {
        let k = self.assets.len();
        PanelData {
            timestamps: self.timestamps[range.clone()].to_vec(),
            assets: self.assets.clone(),
            bars: self.bars[range.start * k..range.end * k].to_vec(),
            time_format: self.time_format,
        }
    }

    pub(crate) fn map_bars(&self, f: impl Fn(usize, &Bar) -> Bar) -> PanelData {
        let k = self.assets.len();
        PanelData {
            timestamps: self.timestamps.clone(),
            assets: self.assets.clone(),
            bars: self.bars.iter().enumerate().map(|(i, b)| f(i % k, b)).collect(),
            time_format: self.time_format,
        }
    }

    pub(crate) fn relabel_ordinal(&mut self) {
        for (i, ts) in self.timestamps.iter_mut().enumerate() {
            *ts = Timestamp(i as i64);
        }
        self.time_format = TimeFormat::Ordinal;
    }
}

/// Column names for an OHLCV CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub asset: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp: "timestamp".into(),
            asset: "asset".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
        }
    }
}

pub fn load_ohlcv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ohlcv(file, schema)
}

/// Reads OHLCV rows, drops rows with any empty field, then drops timestamps
/// where not every asset has a bar.
pub fn parse_ohlcv<R: Read>(reader: R, schema: &CsvSchema) -> Result<PanelData> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let idx = [
        col(&schema.timestamp)?,
        col(&schema.asset)?,
        col(&schema.open)?,
        col(&schema.high)?,
        col(&schema.low)?,
        col(&schema.close)?,
        col(&schema.volume)?,
    ];

    let mut rows: BTreeMap<(Timestamp, String), Bar> = BTreeMap::new();
    let mut formats = BTreeSet::new();
    let mut dropped = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let fields: Vec<&str> = idx.iter().map(|&c| record.get(c).unwrap_or("")).collect();
        if fields.iter().any(|f| f.is_empty() || f.eq_ignore_ascii_case("nan")) {
            dropped += 1;
            continue;
        }
        let (ts, fmt) = Timestamp::parse(fields[0]).ok_or_else(|| Error::Parse {
            line,
            message: format!("unparsable timestamp `{}`", fields[0]),
        })?;
        formats.insert(fmt as u8);
        let num = |j: usize| -> Result<f64> {
            fields[j].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("unparsable number `{}`", fields[j]),
            })
        };
        let bar = Bar {
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
        };
        let prices = [bar.open, bar.high, bar.low, bar.close];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) || !(bar.volume >= 0.0) {
            return Err(Error::Parse {
                line,
                message: "prices must be positive and volume non-negative".into(),
            });
        }
        let key = (ts, fields[1].to_string());
        if rows.contains_key(&key) {
            return Err(Error::DuplicateKey {
                timestamp: fields[0].to_string(),
                asset: key.1,
                line,
            });
        }
        rows.insert(key, bar);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values");
    }

    let assets: Vec<String> = rows
        .keys()
        .map(|(_, a)| a.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut by_time: BTreeMap<Timestamp, Vec<Bar>> = BTreeMap::new();
    for ((ts, _), bar) in rows {
        // BTreeMap iteration is (timestamp, asset)-sorted, so bars arrive in asset order.
        by_time.entry(ts).or_default().push(bar);
    }
    let complete: Vec<(Timestamp, Vec<Bar>)> = by_time
        .into_iter()
        .filter(|(_, bars)| bars.len() == assets.len())
        .collect();
    if complete.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let time_format = match formats.len() {
        1 => match formats.into_iter().next() {
            Some(0) => TimeFormat::Date,
            Some(1) => TimeFormat::DateTime,
            _ => TimeFormat::Epoch,
        },
        _ => TimeFormat::DateTime,
    };
    let timestamps = complete.iter().map(|(t, _)| *t).collect();
    let bars = complete.into_iter().flat_map(|(_, b)| b).collect();
    PanelData::with_format(timestamps, assets, bars, time_format)
}

/// A `timestamp,asset,value` series; rows with a blank asset apply to every asset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuxSeries {
    per_asset: HashMap<(Timestamp, String), f64>,
    broadcast: BTreeMap<Timestamp, f64>,
}

impl AuxSeries {
    pub fn insert(&mut self, ts: Timestamp, asset: Option<&str>, value: f64) {
        match asset {
            Some(a) if !a.is_empty() => {
                self.per_asset.insert((ts, a.to_string()), value);
            }
            _ => {
                self.broadcast.insert(ts, value);
            }
        }
    }

    pub fn broadcast(values: impl IntoIterator<Item = (Timestamp, f64)>) -> Self {
        let mut s = AuxSeries::default();
        for (t, v) in values {
            s.insert(t, None, v);
        }
        s
    }

    pub fn get(&self, ts: Timestamp, asset: &str) -> Option<f64> {
        self.per_asset
            .get(&(ts, asset.to_string()))
            .or_else(|| self.broadcast.get(&ts))
            .copied()
    }

    pub fn is_empty(&self) -> bool {
        self.per_asset.is_empty() && self.broadcast.is_empty()
    }
}

pub fn load_aux_series(path: impl AsRef<Path>) -> Result<AuxSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_aux_series(file)
}

pub fn parse_aux_series<R: Read>(reader: R) -> Result<AuxSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut series = AuxSeries::default();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let raw_ts = record.get(0).unwrap_or("");
        let raw_val = record.get(2).unwrap_or("");
        if raw_ts.is_empty() || raw_val.is_empty() {
            continue;
        }
        let (ts, _) = Timestamp::parse(raw_ts).ok_or_else(|| Error::Parse {
            line,
            message: format!("unparsable timestamp `{raw_ts}`"),
        })?;
        let value = raw_val.parse::<f64>().map_err(|_| Error::Parse {
            line,
            message: format!("unparsable number `{raw_val}`"),
        })?;
        series.insert(ts, record.get(1), value);
    }
    Ok(series)
}
