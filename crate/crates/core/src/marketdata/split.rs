use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::panel::{Bar, PanelData, Timestamp};
use super::FeaturePanel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: FeaturePanel,
    /// `None` when the eval fraction rounds to zero rows.
    pub eval: Option<FeaturePanel>,
    /// First withheld timestamp.
    pub boundary: Option<Timestamp>,
}

impl DataSplit {
    pub fn eval_len(&self) -> usize {
        self.eval.as_ref().map_or(0, |e| e.base().n_times())
    }
}

/// Number of trailing rows withheld: `ceil(fraction * T)`, tolerant of
/// floating-point noise in the product.
pub fn eval_rows(t: usize, eval_fraction: f64) -> usize {
    let raw = eval_fraction * t as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n as usize).min(t)
}

pub fn split_temporal(fp: &FeaturePanel, eval_fraction: f64) -> Result<DataSplit> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::invalid("eval fraction must be in [0, 1)"));
    }
    let t = fp.base().n_times();
    let n_eval = eval_rows(t, eval_fraction);
    if n_eval == t {
        return Err(Error::InsufficientData("split leaves no training rows".into()));
    }
    let cut = t - n_eval;
    let eval = (n_eval > 0).then(|| fp.slice(cut..t));
    Ok(DataSplit {
        train: fp.slice(0..cut),
        boundary: eval.as_ref().map(|e| e.base().timestamps()[0]),
        eval,
    })
}

pub const MAX_PERTURBATION: f64 = 0.5;

/// Scales each asset's OHLC prices by one factor drawn uniformly from
/// `[1 - range_pct, 1 + range_pct]`. Volumes are unchanged.
pub fn perturb_prices(panel: &PanelData, range_pct: f64, seed: u64) -> Result<PanelData> {
    if !(0.0..=MAX_PERTURBATION).contains(&range_pct) {
        return Err(Error::invalid(format!(
            "perturbation range must be in [0, {MAX_PERTURBATION}]"
        )));
    }
    if range_pct == 0.0 {
        return Ok(panel.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<f64> = (0..panel.n_assets())
        .map(|_| rng.random_range(1.0 - range_pct..=1.0 + range_pct))
        .collect();
    Ok(panel.map_bars(|k, b| Bar {
        open: b.open * factors[k],
        high: b.high * factors[k],
        low: b.low * factors[k],
        close: b.close * factors[k],
        volume: b.volume,
    }))
}

impl FeaturePanel {
    /// Applies [`perturb_prices`] to the underlying bars; features are left as computed.
    pub fn perturbed(&self, range_pct: f64, seed: u64) -> Result<FeaturePanel> {
        Ok(self.with_base(perturb_prices(self.base(), range_pct, seed)?))
    }
}
