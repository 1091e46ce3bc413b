use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, EquityCurve, MetricsConfig, MetricsReport};
use crate::env::{EnvConfig, MarketData, TradingEnv};
use crate::error::{Error, Result};
use crate::marketdata::eval_rows;

/// One train / validation / trade triple of period indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub trade: Range<usize>,
    /// Train and validation together: `[z - Y - X, z - 1]` for trade start `z`.
    pub retrain: Range<usize>,
}

/// Enumerates windows of `x` train, `y` validation and `trade` trade periods
/// over `t` periods, starting at 0 and rolling forward by `roll`.
pub fn make_windows(t: usize, x: usize, y: usize, trade: usize, roll: usize) -> Result<Vec<Window>> {
    if x == 0 || trade == 0 || roll == 0 {
        return Err(Error::invalid("train, trade and roll lengths must be >= 1"));
    }
    let span = x + y + trade;
    if t < span {
        return Err(Error::InsufficientData(format!(
            "{t} periods cannot hold one window of {x} + {y} + {trade}"
        )));
    }
    Ok((0..=t - span)
        .step_by(roll)
        .map(|s| {
            let z = s + x + y;
            Window {
                train: s..s + x,
                validation: s + x..z,
                trade: z..z + trade,
                retrain: s..z,
            }
        })
        .collect())
}

/// Env data for trading the periods in `trade`: decisions start at the bar
/// before the range, so every period in the range is a realized return.
pub fn trade_slice(trade: &Range<usize>) -> Range<usize> {
    trade.start.saturating_sub(1)..trade.end
}

/// Something the protocol can train and then query for actions.
pub trait TradingAgent {
    /// Trains on `train`; `validation` is offered for tuning.
    fn fit(&mut self, train: &Arc<MarketData>, validation: Option<&Arc<MarketData>>) -> Result<()>;
    /// Environment action for a flattened market state.
    fn act(&self, obs: &[f64]) -> Result<Vec<f64>>;
    /// Parameter updates applied so far.
    fn updates(&self) -> u64;
}

/// Builds a fresh agent for each protocol cycle.
pub trait AgentFactory {
    fn build(&self, cycle: usize) -> Result<Box<dyn TradingAgent>>;
}

impl<F> AgentFactory for F
where
    F: Fn(usize) -> Result<Box<dyn TradingAgent>>,
{
    fn build(&self, cycle: usize) -> Result<Box<dyn TradingAgent>> {
        self(cycle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolMode {
    /// Train on the released split, evaluate once, frozen, on the withheld tail.
    Backtest { eval_fraction: f64 },
    /// Walk forward one period at a time: train on `train`, validate on
    /// `validation`, retrain on both, trade one period.
    Rolling {
        train: usize,
        validation: usize,
        /// Trade only the last `days` possible periods.
        days: Option<usize>,
    },
}

impl ProtocolMode {
    pub fn problems(&self) -> Vec<String> {
        match self {
            ProtocolMode::Backtest { eval_fraction } if !(0.0..1.0).contains(eval_fraction) => {
                vec!["protocol.eval_fraction must be in [0, 1)".to_string()]
            }
            ProtocolMode::Rolling { train, days, .. } => {
                let mut p = Vec::new();
                if *train < 2 {
                    p.push("protocol.train must be >= 2".to_string());
                }
                if *days == Some(0) {
                    p.push("protocol.days must be >= 1".to_string());
                }
                p
            }
            _ => Vec::new(),
        }
    }
}

/// One row of the trade log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLogRow {
    pub timestamp: String,
    pub asset: String,
    pub action: f64,
    pub executed: f64,
    pub price: f64,
    pub cost: f64,
    pub balance: f64,
    pub value: f64,
}

pub const TRADE_LOG_HEADER: [&str; 8] = ["timestamp", "asset", "action", "executed", "price", "cost", "balance", "value"];

pub fn write_trade_log<W: Write>(rows: &[TradeLogRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(TRADE_LOG_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("trade log", e))?;
    Ok(())
}

pub fn save_trade_log(rows: &[TradeLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trade_log(rows, f)
}

/// Outcome of stepping a policy through one data range.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub equity: EquityCurve,
    pub trades: Vec<TradeLogRow>,
    pub balance: f64,
    pub holdings: Vec<f64>,
}

/// Runs `policy` over every step of `data`, starting from `start`
/// (balance and holdings) or the configured initial balance.
pub fn simulate(
    policy: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    data: Arc<MarketData>,
    cfg: &EnvConfig,
    start: Option<(f64, &[f64])>,
) -> Result<Simulation> {
    let fmt = data.time_format();
    let mut env = TradingEnv::new(data.clone(), cfg.clone())?;
    let mut state = match start {
        Some((b, h)) => env.reset_with(b, h)?,
        None => env.reset(),
    };
    let mut values = vec![env.value()];
    let mut trades = Vec::new();
    while !env.is_done() {
        let t = state.t;
        let action = policy(&state.flatten())?;
        let out = env.step(&action)?;
        let rec = env.last_trade();
        let value = env.value();
        for k in 0..data.n_assets() {
            trades.push(TradeLogRow {
                timestamp: data.timestamps()[t].format(fmt),
                asset: data.assets()[k].clone(),
                action: rec.requested[k],
                executed: rec.executed[k],
                price: rec.prices[k],
                cost: rec.costs[k],
                balance: out.state.balance,
                value,
            });
        }
        values.push(value);
        state = out.state;
    }
    Ok(Simulation {
        equity: EquityCurve::new(data.timestamps().to_vec(), values, fmt)?,
        trades,
        balance: state.balance,
        holdings: state.holdings.clone(),
    })
}

/// One retrain-and-trade cycle of a protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// First traded period.
    pub z: usize,
    pub retrain: Range<usize>,
    pub trade: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub equity: EquityCurve,
    pub metrics: MetricsReport,
    pub trades: Vec<TradeLogRow>,
    pub cycles: Vec<CycleRecord>,
    /// Parameter updates of the final agent when evaluation began.
    pub frozen_updates: u64,
}

fn evaluate_frozen(
    agent: &dyn TradingAgent,
    data: Arc<MarketData>,
    cfg: &EnvConfig,
    start: Option<(f64, &[f64])>,
) -> Result<(Simulation, u64)> {
    let frozen = agent.updates();
    let sim = simulate(&mut |obs| agent.act(obs), data, cfg, start)?;
    if agent.updates() != frozen {
        return Err(Error::ProtocolViolation(format!(
            "agent changed from {frozen} to {} updates during evaluation",
            agent.updates()
        )));
    }
    Ok((sim, frozen))
}

/// Backtest or rolling-window evaluation of the agents `factory` builds.
pub fn run_protocol(
    mode: &ProtocolMode,
    factory: &dyn AgentFactory,
    data: &Arc<MarketData>,
    env_cfg: &EnvConfig,
    metrics_cfg: &MetricsConfig,
) -> Result<ProtocolRun> {
    let t = data.n_times();
    match mode {
        ProtocolMode::Backtest { eval_fraction } => {
            if !(0.0..1.0).contains(eval_fraction) {
                return Err(Error::invalid("eval fraction must be in [0, 1)"));
            }
            let n_eval = eval_rows(t, *eval_fraction);
            if n_eval < 2 || n_eval >= t {
                return Err(Error::InsufficientData(format!(
                    "backtest needs >= 2 eval rows and >= 1 train row, got {n_eval} of {t}"
                )));
            }
            let cut = t - n_eval;
            let train = Arc::new(data.slice(0..cut));
            let eval = Arc::new(data.slice(cut..t));
            let mut agent = factory.build(0)?;
            agent.fit(&train, None)?;
            let (sim, frozen) = evaluate_frozen(agent.as_ref(), eval, env_cfg, None)?;
            Ok(ProtocolRun {
                metrics: compute_metrics(&sim.equity, metrics_cfg)?,
                equity: sim.equity,
                trades: sim.trades,
                cycles: vec![CycleRecord {
                    z: cut,
                    retrain: 0..cut,
                    trade: cut..t,
                }],
                frozen_updates: frozen,
            })
        }
        ProtocolMode::Rolling { train, validation, days } => {
            let mut windows = make_windows(t, *train, *validation, 1, 1)?;
            if let Some(z) = days {
                if *z > windows.len() {
                    return Err(Error::InsufficientData(format!(
                        "{z} trading days requested but only {} fit",
                        windows.len()
                    )));
                }
                windows.drain(..windows.len() - z);
            }
            let mut equity: Option<EquityCurve> = None;
            let mut trades = Vec::new();
            let mut cycles = Vec::new();
            let mut position: Option<(f64, Vec<f64>)> = None;
            let mut frozen = 0;
            for (i, w) in windows.iter().enumerate() {
                let mut agent = factory.build(i)?;
                let x_data = Arc::new(data.slice(w.train.clone()));
                let y_data = (!w.validation.is_empty()).then(|| Arc::new(data.slice(w.validation.clone())));
                agent.fit(&x_data, y_data.as_ref())?;
                agent.fit(&Arc::new(data.slice(w.retrain.clone())), None)?;
                let slice = Arc::new(data.slice(trade_slice(&w.trade)));
                let start = position.as_ref().map(|(b, h)| (*b, h.as_slice()));
                let (sim, f) = evaluate_frozen(agent.as_ref(), slice, env_cfg, start)?;
                frozen = f;
                match equity.as_mut() {
                    Some(e) => e.extend(&sim.equity),
                    None => equity = Some(sim.equity.clone()),
                }
                trades.extend(sim.trades);
                position = Some((sim.balance, sim.holdings));
                cycles.push(CycleRecord {
                    z: w.trade.start,
                    retrain: w.retrain.clone(),
                    trade: w.trade.clone(),
                });
            }
            let equity = equity.ok_or_else(|| Error::InsufficientData("no rolling windows".into()))?;
            Ok(ProtocolRun {
                metrics: compute_metrics(&equity, metrics_cfg)?,
                equity,
                trades,
                cycles,
                frozen_updates: frozen,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Hold {
        k: usize,
        fits: Vec<Range<usize>>,
    }

    impl TradingAgent for Hold {
        fn fit(&mut self, train: &Arc<MarketData>, _v: Option<&Arc<MarketData>>) -> Result<()> {
            let ts = train.timestamps();
            self.fits.push(ts[0].0 as usize..ts[ts.len() - 1].0 as usize + 1);
            Ok(())
        }
        fn act(&self, _obs: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.k])
        }
        fn updates(&self) -> u64 {
            0
        }
    }

    struct Cheater {
        n: Cell<u64>,
    }

    impl TradingAgent for Cheater {
        fn fit(&mut self, _t: &Arc<MarketData>, _v: Option<&Arc<MarketData>>) -> Result<()> {
            Ok(())
        }
        fn act(&self, _obs: &[f64]) -> Result<Vec<f64>> {
            self.n.set(self.n.get() + 1);
            Ok(vec![1.0])
        }
        fn updates(&self) -> u64 {
            self.n.get()
        }
    }

    fn market(t: usize) -> Arc<MarketData> {
        let prices: Vec<Vec<f64>> = (0..t).map(|i| vec![100.0 + i as f64]).collect();
        Arc::new(MarketData::from_prices(&prices).unwrap())
    }

    #[test]
    fn window_enumeration() {
        assert_eq!(make_windows(9, 6, 2, 1, 1).unwrap().len(), 1);
        assert_eq!(make_windows(10, 6, 2, 1, 1).unwrap().len(), 2);
        assert!(make_windows(8, 6, 2, 1, 1).is_err());
        let w = make_windows(45, 30, 5, 5, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].trade, 40..45);
        assert_eq!(w[1].retrain, 5..40);
    }

    #[test]
    fn zero_action_agent_is_flat() {
        let factory = |_: usize| -> Result<Box<dyn TradingAgent>> { Ok(Box::new(Hold { k: 1, fits: vec![] })) };
        let run = run_protocol(
            &ProtocolMode::Backtest { eval_fraction: 0.2 },
            &factory,
            &market(20),
            &EnvConfig::default(),
            &MetricsConfig::default(),
        )
        .unwrap();
        assert_eq!(run.metrics.cumulative_return, Some(0.0));
        assert_eq!(run.equity.len(), 4);
        assert_eq!(run.equity.timestamps[0].0, 16);
    }

    #[test]
    fn evaluation_updates_are_a_violation() {
        let factory = |_: usize| -> Result<Box<dyn TradingAgent>> { Ok(Box::new(Cheater { n: Cell::new(0) })) };
        let err = run_protocol(
            &ProtocolMode::Backtest { eval_fraction: 0.5 },
            &factory,
            &market(10),
            &EnvConfig::default(),
            &MetricsConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn rolling_trades_one_period_per_cycle() {
        let factory = |_: usize| -> Result<Box<dyn TradingAgent>> { Ok(Box::new(Hold { k: 1, fits: vec![] })) };
        let run = run_protocol(
            &ProtocolMode::Rolling {
                train: 6,
                validation: 2,
                days: Some(3),
            },
            &factory,
            &market(12),
            &EnvConfig::default(),
            &MetricsConfig::default(),
        )
        .unwrap();
        assert_eq!(run.cycles.len(), 3);
        assert_eq!(run.equity.len(), 4);
        assert_eq!(run.trades.len(), 3);
        for c in &run.cycles {
            assert_eq!(c.retrain, c.z - 8..c.z);
            assert_eq!(c.trade, c.z..c.z + 1);
        }
    }

    #[test]
    fn trade_log_header() {
        let mut buf = Vec::new();
        write_trade_log(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), TRADE_LOG_HEADER.join(","));
    }
}
