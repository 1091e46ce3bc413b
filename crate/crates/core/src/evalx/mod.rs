//! Performance metrics, evaluation protocols and classical baselines.

mod baselines;
mod metrics;
mod protocol;

pub use baselines::{
    buy_and_hold, buy_and_hold_values, mean_variance_strategy, mean_variance_weights, project_capped_simplex,
    MeanVariance,
};
pub use metrics::{
    compute_metrics, format_metric, max_drawdown, mean, period_returns, periods_per_year, sample_std, EquityCurve,
    MetricsConfig, MetricsReport, NA, TRADING_DAYS_PER_YEAR,
};
pub use protocol::{
    make_windows, run_protocol, save_trade_log, simulate, trade_slice, write_trade_log, AgentFactory, CycleRecord,
    ProtocolMode, ProtocolRun, Simulation, TradeLogRow, TradingAgent, Window, TRADE_LOG_HEADER,
};
