//! Agent diversity, ensemble action combination and the rolling
//! train / validate / weight / trade pipeline.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{train_on_market, AgentSpec, Algorithm, DistributionSource, ExploreMode, TrainedAgent};
use crate::env::{ActionMode, EnvConfig, MarketData};
use crate::error::{Error, Result};
use crate::evalx::{make_windows, period_returns, sample_std, simulate, trade_slice, EquityCurve, TradeLogRow, Window};
use crate::seeds;

/// `base_loss + lambda * mean_s sum_B KL(pi_B(s) || pi_A(s))`: the diversity
/// bonus added to a maximized objective.
pub fn kl_diversity_loss(
    base_loss: f64,
    policy_a: &dyn DistributionSource,
    peers: &[&dyn DistributionSource],
    states: &[Vec<f64>],
    lambda: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::invalid("KL diversity needs a non-empty state batch"));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be >= 0"));
    }
    let mut total = 0.0;
    for s in states {
        let a = policy_a.action_distribution(s)?;
        for peer in peers {
            total += peer.action_distribution(s)?.kl(&a)?;
        }
    }
    Ok(base_loss + lambda * total / states.len() as f64)
}

/// Mean pairwise `KL(pi_i || pi_j)` over ordered member pairs and states.
pub fn mean_pairwise_kl(members: &[&dyn DistributionSource], states: &[Vec<f64>]) -> Result<f64> {
    if members.len() < 2 || states.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for s in states {
        let dists = members
            .iter()
            .map(|m| m.action_distribution(s))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..dists.len() {
            for j in 0..dists.len() {
                if i != j {
                    total += dists[i].kl(&dists[j])?;
                    n += 1;
                }
            }
        }
    }
    Ok(total / n as f64)
}

/// `(mean - r_f) / std` with the sample standard deviation.
pub fn sharpe_ratio(returns: &[f64], risk_free: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData("Sharpe ratio needs >= 2 returns".into()));
    }
    let sd = sample_std(returns).unwrap_or(0.0);
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::UndefinedSharpe);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok((mean - risk_free) / sd)
}

/// Softmax over the agents whose Sharpe ratio reaches `threshold`; the rest
/// (including undefined, NaN ratios) get weight 0. Equal weights when every
/// agent is discarded.
pub fn sharpe_weights(sharpes: &[f64], threshold: f64) -> Vec<f64> {
    let keep: Vec<bool> = sharpes.iter().map(|s| *s >= threshold).collect();
    if !keep.iter().any(|k| *k) {
        return vec![1.0 / sharpes.len() as f64; sharpes.len()];
    }
    let top = sharpes
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sharpes
        .iter()
        .zip(&keep)
        .map(|(s, k)| if *k { (s - top).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `sum_i w_i * actions_i`.
pub fn combine_weighted(actions: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if actions.len() != weights.len() || actions.is_empty() {
        return Err(Error::Dimension {
            what: "ensemble weights",
            expected: actions.len(),
            got: weights.len(),
        });
    }
    let k = actions[0].len();
    let mut out = vec![0.0; k];
    for (a, w) in actions.iter().zip(weights) {
        if a.len() != k {
            return Err(Error::Dimension {
                what: "member action",
                expected: k,
                got: a.len(),
            });
        }
        if *w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(a) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Modal value of `votes`. Ties go to hold (0) when it is among the tied
/// values, otherwise to the smallest magnitude; a tie between `+a` and `-a`
/// also resolves to hold.
pub fn majority_vote(votes: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &v in votes {
        let v = if v == 0.0 { 0.0 } else { v };
        counts.entry(v.to_bits()).or_insert((v, 0)).1 += 1;
    }
    let best = counts.values().map(|(_, c)| *c).max().unwrap_or(0);
    let tied: Vec<f64> = counts.values().filter(|(_, c)| *c == best).map(|(v, _)| *v).collect();
    if tied.len() == 1 {
        return tied[0];
    }
    let smallest = tied.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let at_smallest: Vec<f64> = tied.into_iter().filter(|v| v.abs() == smallest).collect();
    if at_smallest.len() == 1 {
        at_smallest[0]
    } else {
        0.0
    }
}

/// Per-component majority vote over member actions.
pub fn combine_majority(actions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = actions.first().map_or(0, |a| a.len());
    if actions.iter().any(|a| a.len() != k) {
        return Err(Error::invalid("member actions differ in length"));
    }
    Ok((0..k)
        .map(|i| majority_vote(&actions.iter().map(|a| a[i]).collect::<Vec<_>>()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleScheme {
    /// Sharpe-weighted average of the members' deterministic actions.
    WeightedAverage,
    /// Pick one member per step with probability equal to its weight and
    /// sample from its policy.
    Mixture,
    /// Per-asset modal action of discrete members.
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<AgentSpec>,
    pub scheme: EnsembleScheme,
    pub kl_lambda: f64,
    pub sharpe_discard_threshold: f64,
    pub train: usize,
    pub validation: usize,
    pub trade: usize,
    /// Per-period risk-free rate for validation Sharpe ratios.
    pub risk_free: f64,
    /// Keep positions across windows instead of liquidating at boundaries.
    pub carry_positions: bool,
    /// Each member trains on prices scaled by per-asset factors drawn from
    /// `[1 - perturbation, 1 + perturbation]`.
    pub perturbation: f64,
}

impl Default for EnsembleConfig {
    /// One PPO, one SAC and one DDPG member on 30 / 5 / 5 windows.
    fn default() -> Self {
        EnsembleConfig {
            members: vec![
                AgentSpec::stock(Algorithm::Ppo),
                AgentSpec::stock(Algorithm::Sac),
                AgentSpec::stock(Algorithm::Ddpg),
            ],
            scheme: EnsembleScheme::WeightedAverage,
            kl_lambda: 0.0,
            sharpe_discard_threshold: 0.0,
            train: 30,
            validation: 5,
            trade: 5,
            risk_free: 0.0,
            carry_positions: false,
            perturbation: 0.0,
        }
    }
}

impl EnsembleConfig {
    pub fn problems(&self, env: &EnvConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.members.is_empty() {
            out.push("ensemble.members must list at least one agent".to_string());
        }
        if !(self.kl_lambda >= 0.0 && self.kl_lambda.is_finite()) {
            out.push("ensemble.kl_lambda must be >= 0".to_string());
        }
        if self.train < 2 {
            out.push("ensemble.train must be >= 2".to_string());
        }
        if self.validation < 2 {
            out.push("ensemble.validation must be >= 2".to_string());
        }
        if self.trade < 1 {
            out.push("ensemble.trade must be >= 1".to_string());
        }
        if !(0.0..=crate::marketdata::MAX_PERTURBATION).contains(&self.perturbation) {
            out.push("ensemble.perturbation must be in [0, 0.5]".to_string());
        }
        let discrete_env = matches!(env.action_mode, ActionMode::Discrete { .. });
        for (i, m) in self.members.iter().enumerate() {
            out.extend(m.problems(&format!("ensemble.members[{i}].")));
            if m.algorithm.is_discrete() != discrete_env {
                out.push(format!(
                    "ensemble.members[{i}]: {} does not match the env action mode",
                    m.algorithm
                ));
            }
        }
        match self.scheme {
            EnsembleScheme::MajorityVote if !discrete_env => {
                out.push("ensemble.scheme majority_vote needs a discrete env action mode".to_string())
            }
            EnsembleScheme::WeightedAverage | EnsembleScheme::Mixture if discrete_env => out.push(
                "ensemble.scheme weighted_average/mixture needs a continuous env action mode".to_string(),
            ),
            _ => {}
        }
        out
    }

    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        let p = self.problems(env);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Trained members and how their actions are combined.
#[derive(Debug, Clone)]
pub struct EnsemblePolicy {
    pub members: Vec<TrainedAgent>,
    /// Simplex weights; `None` for majority voting.
    pub weights: Option<Vec<f64>>,
    pub scheme: EnsembleScheme,
}

impl EnsemblePolicy {
    pub fn new(members: Vec<TrainedAgent>, weights: Option<Vec<f64>>, scheme: EnsembleScheme) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        if let Some(w) = &weights {
            if w.len() != members.len() || w.iter().any(|v| *v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("ensemble weights must lie on the simplex"));
            }
        } else if scheme != EnsembleScheme::MajorityVote {
            return Err(Error::invalid("weighted schemes need weights"));
        }
        Ok(EnsemblePolicy { members, weights, scheme })
    }

    /// Environment action for `obs`; `rng` drives mixture sampling only.
    pub fn act(&self, obs: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self.scheme {
            EnsembleScheme::WeightedAverage => {
                let w = self.weights.as_deref().unwrap_or(&[]);
                let actions = self
                    .members
                    .iter()
                    .zip(w)
                    .map(|(m, wi)| if *wi > 0.0 { m.act_greedy(obs) } else { Ok(vec![0.0; m.action_space.env_dim()]) })
                    .collect::<Result<Vec<_>>>()?;
                combine_weighted(&actions, w)
            }
            EnsembleScheme::Mixture => {
                let w = self.weights.as_deref().unwrap_or(&[]);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = w.iter().rposition(|v| *v > 0.0).unwrap_or(0);
                for (i, wi) in w.iter().enumerate() {
                    acc += wi;
                    if u < acc && *wi > 0.0 {
                        pick = i;
                        break;
                    }
                }
                self.members[pick].act(obs, ExploreMode::Explore, rng)
            }
            EnsembleScheme::MajorityVote => {
                let actions = self
                    .members
                    .iter()
                    .map(|m| m.act_greedy(obs))
                    .collect::<Result<Vec<_>>>()?;
                combine_majority(&actions)
            }
        }
    }
}

/// What happened in one rolling window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: Window,
    /// Validation Sharpe per member; `None` when undefined.
    pub sharpes: Vec<Option<f64>>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub equity: EquityCurve,
    pub trades: Vec<TradeLogRow>,
    pub windows: Vec<WindowReport>,
    /// Members of the last window.
    pub last_policy: EnsemblePolicy,
}

/// Training data for member `m` in window `w`: the train range, with the
/// member's own price perturbation.
pub fn member_training_data(
    cfg: &EnsembleConfig,
    data: &MarketData,
    window: &Window,
    m: usize,
    seed: u64,
) -> MarketData {
    let slice = data.slice(window.train.clone());
    if cfg.perturbation == 0.0 {
        return slice;
    }
    let mut rng = seeds::stream_rng(seed, seeds::DATA_PERTURBATION, m as u64);
    let factors: Vec<f64> = (0..data.n_assets())
        .map(|_| rng.random_range(1.0 - cfg.perturbation..=1.0 + cfg.perturbation))
        .collect();
    slice.scale_prices(&factors)
}

/// Spec of member `m` in window `w`, seeded from the `agent-m` stream.
pub fn member_spec(cfg: &EnsembleConfig, m: usize, w: usize, seed: u64) -> AgentSpec {
    AgentSpec {
        seed: seeds::derive_seed(seed, &format!("{}-{m}", seeds::AGENT), w as u64),
        ..cfg.members[m].clone()
    }
}

fn train_members(
    cfg: &EnsembleConfig,
    data: &MarketData,
    window: &Window,
    w: usize,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<Vec<TrainedAgent>> {
    let train_one = |m: usize, peers: &[&dyn DistributionSource]| {
        let d = Arc::new(member_training_data(cfg, data, window, m, seed));
        train_on_market(&member_spec(cfg, m, w, seed), d, env_cfg, peers, cfg.kl_lambda)
    };
    if cfg.kl_lambda == 0.0 {
        return (0..cfg.members.len())
            .into_par_iter()
            .map(|m| train_one(m, &[]))
            .collect();
    }
    let mut trained: Vec<TrainedAgent> = Vec::with_capacity(cfg.members.len());
    for m in 0..cfg.members.len() {
        let agent = {
            let peers: Vec<&dyn DistributionSource> = trained.iter().map(|a| a as &dyn DistributionSource).collect();
            train_one(m, &peers)?
        };
        trained.push(agent);
    }
    Ok(trained)
}

fn validation_sharpe(
    agent: &TrainedAgent,
    data: Arc<MarketData>,
    env_cfg: &EnvConfig,
    risk_free: f64,
) -> Result<Option<f64>> {
    let sim = simulate(&mut |obs| agent.act_greedy(obs), data, env_cfg, None)?;
    match sharpe_ratio(&period_returns(&sim.equity.values), risk_free) {
        Ok(s) => Ok(Some(s)),
        Err(Error::UndefinedSharpe) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Sells every holding at `prices`, paying `cost_rate` on the proceeds.
/// Returns the cash balance and the log rows of the sales.
fn liquidate(
    balance: f64,
    holdings: &[f64],
    data: &MarketData,
    t: usize,
    cost_rate: f64,
) -> (f64, Vec<TradeLogRow>) {
    let prices = data.prices_at(t);
    let mut cash = balance;
    let mut rows = Vec::new();
    for (k, (&h, &p)) in holdings.iter().zip(prices).enumerate() {
        if h == 0.0 {
            continue;
        }
        let cost = p * h.abs() * cost_rate;
        cash += p * h - cost;
        rows.push((k, -h, p, cost));
    }
    let rows = rows
        .into_iter()
        .map(|(k, q, p, cost)| TradeLogRow {
            timestamp: data.timestamps()[t].format(data.time_format()),
            asset: data.assets()[k].clone(),
            action: q,
            executed: q,
            price: p,
            cost,
            balance: cash,
            value: cash,
        })
        .collect();
    (cash, rows)
}

/// Rolls train / validate / trade windows over `data`, advancing by the
/// trade length. Each window trains the members independently, weights them
/// by validation Sharpe and trades the combined policy.
pub fn run_rolling_ensemble(
    cfg: &EnsembleConfig,
    data: &Arc<MarketData>,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<EnsembleRun> {
    cfg.validate(env_cfg)?;
    env_cfg.validate()?;
    let windows = make_windows(data.n_times(), cfg.train, cfg.validation, cfg.trade, cfg.trade)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, seeds::ROLLOUT, 0));
    let mut equity: Option<EquityCurve> = None;
    let mut trades = Vec::new();
    let mut reports = Vec::new();
    let mut position: Option<(f64, Vec<f64>)> = None;
    let mut last_policy = None;
    for (w, window) in windows.iter().enumerate() {
        let members = train_members(cfg, data, window, w, env_cfg, seed)?;
        let valid = Arc::new(data.slice(trade_slice(&window.validation)));
        let sharpes = members
            .iter()
            .map(|m| validation_sharpe(m, valid.clone(), env_cfg, cfg.risk_free))
            .collect::<Result<Vec<_>>>()?;
        let weights = (cfg.scheme != EnsembleScheme::MajorityVote).then(|| {
            let raw: Vec<f64> = sharpes.iter().map(|s| s.unwrap_or(f64::NAN)).collect();
            sharpe_weights(&raw, cfg.sharpe_discard_threshold)
        });
        let policy = EnsemblePolicy::new(members, weights.clone(), cfg.scheme)?;

        let range = trade_slice(&window.trade);
        let start = match position.take() {
            Some((b, h)) if !cfg.carry_positions => {
                let (cash, rows) = liquidate(b, &h, data, range.start, env_cfg.cost_rate);
                trades.extend(rows);
                Some((cash, vec![0.0; h.len()]))
            }
            other => other,
        };
        let slice = Arc::new(data.slice(range));
        let sim = simulate(
            &mut |obs| policy.act(obs, &mut rng),
            slice,
            env_cfg,
            start.as_ref().map(|(b, h)| (*b, h.as_slice())),
        )?;
        match equity.as_mut() {
            Some(e) => e.extend(&sim.equity),
            None => equity = Some(sim.equity.clone()),
        }
        trades.extend(sim.trades);
        position = Some((sim.balance, sim.holdings));
        reports.push(WindowReport {
            window: window.clone(),
            sharpes,
            weights,
        });
        last_policy = Some(policy);
    }
    Ok(EnsembleRun {
        equity: equity.ok_or_else(|| Error::InsufficientData("no ensemble windows".into()))?,
        trades,
        windows: reports,
        last_policy: last_policy.ok_or_else(|| Error::InsufficientData("no ensemble windows".into()))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ActionDistribution;

    struct Fixed(ActionDistribution);

    impl DistributionSource for Fixed {
        fn action_distribution(&self, _obs: &[f64]) -> Result<ActionDistribution> {
            Ok(self.0.clone())
        }
    }

    fn cat(p: &[f64]) -> Fixed {
        Fixed(ActionDistribution::Categorical { probs: vec![p.to_vec()] })
    }

    #[test]
    fn kl_term_examples() {
        let a = cat(&[0.5, 0.5]);
        let b = cat(&[0.9, 0.1]);
        let states = vec![vec![0.0]];
        let v = kl_diversity_loss(1.0, &a, &[&b], &states, 1.0).unwrap();
        assert!((v - 1.0 - 0.3681).abs() < 1e-4);
        assert_eq!(kl_diversity_loss(2.5, &a, &[&b], &states, 0.0).unwrap(), 2.5);
        assert_eq!(kl_diversity_loss(2.5, &a, &[&a], &states, 3.0).unwrap(), 2.5);
        assert!(kl_diversity_loss(0.0, &a, &[&b], &[], 1.0).is_err());
    }

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe_ratio(&[0.01, -0.01, 0.01, -0.01], 0.0).unwrap(), 0.0);
        assert!((sharpe_ratio(&[0.01, 0.02, 0.03], 0.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(sharpe_ratio(&[0.01; 4], 0.0), Err(Error::UndefinedSharpe)));
    }

    #[test]
    fn weight_examples() {
        let w = sharpe_weights(&[1.0, 1.0, 1.0], f64::NEG_INFINITY);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = sharpe_weights(&[1.0, -0.5, 2.0], 0.0);
        assert!((w[0] - 0.2689).abs() < 1e-4 && w[1] == 0.0 && (w[2] - 0.7311).abs() < 1e-4);
        assert_eq!(sharpe_weights(&[-1.0, -2.0], 0.0), vec![0.5, 0.5]);
        assert_eq!(sharpe_weights(&[f64::NAN, 1.0], 0.0), vec![0.0, 1.0]);
    }

    #[test]
    fn combination_examples() {
        assert_eq!(combine_weighted(&[vec![3.0, -2.0]], &[1.0]).unwrap(), vec![3.0, -2.0]);
        assert_eq!(combine_weighted(&[vec![10.0], vec![20.0]], &[0.5, 0.5]).unwrap(), vec![15.0]);
        let v = combine_weighted(&[vec![0.0], vec![1.0]], &[0.2689, 0.7311]).unwrap();
        assert!((v[0] - 0.7311).abs() < 1e-12);
        assert!(combine_weighted(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[10.0, 10.0, -10.0]), 10.0);
        assert_eq!(majority_vote(&[10.0, -10.0, 0.0]), 0.0);
        assert_eq!(majority_vote(&[-5.0, -5.0]), -5.0);
        assert_eq!(majority_vote(&[10.0, -10.0]), 0.0);
        assert_eq!(majority_vote(&[10.0, 5.0]), 5.0);
        assert_eq!(
            combine_majority(&[vec![1.0, 0.0], vec![1.0, -1.0], vec![-1.0, -1.0]]).unwrap(),
            vec![1.0, -1.0]
        );
    }

    #[test]
    fn ensemble_one_shape_is_accepted() {
        let cfg = EnsembleConfig::default();
        let algs: Vec<_> = cfg.members.iter().map(|m| m.algorithm).collect();
        assert_eq!(algs, vec![Algorithm::Ppo, Algorithm::Sac, Algorithm::Ddpg]);
        assert!(cfg.validate(&EnvConfig::default()).is_ok());
        let bad = EnsembleConfig {
            members: vec![],
            kl_lambda: -1.0,
            train: 0,
            scheme: EnsembleScheme::MajorityVote,
            ..EnsembleConfig::default()
        };
        assert_eq!(bad.problems(&EnvConfig::default()).len(), 4);
    }

    proptest::proptest! {
        #[test]
        fn weights_on_simplex(s in proptest::collection::vec(-3.0f64..3.0, 1..8), th in -1.0f64..1.0) {
            let w = sharpe_weights(&s, th);
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(w.iter().all(|v| *v >= 0.0));
            if s.iter().any(|v| *v >= th) {
                for (wi, si) in w.iter().zip(&s) {
                    if *si < th { proptest::prop_assert_eq!(*wi, 0.0); }
                }
            }
        }

        #[test]
        fn vote_is_permutation_invariant(v in proptest::collection::vec(proptest::sample::select(vec![-2.0, -1.0, 0.0, 1.0, 2.0]), 1..9)) {
            let mut r = v.clone();
            r.reverse();
            proptest::prop_assert_eq!(majority_vote(&v), majority_vote(&r));
        }
    }
}
