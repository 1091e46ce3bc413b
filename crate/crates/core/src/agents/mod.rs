//! Trading agents: PPO, DDPG and SAC for continuous actions; DQN, Double DQN
//! and Dueling DQN for discrete action levels.

mod ddpg;
mod dqn;
mod policy;
mod ppo;
mod replay;
mod sac;
mod trained;
mod trading;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ddpg::{DdpgLearner, DdpgModel};
pub use dqn::{double_dqn_target, dueling_aggregate, DqnLearner, QNetwork};
pub use policy::{ActionDistribution, DistributionSource, GaussianPolicy};
pub use ppo::{
    clipped_surrogate, ppo_minibatch_loss, ppo_sample_loss, PpoLoss, PpoLossConfig, PpoSample, PpoSampleLoss, PpoTrainer,
};
pub use replay::ReplayBuffer;
pub use sac::{SacLearner, SacModel};
pub use trading::{train_on_market, trading_venv, FrozenAgent, RlAgent};
pub use trained::{
    build_learner, train, train_off_policy, train_on_policy, AgentModel, ExploreMode, OffPolicyLearner, OffPolicyTrainer,
    TrainedAgent, TrainingRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

use crate::env::{ActionMode, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ppo,
    Ddpg,
    Sac,
    Dqn,
    DoubleDqn,
    DuelingDqn,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Ppo,
        Algorithm::Ddpg,
        Algorithm::Sac,
        Algorithm::Dqn,
        Algorithm::DoubleDqn,
        Algorithm::DuelingDqn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Ddpg => "ddpg",
            Algorithm::Sac => "sac",
            Algorithm::Dqn => "dqn",
            Algorithm::DoubleDqn => "double_dqn",
            Algorithm::DuelingDqn => "dueling_dqn",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Algorithm::Dqn | Algorithm::DoubleDqn | Algorithm::DuelingDqn)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown algorithm `{s}`")))
    }
}

/// Hyperparameters of one agent. Fields irrelevant to the algorithm are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSpec {
    pub algorithm: Algorithm,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    /// Critic/value learning rate; defaults to `lr`.
    pub critic_lr: Option<f64>,
    pub batch_size: usize,
    pub gamma: f64,
    /// Final epsilon-greedy exploration rate.
    pub epsilon: f64,
    /// Initial exploration rate, decayed linearly to `epsilon`.
    pub epsilon_start: Option<f64>,
    pub epsilon_decay_steps: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    /// Polyak rate for target networks (1 means hard copy).
    pub tau: f64,
    /// Environment steps between target updates.
    pub target_update_interval: usize,
    pub replay_capacity: usize,
    pub learning_starts: usize,
    pub train_freq: usize,
    pub gradient_steps: usize,
    /// Std of DDPG's Gaussian exploration noise (in `[-1, 1]` action units).
    pub exploration_noise: f64,
    /// Fixed SAC temperature.
    pub sac_alpha: f64,
    pub normalize_obs: bool,
    pub n_envs: usize,
    /// PPO iterations (one full episode per sub-env each).
    pub iterations: usize,
    /// Off-policy environment steps (summed over sub-envs).
    pub steps: usize,
    pub seed: u64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        AgentSpec::stock(Algorithm::Ppo)
    }
}

impl AgentSpec {
    /// Two hidden layers of 64 and 32 units, learning rate 3e-4, batch 64.
    pub fn stock(algorithm: Algorithm) -> Self {
        AgentSpec {
            algorithm,
            hidden: vec![64, 32],
            activation: Activation::Tanh,
            lr: 3e-4,
            critic_lr: None,
            batch_size: 64,
            gamma: 0.99,
            epsilon: 0.05,
            epsilon_start: None,
            epsilon_decay_steps: 0,
            clip: 0.2,
            gae_lambda: 0.95,
            epochs: 10,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            init_log_std: -0.5,
            tau: 0.005,
            target_update_interval: 1,
            replay_capacity: 100_000,
            learning_starts: 1_000,
            train_freq: 1,
            gradient_steps: 1,
            exploration_noise: 0.1,
            sac_alpha: 0.2,
            normalize_obs: true,
            n_envs: 4,
            iterations: 50,
            steps: 20_000,
            seed: 0,
        }
    }

    /// Three hidden layers of 128 units, exploration rate 0.005, learning
    /// rate 2e-6, batch 512.
    pub fn crypto(algorithm: Algorithm) -> Self {
        AgentSpec {
            hidden: vec![128, 128, 128],
            activation: Activation::Relu,
            lr: 2e-6,
            batch_size: 512,
            epsilon: 0.005,
            ..AgentSpec::stock(algorithm)
        }
    }

    pub fn critic_lr(&self) -> f64 {
        self.critic_lr.unwrap_or(self.lr)
    }

    /// Exploration rate after `step` environment steps.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        match self.epsilon_start {
            Some(start) if self.epsilon_decay_steps > 0 && step < self.epsilon_decay_steps => {
                let frac = step as f64 / self.epsilon_decay_steps as f64;
                start + frac * (self.epsilon - start)
            }
            _ => self.epsilon,
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                out.push(format!("{prefix}{msg}"));
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be > 0");
        check(self.critic_lr.is_none_or(|v| v > 0.0), "critic_lr must be > 0");
        check(self.gamma > 0.0 && self.gamma < 1.0, "gamma must be in (0, 1)");
        check((0.0..=1.0).contains(&self.epsilon), "epsilon must be in [0, 1]");
        check(
            self.epsilon_start.is_none_or(|e| (0.0..=1.0).contains(&e)),
            "epsilon_start must be in [0, 1]",
        );
        check(self.batch_size >= 1, "batch_size must be >= 1");
        check(self.clip > 0.0, "clip must be > 0");
        check((0.0..=1.0).contains(&self.gae_lambda), "gae_lambda must be in [0, 1]");
        check(self.tau > 0.0 && self.tau <= 1.0, "tau must be in (0, 1]");
        check(self.replay_capacity >= self.batch_size, "replay_capacity must be >= batch_size");
        check(self.n_envs >= 1, "n_envs must be >= 1");
        check(self.epochs >= 1, "epochs must be >= 1");
        check(self.train_freq >= 1, "train_freq must be >= 1");
        check(self.target_update_interval >= 1, "target_update_interval must be >= 1");
        check(self.sac_alpha >= 0.0, "sac_alpha must be >= 0");
        check(self.exploration_noise >= 0.0, "exploration_noise must be >= 0");
        check(self.hidden.iter().all(|h| *h > 0), "hidden sizes must be > 0");
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("agent.");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// How raw network outputs map to environment actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionSpace {
    /// `dim` components in `[-1, 1]`, multiplied by `scale`.
    Continuous { dim: usize, scale: f64 },
    /// `heads` independent choices among `levels`; raw actions are level indices.
    Discrete { heads: usize, levels: Vec<f64> },
}

impl ActionSpace {
    pub fn for_trading(cfg: &EnvConfig, n_assets: usize) -> Self {
        match &cfg.action_mode {
            ActionMode::Continuous => ActionSpace::Continuous {
                dim: n_assets,
                scale: cfg.max_shares,
            },
            ActionMode::Discrete { levels } => ActionSpace::Discrete {
                heads: n_assets,
                levels: levels.clone(),
            },
        }
    }

    pub fn env_dim(&self) -> usize {
        match self {
            ActionSpace::Continuous { dim, .. } => *dim,
            ActionSpace::Discrete { heads, .. } => *heads,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }

    fn check_compatible(&self, algorithm: Algorithm) -> Result<()> {
        if algorithm.is_discrete() != self.is_discrete() {
            return Err(Error::invalid(format!(
                "{algorithm} needs a {} action space",
                if algorithm.is_discrete() { "discrete" } else { "continuous" }
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_and_validation() {
        let s = AgentSpec::stock(Algorithm::Ppo);
        assert_eq!((s.hidden.clone(), s.lr, s.batch_size), (vec![64, 32], 3e-4, 64));
        let c = AgentSpec::crypto(Algorithm::Dqn);
        assert_eq!((c.hidden.clone(), c.lr, c.batch_size, c.epsilon), (vec![128, 128, 128], 2e-6, 512, 0.005));
        assert!(s.validate().is_ok());
        let bad = AgentSpec {
            lr: 0.0,
            gamma: 1.5,
            epsilon: 2.0,
            ..s
        };
        assert_eq!(bad.problems("").len(), 3);
        assert_eq!("double_dqn".parse::<Algorithm>().unwrap(), Algorithm::DoubleDqn);
        assert!("a2c".parse::<Algorithm>().is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let s = AgentSpec {
            epsilon: 0.1,
            epsilon_start: Some(1.0),
            epsilon_decay_steps: 10,
            ..AgentSpec::stock(Algorithm::Dqn)
        };
        assert_eq!(s.epsilon_at(0), 1.0);
        assert!((s.epsilon_at(5) - 0.55).abs() < 1e-12);
        assert_eq!(s.epsilon_at(10), 0.1);
        assert_eq!(s.epsilon_at(100), 0.1);
    }
}
