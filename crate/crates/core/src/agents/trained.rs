use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ddpg::{DdpgLearner, DdpgModel};
use super::dqn::{argmax, DqnLearner, QNetwork};
use super::policy::{ActionDistribution, DistributionSource, GaussianPolicy};
use super::ppo::PpoTrainer;
use super::replay::ReplayBuffer;
use super::sac::{SacLearner, SacModel};
use super::{ActionSpace, AgentSpec, Algorithm};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{Mlp, RunningNorm};
use crate::vecenv::VecEnv;

pub const CHECKPOINT_FORMAT: &str = "marketrl-agent";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub iteration: usize,
    /// Mean undiscounted return of the episodes finished in this period.
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExploreMode {
    /// Sample from the behaviour policy.
    Explore,
    /// Deterministic best action.
    Exploit,
}

/// The inference parts of a trained agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentModel {
    Ppo { policy: GaussianPolicy, value: Mlp },
    Ddpg(DdpgModel),
    Sac(SacModel),
    Dqn { q: QNetwork, norm: Option<RunningNorm> },
}

/// A trained agent with its configuration, checkpointable as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedAgent {
    pub format: String,
    pub version: u32,
    pub spec: AgentSpec,
    pub action_space: ActionSpace,
    pub model: AgentModel,
    /// Gradient updates applied so far.
    pub updates: u64,
    pub log: Vec<TrainingRecord>,
}

impl TrainedAgent {
    pub fn new(spec: AgentSpec, action_space: ActionSpace, model: AgentModel) -> Self {
        TrainedAgent {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            spec,
            action_space,
            model,
            updates: 0,
            log: Vec::new(),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.spec.algorithm
    }

    pub fn obs_dim(&self) -> usize {
        match &self.model {
            AgentModel::Ppo { policy, .. } => policy.net().input_dim(),
            AgentModel::Ddpg(m) => m.actor.input_dim(),
            AgentModel::Sac(m) => m.actor.input_dim(),
            AgentModel::Dqn { q, .. } => q.input_dim(),
        }
    }

    /// Raw action: `[-1, 1]` components for continuous spaces, level indices
    /// for discrete ones.
    pub fn raw_action(&self, obs: &[f64], mode: ExploreMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Dimension {
                what: "observation",
                expected: self.obs_dim(),
                got: obs.len(),
            });
        }
        let explore = mode == ExploreMode::Explore;
        match &self.model {
            AgentModel::Ppo { policy, .. } => {
                let mean = policy.mean(obs)?;
                if !explore {
                    return Ok(mean.iter().map(|m| m.clamp(-1.0, 1.0)).collect());
                }
                Ok(mean
                    .iter()
                    .zip(policy.std())
                    .map(|(m, s)| (m + s * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0))
                    .collect())
            }
            AgentModel::Ddpg(m) => {
                let mut a = m.action(obs)?;
                if explore {
                    for v in a.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = (*v + self.spec.exploration_noise * z).clamp(-1.0, 1.0);
                    }
                }
                Ok(a)
            }
            AgentModel::Sac(m) => {
                if explore {
                    m.sample(obs, rng)
                } else {
                    m.action(obs)
                }
            }
            AgentModel::Dqn { q, norm } => {
                let x = match norm {
                    Some(n) => n.normalize(obs),
                    None => obs.to_vec(),
                };
                let values = q.forward(&x)?;
                let l = q.levels();
                Ok(values
                    .chunks(l)
                    .map(|h| {
                        if explore && rng.random::<f64>() < self.spec.epsilon {
                            rng.random_range(0..l) as f64
                        } else {
                            argmax(h) as f64
                        }
                    })
                    .collect())
            }
        }
    }

    /// Maps a raw action to environment units.
    pub fn to_env(&self, raw: &[f64]) -> Vec<f64> {
        raw_to_env(&self.action_space, raw)
    }

    /// Environment action for `obs`.
    pub fn act(&self, obs: &[f64], mode: ExploreMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
        Ok(self.to_env(&self.raw_action(obs, mode, rng)?))
    }

    /// Deterministic environment action.
    pub fn act_greedy(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.act(obs, ExploreMode::Exploit, &mut rng)
    }

    /// Behaviour distribution in raw action units. Deterministic actors are
    /// reported as Gaussians (DDPG with its exploration noise; SAC through
    /// the delta-method image of its pre-squash Gaussian); DQN as the
    /// epsilon-greedy categorical per head.
    pub fn distribution(&self, obs: &[f64]) -> Result<ActionDistribution> {
        match &self.model {
            AgentModel::Ppo { policy, .. } => policy.distribution(obs),
            AgentModel::Ddpg(m) => Ok(ActionDistribution::Gaussian {
                mean: m.action(obs)?,
                std: vec![self.spec.exploration_noise.max(1e-3); m.actor.output_dim()],
            }),
            AgentModel::Sac(m) => {
                let (mu, log_std) = m.gaussian(obs)?;
                let mean: Vec<f64> = mu.iter().map(|v| v.tanh()).collect();
                let std = mean
                    .iter()
                    .zip(&log_std)
                    .map(|(a, l)| (l.exp() * (1.0 - a * a)).max(1e-3))
                    .collect();
                Ok(ActionDistribution::Gaussian { mean, std })
            }
            AgentModel::Dqn { q, norm } => {
                let x = match norm {
                    Some(n) => n.normalize(obs),
                    None => obs.to_vec(),
                };
                let values = q.forward(&x)?;
                let l = q.levels();
                let eps = self.spec.epsilon;
                let probs = values
                    .chunks(l)
                    .map(|h| {
                        let best = argmax(h);
                        (0..l)
                            .map(|i| eps / l as f64 + if i == best { 1.0 - eps } else { 0.0 })
                            .collect()
                    })
                    .collect();
                Ok(ActionDistribution::Categorical { probs })
            }
        }
    }

    /// All trainable inference parameters, flattened.
    pub fn param_vec(&self) -> Vec<f64> {
        match &self.model {
            AgentModel::Ppo { policy, value } => {
                let mut v = policy.param_vec();
                v.extend_from_slice(value.params());
                v
            }
            AgentModel::Ddpg(m) => m.actor.params().to_vec(),
            AgentModel::Sac(m) => m.actor.params().to_vec(),
            AgentModel::Dqn { q, .. } => q.params(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let agent: TrainedAgent = serde_json::from_str(s)?;
        if agent.format != CHECKPOINT_FORMAT || agent.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                agent.format, agent.version
            )));
        }
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl DistributionSource for TrainedAgent {
    fn action_distribution(&self, obs: &[f64]) -> Result<ActionDistribution> {
        self.distribution(obs)
    }
}

pub(crate) fn raw_to_env(space: &ActionSpace, raw: &[f64]) -> Vec<f64> {
    match space {
        ActionSpace::Continuous { scale, .. } => raw.iter().map(|u| u.clamp(-1.0, 1.0) * scale).collect(),
        ActionSpace::Discrete { levels, .. } => raw.iter().map(|&i| levels[i as usize]).collect(),
    }
}

/// Learner state of an off-policy algorithm.
#[derive(Debug, Clone)]
pub enum OffPolicyLearner {
    Ddpg(DdpgLearner),
    Sac(SacLearner),
    Dqn(DqnLearner),
}

/// Creates the learner for `spec.algorithm`, checking it fits `space`.
pub fn build_learner(
    spec: &AgentSpec,
    obs_dim: usize,
    space: &ActionSpace,
    rng: &mut impl Rng,
) -> Result<OffPolicyLearner> {
    space.check_compatible(spec.algorithm)?;
    match (spec.algorithm, space) {
        (Algorithm::Ddpg, ActionSpace::Continuous { dim, .. }) => {
            Ok(OffPolicyLearner::Ddpg(DdpgLearner::new(spec, obs_dim, *dim, rng)))
        }
        (Algorithm::Sac, ActionSpace::Continuous { dim, .. }) => {
            Ok(OffPolicyLearner::Sac(SacLearner::new(spec, obs_dim, *dim, rng)))
        }
        (a, ActionSpace::Discrete { heads, levels }) if a.is_discrete() => Ok(OffPolicyLearner::Dqn(
            DqnLearner::new(spec, obs_dim, *heads, levels.len(), rng)?,
        )),
        (a, _) => Err(Error::invalid(format!("{a} is not an off-policy algorithm"))),
    }
}

impl OffPolicyLearner {
    fn norm_mut(&mut self) -> Option<&mut RunningNorm> {
        match self {
            OffPolicyLearner::Ddpg(l) => l.model.norm.as_mut(),
            OffPolicyLearner::Sac(l) => l.model.norm.as_mut(),
            OffPolicyLearner::Dqn(l) => l.norm.as_mut(),
        }
    }

    fn explore(&self, obs: &[f64], epsilon: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            OffPolicyLearner::Ddpg(l) => l.explore(obs, rng),
            OffPolicyLearner::Sac(l) => l.model.sample(obs, rng),
            OffPolicyLearner::Dqn(l) => l.epsilon_greedy(obs, epsilon, rng),
        }
    }

    /// Returns `(policy_loss, value_loss)`.
    fn update(&mut self, replay: &ReplayBuffer, rng: &mut impl Rng) -> Result<(f64, f64)> {
        match self {
            OffPolicyLearner::Ddpg(l) => l.update(replay, rng),
            OffPolicyLearner::Sac(l) => l.update(replay, rng),
            OffPolicyLearner::Dqn(l) => Ok((0.0, l.update(replay, rng)?)),
        }
    }

    fn sync_targets(&mut self, tau: f64) {
        match self {
            OffPolicyLearner::Ddpg(l) => l.soft_sync(tau),
            OffPolicyLearner::Sac(l) => l.soft_sync(tau),
            OffPolicyLearner::Dqn(l) => l.soft_sync(tau),
        }
    }

    fn model(&self) -> AgentModel {
        match self {
            OffPolicyLearner::Ddpg(l) => AgentModel::Ddpg(l.model.clone()),
            OffPolicyLearner::Sac(l) => AgentModel::Sac(l.model.clone()),
            OffPolicyLearner::Dqn(l) => AgentModel::Dqn {
                q: l.online.clone(),
                norm: l.norm.clone(),
            },
        }
    }
}

fn uniform_raw(space: &ActionSpace, rng: &mut impl Rng) -> Vec<f64> {
    match space {
        ActionSpace::Continuous { dim, .. } => (0..*dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        ActionSpace::Discrete { heads, levels } => {
            (0..*heads).map(|_| rng.random_range(0..levels.len()) as f64).collect()
        }
    }
}

/// Replay-based training loop over a vector env. Each sub-env keeps its own
/// running episode and is reset as soon as it finishes.
pub struct OffPolicyTrainer<E: Environment> {
    spec: AgentSpec,
    space: ActionSpace,
    venv: VecEnv<E>,
    learner: OffPolicyLearner,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    running_returns: Vec<f64>,
    finished: Vec<f64>,
    losses: (f64, f64, usize),
    steps: usize,
    updates: u64,
    log: Vec<TrainingRecord>,
    log_interval: usize,
    next_log: usize,
}

impl<E: Environment> OffPolicyTrainer<E> {
    pub fn new(spec: &AgentSpec, mut venv: VecEnv<E>, space: ActionSpace) -> Result<Self> {
        spec.validate()?;
        if venv.action_dim() != space.env_dim() {
            return Err(Error::Dimension {
                what: "action space",
                expected: venv.action_dim(),
                got: space.env_dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let learner = build_learner(spec, venv.obs_dim(), &space, &mut rng)?;
        let raw_dim = space.env_dim();
        let n = venv.n_envs();
        let obs = venv.batch_reset();
        let log_interval = 1000usize.max(n);
        Ok(OffPolicyTrainer {
            replay: ReplayBuffer::new(spec.replay_capacity, venv.obs_dim(), raw_dim),
            spec: spec.clone(),
            space,
            venv,
            learner,
            rng,
            obs,
            running_returns: vec![0.0; n],
            finished: Vec::new(),
            losses: (0.0, 0.0, 0),
            steps: 0,
            updates: 0,
            log: Vec::new(),
            log_interval,
            next_log: log_interval,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn log(&self) -> &[TrainingRecord] {
        &self.log
    }

    pub fn learner(&self) -> &OffPolicyLearner {
        &self.learner
    }

    /// Advances every sub-env once and trains as scheduled.
    pub fn step(&mut self) -> Result<()> {
        let n = self.venv.n_envs();
        let d = self.venv.obs_dim();
        let k = self.space.env_dim();
        let epsilon = self.spec.epsilon_at(self.steps);
        let mut raw = vec![0.0; n * k];
        let mut env_actions = vec![0.0; n * k];
        for j in 0..n {
            let a = if self.steps < self.spec.learning_starts {
                uniform_raw(&self.space, &mut self.rng)
            } else {
                self.learner.explore(&self.obs[j * d..(j + 1) * d], epsilon, &mut self.rng)?
            };
            env_actions[j * k..(j + 1) * k].copy_from_slice(&raw_to_env(&self.space, &a));
            raw[j * k..(j + 1) * k].copy_from_slice(&a);
        }
        let prev = self.obs.clone();
        let mut tr = vec![
            crate::env::Transition {
                reward: 0.0,
                terminal: false,
                truncated: false
            };
            n
        ];
        self.venv.batch_step_transitions(&env_actions, None, &mut self.obs, &mut tr)?;
        for j in 0..n {
            let next = &self.obs[j * d..(j + 1) * d];
            self.replay.push(
                &prev[j * d..(j + 1) * d],
                &raw[j * k..(j + 1) * k],
                tr[j].reward,
                next,
                tr[j].terminal,
            );
            if let Some(norm) = self.learner.norm_mut() {
                norm.update(&prev[j * d..(j + 1) * d]);
            }
            self.running_returns[j] += tr[j].reward;
            if tr[j].done() {
                self.finished.push(self.running_returns[j]);
                self.running_returns[j] = 0.0;
                self.venv.reset_row(j, &mut self.obs[j * d..(j + 1) * d]);
            }
        }
        let before = self.steps;
        self.steps += n;

        if self.steps >= self.spec.learning_starts && self.replay.len() >= self.spec.batch_size {
            let ticks = crossings(before, self.steps, self.spec.train_freq);
            for _ in 0..ticks * self.spec.gradient_steps {
                let (pl, vl) = self.learner.update(&self.replay, &mut self.rng)?;
                self.losses.0 += pl;
                self.losses.1 += vl;
                self.losses.2 += 1;
                self.updates += 1;
            }
            for _ in 0..crossings(before, self.steps, self.spec.target_update_interval) {
                self.learner.sync_targets(self.spec.tau);
            }
        }
        if self.steps >= self.next_log {
            self.next_log += self.log_interval;
            if !self.finished.is_empty() {
                let c = self.losses.2.max(1) as f64;
                self.log.push(TrainingRecord {
                    iteration: self.steps,
                    mean_return: self.finished.iter().sum::<f64>() / self.finished.len() as f64,
                    policy_loss: self.losses.0 / c,
                    value_loss: self.losses.1 / c,
                });
                self.finished.clear();
                self.losses = (0.0, 0.0, 0);
            }
        }
        Ok(())
    }

    /// Runs until `steps` total environment steps have been taken.
    pub fn run(&mut self, steps: usize) -> Result<()> {
        while self.steps < steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> TrainedAgent {
        let mut agent = TrainedAgent::new(self.spec.clone(), self.space.clone(), self.learner.model());
        agent.updates = self.updates;
        agent.log = self.log.clone();
        agent
    }
}

/// Number of multiples of `every` in `(from, to]`.
fn crossings(from: usize, to: usize, every: usize) -> usize {
    to / every - from / every
}

/// Trains PPO for `spec.iterations` iterations. `peers` and `kl_lambda`
/// configure the KL diversity bonus.
pub fn train_on_policy<E: Environment>(
    spec: &AgentSpec,
    venv: VecEnv<E>,
    space: &ActionSpace,
    peers: &[&dyn DistributionSource],
    kl_lambda: f64,
) -> Result<TrainedAgent> {
    space.check_compatible(spec.algorithm)?;
    let ActionSpace::Continuous { scale, .. } = space else {
        return Err(Error::invalid("PPO needs a continuous action space"));
    };
    if spec.algorithm != Algorithm::Ppo {
        return Err(Error::invalid(format!("{} is not an on-policy algorithm", spec.algorithm)));
    }
    let mut trainer = PpoTrainer::new(spec, venv, *scale)?;
    trainer.set_diversity(kl_lambda);
    for _ in 0..spec.iterations {
        trainer.iterate(peers)?;
    }
    let (policy, value, log, updates) = trainer.into_parts();
    let mut agent = TrainedAgent::new(spec.clone(), space.clone(), AgentModel::Ppo { policy, value });
    agent.updates = updates;
    agent.log = log;
    Ok(agent)
}

/// Trains DDPG, SAC or a DQN variant for `spec.steps` environment steps.
pub fn train_off_policy<E: Environment>(
    spec: &AgentSpec,
    venv: VecEnv<E>,
    space: &ActionSpace,
) -> Result<TrainedAgent> {
    let mut trainer = OffPolicyTrainer::new(spec, venv, space.clone())?;
    trainer.run(spec.steps)?;
    Ok(trainer.snapshot())
}

/// Trains any algorithm; the diversity bonus applies to PPO only.
pub fn train<E: Environment>(
    spec: &AgentSpec,
    venv: VecEnv<E>,
    space: &ActionSpace,
    peers: &[&dyn DistributionSource],
    kl_lambda: f64,
) -> Result<TrainedAgent> {
    if spec.algorithm == Algorithm::Ppo {
        train_on_policy(spec, venv, space, peers, kl_lambda)
    } else {
        train_off_policy(spec, venv, space)
    }
}
