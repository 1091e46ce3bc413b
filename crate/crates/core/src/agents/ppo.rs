use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::policy::{ActionDistribution, DistributionSource, GaussianPolicy};
use super::{AgentSpec, TrainingRecord};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Activation, Adam, Mlp};
use crate::vecenv::{collect_trajectories, VecEnv};

/// `min(ratio * adv, clamp(ratio, 1 - clip, 1 + clip) * adv)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Per-sample clipped policy loss and its derivative with respect to the new
/// log-probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoSampleLoss {
    pub loss: f64,
    pub d_log_prob: f64,
}

pub fn ppo_sample_loss(log_prob: f64, old_log_prob: f64, advantage: f64, clip: f64) -> PpoSampleLoss {
    let ratio = (log_prob - old_log_prob).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        PpoSampleLoss {
            loss: -unclipped,
            d_log_prob: -unclipped,
        }
    } else {
        PpoSampleLoss {
            loss: -clipped,
            d_log_prob: 0.0,
        }
    }
}

/// One sample of a PPO minibatch.
#[derive(Debug, Clone, Copy)]
pub struct PpoSample<'a> {
    pub obs: &'a [f64],
    /// Raw (pre-squash) action.
    pub action: &'a [f64],
    pub old_log_prob: f64,
    pub advantage: f64,
    /// Value regression target.
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLossConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    /// Weight of the summed KL divergence from peer policies, which is
    /// subtracted from the loss.
    pub kl_lambda: f64,
}

/// Minibatch losses and their gradients with respect to the flat policy
/// parameters (mean network, then log std) and the value network.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLoss {
    /// `mean(-clipped surrogate) - entropy_coef * sum(log_std) - lambda * mean(sum_B KL(pi_B || pi))`.
    pub policy_loss: f64,
    /// `mean(0.5 * (V(s) - target)^2)`.
    pub value_loss: f64,
    pub policy_grad: Vec<f64>,
    pub value_grad: Vec<f64>,
}

pub fn ppo_minibatch_loss(
    policy: &GaussianPolicy,
    value: &Mlp,
    samples: &[PpoSample],
    cfg: &PpoLossConfig,
    peers: &[&dyn DistributionSource],
) -> Result<PpoLoss> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty PPO minibatch".into()));
    }
    let k = policy.log_std().len();
    let m = samples.len() as f64;
    let std = policy.std();
    let mut g_pi = vec![0.0; policy.param_vec().len()];
    let mut g_v = vec![0.0; value.n_params()];
    let mut pi_loss = -cfg.entropy_coef * policy.log_std().iter().sum::<f64>();
    let mut v_loss = 0.0;
    for smp in samples {
        let (s, u) = (smp.obs, smp.action);
        let (lp, mean) = policy.log_prob_with_mean(s, u)?;
        let sl = ppo_sample_loss(lp, smp.old_log_prob, smp.advantage, cfg.clip);
        pi_loss += sl.loss / m;
        let mut g_mean = vec![0.0; k];
        let mut g_ls = vec![0.0; k];
        let w = sl.d_log_prob / m;
        for i in 0..k {
            let z = (u[i] - mean[i]) / std[i];
            g_mean[i] = w * z / std[i];
            g_ls[i] = w * (z * z - 1.0) - cfg.entropy_coef / m;
        }
        if cfg.kl_lambda > 0.0 {
            for peer in peers {
                let ActionDistribution::Gaussian { mean: mb, std: sb } = peer.action_distribution(s)? else {
                    return Err(Error::invalid("PPO diversity needs Gaussian peer policies"));
                };
                let c = cfg.kl_lambda / m;
                for i in 0..k {
                    let va = std[i] * std[i];
                    let diff = mb[i] - mean[i];
                    let kl_i = (std[i] / sb[i]).ln() + (sb[i] * sb[i] + diff * diff) / (2.0 * va) - 0.5;
                    pi_loss -= c * kl_i;
                    g_mean[i] -= c * (-diff / va);
                    g_ls[i] -= c * (1.0 - (sb[i] * sb[i] + diff * diff) / va);
                }
            }
        }
        policy.backprop(s, &g_mean, &g_ls, &mut g_pi)?;

        let cache = value.forward_cached(&policy.preprocess(s))?;
        let err = cache.output()[0] - smp.target;
        v_loss += 0.5 * err * err / m;
        value.backward(&cache, &[err / m], &mut g_v);
    }
    Ok(PpoLoss {
        policy_loss: pi_loss,
        value_loss: v_loss,
        policy_grad: g_pi,
        value_grad: g_v,
    })
}

/// PPO-clip with GAE over full episodes collected from a vector env.
pub struct PpoTrainer<E: Environment> {
    spec: AgentSpec,
    venv: VecEnv<E>,
    policy: GaussianPolicy,
    value: Mlp,
    pi_opt: Adam,
    v_opt: Adam,
    rng: ChaCha8Rng,
    horizon: usize,
    iteration: usize,
    updates: u64,
    kl_lambda: f64,
    log: Vec<TrainingRecord>,
}

impl<E: Environment> PpoTrainer<E> {
    pub fn new(spec: &AgentSpec, venv: VecEnv<E>, action_scale: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (d, k) = (venv.obs_dim(), venv.action_dim());
        let policy = GaussianPolicy::new(
            d,
            k,
            &spec.hidden,
            spec.activation,
            spec.init_log_std,
            action_scale,
            spec.normalize_obs,
            &mut rng,
        );
        let mut sizes = vec![d];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(1);
        let value = Mlp::new(&sizes, spec.activation, Activation::Identity, &mut rng);
        Ok(PpoTrainer {
            pi_opt: Adam::new(policy.param_vec().len(), spec.lr),
            v_opt: Adam::new(value.n_params(), spec.critic_lr()),
            horizon: venv.max_steps(),
            spec: spec.clone(),
            venv,
            policy,
            value,
            rng,
            iteration: 0,
            updates: 0,
            kl_lambda: 0.0,
            log: Vec::new(),
        })
    }

    /// Weight of the KL diversity bonus against peer policies.
    pub fn set_diversity(&mut self, lambda: f64) {
        self.kl_lambda = lambda;
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.policy
    }

    pub fn value(&self) -> &Mlp {
        &self.value
    }

    pub fn log(&self) -> &[TrainingRecord] {
        &self.log
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn into_parts(self) -> (GaussianPolicy, Mlp, Vec<TrainingRecord>, u64) {
        (self.policy, self.value, self.log, self.updates)
    }

    fn value_of(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.value.forward(&self.policy.preprocess(obs))?[0])
    }

    /// One collect-and-update cycle. `peers` are the other ensemble members,
    /// whose divergence from this policy is rewarded with weight `lambda`.
    pub fn iterate(&mut self, peers: &[&dyn DistributionSource]) -> Result<TrainingRecord> {
        let seed = self.rng.random::<u64>();
        let batch = collect_trajectories(&mut self.venv, &self.policy, self.horizon, seed, true)?;
        let old_lp = batch.log_probs.as_ref().expect("requested log probs");
        let (n, t_max) = (batch.n_envs, batch.horizon);
        let gamma = self.spec.gamma;
        let lambda = self.spec.gae_lambda;

        let mut samples = Vec::with_capacity(batch.n_samples());
        let mut advantages = vec![0.0; n * t_max];
        let mut returns = vec![0.0; n * t_max];
        for j in 0..n {
            let len = batch.lengths[j];
            if len == 0 {
                continue;
            }
            let values: Vec<f64> = (0..len)
                .map(|t| self.value_of(batch.state(j, t)))
                .collect::<Result<_>>()?;
            let last = j * t_max + len - 1;
            let mut next_value = if batch.terminals[last] {
                0.0
            } else {
                self.value_of(&batch.final_obs[j * batch.obs_dim..(j + 1) * batch.obs_dim])?
            };
            let mut gae = 0.0;
            for t in (0..len).rev() {
                let delta = batch.reward(j, t) + gamma * next_value - values[t];
                gae = delta + gamma * lambda * gae;
                advantages[j * t_max + t] = gae;
                returns[j * t_max + t] = gae + values[t];
                next_value = values[t];
            }
            samples.extend((0..len).map(|t| (j, t)));
        }
        if samples.len() > 1 {
            let m = samples.len() as f64;
            let mean = samples.iter().map(|&(j, t)| advantages[j * t_max + t]).sum::<f64>() / m;
            let var = samples
                .iter()
                .map(|&(j, t)| (advantages[j * t_max + t] - mean).powi(2))
                .sum::<f64>()
                / (m - 1.0);
            let sd = var.sqrt() + 1e-8;
            for &(j, t) in &samples {
                advantages[j * t_max + t] = (advantages[j * t_max + t] - mean) / sd;
            }
        }

        let loss_cfg = PpoLossConfig {
            clip: self.spec.clip,
            entropy_coef: self.spec.entropy_coef,
            kl_lambda: self.kl_lambda,
        };
        let mut pi_loss_acc = 0.0;
        let mut v_loss_acc = 0.0;
        let mut n_batches = 0usize;
        for _ in 0..self.spec.epochs {
            samples.shuffle(&mut self.rng);
            for mb in samples.chunks(self.spec.batch_size) {
                let minibatch: Vec<PpoSample> = mb
                    .iter()
                    .map(|&(j, t)| {
                        let cell = j * t_max + t;
                        PpoSample {
                            obs: batch.state(j, t),
                            action: batch.action(j, t),
                            old_log_prob: old_lp[cell],
                            advantage: advantages[cell],
                            target: returns[cell],
                        }
                    })
                    .collect();
                let PpoLoss {
                    policy_loss: pi_loss,
                    value_loss: v_loss,
                    policy_grad: mut g_pi,
                    value_grad: mut g_v,
                } = ppo_minibatch_loss(&self.policy, &self.value, &minibatch, &loss_cfg, peers)?;
                for g in g_v.iter_mut() {
                    *g *= self.spec.value_coef;
                }
                if !(pi_loss.is_finite() && v_loss.is_finite()) {
                    return Err(Error::Divergence(format!(
                        "PPO loss became non-finite at iteration {}",
                        self.iteration
                    )));
                }
                clip_grad_norm(&mut g_pi, self.spec.max_grad_norm);
                clip_grad_norm(&mut g_v, self.spec.max_grad_norm);
                let opt = &mut self.pi_opt;
                self.policy.apply_update(|p| opt.step(p, &g_pi));
                self.v_opt.step(self.value.params_mut(), &g_v);
                if !(self.policy.is_finite() && self.value.is_finite()) {
                    return Err(Error::Divergence("PPO parameters became non-finite".into()));
                }
                self.updates += 1;
                pi_loss_acc += pi_loss;
                v_loss_acc += v_loss;
                n_batches += 1;
            }
        }

        if let Some(norm) = self.policy.norm_mut() {
            for &(j, t) in &samples {
                norm.update(batch.state(j, t));
            }
        }
        let mean_return = (0..n).map(|j| batch.total_reward(j)).sum::<f64>() / n as f64;
        let nb = n_batches.max(1) as f64;
        let record = TrainingRecord {
            iteration: self.iteration,
            mean_return,
            policy_loss: pi_loss_acc / nb,
            value_loss: v_loss_acc / nb,
        };
        self.iteration += 1;
        self.log.push(record.clone());
        Ok(record)
    }
}
