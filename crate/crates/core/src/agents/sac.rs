use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::policy::{LOG_STD_MAX, LOG_STD_MIN};
use super::replay::ReplayBuffer;
use super::AgentSpec;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Activation, Adam, Mlp, RunningNorm};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SQUASH_EPS: f64 = 1e-6;

/// Inference half of SAC: the actor outputs a mean and a log std per action
/// component; actions are `tanh(u)` with `u` Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacModel {
    pub actor: Mlp,
    pub norm: Option<RunningNorm>,
}

/// One reparameterized draw and everything its gradient needs.
#[derive(Debug, Clone)]
pub(crate) struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub eps: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Whether each log std sits inside the clamp range.
    pub free: Vec<bool>,
}

impl SacModel {
    pub fn preprocess(&self, obs: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => n.normalize(obs),
            None => obs.to_vec(),
        }
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim() / 2
    }

    fn split(&self, out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let k = self.action_dim();
        let mean = out[..k].to_vec();
        let raw = &out[k..];
        let log_std = raw.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let free = raw.iter().map(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(v)).collect();
        (mean, log_std, free)
    }

    /// Mean and clamped log std of the pre-squash Gaussian.
    pub fn gaussian(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.actor.forward(&self.preprocess(obs))?;
        let (m, s, _) = self.split(&out);
        Ok((m, s))
    }

    /// Deterministic action `tanh(mean)`.
    pub fn action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.gaussian(obs)?.0.iter().map(|m| m.tanh()).collect())
    }

    pub(crate) fn sample_from(&self, out: &[f64], rng: &mut impl Rng) -> SquashedSample {
        let (mean, log_std, free) = self.split(out);
        let eps: Vec<f64> = mean.iter().map(|_| rng.sample(StandardNormal)).collect();
        squash(&mean, log_std, free, eps)
    }

    pub fn sample(&self, obs: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let out = self.actor.forward(&self.preprocess(obs))?;
        Ok(self.sample_from(&out, rng).action)
    }
}

pub(crate) fn squash(mean: &[f64], log_std: Vec<f64>, free: Vec<bool>, eps: Vec<f64>) -> SquashedSample {
    let mut action = Vec::with_capacity(mean.len());
    let mut log_prob = 0.0;
    for i in 0..mean.len() {
        let a = (mean[i] + log_std[i].exp() * eps[i]).tanh();
        log_prob += -0.5 * eps[i] * eps[i] - log_std[i] - 0.5 * LN_2PI - (1.0 - a * a + SQUASH_EPS).ln();
        action.push(a);
    }
    SquashedSample {
        action,
        log_prob,
        eps,
        log_std,
        free,
    }
}

/// Gradient of `alpha * log pi(a) - q(a)` with respect to the actor's raw
/// outputs `[mean, log_std]`, given `dq_da`.
pub(crate) fn actor_output_grad(s: &SquashedSample, dq_da: &[f64], alpha: f64) -> Vec<f64> {
    let k = s.action.len();
    let mut g = vec![0.0; 2 * k];
    for i in 0..k {
        let a = s.action[i];
        let one_m = 1.0 - a * a;
        let dl_du = alpha * 2.0 * a * one_m / (one_m + SQUASH_EPS) - dq_da[i] * one_m;
        g[i] = dl_du;
        if s.free[i] {
            g[k + i] = -alpha + dl_du * s.log_std[i].exp() * s.eps[i];
        }
    }
    g
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Soft actor-critic with twin critics and a fixed temperature.
#[derive(Debug, Clone)]
pub struct SacLearner {
    pub(crate) model: SacModel,
    q: [Mlp; 2],
    q_target: [Mlp; 2],
    actor_opt: Adam,
    q_opt: [Adam; 2],
    alpha: f64,
    gamma: f64,
    batch_size: usize,
}

impl SacLearner {
    pub fn new(spec: &AgentSpec, obs_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(2 * action_dim);
        let mut actor = Mlp::new(&sizes, spec.activation, Activation::Identity, rng);
        actor.scale_output_layer(0.1);
        let mut csizes = vec![obs_dim + action_dim];
        csizes.extend_from_slice(&spec.hidden);
        csizes.push(1);
        let q = [
            Mlp::new(&csizes, spec.activation, Activation::Identity, rng),
            Mlp::new(&csizes, spec.activation, Activation::Identity, rng),
        ];
        SacLearner {
            actor_opt: Adam::new(actor.n_params(), spec.lr),
            q_opt: [
                Adam::new(q[0].n_params(), spec.critic_lr()),
                Adam::new(q[1].n_params(), spec.critic_lr()),
            ],
            model: SacModel {
                actor,
                norm: spec.normalize_obs.then(|| RunningNorm::new(obs_dim)),
            },
            q_target: q.clone(),
            q,
            alpha: spec.sac_alpha,
            gamma: spec.gamma,
            batch_size: spec.batch_size,
        }
    }

    pub fn model(&self) -> &SacModel {
        &self.model
    }

    pub fn soft_sync(&mut self, tau: f64) {
        for c in 0..2 {
            self.q_target[c].soft_update_from(&self.q[c], tau);
        }
    }

    /// Returns `(actor_loss, critic_loss)`.
    pub fn update(&mut self, replay: &ReplayBuffer, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let idx = replay.sample_indices(self.batch_size, rng);
        let m = idx.len() as f64;
        let mut g_q = [vec![0.0; self.q[0].n_params()], vec![0.0; self.q[1].n_params()]];
        let mut critic_loss = 0.0;
        for &i in &idx {
            let x = self.model.preprocess(replay.obs(i));
            let x2 = self.model.preprocess(replay.next_obs(i));
            let out2 = self.model.actor.forward(&x2)?;
            let s2 = self.model.sample_from(&out2, rng);
            let in2 = concat(&x2, &s2.action);
            let qt = self.q_target[0].forward(&in2)?[0].min(self.q_target[1].forward(&in2)?[0]);
            let soft = qt - self.alpha * s2.log_prob;
            let y = replay.reward(i) + if replay.terminal(i) { 0.0 } else { self.gamma * soft };
            let input = concat(&x, replay.action(i));
            for c in 0..2 {
                let cache = self.q[c].forward_cached(&input)?;
                let err = cache.output()[0] - y;
                critic_loss += 0.5 * err * err / m;
                self.q[c].backward(&cache, &[err / m], &mut g_q[c]);
            }
        }
        for c in 0..2 {
            clip_grad_norm(&mut g_q[c], 10.0);
            self.q_opt[c].step(self.q[c].params_mut(), &g_q[c]);
        }

        let d = self.model.actor.input_dim();
        let mut g_a = vec![0.0; self.model.actor.n_params()];
        let mut scratch = vec![0.0; self.q[0].n_params()];
        let mut actor_loss = 0.0;
        for &i in &idx {
            let x = self.model.preprocess(replay.obs(i));
            let ac = self.model.actor.forward_cached(&x)?;
            let s = self.model.sample_from(ac.output(), rng);
            let input = concat(&x, &s.action);
            let c0 = self.q[0].forward_cached(&input)?;
            let c1 = self.q[1].forward_cached(&input)?;
            let (critic, cache) = if c0.output()[0] <= c1.output()[0] {
                (&self.q[0], &c0)
            } else {
                (&self.q[1], &c1)
            };
            actor_loss += (self.alpha * s.log_prob - cache.output()[0]) / m;
            let g_in = critic.backward(cache, &[1.0], &mut scratch);
            let g_out: Vec<f64> = actor_output_grad(&s, &g_in[d..], self.alpha)
                .into_iter()
                .map(|g| g / m)
                .collect();
            self.model.actor.backward(&ac, &g_out, &mut g_a);
        }
        clip_grad_norm(&mut g_a, 10.0);
        self.actor_opt.step(self.model.actor.params_mut(), &g_a);
        if !(actor_loss.is_finite() && critic_loss.is_finite() && self.model.actor.is_finite()) {
            return Err(Error::Divergence("SAC update became non-finite".into()));
        }
        Ok((actor_loss, critic_loss))
    }
}
