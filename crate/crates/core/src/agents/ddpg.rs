use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::replay::ReplayBuffer;
use super::AgentSpec;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Activation, Adam, Mlp, RunningNorm};

/// Inference half of DDPG: a deterministic `tanh` actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpgModel {
    pub actor: Mlp,
    pub norm: Option<RunningNorm>,
}

impl DdpgModel {
    pub fn preprocess(&self, obs: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => n.normalize(obs),
            None => obs.to_vec(),
        }
    }

    /// Action in `[-1, 1]^K`.
    pub fn action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(&self.preprocess(obs))
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

#[derive(Debug, Clone)]
pub struct DdpgLearner {
    pub(crate) model: DdpgModel,
    actor_target: Mlp,
    critic: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    gamma: f64,
    batch_size: usize,
    noise: f64,
}

impl DdpgLearner {
    pub fn new(spec: &AgentSpec, obs_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(action_dim);
        let mut actor = Mlp::new(&sizes, spec.activation, Activation::Tanh, rng);
        actor.scale_output_layer(0.1);
        let mut csizes = vec![obs_dim + action_dim];
        csizes.extend_from_slice(&spec.hidden);
        csizes.push(1);
        let critic = Mlp::new(&csizes, spec.activation, Activation::Identity, rng);
        DdpgLearner {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_opt: Adam::new(actor.n_params(), spec.lr),
            critic_opt: Adam::new(critic.n_params(), spec.critic_lr()),
            model: DdpgModel {
                actor,
                norm: spec.normalize_obs.then(|| RunningNorm::new(obs_dim)),
            },
            critic,
            gamma: spec.gamma,
            batch_size: spec.batch_size,
            noise: spec.exploration_noise,
        }
    }

    pub fn model(&self) -> &DdpgModel {
        &self.model
    }

    pub fn explore(&self, obs: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut a = self.model.action(obs)?;
        for v in a.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v + self.noise * z).clamp(-1.0, 1.0);
        }
        Ok(a)
    }

    pub fn soft_sync(&mut self, tau: f64) {
        self.actor_target.soft_update_from(&self.model.actor, tau);
        self.critic_target.soft_update_from(&self.critic, tau);
    }

    /// One critic step on the TD target, then one actor step along `dQ/da`.
    /// Returns `(actor_loss, critic_loss)`.
    pub fn update(&mut self, replay: &ReplayBuffer, rng: &mut impl Rng) -> Result<(f64, f64)> {
        let idx = replay.sample_indices(self.batch_size, rng);
        let m = idx.len() as f64;
        let mut g_c = vec![0.0; self.critic.n_params()];
        let mut critic_loss = 0.0;
        for &i in &idx {
            let x = self.model.preprocess(replay.obs(i));
            let x2 = self.model.preprocess(replay.next_obs(i));
            let a2 = self.actor_target.forward(&x2)?;
            let q2 = self.critic_target.forward(&concat(&x2, &a2))?[0];
            let y = replay.reward(i) + if replay.terminal(i) { 0.0 } else { self.gamma * q2 };
            let cache = self.critic.forward_cached(&concat(&x, replay.action(i)))?;
            let err = cache.output()[0] - y;
            critic_loss += 0.5 * err * err / m;
            self.critic.backward(&cache, &[err / m], &mut g_c);
        }
        clip_grad_norm(&mut g_c, 10.0);
        self.critic_opt.step(self.critic.params_mut(), &g_c);

        let mut g_a = vec![0.0; self.model.actor.n_params()];
        let mut scratch = vec![0.0; self.critic.n_params()];
        let mut actor_loss = 0.0;
        let d = self.model.actor.input_dim();
        for &i in &idx {
            let x = self.model.preprocess(replay.obs(i));
            let ac = self.model.actor.forward_cached(&x)?;
            let cc = self.critic.forward_cached(&concat(&x, ac.output()))?;
            actor_loss -= cc.output()[0] / m;
            let g_in = self.critic.backward(&cc, &[-1.0 / m], &mut scratch);
            self.model.actor.backward(&ac, &g_in[d..], &mut g_a);
        }
        clip_grad_norm(&mut g_a, 10.0);
        self.actor_opt.step(self.model.actor.params_mut(), &g_a);
        if !(actor_loss.is_finite() && critic_loss.is_finite() && self.model.actor.is_finite() && self.critic.is_finite())
        {
            return Err(Error::Divergence("DDPG update became non-finite".into()));
        }
        Ok((actor_loss, critic_loss))
    }
}
