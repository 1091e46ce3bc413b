use rand::Rng;
use serde::{Deserialize, Serialize};

use super::replay::ReplayBuffer;
use super::{Algorithm, AgentSpec};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Activation, Adam, Mlp, RunningNorm};

/// `Q_{k,l} = V_k + A_{k,l} - mean_l A_{k,l}` for each head `k`.
pub fn dueling_aggregate(value: &[f64], advantage: &[f64], levels: usize) -> Vec<f64> {
    let mut q = Vec::with_capacity(advantage.len());
    for (k, v) in value.iter().enumerate() {
        let a = &advantage[k * levels..(k + 1) * levels];
        let mean = a.iter().sum::<f64>() / levels as f64;
        q.extend(a.iter().map(|x| v + x - mean));
    }
    q
}

/// Double DQN bootstrap for one head: the online network picks the action,
/// the target network values it. Returns `(action, value)`.
pub fn double_dqn_target(q_online: &[f64], q_target: &[f64]) -> (usize, f64) {
    let a = argmax(q_online);
    (a, q_target[a])
}

/// Index of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn huber_grad(err: f64) -> (f64, f64) {
    if err.abs() <= 1.0 {
        (0.5 * err * err, err)
    } else {
        (err.abs() - 0.5, err.signum())
    }
}

/// Q-value network with `heads x levels` outputs, either a plain MLP or a
/// shared trunk with separate value and advantage streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QNetwork {
    Plain {
        net: Mlp,
        heads: usize,
        levels: usize,
    },
    Dueling {
        trunk: Mlp,
        value: Mlp,
        advantage: Mlp,
        heads: usize,
        levels: usize,
    },
}

impl QNetwork {
    pub fn new(
        obs_dim: usize,
        hidden: &[usize],
        activation: Activation,
        heads: usize,
        levels: usize,
        dueling: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        if !dueling {
            sizes.push(heads * levels);
            return Ok(QNetwork::Plain {
                net: Mlp::new(&sizes, activation, Activation::Identity, rng),
                heads,
                levels,
            });
        }
        let width = *hidden
            .last()
            .ok_or_else(|| Error::invalid("dueling networks need at least one hidden layer"))?;
        Ok(QNetwork::Dueling {
            trunk: Mlp::new(&sizes, activation, activation, rng),
            value: Mlp::new(&[width, heads], activation, Activation::Identity, rng),
            advantage: Mlp::new(&[width, heads * levels], activation, Activation::Identity, rng),
            heads,
            levels,
        })
    }

    pub fn heads(&self) -> usize {
        match self {
            QNetwork::Plain { heads, .. } | QNetwork::Dueling { heads, .. } => *heads,
        }
    }

    pub fn levels(&self) -> usize {
        match self {
            QNetwork::Plain { levels, .. } | QNetwork::Dueling { levels, .. } => *levels,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            QNetwork::Plain { net, .. } => net.input_dim(),
            QNetwork::Dueling { trunk, .. } => trunk.input_dim(),
        }
    }

    fn nets(&self) -> Vec<&Mlp> {
        match self {
            QNetwork::Plain { net, .. } => vec![net],
            QNetwork::Dueling {
                trunk, value, advantage, ..
            } => vec![trunk, value, advantage],
        }
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            QNetwork::Plain { net, .. } => vec![net],
            QNetwork::Dueling {
                trunk, value, advantage, ..
            } => vec![trunk, value, advantage],
        }
    }

    pub fn n_params(&self) -> usize {
        self.nets().iter().map(|n| n.n_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for net in self.nets_mut() {
            let n = net.n_params();
            net.params_mut().copy_from_slice(&params[off..off + n]);
            off += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.nets().iter().all(|n| n.is_finite())
    }

    pub fn soft_update_from(&mut self, online: &QNetwork, tau: f64) {
        for (t, o) in self.nets_mut().into_iter().zip(online.nets()) {
            t.soft_update_from(o, tau);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            QNetwork::Plain { net, .. } => net.forward(x),
            QNetwork::Dueling {
                trunk,
                value,
                advantage,
                levels,
                ..
            } => {
                let h = trunk.forward(x)?;
                Ok(dueling_aggregate(&value.forward(&h)?, &advantage.forward(&h)?, *levels))
            }
        }
    }

    /// Adds dL/dparams for `grad_q = dL/dQ` into `grad` (flat layout).
    pub fn backward(&self, x: &[f64], grad_q: &[f64], grad: &mut [f64]) -> Result<()> {
        match self {
            QNetwork::Plain { net, .. } => {
                let cache = net.forward_cached(x)?;
                net.backward(&cache, grad_q, grad);
            }
            QNetwork::Dueling {
                trunk,
                value,
                advantage,
                heads,
                levels,
            } => {
                let tc = trunk.forward_cached(x)?;
                let h = tc.output().to_vec();
                let vc = value.forward_cached(&h)?;
                let ac = advantage.forward_cached(&h)?;
                let mut g_v = vec![0.0; *heads];
                let mut g_a = vec![0.0; heads * levels];
                for k in 0..*heads {
                    let g = &grad_q[k * levels..(k + 1) * levels];
                    let sum: f64 = g.iter().sum();
                    g_v[k] = sum;
                    for l in 0..*levels {
                        g_a[k * levels + l] = g[l] - sum / *levels as f64;
                    }
                }
                let (nt, nv) = (trunk.n_params(), value.n_params());
                let (gt, rest) = grad.split_at_mut(nt);
                let (gv, ga) = rest.split_at_mut(nv);
                let mut g_h = value.backward(&vc, &g_v, gv);
                let g_h2 = advantage.backward(&ac, &g_a, ga);
                for (a, b) in g_h.iter_mut().zip(&g_h2) {
                    *a += b;
                }
                trunk.backward(&tc, &g_h, gt);
            }
        }
        Ok(())
    }
}

/// DQN-family learner over `heads` independent discrete choices.
#[derive(Debug, Clone)]
pub struct DqnLearner {
    pub(crate) variant: Algorithm,
    pub(crate) online: QNetwork,
    pub(crate) target: QNetwork,
    pub(crate) norm: Option<RunningNorm>,
    opt: Adam,
    gamma: f64,
    batch_size: usize,
    max_grad_norm: f64,
}

impl DqnLearner {
    pub fn new(spec: &AgentSpec, obs_dim: usize, heads: usize, levels: usize, rng: &mut impl Rng) -> Result<Self> {
        let dueling = spec.algorithm == Algorithm::DuelingDqn;
        let online = QNetwork::new(obs_dim, &spec.hidden, spec.activation, heads, levels, dueling, rng)?;
        Ok(DqnLearner {
            variant: spec.algorithm,
            target: online.clone(),
            opt: Adam::new(online.n_params(), spec.lr),
            online,
            norm: spec.normalize_obs.then(|| RunningNorm::new(obs_dim)),
            gamma: spec.gamma,
            batch_size: spec.batch_size,
            max_grad_norm: spec.max_grad_norm.max(10.0),
        })
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub(crate) fn preprocess(&self, obs: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => n.normalize(obs),
            None => obs.to_vec(),
        }
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.online.forward(&self.preprocess(obs))
    }

    /// Greedy level index per head.
    pub fn greedy(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let q = self.q_values(obs)?;
        let l = self.online.levels();
        Ok(q.chunks(l).map(|h| argmax(h) as f64).collect())
    }

    /// Epsilon-greedy per head: with probability `epsilon` a uniform level.
    pub fn epsilon_greedy(&self, obs: &[f64], epsilon: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mut a = self.greedy(obs)?;
        let l = self.online.levels();
        for v in a.iter_mut() {
            if rng.random::<f64>() < epsilon {
                *v = rng.random_range(0..l) as f64;
            }
        }
        Ok(a)
    }

    pub fn hard_sync(&mut self) {
        self.target = self.online.clone();
    }

    pub fn soft_sync(&mut self, tau: f64) {
        self.target.soft_update_from(&self.online, tau);
    }

    /// One gradient step on a uniformly sampled minibatch (Huber TD loss).
    pub fn update(&mut self, replay: &ReplayBuffer, rng: &mut impl Rng) -> Result<f64> {
        let idx = replay.sample_indices(self.batch_size, rng);
        let (heads, levels) = (self.online.heads(), self.online.levels());
        let m = idx.len() as f64;
        let mut grad = vec![0.0; self.online.n_params()];
        let mut loss = 0.0;
        for &i in &idx {
            let x = self.preprocess(replay.obs(i));
            let x_next = self.preprocess(replay.next_obs(i));
            let q = self.online.forward(&x)?;
            let q_next_target = self.target.forward(&x_next)?;
            let q_next_online = if self.variant == Algorithm::DoubleDqn {
                Some(self.online.forward(&x_next)?)
            } else {
                None
            };
            let mut g_q = vec![0.0; heads * levels];
            for k in 0..heads {
                let tgt = &q_next_target[k * levels..(k + 1) * levels];
                let bootstrap = match &q_next_online {
                    Some(on) => double_dqn_target(&on[k * levels..(k + 1) * levels], tgt).1,
                    None => tgt[argmax(tgt)],
                };
                let y = replay.reward(i) + if replay.terminal(i) { 0.0 } else { self.gamma * bootstrap };
                let a = replay.action(i)[k] as usize;
                let (l, g) = huber_grad(q[k * levels + a] - y);
                loss += l / m;
                g_q[k * levels + a] = g / m;
            }
            self.online.backward(&x, &g_q, &mut grad)?;
        }
        if !loss.is_finite() {
            return Err(Error::Divergence("DQN loss became non-finite".into()));
        }
        clip_grad_norm(&mut grad, self.max_grad_norm);
        let mut p = self.online.params();
        self.opt.step(&mut p, &grad);
        self.online.set_params(&p);
        if !self.online.is_finite() {
            return Err(Error::Divergence("DQN parameters became non-finite".into()));
        }
        Ok(loss)
    }
}
