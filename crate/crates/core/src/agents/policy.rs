use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, RunningNorm};
use crate::vecenv::{Policy, ScorePolicy};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
pub(crate) const LOG_STD_MIN: f64 = -5.0;
pub(crate) const LOG_STD_MAX: f64 = 2.0;

/// Per-state action distribution in normalized (`[-1, 1]`-scaled) units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionDistribution {
    /// Diagonal Gaussian.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// One categorical distribution per action head.
    Categorical { probs: Vec<Vec<f64>> },
}

impl ActionDistribution {
    /// `KL(self || other)` in closed form.
    pub fn kl(&self, other: &ActionDistribution) -> Result<f64> {
        match (self, other) {
            (
                ActionDistribution::Gaussian { mean: mp, std: sp },
                ActionDistribution::Gaussian { mean: mq, std: sq },
            ) => {
                if mp.len() != mq.len() {
                    return Err(Error::Dimension {
                        what: "gaussian dimension",
                        expected: mp.len(),
                        got: mq.len(),
                    });
                }
                Ok((0..mp.len())
                    .map(|i| {
                        (sq[i] / sp[i]).ln() + (sp[i] * sp[i] + (mp[i] - mq[i]).powi(2)) / (2.0 * sq[i] * sq[i]) - 0.5
                    })
                    .sum())
            }
            (ActionDistribution::Categorical { probs: p }, ActionDistribution::Categorical { probs: q }) => {
                if p.len() != q.len() || p.iter().zip(q).any(|(a, b)| a.len() != b.len()) {
                    return Err(Error::invalid("categorical distributions have different shapes"));
                }
                let mut total = 0.0;
                for (ph, qh) in p.iter().zip(q) {
                    for (&pi, &qi) in ph.iter().zip(qh) {
                        if pi > 0.0 {
                            total += pi * (pi / qi).ln();
                        }
                    }
                }
                Ok(total)
            }
            _ => Err(Error::invalid("KL between Gaussian and categorical policies is undefined")),
        }
    }
}

/// Anything that can report its action distribution at a raw observation.
pub trait DistributionSource: Sync {
    fn action_distribution(&self, obs: &[f64]) -> Result<ActionDistribution>;
}

/// Diagonal Gaussian policy: an MLP gives the mean, a state-independent
/// vector gives the log standard deviation. Environment actions are
/// `clamp(u, -1, 1) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    net: Mlp,
    log_std: Vec<f64>,
    norm: Option<RunningNorm>,
    scale: f64,
}

impl GaussianPolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        init_log_std: f64,
        scale: f64,
        normalize_obs: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut net = Mlp::new(&sizes, activation, Activation::Identity, rng);
        net.scale_output_layer(0.01);
        GaussianPolicy {
            net,
            log_std: vec![init_log_std; action_dim],
            norm: normalize_obs.then(|| RunningNorm::new(obs_dim)),
            scale,
        }
    }

    /// A policy around an existing mean network, without normalization.
    pub fn from_parts(net: Mlp, log_std: Vec<f64>, scale: f64) -> Result<Self> {
        if log_std.len() != net.output_dim() {
            return Err(Error::Dimension {
                what: "log std",
                expected: net.output_dim(),
                got: log_std.len(),
            });
        }
        Ok(GaussianPolicy {
            net,
            log_std,
            norm: None,
            scale,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn norm(&self) -> Option<&RunningNorm> {
        self.norm.as_ref()
    }

    pub fn norm_mut(&mut self) -> Option<&mut RunningNorm> {
        self.norm.as_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    /// Flat parameters: mean network, then log std.
    pub fn param_vec(&self) -> Vec<f64> {
        let mut v = self.net.params().to_vec();
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.net.n_params();
        if params.len() != n + self.log_std.len() {
            return Err(Error::Dimension {
                what: "policy parameters",
                expected: n + self.log_std.len(),
                got: params.len(),
            });
        }
        self.net.params_mut().copy_from_slice(&params[..n]);
        self.log_std.copy_from_slice(&params[n..]);
        Ok(())
    }

    pub(crate) fn apply_update(&mut self, update: impl FnOnce(&mut [f64])) {
        let mut p = self.param_vec();
        update(&mut p);
        let n = self.net.n_params();
        self.net.params_mut().copy_from_slice(&p[..n]);
        for (dst, src) in self.log_std.iter_mut().zip(&p[n..]) {
            *dst = src.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn preprocess(&self, obs: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(n) => n.normalize(obs),
            None => obs.to_vec(),
        }
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(&self.preprocess(obs))
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn distribution(&self, obs: &[f64]) -> Result<ActionDistribution> {
        Ok(ActionDistribution::Gaussian {
            mean: self.mean(obs)?,
            std: self.std(),
        })
    }

    pub fn to_env(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|u| u.clamp(-1.0, 1.0) * self.scale).collect()
    }

    /// Backpropagates gradients with respect to the mean (`g_mean`) and the
    /// log std (`g_log_std`) into `grad` (flat parameter layout).
    pub fn backprop(&self, obs: &[f64], g_mean: &[f64], g_log_std: &[f64], grad: &mut [f64]) -> Result<()> {
        let cache = self.net.forward_cached(&self.preprocess(obs))?;
        let n = self.net.n_params();
        self.net.backward(&cache, g_mean, &mut grad[..n]);
        for (g, d) in grad[n..].iter_mut().zip(g_log_std) {
            *g += d;
        }
        Ok(())
    }

    /// `log pi(u | s)` and the mean it was evaluated at.
    pub fn log_prob_with_mean(&self, obs: &[f64], action: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mean = self.mean(obs)?;
        Ok((gaussian_log_prob(&mean, &self.log_std, action), mean))
    }
}

impl DistributionSource for GaussianPolicy {
    fn action_distribution(&self, obs: &[f64]) -> Result<ActionDistribution> {
        self.distribution(obs)
    }
}

pub(crate) fn gaussian_log_prob(mean: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let z = (u[i] - mean[i]) / log_std[i].exp();
        lp += -0.5 * z * z - log_std[i] - 0.5 * LN_2PI;
    }
    lp
}

impl Policy for GaussianPolicy {
    fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn sample_batch(
        &self,
        obs: &[f64],
        n: usize,
        rngs: &mut [ChaCha8Rng],
        actions: &mut [f64],
        log_probs: Option<&mut [f64]>,
    ) -> Result<()> {
        let d = self.obs_dim();
        let k = self.action_dim();
        let input: Vec<f64> = match &self.norm {
            Some(norm) => {
                let mut buf = vec![0.0; obs.len()];
                for (src, dst) in obs.chunks_exact(d).zip(buf.chunks_exact_mut(d)) {
                    norm.normalize_into(src, dst);
                }
                buf
            }
            None => obs.to_vec(),
        };
        let means = self.net.forward_batch(&input, n)?;
        let std = self.std();
        let mut lp_out = log_probs;
        for j in 0..n {
            let row = &mut actions[j * k..(j + 1) * k];
            for i in 0..k {
                let z: f64 = rngs[j].sample(StandardNormal);
                row[i] = means[j * k + i] + std[i] * z;
            }
            if let Some(lp) = lp_out.as_deref_mut() {
                lp[j] = gaussian_log_prob(&means[j * k..(j + 1) * k], &self.log_std, row);
            }
        }
        Ok(())
    }

    fn env_action(&self, raw: &[f64], out: &mut [f64]) {
        for (o, u) in out.iter_mut().zip(raw) {
            *o = u.clamp(-1.0, 1.0) * self.scale;
        }
    }
}

impl ScorePolicy for GaussianPolicy {
    fn n_params(&self) -> usize {
        self.net.n_params() + self.log_std.len()
    }

    fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.log_prob_with_mean(obs, action)?.0)
    }

    fn add_score(&self, obs: &[f64], action: &[f64], scale: f64, grad: &mut [f64]) -> Result<()> {
        let mean = self.mean(obs)?;
        let k = mean.len();
        let mut g_mean = vec![0.0; k];
        let mut g_ls = vec![0.0; k];
        for i in 0..k {
            let var = (2.0 * self.log_std[i]).exp();
            let diff = action[i] - mean[i];
            g_mean[i] = scale * diff / var;
            g_ls[i] = scale * (diff * diff / var - 1.0);
        }
        self.backprop(obs, &g_mean, &g_ls, grad)
    }
}
