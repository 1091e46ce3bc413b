//! Lockstep execution of `N` sub-environments, trajectory collection into
//! fixed-shape buffers and the Monte-Carlo policy-gradient estimate.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, Transition};
use crate::error::{Error, Result};

/// `N` environments advanced together. Rows are independent, so a step may
/// run on several workers; every row writes only its own output slots.
pub struct VecEnv<E: Environment> {
    envs: Vec<E>,
    pool: Option<rayon::ThreadPool>,
    obs_dim: usize,
    action_dim: usize,
}

impl<E: Environment> VecEnv<E> {
    /// `workers <= 1` steps rows sequentially on the calling thread.
    pub fn new(envs: Vec<E>, workers: usize) -> Result<Self> {
        let first = envs
            .first()
            .ok_or_else(|| Error::invalid("a vector env needs at least one sub-env"))?;
        let (obs_dim, action_dim) = (first.obs_dim(), first.action_dim());
        if envs.iter().any(|e| e.obs_dim() != obs_dim || e.action_dim() != action_dim) {
            return Err(Error::invalid("sub-envs must share observation and action dimensions"));
        }
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(VecEnv {
            envs,
            pool,
            obs_dim,
            action_dim,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn envs(&self) -> &[E] {
        &self.envs
    }

    pub fn envs_mut(&mut self) -> &mut [E] {
        &mut self.envs
    }

    pub fn max_steps(&self) -> usize {
        self.envs.iter().map(|e| e.max_steps()).max().unwrap_or(0)
    }

    /// Resets every sub-env, writing the `N x D` initial observations.
    pub fn batch_reset_into(&mut self, obs: &mut [f64]) -> Result<()> {
        self.check_rows("observation buffer", obs.len(), self.obs_dim)?;
        let d = self.obs_dim;
        let work = |(env, o): (&mut E, &mut [f64])| env.reset_into(o);
        match &self.pool {
            Some(pool) => pool.install(|| self.envs.par_iter_mut().zip(obs.par_chunks_mut(d)).for_each(work)),
            None => self.envs.iter_mut().zip(obs.chunks_mut(d)).for_each(work),
        }
        Ok(())
    }

    pub fn batch_reset(&mut self) -> Vec<f64> {
        let mut obs = vec![0.0; self.n_envs() * self.obs_dim];
        self.batch_reset_into(&mut obs).expect("buffer sized from the env");
        obs
    }

    fn check_rows(&self, what: &'static str, len: usize, width: usize) -> Result<()> {
        let expected = self.n_envs() * width;
        if len != expected {
            return Err(Error::Dimension { what, expected, got: len });
        }
        Ok(())
    }

    /// Steps every row with its `actions` row.
    pub fn batch_step_into(
        &mut self,
        actions: &[f64],
        obs: &mut [f64],
        rewards: &mut [f64],
        dones: &mut [bool],
    ) -> Result<()> {
        let mut tr = vec![IDLE; self.n_envs()];
        self.step_rows(actions, None, obs, &mut tr)?;
        for ((r, d), t) in rewards.iter_mut().zip(dones.iter_mut()).zip(&tr) {
            *r = t.reward;
            *d = t.done();
        }
        Ok(())
    }

    pub fn batch_step(&mut self, actions: &[f64]) -> Result<StepBatch> {
        let n = self.n_envs();
        let mut out = StepBatch {
            obs: vec![0.0; n * self.obs_dim],
            rewards: vec![0.0; n],
            dones: vec![false; n],
        };
        self.batch_step_into(actions, &mut out.obs, &mut out.rewards, &mut out.dones)?;
        Ok(out)
    }

    /// Steps the rows with `active[j] == true` (all rows when `active` is
    /// `None`), writing one [`Transition`] per row. Inactive rows keep their
    /// observation and report a zero-reward terminal transition.
    pub fn batch_step_transitions(
        &mut self,
        actions: &[f64],
        active: Option<&[bool]>,
        obs: &mut [f64],
        out: &mut [Transition],
    ) -> Result<()> {
        self.step_rows(actions, active, obs, out)
    }

    /// Resets a single row, e.g. after its episode ended.
    pub fn reset_row(&mut self, j: usize, obs: &mut [f64]) {
        self.envs[j].reset_into(obs);
    }

    fn step_rows(
        &mut self,
        actions: &[f64],
        active: Option<&[bool]>,
        obs: &mut [f64],
        out: &mut [Transition],
    ) -> Result<()> {
        self.check_rows("action rows", actions.len(), self.action_dim)?;
        self.check_rows("observation buffer", obs.len(), self.obs_dim)?;
        self.check_rows("transition buffer", out.len(), 1)?;
        if let Some(a) = active {
            self.check_rows("active mask", a.len(), 1)?;
        }
        let (d, k) = (self.obs_dim, self.action_dim);
        let work = |(j, (((env, a), o), tr)): (usize, (((&mut E, &[f64]), &mut [f64]), &mut Transition))| -> Result<()> {
            if active.is_some_and(|m| !m[j]) {
                *tr = IDLE;
                return Ok(());
            }
            *tr = env.step_into(a, o)?;
            Ok(())
        };
        let results: Vec<Result<()>> = match &self.pool {
            Some(pool) => pool.install(|| {
                self.envs
                    .par_iter_mut()
                    .zip(actions.par_chunks(k))
                    .zip(obs.par_chunks_mut(d))
                    .zip(out.par_iter_mut())
                    .enumerate()
                    .map(work)
                    .collect()
            }),
            None => self
                .envs
                .iter_mut()
                .zip(actions.chunks(k))
                .zip(obs.chunks_mut(d))
                .zip(out.iter_mut())
                .enumerate()
                .map(work)
                .collect(),
        };
        results.into_iter().collect()
    }
}

const IDLE: Transition = Transition {
    reward: 0.0,
    terminal: true,
    truncated: false,
};

#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub obs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

/// A policy evaluated on row-major batches of observations.
///
/// Policies emit raw actions (the quantity their log-probabilities refer to);
/// [`Policy::env_action`] maps a raw action to what the environment receives.
pub trait Policy: Sync {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    fn env_action_dim(&self) -> usize {
        self.action_dim()
    }

    /// Samples one raw action per row. Row `j` draws only from `rngs[j]`.
    /// `log_probs` receives `log pi(a|s)` for stochastic policies.
    fn sample_batch(
        &self,
        obs: &[f64],
        n: usize,
        rngs: &mut [ChaCha8Rng],
        actions: &mut [f64],
        log_probs: Option<&mut [f64]>,
    ) -> Result<()>;

    fn env_action(&self, raw: &[f64], out: &mut [f64]) {
        out.copy_from_slice(raw);
    }
}

/// A stochastic policy with differentiable log-density.
pub trait ScorePolicy: Policy {
    fn n_params(&self) -> usize;
    fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64>;
    /// Adds `scale * grad_theta log pi(action | obs)` into `grad`.
    fn add_score(&self, obs: &[f64], action: &[f64], scale: f64, grad: &mut [f64]) -> Result<()>;
}

/// Lockstep rollouts, stored as structure-of-arrays with row-major
/// `[env][time]` indexing. Steps after a row finishes are masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n_envs: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// `N x T x D`: state before each action.
    pub states: Vec<f64>,
    /// `N x T x A`: raw policy actions.
    pub actions: Vec<f64>,
    /// `N x T`.
    pub rewards: Vec<f64>,
    /// `N x T`: the episode ended on this step.
    pub dones: Vec<bool>,
    /// `N x T`: the episode ended because no further transitions exist
    /// (as opposed to a time limit).
    pub terminals: Vec<bool>,
    /// `N x T`: this step was actually taken.
    pub valid: Vec<bool>,
    /// `N x T`, present when the policy is stochastic.
    pub log_probs: Option<Vec<f64>>,
    /// `N x D`: observation after each row's last valid step.
    pub final_obs: Vec<f64>,
    /// Valid steps per row.
    pub lengths: Vec<usize>,
}

impl TrajectoryBatch {
    pub fn state(&self, j: usize, t: usize) -> &[f64] {
        let o = (j * self.horizon + t) * self.obs_dim;
        &self.states[o..o + self.obs_dim]
    }

    pub fn action(&self, j: usize, t: usize) -> &[f64] {
        let o = (j * self.horizon + t) * self.action_dim;
        &self.actions[o..o + self.action_dim]
    }

    pub fn reward(&self, j: usize, t: usize) -> f64 {
        self.rewards[j * self.horizon + t]
    }

    pub fn row_rewards(&self, j: usize) -> &[f64] {
        &self.rewards[j * self.horizon..j * self.horizon + self.lengths[j]]
    }

    /// `R(tau_j) = sum_t gamma^t r_t` over the row's valid steps.
    pub fn discounted_return(&self, j: usize, gamma: f64) -> f64 {
        let mut acc = 0.0;
        let mut g = 1.0;
        for &r in self.row_rewards(j) {
            acc += g * r;
            g *= gamma;
        }
        acc
    }

    pub fn total_reward(&self, j: usize) -> f64 {
        self.row_rewards(j).iter().sum()
    }

    pub fn n_samples(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Independent random stream for row `j` of a collection seeded with `seed`.
pub fn row_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// Resets every sub-env and rolls the policy forward for up to `horizon` steps.
pub fn collect_trajectories<E: Environment, P: Policy + ?Sized>(
    venv: &mut VecEnv<E>,
    policy: &P,
    horizon: usize,
    seed: u64,
    with_log_probs: bool,
) -> Result<TrajectoryBatch> {
    let (n, d) = (venv.n_envs(), venv.obs_dim());
    let (a_raw, a_env) = (policy.action_dim(), policy.env_action_dim());
    if policy.obs_dim() != d || a_env != venv.action_dim() {
        return Err(Error::Dimension {
            what: "policy action/observation shape",
            expected: venv.action_dim(),
            got: a_env,
        });
    }
    let mut batch = TrajectoryBatch {
        n_envs: n,
        horizon,
        obs_dim: d,
        action_dim: a_raw,
        states: vec![0.0; n * horizon * d],
        actions: vec![0.0; n * horizon * a_raw],
        rewards: vec![0.0; n * horizon],
        dones: vec![false; n * horizon],
        terminals: vec![false; n * horizon],
        valid: vec![false; n * horizon],
        log_probs: with_log_probs.then(|| vec![0.0; n * horizon]),
        final_obs: vec![0.0; n * d],
        lengths: vec![0; n],
    };
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|j| row_rng(seed, j)).collect();
    let mut obs = vec![0.0; n * d];
    venv.batch_reset_into(&mut obs)?;
    let mut active = vec![true; n];
    let mut raw = vec![0.0; n * a_raw];
    let mut env_actions = vec![0.0; n * a_env];
    let mut lp = vec![0.0; n];
    let mut trans = vec![IDLE; n];

    for t in 0..horizon {
        if !active.iter().any(|a| *a) {
            break;
        }
        policy.sample_batch(&obs, n, &mut rngs, &mut raw, with_log_probs.then_some(&mut lp[..]))?;
        for j in 0..n {
            if !active[j] {
                continue;
            }
            let row = &raw[j * a_raw..(j + 1) * a_raw];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteAction);
            }
            policy.env_action(row, &mut env_actions[j * a_env..(j + 1) * a_env]);
            let cell = j * horizon + t;
            batch.states[cell * d..(cell + 1) * d].copy_from_slice(&obs[j * d..(j + 1) * d]);
            batch.actions[cell * a_raw..(cell + 1) * a_raw].copy_from_slice(row);
            if let Some(l) = batch.log_probs.as_mut() {
                l[cell] = lp[j];
            }
        }
        venv.batch_step_transitions(&env_actions, Some(&active), &mut obs, &mut trans)?;
        for j in 0..n {
            if !active[j] {
                continue;
            }
            let cell = j * horizon + t;
            batch.rewards[cell] = trans[j].reward;
            batch.dones[cell] = trans[j].done();
            batch.terminals[cell] = trans[j].terminal;
            batch.valid[cell] = true;
            batch.lengths[j] += 1;
            if trans[j].done() {
                active[j] = false;
            }
        }
    }
    batch.final_obs.copy_from_slice(&obs);
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum BaselineMode {
    Zero,
    #[default]
    BatchMean,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub baseline: f64,
    pub n: usize,
}

/// `(1/n) sum_j (R(tau_j) - b) sum_t grad log pi(a_t | s_t)`.
pub fn estimate_policy_gradient<P: ScorePolicy + ?Sized>(
    batch: &TrajectoryBatch,
    policy: &P,
    gamma: f64,
    baseline: BaselineMode,
) -> Result<GradientEstimate> {
    let n = batch.n_envs;
    if n == 0 || batch.n_samples() == 0 {
        return Err(Error::InsufficientData("no trajectories to estimate from".into()));
    }
    let returns: Vec<f64> = (0..n).map(|j| batch.discounted_return(j, gamma)).collect();
    let b = match baseline {
        BaselineMode::Zero => 0.0,
        BaselineMode::BatchMean => returns.iter().sum::<f64>() / n as f64,
        BaselineMode::Constant(c) => c,
    };
    let mut grad = vec![0.0; policy.n_params()];
    for (j, r) in returns.iter().enumerate() {
        let weight = (r - b) / n as f64;
        if weight == 0.0 {
            continue;
        }
        for t in 0..batch.lengths[j] {
            policy.add_score(batch.state(j, t), batch.action(j, t), weight, &mut grad)?;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("policy gradient estimate is not finite".into()));
    }
    Ok(GradientEstimate { grad, baseline: b, n })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n_envs: usize,
    pub samples: usize,
    pub seconds: f64,
    pub samples_per_second: f64,
}

/// Measures rollout throughput (policy inference plus env stepping) for each
/// sub-env count. Each measurement repeats full collections until at least
/// `min_seconds` elapsed.
pub fn benchmark_sampling<E, P, F>(
    make_env: F,
    policy: &P,
    n_list: &[usize],
    horizon: usize,
    workers: usize,
    min_seconds: f64,
    seed: u64,
) -> Result<Vec<BenchRow>>
where
    E: Environment,
    P: Policy + ?Sized,
    F: Fn(usize) -> Result<E>,
{
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let envs = (0..n).map(&make_env).collect::<Result<Vec<E>>>()?;
        let mut venv = VecEnv::new(envs, workers.min(n))?;
        // warm-up pass outside the timed region
        collect_trajectories(&mut venv, policy, horizon, seed, false)?;
        let start = Instant::now();
        let mut samples = 0usize;
        let mut round = 0u64;
        loop {
            let batch = collect_trajectories(&mut venv, policy, horizon, seed.wrapping_add(round), false)?;
            samples += batch.n_samples();
            round += 1;
            if start.elapsed().as_secs_f64() >= min_seconds {
                break;
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            n_envs: n,
            samples,
            seconds,
            samples_per_second: samples as f64 / seconds,
        });
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n_envs", "samples_per_second"])?;
    for r in rows {
        w.write_record([r.n_envs.to_string(), format!("{:.3}", r.samples_per_second)])?;
    }
    w.flush().map_err(|e| Error::io("bench csv", e))?;
    Ok(())
}

/// Number of consecutive pairs where throughput decreases.
pub fn count_inversions(rows: &[BenchRow]) -> usize {
    rows.windows(2)
        .filter(|w| w[1].samples_per_second < w[0].samples_per_second)
        .count()
}
