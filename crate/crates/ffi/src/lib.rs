//! C ABI over the trading environment, the vectorized environment, trained
//! agent checkpoints and the performance metrics.
//!
//! Every function returns an [`MrlStatus`]. On failure, the message of the
//! most recent error on the calling thread is available through
//! [`mrl_last_error`]. Handles are opaque and must be released with their
//! `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use marketrl::agents::TrainedAgent;
use marketrl::env::{EnvConfig, Environment, MarketData, TradingEnv};
use marketrl::evalx::{compute_metrics, EquityCurve, MetricsConfig};
use marketrl::vecenv::VecEnv;
use marketrl::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    EpisodeDone = 4,
    Io = 5,
    Parse = 6,
    InsufficientData = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// Single trading environment.
pub struct MrlEnv {
    env: TradingEnv,
}

/// `n_envs` trading environments stepped in lockstep.
pub struct MrlVecEnv {
    venv: VecEnv<TradingEnv>,
}

/// Trained agent loaded from a checkpoint.
pub struct MrlAgent {
    agent: TrainedAgent,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> MrlStatus {
    match e {
        Error::Io { .. } => MrlStatus::Io,
        Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => MrlStatus::Parse,
        Error::Dimension { .. } => MrlStatus::DimensionMismatch,
        Error::EpisodeDone => MrlStatus::EpisodeDone,
        Error::InsufficientData(_) | Error::EmptyDataset => MrlStatus::InsufficientData,
        Error::InvalidArgument(_) | Error::Config(_) | Error::NonFiniteAction => MrlStatus::InvalidArgument,
        _ => MrlStatus::Other,
    }
}

struct Failure(MrlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: MrlStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MrlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside marketrl");
            MrlStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MrlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(MrlStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(MrlStatus::NullPointer, format!("{what} handle is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(MrlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MrlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// `None` or an empty string gives the default configuration.
unsafe fn env_config(json: *const c_char) -> Result<EnvConfig, Failure> {
    if json.is_null() {
        return Ok(EnvConfig::default());
    }
    let s = string(json, "config json")?;
    if s.trim().is_empty() {
        return Ok(EnvConfig::default());
    }
    let cfg: EnvConfig = serde_json::from_str(s).map_err(|e| fail(MrlStatus::Parse, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn market(prices: *const f64, n_times: usize, n_assets: usize) -> Result<Arc<MarketData>, Failure> {
    let n = n_times
        .checked_mul(n_assets)
        .ok_or_else(|| fail(MrlStatus::InvalidArgument, "price array too large"))?;
    let p = slice(prices, n, "prices")?;
    if n_assets == 0 {
        return Err(fail(MrlStatus::InvalidArgument, "n_assets must be >= 1"));
    }
    let rows: Vec<Vec<f64>> = p.chunks(n_assets).map(<[f64]>::to_vec).collect();
    Ok(Arc::new(MarketData::from_prices(&rows)?))
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), Failure> {
    if expected != got {
        return Err(Failure::from(Error::Dimension { what, expected, got }));
    }
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mrl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an environment over row-major `prices[n_times * n_assets]`.
/// `config_json` is an environment configuration object or NULL for defaults.
///
/// # Safety
/// `prices` must point to `n_times * n_assets` doubles, `config_json` must be
/// NULL or a NUL-terminated string, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_new(
    prices: *const f64,
    n_times: usize,
    n_assets: usize,
    config_json: *const c_char,
    out: *mut *mut MrlEnv,
) -> MrlStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let data = market(prices, n_times, n_assets)?;
        let env = TradingEnv::new(data, env_config(config_json)?)?;
        *out = Box::into_raw(Box::new(MrlEnv { env }));
        Ok(())
    })
}

/// # Safety
/// `env` must be NULL or a handle from [`mrl_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_free(env: *mut MrlEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation length `1 + 2K + K*I`; 0 for a NULL handle.
///
/// # Safety
/// `env` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_obs_dim(env: *const MrlEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.obs_dim())
}

/// Number of action components (one per asset); 0 for a NULL handle.
///
/// # Safety
/// `env` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_action_dim(env: *const MrlEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.action_dim())
}

/// Resets and writes the initial observation into `obs[obs_len]`.
///
/// # Safety
/// `env` must be a live handle and `obs` writable for `obs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_reset(env: *mut MrlEnv, obs: *mut f64, obs_len: usize) -> MrlStatus {
    guard(|| {
        let e = handle(env, "env")?;
        check_len("observation buffer", e.env.obs_dim(), obs_len)?;
        e.env.reset_into(slice_mut(obs, obs_len, "obs")?);
        Ok(())
    })
}

/// Executes `action[action_len]` (shares per asset), writing the next
/// observation, the reward and whether the episode ended.
///
/// # Safety
/// `env` must be a live handle; the buffers must have the given lengths and
/// `reward` / `done` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_step(
    env: *mut MrlEnv,
    action: *const f64,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    done: *mut u8,
) -> MrlStatus {
    guard(|| {
        let e = handle(env, "env")?;
        check_len("action", e.env.action_dim(), action_len)?;
        check_len("observation buffer", e.env.obs_dim(), obs_len)?;
        let reward = handle(reward, "reward")?;
        let done = handle(done, "done")?;
        let tr = e.env.step_into(slice(action, action_len, "action")?, slice_mut(obs, obs_len, "obs")?)?;
        *reward = tr.reward;
        *done = tr.done() as u8;
        Ok(())
    })
}

/// Total asset value (cash plus holdings at current prices).
///
/// # Safety
/// `env` must be a live handle and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn mrl_env_value(env: *const MrlEnv, value: *mut f64) -> MrlStatus {
    guard(|| {
        let e = env
            .as_ref()
            .ok_or_else(|| fail(MrlStatus::NullPointer, "env handle is null"))?;
        *handle(value, "value")? = e.env.value();
        Ok(())
    })
}

/// Creates `n_envs` identical environments stepped with `workers` threads.
///
/// # Safety
/// As [`mrl_env_new`].
#[no_mangle]
pub unsafe extern "C" fn mrl_vecenv_new(
    prices: *const f64,
    n_times: usize,
    n_assets: usize,
    config_json: *const c_char,
    n_envs: usize,
    workers: usize,
    out: *mut *mut MrlVecEnv,
) -> MrlStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let data = market(prices, n_times, n_assets)?;
        let cfg = env_config(config_json)?;
        let envs = (0..n_envs)
            .map(|_| TradingEnv::new(data.clone(), cfg.clone()))
            .collect::<marketrl::Result<Vec<_>>>()?;
        let venv = VecEnv::new(envs, workers.max(1))?;
        *out = Box::into_raw(Box::new(MrlVecEnv { venv }));
        Ok(())
    })
}

/// # Safety
/// `venv` must be NULL or a handle from [`mrl_vecenv_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mrl_vecenv_free(venv: *mut MrlVecEnv) {
    if !venv.is_null() {
        drop(Box::from_raw(venv));
    }
}

/// Number of sub-environments; 0 for a NULL handle.
///
/// # Safety
/// `venv` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrl_vecenv_n_envs(venv: *const MrlVecEnv) -> usize {
    venv.as_ref().map_or(0, |v| v.venv.n_envs())
}

/// Per-row observation length; 0 for a NULL handle.
///
/// # Safety
/// `venv` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrl_vecenv_obs_dim(venv: *const MrlVecEnv) -> usize {
    venv.as_ref().map_or(0, |v| v.venv.obs_dim())
}

/// Resets every row, writing `N x obs_dim` observations.
///
/// # Safety
/// `venv` must be a live handle and `obs` writable for `obs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mrl_vecenv_reset(venv: *mut MrlVecEnv, obs: *mut f64, obs_len: usize) -> MrlStatus {
    guard(|| {
        let v = handle(venv, "vecenv")?;
        Ok(v.venv.batch_reset_into(slice_mut(obs, obs_len, "obs")?)?)
    })
}

/// Steps every row with its row of `actions[N x action_dim]`.
///
/// # Safety
/// `venv` must be a live handle; `actions` holds `N * action_dim` doubles,
/// `obs` `N * obs_dim`, and `rewards` / `dones` `N` entries each.
#[no_mangle]
pub unsafe extern "C" fn mrl_vecenv_step(
    venv: *mut MrlVecEnv,
    actions: *const f64,
    actions_len: usize,
    obs: *mut f64,
    obs_len: usize,
    rewards: *mut f64,
    dones: *mut u8,
    n: usize,
) -> MrlStatus {
    guard(|| {
        let v = handle(venv, "vecenv")?;
        check_len("rewards", v.venv.n_envs(), n)?;
        let mut flags = vec![false; n];
        v.venv.batch_step_into(
            slice(actions, actions_len, "actions")?,
            slice_mut(obs, obs_len, "obs")?,
            slice_mut(rewards, n, "rewards")?,
            &mut flags,
        )?;
        for (d, f) in slice_mut(dones, n, "dones")?.iter_mut().zip(flags) {
            *d = f as u8;
        }
        Ok(())
    })
}

/// Loads a trained agent checkpoint (JSON) from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mrl_agent_load(path: *const c_char, out: *mut *mut MrlAgent) -> MrlStatus {
    guard(|| {
        let out = handle(out, "output")?;
        *out = ptr::null_mut();
        let agent = TrainedAgent::load(string(path, "path")?)?;
        *out = Box::into_raw(Box::new(MrlAgent { agent }));
        Ok(())
    })
}

/// # Safety
/// `agent` must be NULL or a handle from [`mrl_agent_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mrl_agent_free(agent: *mut MrlAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Observation length the agent expects; 0 for a NULL handle.
///
/// # Safety
/// `agent` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrl_agent_obs_dim(agent: *const MrlAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.agent.obs_dim())
}

/// Action length the agent produces; 0 for a NULL handle.
///
/// # Safety
/// `agent` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mrl_agent_action_dim(agent: *const MrlAgent) -> usize {
    agent.as_ref().map_or(0, |a| a.agent.action_space.env_dim())
}

/// Deterministic (greedy) environment action for `obs`.
///
/// # Safety
/// `agent` must be a live handle and the buffers must have the given lengths.
#[no_mangle]
pub unsafe extern "C" fn mrl_agent_act(
    agent: *const MrlAgent,
    obs: *const f64,
    obs_len: usize,
    action: *mut f64,
    action_len: usize,
) -> MrlStatus {
    guard(|| {
        let a = agent
            .as_ref()
            .ok_or_else(|| fail(MrlStatus::NullPointer, "agent handle is null"))?;
        check_len("observation", a.agent.obs_dim(), obs_len)?;
        let act = a.agent.act_greedy(slice(obs, obs_len, "obs")?)?;
        check_len("action buffer", act.len(), action_len)?;
        slice_mut(action, action_len, "action")?.copy_from_slice(&act);
        Ok(())
    })
}

/// Performance metrics of the equity curve `values[n]` as a JSON object,
/// written NUL-terminated into `buf[buf_len]`. `periods_per_year <= 0`
/// selects 252. `written` receives the JSON length without the NUL; on
/// `BufferTooSmall` it holds the required length.
///
/// # Safety
/// `values` must hold `n` doubles, `buf` be writable for `buf_len` bytes and
/// `written` be writable.
#[no_mangle]
pub unsafe extern "C" fn mrl_metrics_json(
    values: *const f64,
    n: usize,
    periods_per_year: f64,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> MrlStatus {
    guard(|| {
        let written = handle(written, "written")?;
        let v = slice(values, n, "values")?.to_vec();
        let curve = EquityCurve::from_values(v);
        let cfg = MetricsConfig {
            periods_per_year: Some(if periods_per_year > 0.0 { periods_per_year } else { 252.0 }),
            ..MetricsConfig::default()
        };
        let json = compute_metrics(&curve, &cfg)?.to_json()?;
        *written = json.len();
        if json.len() + 1 > buf_len {
            return Err(fail(
                MrlStatus::BufferTooSmall,
                format!("metrics need {} bytes", json.len() + 1),
            ));
        }
        let out = slice_mut(buf.cast::<u8>(), buf_len, "buf")?;
        out[..json.len()].copy_from_slice(json.as_bytes());
        out[json.len()] = 0;
        Ok(())
    })
}
