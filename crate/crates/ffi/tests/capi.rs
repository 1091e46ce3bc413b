use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;
use std::sync::Arc;

use marketrl::agents::{train_on_market, AgentSpec, Algorithm};
use marketrl::env::{EnvConfig, Environment, MarketData, TradingEnv};
use marketrl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mrl_last_error()) }.to_string_lossy().into_owned()
}

const CFG: &str = r#"{"cost_rate": 0.0, "initial_balance": 100000.0, "integer_shares": true}"#;

fn new_env(prices: &[f64], n_assets: usize) -> *mut MrlEnv {
    let cfg = CString::new(CFG).unwrap();
    let mut env = ptr::null_mut();
    let s = unsafe { mrl_env_new(prices.as_ptr(), prices.len() / n_assets, n_assets, cfg.as_ptr(), &mut env) };
    assert_eq!(s, MrlStatus::Ok, "{}", last_error());
    env
}

#[test]
fn worked_step_through_the_c_abi() {
    let prices = [200.0, 50.0, 201.0, 50.0];
    let env = new_env(&prices, 2);
    unsafe {
        assert_eq!(mrl_env_obs_dim(env), 5);
        assert_eq!(mrl_env_action_dim(env), 2);
        let mut obs = [0.0; 5];
        assert_eq!(mrl_env_reset(env, obs.as_mut_ptr(), 5), MrlStatus::Ok);
        assert_eq!(obs, [100000.0, 200.0, 50.0, 0.0, 0.0]);
        let (mut r, mut done) = (0.0, 0u8);
        let a = [15.0, 0.0];
        let s = mrl_env_step(env, a.as_ptr(), 2, obs.as_mut_ptr(), 5, &mut r, &mut done);
        assert_eq!(s, MrlStatus::Ok, "{}", last_error());
        assert_eq!(r, 15.0);
        assert_eq!(done, 1);
        let mut v = 0.0;
        assert_eq!(mrl_env_value(env, &mut v), MrlStatus::Ok);
        assert_eq!(v, 100015.0);
        let s = mrl_env_step(env, a.as_ptr(), 2, obs.as_mut_ptr(), 5, &mut r, &mut done);
        assert_eq!(s, MrlStatus::EpisodeDone);
        assert!(!last_error().is_empty());
        mrl_env_free(env);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let env = new_env(&[10.0, 11.0, 12.0], 1);
    unsafe {
        let mut obs = [0.0; 2];
        assert_eq!(mrl_env_reset(env, obs.as_mut_ptr(), 2), MrlStatus::DimensionMismatch);
        assert!(last_error().contains("observation buffer"), "{}", last_error());
        assert_eq!(mrl_env_reset(ptr::null_mut(), obs.as_mut_ptr(), 2), MrlStatus::NullPointer);
        let mut obs = [0.0; 3];
        assert_eq!(mrl_env_reset(env, obs.as_mut_ptr(), 3), MrlStatus::Ok);
        assert_eq!(last_error(), "");
        let (mut r, mut d) = (0.0, 0u8);
        let nan = [f64::NAN];
        let s = mrl_env_step(env, nan.as_ptr(), 1, obs.as_mut_ptr(), 3, &mut r, &mut d);
        assert_eq!(s, MrlStatus::InvalidArgument);
        mrl_env_free(env);

        let bad = CString::new(r#"{"cost_rate": 0.5}"#).unwrap();
        let mut out = ptr::null_mut();
        let p = [1.0, 2.0];
        assert_eq!(mrl_env_new(p.as_ptr(), 2, 1, bad.as_ptr(), &mut out), MrlStatus::InvalidArgument);
        assert!(out.is_null());
        let junk = CString::new("{").unwrap();
        assert_eq!(mrl_env_new(p.as_ptr(), 2, 1, junk.as_ptr(), &mut out), MrlStatus::Parse);
        let neg = [1.0, -2.0];
        assert_eq!(mrl_env_new(neg.as_ptr(), 2, 1, ptr::null(), &mut out), MrlStatus::InvalidArgument);
        mrl_env_free(ptr::null_mut());
    }
}

#[test]
fn vecenv_rows_match_single_envs() {
    let prices: Vec<f64> = (0..40).map(|i| 50.0 + (i as f64 * 0.7).sin() * 5.0 + i as f64 * 0.1).collect();
    let (k, n) = (2usize, 3usize);
    let cfg = CString::new(CFG).unwrap();
    let mut venv = ptr::null_mut();
    unsafe {
        let s = mrl_vecenv_new(prices.as_ptr(), prices.len() / k, k, cfg.as_ptr(), n, 2, &mut venv);
        assert_eq!(s, MrlStatus::Ok, "{}", last_error());
        assert_eq!(mrl_vecenv_n_envs(venv), n);
        let d = mrl_vecenv_obs_dim(venv);
        let mut obs = vec![0.0; n * d];
        assert_eq!(mrl_vecenv_reset(venv, obs.as_mut_ptr(), obs.len()), MrlStatus::Ok);

        let rows: Vec<Vec<f64>> = prices.chunks(k).map(<[f64]>::to_vec).collect();
        let data = Arc::new(MarketData::from_prices(&rows).unwrap());
        let cfg: EnvConfig = serde_json::from_str(CFG).unwrap();
        let mut singles: Vec<TradingEnv> = (0..n).map(|_| TradingEnv::new(data.clone(), cfg.clone()).unwrap()).collect();
        let mut single_obs = vec![vec![0.0; d]; n];
        for (e, o) in singles.iter_mut().zip(&mut single_obs) {
            e.reset_into(o);
        }
        let (mut rewards, mut dones) = (vec![0.0; n], vec![0u8; n]);
        for t in 0..rows.len() - 1 {
            let actions: Vec<f64> = (0..n * k).map(|i| ((i + t) % 5) as f64 - 2.0).collect();
            let s = mrl_vecenv_step(
                venv,
                actions.as_ptr(),
                actions.len(),
                obs.as_mut_ptr(),
                obs.len(),
                rewards.as_mut_ptr(),
                dones.as_mut_ptr(),
                n,
            );
            assert_eq!(s, MrlStatus::Ok, "{}", last_error());
            for j in 0..n {
                let tr = singles[j].step_into(&actions[j * k..(j + 1) * k], &mut single_obs[j]).unwrap();
                assert_eq!(tr.reward, rewards[j]);
                assert_eq!(tr.done() as u8, dones[j]);
                assert_eq!(&obs[j * d..(j + 1) * d], single_obs[j].as_slice());
            }
        }
        mrl_vecenv_free(venv);
    }
}

#[test]
fn agent_checkpoint_round_trip() {
    let rows: Vec<Vec<f64>> = (0..30).map(|t| vec![20.0 + t as f64 * 0.2, 30.0 - t as f64 * 0.1]).collect();
    let data = Arc::new(MarketData::from_prices(&rows).unwrap());
    let env_cfg = EnvConfig::default();
    let spec = AgentSpec {
        hidden: vec![8],
        iterations: 2,
        n_envs: 1,
        epochs: 1,
        ..AgentSpec::stock(Algorithm::Ppo)
    };
    let agent = train_on_market(&spec, data.clone(), &env_cfg, &[], 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.json");
    agent.save(&path).unwrap();
    let obs = TradingEnv::new(data, env_cfg).unwrap().reset_obs();
    let expected = agent.act_greedy(&obs).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(mrl_agent_load(cpath.as_ptr(), &mut h), MrlStatus::Ok, "{}", last_error());
        assert_eq!(mrl_agent_obs_dim(h), obs.len());
        assert_eq!(mrl_agent_action_dim(h), 2);
        let mut a = [0.0; 2];
        assert_eq!(mrl_agent_act(h, obs.as_ptr(), obs.len(), a.as_mut_ptr(), 2), MrlStatus::Ok);
        assert_eq!(a.to_vec(), expected);
        assert_eq!(
            mrl_agent_act(h, obs.as_ptr(), obs.len() - 1, a.as_mut_ptr(), 2),
            MrlStatus::DimensionMismatch
        );
        mrl_agent_free(h);

        let missing = CString::new(dir.path().join("none.json").to_str().unwrap()).unwrap();
        assert_eq!(mrl_agent_load(missing.as_ptr(), &mut h), MrlStatus::Io);
        assert!(h.is_null());
    }
}

#[test]
fn metrics_json_and_buffer_sizing() {
    let values = [100.0, 110.0, 99.0, 120.0];
    let mut written = 0usize;
    let mut small = [0 as std::ffi::c_char; 8];
    unsafe {
        let s = mrl_metrics_json(values.as_ptr(), 4, 0.0, small.as_mut_ptr(), small.len(), &mut written);
        assert_eq!(s, MrlStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; written + 1];
        let s = mrl_metrics_json(values.as_ptr(), 4, 0.0, buf.as_mut_ptr(), buf.len(), &mut written);
        assert_eq!(s, MrlStatus::Ok, "{}", last_error());
        let json = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        let v: serde_json::Value = serde_json::from_str(json).unwrap();
        assert!((v["cumulative_return"].as_f64().unwrap() - 0.2).abs() < 1e-12);
        assert!((v["max_drawdown"].as_f64().unwrap() + 0.1).abs() < 1e-12);
        let one = [1.0];
        let s = mrl_metrics_json(one.as_ptr(), 1, 0.0, buf.as_mut_ptr(), buf.len(), &mut written);
        assert_eq!(s, MrlStatus::InsufficientData);
    }
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(mrl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> String {
    std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/marketrl.h")).unwrap()
}

#[test]
fn header_declares_every_export() {
    let h = header();
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 18, "{exports:?}");
    for name in exports {
        assert!(h.contains(&format!("{name}(")), "{name} missing from header");
    }
    for handle in ["typedef struct MrlEnv MrlEnv;", "typedef struct MrlVecEnv MrlVecEnv;", "typedef struct MrlAgent MrlAgent;"] {
        assert!(h.contains(handle), "{handle}");
    }
    assert!(h.contains("MRL_STATUS_OK = 0"));
}

/// Compiles and runs a C program against the header and the shared library.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = ["libmarketrl_ffi.so", "libmarketrl_ffi.dylib"]
        .iter()
        .map(|n| target_dir.join(n))
        .find(|p| p.exists());
    let (Some(lib), true) = (lib, Command::new("cc").arg("--version").output().is_ok()) else {
        eprintln!("skipping: no C compiler or shared library in {}", target_dir.display());
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "marketrl.h"
int main(void) {
    double prices[] = {200.0, 201.0};
    MrlEnv *env = NULL;
    if (mrl_env_new(prices, 2, 1, "{\"cost_rate\": 0.0, \"initial_balance\": 100000.0}", &env) != MRL_STATUS_OK) {
        fprintf(stderr, "%s\n", mrl_last_error());
        return 1;
    }
    double obs[3], reward = 0.0, action[1] = {5.0};
    unsigned char done = 0;
    mrl_env_reset(env, obs, 3);
    if (mrl_env_step(env, action, 1, obs, 3, &reward, &done) != MRL_STATUS_OK) return 2;
    mrl_env_free(env);
    printf("%.1f %d\n", reward, done);
    return reward == 5.0 && done == 1 ? 0 : 3;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .arg(format!("-Wl,-rpath,{}", target_dir.display()))
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "5.0 1");
}
