//! Browser bindings for the systemic-risk example: coefficient curves,
//! closed-loop bank paths, and the optimality-gap sweep, each returned as a
//! JSON string for the demo page to plot.
//!
//! Compiled to wasm32 with `wasm-pack build crates/demo --target web`; the
//! same entry points run natively for tests (the simulator runs serially
//! here — the core crate is pulled in without its `parallel` feature).

use meanfield_core::error::Result;
use meanfield_core::model::InitialDistribution;
use meanfield_core::ode::TimeGrid;
use meanfield_core::sim::{paired_population_diff, simulate_traced, Deviation, SimConfig};
use meanfield_core::stats::linear_fit;
use meanfield_core::systemic_risk as sr;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn params(sigma: f64, rho: f64, q: f64, eps0: f64, c: f64, horizon: f64) -> sr::SrParams {
    sr::SrParams {
        sigma,
        rho,
        q,
        eps0,
        c,
        horizon,
    }
}

#[derive(Serialize)]
struct CurvesOut {
    t: Vec<f64>,
    pd: Vec<f64>,
    p: Vec<f64>,
    lambda: Vec<f64>,
    h: Vec<f64>,
    r: Vec<f64>,
    pi1: Vec<f64>,
    pi2_scaled: Vec<f64>,
    identity_residual: f64,
    e1: f64,
    e2: f64,
}

/// Coefficient curves of the limit solution and the finite-N direct
/// solution: P_d, P, Lambda, H, r, pi1 and (N-1) pi2 (sign-flipped so it
/// overlays P_d), plus the sup-norm gaps e1, e2.
fn curves(p: &sr::SrParams, n_agents: usize, steps: usize) -> Result<String> {
    let grid = TimeGrid::new(p.horizon, steps)?;
    let master = sr::solve_master(p, grid)?;
    let coupled = sr::solve_master_coupled(p, grid)?;
    let direct = sr::solve_direct(p, n_agents, grid)?;

    let mut identity_residual: f64 = 0.0;
    let mut e1: f64 = 0.0;
    let mut e2: f64 = 0.0;
    let mut pi2_scaled = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        identity_residual = identity_residual
            .max((coupled.lambda[k] + 2.0 * coupled.h[k] + coupled.p[k]).abs());
        e1 = e1.max((direct.pi1[k] - master.pd[k]).abs());
        let scaled = -(n_agents as f64 - 1.0) * direct.pi2[k];
        e2 = e2.max((scaled - master.pd[k]).abs());
        pi2_scaled.push(scaled);
    }
    let out = CurvesOut {
        t: (0..grid.len()).map(|k| grid.time(k)).collect(),
        pd: master.pd.clone(),
        p: master.p.clone(),
        lambda: master.lambda.clone(),
        h: master.h.clone(),
        r: master.r.clone(),
        pi1: direct.pi1.clone(),
        pi2_scaled,
        identity_residual,
        e1,
        e2,
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[derive(Serialize)]
struct PathsOut {
    t: Vec<f64>,
    /// `agents[i][step]`: log-capitalization of bank i along the path.
    agents: Vec<Vec<f64>>,
    mean: Vec<f64>,
    j_soc: f64,
}

/// One closed-loop path of the N-bank system under the cooperative law,
/// with common noise.
fn bank_paths(
    p: &sr::SrParams,
    n_agents: usize,
    dt: f64,
    seed: u64,
    spread: f64,
) -> Result<String> {
    let grid = TimeGrid::with_default_steps(p.horizon)?;
    let master = sr::solve_master(p, grid)?;
    let cfg = SimConfig {
        n_agents,
        paths: 1,
        dt,
        seed,
        initial: InitialDistribution::Gaussian {
            mean: DVector::from_element(1, 0.0),
            covariance: DMatrix::from_element(1, 1, spread * spread),
        },
    };
    let steps = cfg.steps(p.horizon)?;
    let loop_ = sr::SrClosedLoop::new(p, &master, steps)?;
    let (report, trace) = simulate_traced(&loop_, &cfg, &Deviation::None)?;

    let mut agents = vec![vec![0.0; steps + 1]; n_agents];
    for row in &trace {
        agents[row.agent - 1][(row.t / dt).round() as usize] = row.state[0];
    }
    let mean = (0..=steps)
        .map(|k| agents.iter().map(|a| a[k]).sum::<f64>() / n_agents as f64)
        .collect();
    let out = PathsOut {
        t: (0..=steps).map(|k| k as f64 * dt).collect(),
        agents,
        mean,
        j_soc: report.j_soc[0],
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[derive(Serialize)]
struct GapOut {
    n_list: Vec<usize>,
    eps_hat: Vec<f64>,
    stderr: Vec<f64>,
    scaled: Vec<f64>,
    slope: f64,
}

/// Total optimality gap `J_soc(cooperative limit law) - J_soc(exact
/// finite-N law)` over a population sweep, with the log-log slope.
fn gap_sweep(p: &sr::SrParams, paths: usize, dt: f64, seed: u64) -> Result<String> {
    let grid = TimeGrid::with_default_steps(p.horizon)?;
    let master = sr::solve_master(p, grid)?;
    let n_list = vec![4usize, 8, 16, 32];
    let mut eps_hat = Vec::new();
    let mut stderr = Vec::new();
    let mut scaled = Vec::new();
    for &n in &n_list {
        let cfg = SimConfig {
            n_agents: n,
            paths,
            dt,
            seed,
            initial: InitialDistribution::Gaussian {
                mean: DVector::from_element(1, 0.3),
                covariance: DMatrix::from_element(1, 1, 0.2),
            },
        };
        let steps = cfg.steps(p.horizon)?;
        let phi_loop = sr::SrClosedLoop::new(p, &master, steps)?;
        let direct = sr::solve_direct(p, n, grid)?;
        let direct_loop = sr::SrDirectLoop::new(p, &direct, steps)?;
        let paired = paired_population_diff(&phi_loop, &direct_loop, &cfg)?;
        let eps = (-paired.diff_mean).max(0.0);
        eps_hat.push(eps);
        stderr.push(paired.diff_stderr);
        scaled.push(eps * n as f64);
    }
    let x: Vec<f64> = n_list.iter().map(|&n| (n as f64).ln()).collect();
    let y: Vec<f64> = eps_hat.iter().map(|e| e.max(1e-300).ln()).collect();
    let slope = linear_fit(&x, &y).slope;
    let out = GapOut {
        n_list,
        eps_hat,
        stderr,
        scaled,
        slope,
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[wasm_bindgen]
pub fn sr_curves(
    sigma: f64,
    rho: f64,
    q: f64,
    eps0: f64,
    c: f64,
    horizon: f64,
    n_agents: usize,
    steps: usize,
) -> std::result::Result<String, JsValue> {
    curves(&params(sigma, rho, q, eps0, c, horizon), n_agents, steps)
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn sr_bank_paths(
    sigma: f64,
    rho: f64,
    q: f64,
    eps0: f64,
    c: f64,
    horizon: f64,
    n_agents: usize,
    dt: f64,
    seed: u64,
    spread: f64,
) -> std::result::Result<String, JsValue> {
    bank_paths(
        &params(sigma, rho, q, eps0, c, horizon),
        n_agents,
        dt,
        seed,
        spread,
    )
    .map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn sr_gap_sweep(
    sigma: f64,
    rho: f64,
    q: f64,
    eps0: f64,
    c: f64,
    horizon: f64,
    paths: usize,
    dt: f64,
    seed: u64,
) -> std::result::Result<String, JsValue> {
    gap_sweep(&params(sigma, rho, q, eps0, c, horizon), paths, dt, seed)
        .map_err(|e| JsValue::from_str(&e.to_string()))
}
