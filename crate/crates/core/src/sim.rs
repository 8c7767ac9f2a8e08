//! Euler–Maruyama simulation of the N-agent closed-loop system with common
//! noise.
//!
//! Agents 2..N always play the cooperative feedback law; agent 1 optionally
//! deviates. Each agent couples to the others only through the mean of
//! their states (the empirical measure with itself excluded, divided by
//! N-1; the full-population measure is never substituted — the O(1/N)
//! distinction is exactly what the gap experiments measure).
//!
//! Running costs accumulate by left-endpoint Riemann sums, matching the
//! weak order of the Euler scheme. All randomness is counter-based
//! ([`crate::rng`]), and path results are reduced in fixed chunk order, so
//! reports are bit-identical for any worker count.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{sample_initial_states, InitialDistribution, LqModel};
use crate::rng::NoiseBundle;
use crate::stats::mean_stderr;
use crate::value::ValueCoefficients;

/// Hard guard on state norms; the Riccati-stabilized closed loop cannot
/// reach it on valid inputs, so any hit is a configuration bug.
pub const STATE_GUARD: f64 = 1e12;

/// Second-moment level above which [`moment_audit`] flags divergence.
pub const MOMENT_WARN: f64 = 1e6;

/// One interacting-population model as seen by the simulator: dimensions,
/// the cooperative law tabulated on the simulation grid, drift, noise
/// coefficients and costs.
pub trait PopulationModel: Sync {
    fn dim_state(&self) -> usize;
    fn dim_control(&self) -> usize;
    fn horizon(&self) -> f64;
    /// Number of simulation steps the control table was built for.
    fn control_steps(&self) -> usize;
    /// Cooperative feedback law at step `step` (time `step * dt`), given the
    /// agent's state and the mean of the other agents.
    fn control(&self, step: usize, x: &DVector<f64>, mean_others: &DVector<f64>) -> DVector<f64>;
    fn drift(&self, x: &DVector<f64>, u: &DVector<f64>, mean_others: &DVector<f64>)
        -> DVector<f64>;
    /// Idiosyncratic noise coefficient D (n x n2).
    fn idio_coeff(&self) -> &DMatrix<f64>;
    /// Common noise coefficient D0 (n x n3).
    fn common_coeff(&self) -> &DMatrix<f64>;
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, mean_others: &DVector<f64>) -> f64;
    fn terminal_cost(&self, x: &DVector<f64>, mean_others: &DVector<f64>) -> f64;
    /// Populations the model is restricted to, if any (used by exact
    /// finite-N laws).
    fn expected_agents(&self) -> Option<usize> {
        None
    }
}

/// Simulation configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Agent count N >= 2.
    pub n_agents: usize,
    /// Monte Carlo path count.
    pub paths: usize,
    /// Simulation step; must divide the horizon within 1e-12.
    pub dt: f64,
    pub seed: u64,
    pub initial: InitialDistribution,
}

impl SimConfig {
    /// Steps per path, validating that dt divides the horizon.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        if self.n_agents < 2 {
            return Err(Error::Config("need at least two agents".into()));
        }
        if self.paths == 0 {
            return Err(Error::Config("need at least one path".into()));
        }
        if !(self.dt > 0.0 && self.dt <= horizon) {
            return Err(Error::Config(format!(
                "dt = {} outside (0, {horizon}]",
                self.dt
            )));
        }
        let steps = (horizon / self.dt).round();
        if (steps * self.dt - horizon).abs() > 1e-12 * horizon.max(1.0) || steps < 1.0 {
            return Err(Error::Config(format!(
                "dt = {} does not divide horizon {horizon}",
                self.dt
            )));
        }
        Ok(steps as usize)
    }
}

/// A deviation strategy for agent 1; all other agents always play the
/// cooperative law.
#[derive(Clone)]
pub enum Deviation {
    /// Agent 1 also plays the cooperative law.
    None,
    ZeroControl,
    /// Cooperative law scaled by a factor.
    Scaled(f64),
    /// A constant control.
    Constant(DVector<f64>),
    /// Arbitrary feedback on the full state vector.
    Feedback(FeedbackLaw),
}

impl Deviation {
    pub fn label(&self) -> String {
        match self {
            Deviation::None => "none".into(),
            Deviation::ZeroControl => "zero-control".into(),
            Deviation::Scaled(k) => format!("scaled({k})"),
            Deviation::Constant(_) => "constant".into(),
            Deviation::Feedback(f) => f.label.clone(),
        }
    }
}

impl fmt::Debug for Deviation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Deviation({})", self.label())
    }
}

/// Feedback deviation: `(t, all agent states) -> control for agent 1`.
#[derive(Clone)]
pub struct FeedbackLaw {
    label: String,
    law: Arc<dyn Fn(f64, &[DVector<f64>]) -> DVector<f64> + Send + Sync>,
}

impl FeedbackLaw {
    pub fn new(
        label: impl Into<String>,
        law: impl Fn(f64, &[DVector<f64>]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            law: Arc::new(law),
        }
    }

    pub fn apply(&self, t: f64, states: &[DVector<f64>]) -> DVector<f64> {
        (self.law)(t, states)
    }
}

/// Per-path and aggregated costs of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// Social cost per path.
    pub j_soc: Vec<f64>,
    pub mean: f64,
    /// sample std / sqrt(paths).
    pub stderr: f64,
    /// Mean individual cost per agent.
    pub per_agent_mean: Vec<f64>,
    /// max over (agent, step) of the sample mean of |X|^2.
    pub max_second_moment: f64,
}

/// Divergence audit: the largest sample second moment observed over all
/// agents and time steps. Values above [`MOMENT_WARN`] indicate a
/// misconfigured (unstable) run.
pub fn moment_audit(report: &CostReport) -> f64 {
    report.max_second_moment
}

/// Baseline and deviated runs on identical noise and initial draws, with
/// per-path cost differences (common random numbers).
#[derive(Debug, Clone)]
pub struct PairedReport {
    pub baseline: CostReport,
    pub deviated: CostReport,
    /// Per-path `J_soc(deviated) - J_soc(baseline)`.
    pub diffs: Vec<f64>,
    pub diff_mean: f64,
    pub diff_stderr: f64,
}

/// Worker cap from `MEANFIELD_THREADS` (speed only, never results).
pub fn thread_cap() -> Option<usize> {
    std::env::var("MEANFIELD_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&k| k >= 1)
}

struct PathTally {
    j_soc: f64,
    agent_costs: Vec<f64>,
}

/// One Euler–Maruyama path. `noise_ids` maps agent slots to noise streams
/// and `initial` carries the slot initial states; `observe` sees the states
/// (and the controls applied) at every step boundary, including step 0 and
/// the terminal step.
fn rollout<M: PopulationModel + ?Sized>(
    pm: &M,
    n_agents: usize,
    steps: usize,
    dt: f64,
    dev: &Deviation,
    noise: &NoiseBundle,
    path: u64,
    noise_ids: &[u64],
    initial: Vec<DVector<f64>>,
    observe: &mut dyn FnMut(usize, f64, &[DVector<f64>], &[DVector<f64>]),
) -> Result<PathTally> {
    let n = pm.dim_state();
    let n1 = pm.dim_control();
    let n2 = pm.idio_coeff().ncols();
    let n3 = pm.common_coeff().ncols();
    let inv_others = 1.0 / (n_agents as f64 - 1.0);

    let mut states = initial;
    let mut next = vec![DVector::<f64>::zeros(n); n_agents];
    let mut controls = vec![DVector::<f64>::zeros(n1); n_agents];
    let mut costs = vec![0.0f64; n_agents];

    observe(0, 0.0, &states, &controls);

    for step in 0..steps {
        let t = step as f64 * dt;
        let sum = states
            .iter()
            .fold(DVector::<f64>::zeros(n), |acc, x| acc + x);
        let dw0 = noise.common_increment(path, step as u64, n3);
        let common_kick = pm.common_coeff() * dw0;

        for i in 0..n_agents {
            let mean_others = (&sum - &states[i]) * inv_others;
            let u = if i == 0 {
                match dev {
                    Deviation::None => pm.control(step, &states[i], &mean_others),
                    Deviation::ZeroControl => DVector::zeros(n1),
                    Deviation::Scaled(k) => pm.control(step, &states[i], &mean_others) * *k,
                    Deviation::Constant(u0) => u0.clone(),
                    Deviation::Feedback(f) => f.apply(t, &states),
                }
            } else {
                pm.control(step, &states[i], &mean_others)
            };
            costs[i] += pm.running_cost(&states[i], &u, &mean_others) * dt;
            let dwi = noise.idiosyncratic_increment(path, step as u64, noise_ids[i], n2);
            next[i] = &states[i]
                + pm.drift(&states[i], &u, &mean_others) * dt
                + pm.idio_coeff() * dwi
                + &common_kick;
            controls[i] = u;
        }
        std::mem::swap(&mut states, &mut next);

        for (i, x) in states.iter().enumerate() {
            let norm = x.norm();
            if !norm.is_finite() || norm > STATE_GUARD {
                return Err(Error::BlowUp {
                    t: (step + 1) as f64 * dt,
                    context: format!("agent {} exceeded the state guard on path {path}, step {step}", i + 1),
                });
            }
        }
        observe(step + 1, (step + 1) as f64 * dt, &states, &controls);
    }

    let sum = states
        .iter()
        .fold(DVector::<f64>::zeros(n), |acc, x| acc + x);
    for i in 0..n_agents {
        let mean_others = (&sum - &states[i]) * inv_others;
        costs[i] += pm.terminal_cost(&states[i], &mean_others);
    }

    Ok(PathTally {
        j_soc: costs.iter().sum(),
        agent_costs: costs,
    })
}

struct ChunkOut {
    j_soc: Vec<f64>,
    agent_cost_sum: Vec<f64>,
    /// Sums of |X|^2 indexed `step * n_agents + agent`.
    moment_sum: Vec<f64>,
}

fn run_chunk<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
    noise: &NoiseBundle,
    steps: usize,
    range: std::ops::Range<usize>,
) -> Result<ChunkOut> {
    let n_agents = cfg.n_agents;
    let mut out = ChunkOut {
        j_soc: Vec::with_capacity(range.len()),
        agent_cost_sum: vec![0.0; n_agents],
        moment_sum: vec![0.0; (steps + 1) * n_agents],
    };
    let noise_ids: Vec<u64> = (1..=n_agents as u64).collect();
    for path in range {
        let initial = sample_initial_states(&cfg.initial, n_agents, cfg.seed, path as u64);
        let moment = &mut out.moment_sum;
        let tally = rollout(
            pm,
            n_agents,
            steps,
            cfg.dt,
            dev,
            noise,
            path as u64,
            &noise_ids,
            initial,
            &mut |step, _t, states, _controls| {
                for (i, x) in states.iter().enumerate() {
                    moment[step * n_agents + i] += x.norm_squared();
                }
            },
        )?;
        out.j_soc.push(tally.j_soc);
        for i in 0..n_agents {
            out.agent_cost_sum[i] += tally.agent_costs[i];
        }
    }
    Ok(out)
}

fn chunk_ranges(paths: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = paths.min(256);
    (0..chunks)
        .map(|c| (c * paths / chunks)..((c + 1) * paths / chunks))
        .collect()
}

#[cfg(feature = "parallel")]
fn collect_chunks<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
    noise: &NoiseBundle,
    steps: usize,
    threads: Option<usize>,
) -> Vec<Result<ChunkOut>> {
    use rayon::prelude::*;
    let ranges = chunk_ranges(cfg.paths);
    let work = || {
        ranges
            .par_iter()
            .map(|r| run_chunk(pm, cfg, dev, noise, steps, r.clone()))
            .collect()
    };
    match threads.or_else(thread_cap) {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map(|pool| pool.install(work))
            .unwrap_or_else(|_| work()),
        None => work(),
    }
}

#[cfg(not(feature = "parallel"))]
fn collect_chunks<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
    noise: &NoiseBundle,
    steps: usize,
    _threads: Option<usize>,
) -> Vec<Result<ChunkOut>> {
    chunk_ranges(cfg.paths)
        .into_iter()
        .map(|r| run_chunk(pm, cfg, dev, noise, steps, r))
        .collect()
}

fn validate_run<M: PopulationModel + ?Sized>(pm: &M, cfg: &SimConfig) -> Result<usize> {
    let steps = cfg.steps(pm.horizon())?;
    if steps != pm.control_steps() {
        return Err(Error::Config(format!(
            "control table built for {} steps, simulation wants {steps}",
            pm.control_steps()
        )));
    }
    if cfg.initial.dim() != pm.dim_state() {
        return Err(Error::Config(format!(
            "initial distribution dimension {} != state dimension {}",
            cfg.initial.dim(),
            pm.dim_state()
        )));
    }
    if let Some(expected) = pm.expected_agents() {
        if expected != cfg.n_agents {
            return Err(Error::Config(format!(
                "model is pinned to N = {expected}, configuration has N = {}",
                cfg.n_agents
            )));
        }
    }
    Ok(steps)
}

/// Simulate the closed-loop population, agent 1 playing `dev`, and
/// accumulate the social cost.
pub fn simulate<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
) -> Result<CostReport> {
    simulate_with_threads(pm, cfg, dev, None)
}

/// As [`simulate`], with an explicit worker cap (otherwise
/// `MEANFIELD_THREADS` applies). The cap affects speed only.
pub fn simulate_with_threads<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
    threads: Option<usize>,
) -> Result<CostReport> {
    let steps = validate_run(pm, cfg)?;
    let noise = NoiseBundle::new(cfg.seed, cfg.dt);
    let chunk_results = collect_chunks(pm, cfg, dev, &noise, steps, threads);

    let n_agents = cfg.n_agents;
    let mut j_soc = Vec::with_capacity(cfg.paths);
    let mut agent_cost_sum = vec![0.0f64; n_agents];
    let mut moment_sum = vec![0.0f64; (steps + 1) * n_agents];
    for chunk in chunk_results {
        let chunk = chunk?;
        j_soc.extend_from_slice(&chunk.j_soc);
        for (acc, v) in agent_cost_sum.iter_mut().zip(&chunk.agent_cost_sum) {
            *acc += v;
        }
        for (acc, v) in moment_sum.iter_mut().zip(&chunk.moment_sum) {
            *acc += v;
        }
    }

    let (mean, stderr) = mean_stderr(&j_soc);
    let paths_f = cfg.paths as f64;
    Ok(CostReport {
        mean,
        stderr,
        per_agent_mean: agent_cost_sum.iter().map(|c| c / paths_f).collect(),
        max_second_moment: moment_sum.iter().cloned().fold(0.0, f64::max) / paths_f,
        j_soc,
    })
}

/// Baseline and deviated simulations on the identical noise bundle and
/// initial draws; the per-path differences estimate the deviation gap with
/// far lower variance than either cost alone.
pub fn paired_simulate<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
) -> Result<PairedReport> {
    let baseline = simulate(pm, cfg, &Deviation::None)?;
    let deviated = simulate(pm, cfg, dev)?;
    let diffs: Vec<f64> = deviated
        .j_soc
        .iter()
        .zip(&baseline.j_soc)
        .map(|(d, b)| d - b)
        .collect();
    let (diff_mean, diff_stderr) = mean_stderr(&diffs);
    Ok(PairedReport {
        baseline,
        deviated,
        diffs,
        diff_mean,
        diff_stderr,
    })
}

/// Two closed-loop populations on the identical noise bundle and initial
/// draws: `diffs[p] = J_soc^alt(p) - J_soc^base(p)`. Used to measure the
/// total optimality gap between two feedback laws with common random
/// numbers.
pub fn paired_population_diff<A, B>(base: &A, alt: &B, cfg: &SimConfig) -> Result<PairedReport>
where
    A: PopulationModel + ?Sized,
    B: PopulationModel + ?Sized,
{
    if base.dim_state() != alt.dim_state()
        || (base.horizon() - alt.horizon()).abs() > 1e-12
    {
        return Err(Error::Config(
            "paired populations must share state dimension and horizon".into(),
        ));
    }
    let baseline = simulate(base, cfg, &Deviation::None)?;
    let deviated = simulate(alt, cfg, &Deviation::None)?;
    let diffs: Vec<f64> = deviated
        .j_soc
        .iter()
        .zip(&baseline.j_soc)
        .map(|(d, b)| d - b)
        .collect();
    let (diff_mean, diff_stderr) = mean_stderr(&diffs);
    Ok(PairedReport {
        baseline,
        deviated,
        diffs,
        diff_mean,
        diff_stderr,
    })
}

/// One recorded state/control sample of a traced run.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub path: usize,
    pub t: f64,
    /// 1-based agent index.
    pub agent: usize,
    pub state: Vec<f64>,
    /// Control applied over the step ending at `t`; zeros in the row at
    /// t = 0 (no step has completed yet).
    pub control: Vec<f64>,
}

/// Serial simulation that also records every state, for the path-dump
/// export. Guarded to small runs: N * steps * paths <= 10^7 rows.
pub fn simulate_traced<M: PopulationModel + ?Sized>(
    pm: &M,
    cfg: &SimConfig,
    dev: &Deviation,
) -> Result<(CostReport, Vec<TraceRow>)> {
    let steps = validate_run(pm, cfg)?;
    let rows = cfg.n_agents * (steps + 1) * cfg.paths;
    if rows > 10_000_000 {
        return Err(Error::Config(format!(
            "trace would emit {rows} rows; the guard is 10^7"
        )));
    }
    let noise = NoiseBundle::new(cfg.seed, cfg.dt);
    let noise_ids: Vec<u64> = (1..=cfg.n_agents as u64).collect();
    let mut trace = Vec::with_capacity(rows);
    let mut j_soc = Vec::with_capacity(cfg.paths);
    let mut agent_cost_sum = vec![0.0f64; cfg.n_agents];
    let mut moment_sum = vec![0.0f64; (steps + 1) * cfg.n_agents];
    for path in 0..cfg.paths {
        let initial = sample_initial_states(&cfg.initial, cfg.n_agents, cfg.seed, path as u64);
        let trace_ref = &mut trace;
        let moment = &mut moment_sum;
        let tally = rollout(
            pm,
            cfg.n_agents,
            steps,
            cfg.dt,
            dev,
            &noise,
            path as u64,
            &noise_ids,
            initial,
            &mut |step, t, states, controls| {
                for (i, x) in states.iter().enumerate() {
                    moment[step * cfg.n_agents + i] += x.norm_squared();
                    trace_ref.push(TraceRow {
                        path,
                        t,
                        agent: i + 1,
                        state: x.iter().cloned().collect(),
                        control: if step == 0 {
                            vec![0.0; pm.dim_control()]
                        } else {
                            controls[i].iter().cloned().collect()
                        },
                    });
                }
            },
        )?;
        j_soc.push(tally.j_soc);
        for i in 0..cfg.n_agents {
            agent_cost_sum[i] += tally.agent_costs[i];
        }
    }
    let (mean, stderr) = mean_stderr(&j_soc);
    let paths_f = cfg.paths as f64;
    Ok((
        CostReport {
            mean,
            stderr,
            per_agent_mean: agent_cost_sum.iter().map(|c| c / paths_f).collect(),
            max_second_moment: moment_sum.iter().cloned().fold(0.0, f64::max) / paths_f,
            j_soc,
        },
        trace,
    ))
}

// ---------------------------------------------------------------------------
// LQ closed loop
// ---------------------------------------------------------------------------

/// The LQ model under its cooperative law, with the feedback gains
/// tabulated at the simulation steps.
pub struct LqClosedLoop {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    g: DMatrix<f64>,
    d: DMatrix<f64>,
    d0: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    gamma: DMatrix<f64>,
    eta: DVector<f64>,
    qf: DMatrix<f64>,
    gamma_f: DMatrix<f64>,
    eta_f: DVector<f64>,
    horizon: f64,
    gain_x: Vec<DMatrix<f64>>,
    gain_mean: Vec<DMatrix<f64>>,
    gain_const: Vec<DVector<f64>>,
}

impl LqClosedLoop {
    pub fn new(model: &LqModel, v: &ValueCoefficients, steps: usize) -> Result<Self> {
        if (v.horizon() - model.horizon).abs() > 1e-12 {
            return Err(Error::Config(
                "value coefficients solved for a different horizon".into(),
            ));
        }
        let prefix = model.gain_prefix();
        let dt = model.horizon / steps as f64;
        let mut gain_x = Vec::with_capacity(steps + 1);
        let mut gain_mean = Vec::with_capacity(steps + 1);
        let mut gain_const = Vec::with_capacity(steps + 1);
        for j in 0..=steps {
            let t = (j as f64 * dt).min(model.horizon);
            gain_x.push(&prefix * v.p_at(t)?);
            gain_mean.push(&prefix * v.coupling_at(t)?);
            gain_const.push(&prefix * (v.s_at(t)? + v.theta_at(t)?));
        }
        Ok(Self {
            a: model.a.clone(),
            b: model.b.clone(),
            g: model.g.clone(),
            d: model.d.clone(),
            d0: model.d0.clone(),
            q: model.q.clone(),
            r: model.r.clone(),
            gamma: model.gamma.clone(),
            eta: model.eta.clone(),
            qf: model.qf.clone(),
            gamma_f: model.gamma_f.clone(),
            eta_f: model.eta_f.clone(),
            horizon: model.horizon,
            gain_x,
            gain_mean,
            gain_const,
        })
    }
}

impl PopulationModel for LqClosedLoop {
    fn dim_state(&self) -> usize {
        self.a.nrows()
    }

    fn dim_control(&self) -> usize {
        self.b.ncols()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn control_steps(&self) -> usize {
        self.gain_x.len() - 1
    }

    fn control(&self, step: usize, x: &DVector<f64>, mean_others: &DVector<f64>) -> DVector<f64> {
        -(&self.gain_x[step] * x + &self.gain_mean[step] * mean_others + &self.gain_const[step])
    }

    fn drift(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        mean_others: &DVector<f64>,
    ) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.g * mean_others
    }

    fn idio_coeff(&self) -> &DMatrix<f64> {
        &self.d
    }

    fn common_coeff(&self) -> &DMatrix<f64> {
        &self.d0
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, mean_others: &DVector<f64>) -> f64 {
        let track = x - &self.gamma * mean_others - &self.eta;
        track.dot(&(&self.q * &track)) + u.dot(&(&self.r * u))
    }

    fn terminal_cost(&self, x: &DVector<f64>, mean_others: &DVector<f64>) -> f64 {
        let track = x - &self.gamma_f * mean_others - &self.eta_f;
        track.dot(&(&self.qf * &track))
    }
}

/// Simulate the LQ model under its cooperative law.
pub fn simulate_lq(
    model: &LqModel,
    v: &ValueCoefficients,
    cfg: &SimConfig,
    dev: &Deviation,
) -> Result<CostReport> {
    let steps = cfg.steps(model.horizon)?;
    let pm = LqClosedLoop::new(model, v, steps)?;
    simulate(&pm, cfg, dev)
}

/// Paired baseline/deviation runs of the LQ model on common random numbers.
pub fn paired_simulate_lq(
    model: &LqModel,
    v: &ValueCoefficients,
    cfg: &SimConfig,
    dev: &Deviation,
) -> Result<PairedReport> {
    let steps = cfg.steps(model.horizon)?;
    let pm = LqClosedLoop::new(model, v, steps)?;
    paired_simulate(&pm, cfg, dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::ode::TimeGrid;
    use crate::value::solve_value;

    fn lq_loop(model: &LqModel, dt: f64) -> LqClosedLoop {
        let grid = TimeGrid::new(model.horizon, 2000).unwrap();
        let v = solve_value(model, grid).unwrap();
        let steps = (model.horizon / dt).round() as usize;
        LqClosedLoop::new(model, &v, steps).unwrap()
    }

    fn base_cfg(n_agents: usize, paths: usize, dt: f64) -> SimConfig {
        SimConfig {
            n_agents,
            paths,
            dt,
            seed: 17,
            initial: InitialDistribution::Gaussian {
                mean: DVector::from_vec(vec![0.4, -0.2]),
                covariance: DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.2]),
            },
        }
    }

    #[test]
    fn zero_cost_model_has_zero_social_cost() {
        let model = fixtures::lq2d_costless();
        let pm = lq_loop(&model, 0.05);
        let report = simulate(&pm, &base_cfg(4, 8, 0.05), &Deviation::ZeroControl).unwrap();
        assert!(report.j_soc.iter().all(|&j| j == 0.0));
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn paired_identity_deviations_give_exactly_zero_diffs() {
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.05);
        let cfg = base_cfg(4, 16, 0.05);
        let paired = paired_simulate(&pm, &cfg, &Deviation::None).unwrap();
        assert!(paired.diffs.iter().all(|&d| d == 0.0));
        let paired = paired_simulate(&pm, &cfg, &Deviation::Scaled(1.0)).unwrap();
        assert!(paired.diffs.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn reports_are_bit_identical_across_thread_counts() {
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.05);
        let cfg = base_cfg(6, 40, 0.05);
        let one = simulate_with_threads(&pm, &cfg, &Deviation::ZeroControl, Some(1)).unwrap();
        let four = simulate_with_threads(&pm, &cfg, &Deviation::ZeroControl, Some(4)).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn permuting_agents_leaves_social_cost_unchanged() {
        // Permuting agents 2..N together with their noise streams and
        // initial states relabels trajectories without changing the mean
        // field; J_soc per path may move only by summation round-off.
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.1);
        let cfg = base_cfg(5, 1, 0.1);
        let steps = cfg.steps(model.horizon).unwrap();
        let noise = NoiseBundle::new(cfg.seed, cfg.dt);

        let identity_ids: Vec<u64> = vec![1, 2, 3, 4, 5];
        let permuted_ids: Vec<u64> = vec![1, 4, 5, 2, 3];
        let initial = sample_initial_states(&cfg.initial, cfg.n_agents, cfg.seed, 0);
        let permuted_initial: Vec<_> = permuted_ids
            .iter()
            .map(|&id| initial[(id - 1) as usize].clone())
            .collect();

        let mut sink = |_: usize, _: f64, _: &[DVector<f64>], _: &[DVector<f64>]| {};
        let a = rollout(
            &pm, 5, steps, cfg.dt, &Deviation::None, &noise, 0, &identity_ids, initial,
            &mut sink,
        )
        .unwrap();
        let b = rollout(
            &pm, 5, steps, cfg.dt, &Deviation::None, &noise, 0, &permuted_ids,
            permuted_initial, &mut sink,
        )
        .unwrap();
        assert!((a.j_soc - b.j_soc).abs() <= 1e-10);

        let mut costs_a = a.agent_costs.clone();
        let mut costs_b = b.agent_costs.clone();
        costs_a.sort_by(f64::total_cmp);
        costs_b.sort_by(f64::total_cmp);
        for (x, y) in costs_a.iter().zip(&costs_b) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn noiseless_runs_have_first_order_dt_error() {
        let mut model = fixtures::lq2d();
        model.d = DMatrix::zeros(2, 2);
        model.d0 = DMatrix::zeros(2, 1);
        let cfg_for = |dt: f64| SimConfig {
            n_agents: 4,
            paths: 1,
            dt,
            seed: 1,
            initial: InitialDistribution::PointMass {
                mean: DVector::from_vec(vec![0.5, -0.3]),
            },
        };
        let j_at = |dt: f64| {
            let pm = lq_loop(&model, dt);
            simulate(&pm, &cfg_for(dt), &Deviation::None).unwrap().mean
        };
        let reference = j_at(0.003125);
        let e1 = (j_at(0.1) - reference).abs();
        let e2 = (j_at(0.05) - reference).abs();
        let ratio = e1 / e2;
        assert!(
            (1.6..=2.6).contains(&ratio),
            "weak order 1 violated: e(0.1)={e1:.3e}, e(0.05)={e2:.3e}, ratio={ratio:.2}"
        );
    }

    #[test]
    fn bad_dt_is_rejected() {
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.05);
        let mut cfg = base_cfg(4, 2, 0.05);
        cfg.dt = 0.3; // does not divide 1.0
        assert!(matches!(
            simulate(&pm, &cfg, &Deviation::None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mismatched_control_table_is_rejected() {
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.05); // 20 steps
        let cfg = base_cfg(4, 2, 0.1); // 10 steps
        assert!(matches!(
            simulate(&pm, &cfg, &Deviation::None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unstable_drift_stays_under_gronwall_envelope() {
        // Costless model with expanding drift: u = 0, no mean coupling. The
        // moment audit must stay below the crude envelope
        // (|x0|^2 + T tr(Sigma + Sigma0)) * exp((2||A|| + 1) T).
        let mut model = fixtures::lq2d_costless();
        model.a = DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.0, 0.8]);
        model.g = DMatrix::zeros(2, 2);
        let pm = lq_loop(&model, 0.01);
        let x0 = DVector::from_vec(vec![1.0, -1.0]);
        let cfg = SimConfig {
            n_agents: 4,
            paths: 64,
            dt: 0.01,
            seed: 3,
            initial: InitialDistribution::PointMass { mean: x0.clone() },
        };
        let report = simulate(&pm, &cfg, &Deviation::None).unwrap();
        let sigma_tr = (&model.d * model.d.transpose()).trace()
            + (&model.d0 * model.d0.transpose()).trace();
        let envelope =
            (x0.norm_squared() + model.horizon * sigma_tr) * ((2.0 * 0.8 + 1.0) * 1.0f64).exp();
        assert!(report.max_second_moment.is_finite());
        assert!(
            report.max_second_moment < envelope,
            "{} >= {envelope}",
            report.max_second_moment
        );
    }

    #[test]
    fn trace_guard_rejects_large_dumps() {
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.001);
        let cfg = base_cfg(256, 100, 0.001);
        assert!(matches!(
            simulate_traced(&pm, &cfg, &Deviation::None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trace_rows_cover_every_step_and_agent() {
        let model = fixtures::lq2d();
        let pm = lq_loop(&model, 0.25);
        let cfg = base_cfg(3, 2, 0.25);
        let (_, trace) = simulate_traced(&pm, &cfg, &Deviation::None).unwrap();
        assert_eq!(trace.len(), 3 * 5 * 2);
        assert_eq!(trace[0].t, 0.0);
        assert_eq!(trace.last().unwrap().agent, 3);
    }
}
