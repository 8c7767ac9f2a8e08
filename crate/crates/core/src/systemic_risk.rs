//! The inter-bank lending/borrowing example: N banks with scalar
//! log-capitalization `dX^i = u^i dt + sigma(sqrt(1-rho^2) dW^i + rho dW^0)`,
//! running cost `(u^i)^2 + 2 q u^i (x^i - xbar^{-i}) + eps0 (x^i - xbar^{-i})^2`
//! and terminal cost `c (x^i - xbar^{-i})^2`, minimizing the summed cost
//! cooperatively.
//!
//! The module carries both routes:
//!
//! - the exact finite-N solution — social value `x' P(t) x + r(t)` with
//!   `P(t)` built from the diagonal/off-diagonal pair `(pi1, pi2)` — and its
//!   optimal bank-level law;
//! - the population-limit solution from the quadratic ansatz
//!   `P x^2 + Lambda xbar^2 + 2 H x xbar + r`, whose control law takes the
//!   relaxation form `(P_d(t) + q)(xbar - x)`.
//!
//! Their gap is O(1/N), which the convergence report measures, and the
//! identity `Lambda + 2H = -P` ties the two ansatz blocks together.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ode::{integrate_terminal, lerp_scalar, TimeGrid, Trajectory};
use crate::sim::{Deviation, FeedbackLaw, PopulationModel};
use crate::stats::{linear_fit, LinearFit};

/// Model scalars. Convexity of the running cost requires `q^2 <= eps0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrParams {
    /// Volatility, >= 0.
    pub sigma: f64,
    /// Common-noise correlation in [0, 1].
    pub rho: f64,
    /// Lending incentive, >= 0.
    pub q: f64,
    /// Deviation penalty weight, >= q^2.
    pub eps0: f64,
    /// Terminal weight, > 0 (0 allowed only in degenerate test setups).
    pub c: f64,
    pub horizon: f64,
}

impl SrParams {
    pub fn validate(&self) -> Result<()> {
        // NaN fails every comparison below, so it is rejected everywhere.
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(Error::Validation(format!("sigma = {} < 0", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Validation(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if self.q.is_nan() || self.q < 0.0 {
            return Err(Error::Validation(format!("q = {} < 0", self.q)));
        }
        if self.eps0.is_nan() || self.q * self.q > self.eps0 {
            return Err(Error::Validation(format!(
                "convexity violated: q^2 = {} > eps0 = {}",
                self.q * self.q,
                self.eps0
            )));
        }
        if self.c.is_nan() || self.c < 0.0 {
            return Err(Error::Validation(format!("c = {} < 0", self.c)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Validation(format!("horizon = {} <= 0", self.horizon)));
        }
        Ok(())
    }
}

/// Exact finite-N solution: `U_soc(t, x) = x' P(t) x + r(t)` with P(t)
/// having `pi1` on the diagonal and `pi2` off it.
#[derive(Debug, Clone)]
pub struct DirectSolution {
    grid: TimeGrid,
    pub n_agents: usize,
    pub q: f64,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    pub r: Vec<f64>,
}

impl DirectSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn pi1_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.pi1, &self.grid, t)
    }

    pub fn pi2_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.pi2, &self.grid, t)
    }

    pub fn r_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.r, &self.grid, t)
    }
}

/// Limit (master-equation) solution of the quadratic ansatz, plus the
/// standalone relaxation-rate solution `P_d`.
#[derive(Debug, Clone)]
pub struct MasterSolution {
    grid: TimeGrid,
    pub params: SrParams,
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub h: Vec<f64>,
    pub r: Vec<f64>,
    pub pd: Vec<f64>,
}

impl MasterSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn p_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.p, &self.grid, t)
    }

    pub fn lambda_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.lambda, &self.grid, t)
    }

    pub fn h_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.h, &self.grid, t)
    }

    pub fn r_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.r, &self.grid, t)
    }

    pub fn pd_at(&self, t: f64) -> Result<f64> {
        lerp_scalar(&self.pd, &self.grid, t)
    }
}

fn scalar_track(traj: &Trajectory, idx: usize) -> Vec<f64> {
    (0..traj.grid().len()).map(|k| traj.at(k)[idx]).collect()
}

/// Solve the coupled (pi1, pi2) Riccati pair of the N-bank problem plus the
/// trace quadrature for r (noise covariance
/// `Cov(dX^i, dX^j) = sigma^2 [rho^2 + (1-rho^2) 1{i=j}] dt`).
pub fn solve_direct(params: &SrParams, n_agents: usize, grid: TimeGrid) -> Result<DirectSolution> {
    params.validate()?;
    if n_agents < 2 {
        return Err(Error::Config("direct solve needs N >= 2".into()));
    }
    let nf = n_agents as f64;
    let q = params.q;
    let eps0 = params.eps0;
    let sig2 = params.sigma * params.sigma;
    let rho2 = params.rho * params.rho;

    let terminal = DVector::from_vec(vec![
        params.c * nf / (nf - 1.0),
        -params.c * nf / ((nf - 1.0) * (nf - 1.0)),
        0.0,
    ]);
    let traj = integrate_terminal(
        |_, y| {
            let pi1 = y[0];
            let pi2 = y[1];
            let w = pi2 - q / (nf - 1.0);
            let dpi1 = (pi1 + q) * (pi1 + q) + (nf - 1.0) * w * w - eps0 * nf / (nf - 1.0);
            let dpi2 = 2.0 * (pi1 + q) * w + (nf - 2.0) * w * w + eps0 * nf / ((nf - 1.0) * (nf - 1.0));
            let dr = -sig2 * ((1.0 - rho2) * nf * pi1 + rho2 * (nf * pi1 + nf * (nf - 1.0) * pi2));
            DVector::from_vec(vec![dpi1, dpi2, dr])
        },
        &terminal,
        grid,
    )?;
    Ok(DirectSolution {
        grid,
        n_agents,
        q,
        pi1: scalar_track(&traj, 0),
        pi2: scalar_track(&traj, 1),
        r: scalar_track(&traj, 2),
    })
}

/// Solve `P_d' = (P_d + q)^2 - eps0`, `P_d(T) = c` (unique on [0, T]).
pub fn solve_pd(params: &SrParams, grid: TimeGrid) -> Result<Trajectory> {
    params.validate()?;
    let q = params.q;
    let eps0 = params.eps0;
    integrate_terminal(
        |_, y| DVector::from_element(1, (y[0] + q) * (y[0] + q) - eps0),
        &DVector::from_element(1, params.c),
        grid,
    )
}

/// Solve the limit ansatz by the decoupling route: P from its own Riccati
/// flow (identical to P_d), H from the linear equation with
/// `Lambda + 2H` replaced by `-P`, `Lambda = -P - 2H`, r by quadrature.
pub fn solve_master(params: &SrParams, grid: TimeGrid) -> Result<MasterSolution> {
    params.validate()?;
    let q = params.q;
    let eps0 = params.eps0;
    let sig2 = params.sigma * params.sigma;
    let rho2 = params.rho * params.rho;

    let terminal = DVector::from_vec(vec![params.c, -params.c, 0.0]);
    let traj = integrate_terminal(
        |_, y| {
            let p = y[0];
            let h = y[1];
            let dp = (p + q) * (p + q) - eps0;
            let dh = (p + q) * (h - q) + eps0;
            let dr = -sig2 * (1.0 - rho2) * p;
            DVector::from_vec(vec![dp, dh, dr])
        },
        &terminal,
        grid,
    )?;
    let p = scalar_track(&traj, 0);
    let h = scalar_track(&traj, 1);
    let lambda: Vec<f64> = p.iter().zip(&h).map(|(p, h)| -p - 2.0 * h).collect();
    let pd = scalar_track(&solve_pd(params, grid)?, 0);
    Ok(MasterSolution {
        grid,
        params: *params,
        p,
        lambda,
        h,
        r: scalar_track(&traj, 2),
        pd,
    })
}

/// Solve the limit ansatz with (Lambda, H) integrated as the displayed
/// coupled nonlinear system. Cross-check path for the identity
/// `Lambda + 2H = -P`.
pub fn solve_master_coupled(params: &SrParams, grid: TimeGrid) -> Result<MasterSolution> {
    params.validate()?;
    let q = params.q;
    let eps0 = params.eps0;
    let sig2 = params.sigma * params.sigma;
    let rho2 = params.rho * params.rho;

    let terminal = DVector::from_vec(vec![params.c, params.c, -params.c, 0.0]);
    let traj = integrate_terminal(
        |_, y| {
            let p = y[0];
            let lambda = y[1];
            let h = y[2];
            let agg = p + lambda + 2.0 * h;
            let dp = (p + q) * (p + q) - eps0;
            let dlambda = -(lambda + h) * (lambda + h) + (h - q) * (h - q) + 2.0 * lambda * agg - eps0;
            let dh = (p + q) * (h - q) + h * agg + eps0;
            let dr = -sig2 * p - sig2 * rho2 * (lambda + 2.0 * h);
            DVector::from_vec(vec![dp, dlambda, dh, dr])
        },
        &terminal,
        grid,
    )?;
    let pd = scalar_track(&solve_pd(params, grid)?, 0);
    Ok(MasterSolution {
        grid,
        params: *params,
        p: scalar_track(&traj, 0),
        lambda: scalar_track(&traj, 1),
        h: scalar_track(&traj, 2),
        r: scalar_track(&traj, 3),
        pd,
    })
}

/// The exact N-bank optimal law for bank `agent` (0-based):
/// `-(pi1 + q) x^i - (pi2 - q/(N-1)) sum_{k != i} x^k`.
pub fn control_direct(sol: &DirectSolution, t: f64, states: &[f64], agent: usize) -> Result<f64> {
    let sum_others: f64 = states
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != agent)
        .map(|(_, x)| x)
        .sum();
    let pi1 = sol.pi1_at(t)?;
    let pi2 = sol.pi2_at(t)?;
    let q_over = sol.q / (sol.n_agents as f64 - 1.0);
    Ok(-(pi1 + sol.q) * states[agent] - (pi2 - q_over) * sum_others)
}

/// The population-limit law `(P_d(t) + q)(xbar - x)`.
pub fn control_limit(ms: &MasterSolution, t: f64, x: f64, xbar: f64) -> Result<f64> {
    Ok((ms.pd_at(t)? + ms.params.q) * (xbar - x))
}

/// The same law written through the master-equation blocks,
/// `-[(P + q) x + (Lambda + 2H - q) xbar]`; agrees with [`control_limit`].
pub fn control_limit_master_form(ms: &MasterSolution, t: f64, x: f64, xbar: f64) -> Result<f64> {
    let p = ms.p_at(t)?;
    let agg = ms.lambda_at(t)? + 2.0 * ms.h_at(t)?;
    Ok(-((p + ms.params.q) * x + (agg - ms.params.q) * xbar))
}

/// Exact social value at t = 0: `x' P(0) x + r(0)` with P(0) assembled from
/// `(pi1, pi2)`.
pub fn exact_social_value(sol: &DirectSolution, states: &[f64]) -> f64 {
    let sum: f64 = states.iter().sum();
    let sumsq: f64 = states.iter().map(|x| x * x).sum();
    sol.pi1[0] * sumsq + sol.pi2[0] * (sum * sum - sumsq) + sol.r[0]
}

/// Finite-N vs limit convergence: `e1(N) = sup_t |pi1 - P_d|` and
/// `e2(N) = sup_t |(N-1) pi2 + P_d|`, with log-log slopes over the sweep.
#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub entries: Vec<ConvergenceEntry>,
    /// Fit of ln e1 against ln N; `None` when some e1 vanishes.
    pub slope1: Option<LinearFit>,
    pub slope2: Option<LinearFit>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvergenceEntry {
    pub n_agents: usize,
    pub e1: f64,
    pub e2: f64,
}

pub fn convergence_report(
    params: &SrParams,
    n_list: &[usize],
    grid: TimeGrid,
) -> Result<ConvergenceReport> {
    if n_list.len() < 4 {
        return Err(Error::Config("convergence sweep needs at least 4 population sizes".into()));
    }
    let pd = scalar_track(&solve_pd(params, grid)?, 0);
    let mut entries = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let sol = solve_direct(params, n, grid)?;
        let mut e1: f64 = 0.0;
        let mut e2: f64 = 0.0;
        for ((pi1, pi2), pd) in sol.pi1.iter().zip(&sol.pi2).zip(&pd) {
            e1 = e1.max((pi1 - pd).abs());
            e2 = e2.max(((n as f64 - 1.0) * pi2 + pd).abs());
        }
        entries.push(ConvergenceEntry { n_agents: n, e1, e2 });
    }
    let fit = |pick: &dyn Fn(&ConvergenceEntry) -> f64| {
        if entries.iter().any(|e| pick(e) <= 0.0) {
            None
        } else {
            let x: Vec<f64> = entries.iter().map(|e| (e.n_agents as f64).ln()).collect();
            let y: Vec<f64> = entries.iter().map(|e| pick(e).ln()).collect();
            Some(linear_fit(&x, &y))
        }
    };
    let slope1 = fit(&|e: &ConvergenceEntry| e.e1);
    let slope2 = fit(&|e: &ConvergenceEntry| e.e2);
    Ok(ConvergenceReport {
        entries,
        slope1,
        slope2,
    })
}

// ---------------------------------------------------------------------------
// Simulation adapters
// ---------------------------------------------------------------------------

fn noise_mats(params: &SrParams) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        DMatrix::from_element(1, 1, params.sigma * (1.0 - params.rho * params.rho).sqrt()),
        DMatrix::from_element(1, 1, params.sigma * params.rho),
    )
}

fn sr_running_cost(params: &SrParams, x: f64, u: f64, mean_others: f64) -> f64 {
    let dev = x - mean_others;
    u * u + 2.0 * params.q * u * dev + params.eps0 * dev * dev
}

/// The N-bank system under the population-limit law
/// `(P_d(t) + q)(xbar^{-i} - x^i)` for every bank.
pub struct SrClosedLoop {
    params: SrParams,
    d: DMatrix<f64>,
    d0: DMatrix<f64>,
    /// `P_d(t_j) + q` per simulation step.
    gain: Vec<f64>,
}

impl SrClosedLoop {
    pub fn new(params: &SrParams, master: &MasterSolution, steps: usize) -> Result<Self> {
        if (master.grid().horizon() - params.horizon).abs() > 1e-12 {
            return Err(Error::Config("master solution horizon mismatch".into()));
        }
        let dt = params.horizon / steps as f64;
        let gain = (0..=steps)
            .map(|j| Ok(master.pd_at((j as f64 * dt).min(params.horizon))? + params.q))
            .collect::<Result<Vec<_>>>()?;
        let (d, d0) = noise_mats(params);
        Ok(Self {
            params: *params,
            d,
            d0,
            gain,
        })
    }
}

impl PopulationModel for SrClosedLoop {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_control(&self) -> usize {
        1
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn control_steps(&self) -> usize {
        self.gain.len() - 1
    }

    fn control(&self, step: usize, x: &DVector<f64>, mean_others: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.gain[step] * (mean_others[0] - x[0]))
    }

    fn drift(&self, _x: &DVector<f64>, u: &DVector<f64>, _mean_others: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }

    fn idio_coeff(&self) -> &DMatrix<f64> {
        &self.d
    }

    fn common_coeff(&self) -> &DMatrix<f64> {
        &self.d0
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, mean_others: &DVector<f64>) -> f64 {
        sr_running_cost(&self.params, x[0], u[0], mean_others[0])
    }

    fn terminal_cost(&self, x: &DVector<f64>, mean_others: &DVector<f64>) -> f64 {
        let dev = x[0] - mean_others[0];
        self.params.c * dev * dev
    }
}

/// The N-bank system with every bank playing the exact finite-N optimal
/// law. Oracle configuration: its Monte Carlo social cost must reproduce
/// [`exact_social_value`].
pub struct SrDirectLoop {
    params: SrParams,
    n_agents: usize,
    d: DMatrix<f64>,
    d0: DMatrix<f64>,
    /// `pi1(t_j) + q` per step.
    own_gain: Vec<f64>,
    /// `(pi2(t_j) - q/(N-1)) (N-1)` per step (multiplies the others-mean).
    mean_gain: Vec<f64>,
}

impl SrDirectLoop {
    pub fn new(params: &SrParams, sol: &DirectSolution, steps: usize) -> Result<Self> {
        if (sol.grid().horizon() - params.horizon).abs() > 1e-12 {
            return Err(Error::Config("direct solution horizon mismatch".into()));
        }
        let dt = params.horizon / steps as f64;
        let nf = sol.n_agents as f64;
        let mut own_gain = Vec::with_capacity(steps + 1);
        let mut mean_gain = Vec::with_capacity(steps + 1);
        for j in 0..=steps {
            let t = (j as f64 * dt).min(params.horizon);
            own_gain.push(sol.pi1_at(t)? + params.q);
            mean_gain.push((sol.pi2_at(t)? - params.q / (nf - 1.0)) * (nf - 1.0));
        }
        let (d, d0) = noise_mats(params);
        Ok(Self {
            params: *params,
            n_agents: sol.n_agents,
            d,
            d0,
            own_gain,
            mean_gain,
        })
    }
}

impl PopulationModel for SrDirectLoop {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_control(&self) -> usize {
        1
    }

    fn horizon(&self) -> f64 {
        self.params.horizon
    }

    fn control_steps(&self) -> usize {
        self.own_gain.len() - 1
    }

    fn control(&self, step: usize, x: &DVector<f64>, mean_others: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(
            1,
            -self.own_gain[step] * x[0] - self.mean_gain[step] * mean_others[0],
        )
    }

    fn drift(&self, _x: &DVector<f64>, u: &DVector<f64>, _mean_others: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }

    fn idio_coeff(&self) -> &DMatrix<f64> {
        &self.d
    }

    fn common_coeff(&self) -> &DMatrix<f64> {
        &self.d0
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>, mean_others: &DVector<f64>) -> f64 {
        sr_running_cost(&self.params, x[0], u[0], mean_others[0])
    }

    fn terminal_cost(&self, x: &DVector<f64>, mean_others: &DVector<f64>) -> f64 {
        let dev = x[0] - mean_others[0];
        self.params.c * dev * dev
    }

    fn expected_agents(&self) -> Option<usize> {
        Some(self.n_agents)
    }
}

/// Deviation in which agent 1 plays the exact finite-N optimal law while
/// everyone else keeps the cooperative limit law.
pub fn exact_oracle_deviation(sol: &DirectSolution) -> Deviation {
    let sol = Arc::new(sol.clone());
    Deviation::Feedback(FeedbackLaw::new("exact-oracle", move |t, states| {
        let flat: Vec<f64> = states.iter().map(|x| x[0]).collect();
        let u = control_direct(&sol, t, &flat, 0).expect("time inside horizon");
        DVector::from_element(1, u)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(1.0, steps).unwrap()
    }

    fn zero_params() -> SrParams {
        SrParams {
            sigma: 0.0,
            rho: 0.0,
            q: 0.0,
            eps0: 0.0,
            c: 0.0,
            horizon: 1.0,
        }
    }

    #[test]
    fn direct_terminal_values_are_exact() {
        let params = fixtures::sr_default();
        let sol = solve_direct(&params, 5, grid(100)).unwrap();
        let last = sol.grid().steps();
        assert_eq!(sol.pi1[last], params.c * 5.0 / 4.0);
        assert_eq!(sol.pi2[last], -params.c * 5.0 / 16.0);
        assert_eq!(sol.r[last], 0.0);
    }

    #[test]
    fn costless_problem_is_identically_zero() {
        let sol = solve_direct(&zero_params(), 4, grid(50)).unwrap();
        assert!(sol.pi1.iter().all(|&v| v == 0.0));
        assert!(sol.pi2.iter().all(|&v| v == 0.0));
        assert!(sol.r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pd_matches_tanh_oracle() {
        let params = SrParams {
            sigma: 0.1,
            rho: 0.3,
            q: 0.0,
            eps0: 1.0,
            c: 0.5,
            horizon: 1.0,
        };
        let g = grid(400);
        let traj = solve_pd(&params, g).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..g.len() {
            let want = ((1.0 - g.time(k)) + 0.5f64.atanh()).tanh();
            worst = worst.max((traj.at(k)[0] - want).abs());
        }
        assert!(worst <= 10.0 * g.step().powi(4), "worst = {worst:.3e}");
    }

    #[test]
    fn pd_stationary_when_terminal_balances() {
        // (c + q)^2 = eps0 makes P_d constant.
        let params = SrParams {
            sigma: 0.2,
            rho: 0.5,
            q: 0.5,
            eps0: 0.64,
            c: 0.3,
            horizon: 1.0,
        };
        let traj = solve_pd(&params, grid(200)).unwrap();
        for k in 0..traj.grid().len() {
            assert!((traj.at(k)[0] - 0.3).abs() <= 1e-12);
        }
    }

    #[test]
    fn master_identity_and_pd_agreement() {
        let params = fixtures::sr_default();
        let g = grid(2000);
        let ms = solve_master(&params, g).unwrap();
        let coupled = solve_master_coupled(&params, g).unwrap();

        let mut identity: f64 = 0.0;
        let mut p_vs_pd: f64 = 0.0;
        for k in 0..g.len() {
            identity = identity.max((coupled.lambda[k] + 2.0 * coupled.h[k] + coupled.p[k]).abs());
            p_vs_pd = p_vs_pd.max((ms.p[k] - ms.pd[k]).abs());
        }
        assert!(identity <= 1e-8, "identity defect {identity:.3e}");
        assert!(p_vs_pd <= 1e-10, "P vs P_d defect {p_vs_pd:.3e}");

        // Production route carries the identity by construction, and the two
        // routes agree to integration accuracy.
        let mut route: f64 = 0.0;
        for k in 0..g.len() {
            route = route.max((ms.lambda[k] - coupled.lambda[k]).abs());
            route = route.max((ms.h[k] - coupled.h[k]).abs());
        }
        assert!(route <= 1e-8, "route disagreement {route:.3e}");
    }

    #[test]
    fn terminal_block_of_master_solution() {
        let params = fixtures::sr_default();
        let ms = solve_master(&params, grid(100)).unwrap();
        let last = ms.grid().steps();
        assert_eq!(ms.p[last], params.c);
        assert_eq!(ms.h[last], -params.c);
        assert!((ms.lambda[last] - params.c).abs() <= 1e-15);
        assert_eq!(ms.r[last], 0.0);
    }

    #[test]
    fn no_noise_means_zero_r() {
        let mut params = fixtures::sr_default();
        params.sigma = 0.0;
        let ms = solve_master(&params, grid(200)).unwrap();
        assert!(ms.r.iter().all(|&v| v == 0.0));
        let sol = solve_direct(&params, 8, grid(200)).unwrap();
        assert!(sol.r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn limit_control_forms_agree() {
        let params = fixtures::sr_default();
        let ms = solve_master(&params, grid(2000)).unwrap();
        for trial in 0..50 {
            let t = 0.99 * (trial as f64 / 49.0);
            let x = -1.0 + 0.07 * trial as f64;
            let xbar = 0.5 - 0.03 * trial as f64;
            let a = control_limit(&ms, t, x, xbar).unwrap();
            let b = control_limit_master_form(&ms, t, x, xbar).unwrap();
            assert!((a - b).abs() <= 1e-8, "forms differ by {:.3e}", (a - b).abs());
        }
    }

    #[test]
    fn consensus_state_gets_zero_control() {
        let params = fixtures::sr_default();
        let ms = solve_master(&params, grid(100)).unwrap();
        assert_eq!(control_limit(&ms, 0.4, 0.7, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn population_mean_of_limit_controls_vanishes() {
        let params = fixtures::sr_default();
        let ms = solve_master(&params, grid(100)).unwrap();
        let cloud = [0.3, -1.2, 0.8, 2.0, -0.5];
        let n = cloud.len() as f64;
        let sum: f64 = cloud.iter().sum();
        let total: f64 = cloud
            .iter()
            .map(|&x| {
                let mean_others = (sum - x) / (n - 1.0);
                control_limit(&ms, 0.25, x, mean_others).unwrap()
            })
            .sum();
        assert!(total.abs() <= 1e-12);
    }

    #[test]
    fn direct_control_at_consensus_terminal() {
        let params = fixtures::sr_default();
        let n = 4;
        let sol = solve_direct(&params, n, grid(100)).unwrap();
        let x_star = 0.9;
        let states = vec![x_star; n];
        let got = control_direct(&sol, 1.0, &states, 1).unwrap();
        let want = -(sol.pi1[100] + params.q) * x_star
            - (sol.pi2[100] - params.q / 3.0) * 3.0 * x_star;
        assert!((got - want).abs() <= 1e-14);
    }

    #[test]
    fn direct_control_converges_to_limit_law() {
        let params = fixtures::sr_default();
        let g = grid(500);
        let ms = solve_master(&params, g).unwrap();
        let x = 0.4;
        let mean_others = -0.3;
        let sup_diff = |n: usize| {
            let sol = solve_direct(&params, n, g).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..g.len() {
                let t = g.time(k);
                let mut states = vec![mean_others; n];
                states[0] = x;
                let direct = control_direct(&sol, t, &states, 0).unwrap();
                let limit = control_limit(&ms, t, x, mean_others).unwrap();
                worst = worst.max((direct - limit).abs());
            }
            worst
        };
        let d8 = sup_diff(8);
        let d64 = sup_diff(64);
        assert!(d64 < d8, "no convergence: {d8:.3e} -> {d64:.3e}");
        assert!(d64 <= d8 / 4.0, "slower than O(1/N): {d8:.3e} -> {d64:.3e}");
    }

    #[test]
    fn convergence_slopes_sit_in_the_window() {
        let params = fixtures::sr_default();
        let n_list = [4, 8, 16, 32, 64, 128, 256];
        let report = convergence_report(&params, &n_list, grid(2000)).unwrap();
        let s1 = report.slope1.unwrap().slope;
        let s2 = report.slope2.unwrap().slope;
        assert!((-1.2..=-0.8).contains(&s1), "slope1 = {s1:.3}");
        assert!((-1.2..=-0.8).contains(&s2), "slope2 = {s2:.3}");
        for pair in report.entries.windows(2) {
            assert!(pair[1].e1 < pair[0].e1, "e1 not decreasing");
        }
    }

    #[test]
    fn convergence_degenerates_cleanly_at_zero_params() {
        let report =
            convergence_report(&zero_params(), &[4, 8, 16, 32], grid(100)).unwrap();
        for e in &report.entries {
            assert_eq!(e.e1, 0.0);
            assert_eq!(e.e2, 0.0);
        }
        assert!(report.slope1.is_none());
        assert!(report.slope2.is_none());
    }

    #[test]
    fn exact_value_at_origin_is_r() {
        let params = fixtures::sr_default();
        let sol = solve_direct(&params, 6, grid(200)).unwrap();
        let states = vec![0.0; 6];
        assert_eq!(exact_social_value(&sol, &states), sol.r[0]);
    }

    #[test]
    fn noiseless_two_bank_rollout_reproduces_exact_value() {
        // sigma = 0: the closed-loop system under the exact law is an ODE;
        // an RK4 rollout with the running cost as an extra state is an
        // independent oracle for the quadratic value.
        let mut params = fixtures::sr_default();
        params.sigma = 0.0;
        let g = grid(4000);
        let sol = solve_direct(&params, 2, g).unwrap();
        let x0 = [0.8, -0.5];

        let steps = 2000usize;
        let dt = params.horizon / steps as f64;
        let mut state = [x0[0], x0[1], 0.0]; // x1, x2, accumulated cost
        let deriv = |t: f64, s: &[f64; 3]| -> [f64; 3] {
            let states = [s[0], s[1]];
            let u1 = control_direct(&sol, t.min(params.horizon), &states, 0).unwrap();
            let u2 = control_direct(&sol, t.min(params.horizon), &states, 1).unwrap();
            let l1 = sr_running_cost(&params, s[0], u1, s[1]);
            let l2 = sr_running_cost(&params, s[1], u2, s[0]);
            [u1, u2, l1 + l2]
        };
        for j in 0..steps {
            let t = j as f64 * dt;
            let k1 = deriv(t, &state);
            let mid1 = [
                state[0] + 0.5 * dt * k1[0],
                state[1] + 0.5 * dt * k1[1],
                state[2] + 0.5 * dt * k1[2],
            ];
            let k2 = deriv(t + 0.5 * dt, &mid1);
            let mid2 = [
                state[0] + 0.5 * dt * k2[0],
                state[1] + 0.5 * dt * k2[1],
                state[2] + 0.5 * dt * k2[2],
            ];
            let k3 = deriv(t + 0.5 * dt, &mid2);
            let end = [
                state[0] + dt * k3[0],
                state[1] + dt * k3[1],
                state[2] + dt * k3[2],
            ];
            let k4 = deriv(t + dt, &end);
            for i in 0..3 {
                state[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        let terminal = params.c * (state[0] - state[1]).powi(2) * 2.0;
        let rollout_cost = state[2] + terminal;
        let exact = exact_social_value(&sol, &x0);
        assert!(
            (rollout_cost - exact).abs() <= 1e-6,
            "rollout {rollout_cost} vs exact {exact}"
        );
    }

    #[test]
    fn consensus_mean_is_preserved_under_limit_law() {
        let params = SrParams {
            sigma: 0.0,
            ..fixtures::sr_default()
        };
        let g = grid(2000);
        let ms = solve_master(&params, g).unwrap();
        let mut cloud = vec![0.3, -1.2, 0.8, 2.0, -0.5, 0.1];
        let n = cloud.len() as f64;
        let dt = 1e-3;
        let mean0 = cloud.iter().sum::<f64>() / n;
        for j in 0..1000 {
            let t = j as f64 * dt;
            let sum: f64 = cloud.iter().sum();
            let next: Vec<f64> = cloud
                .iter()
                .map(|&x| {
                    let mean_others = (sum - x) / (n - 1.0);
                    x + dt * control_limit(&ms, t, x, mean_others).unwrap()
                })
                .collect();
            cloud = next;
            let mean = cloud.iter().sum::<f64>() / n;
            assert!((mean - mean0).abs() <= 1e-10 * (j + 1) as f64);
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        let mut p = fixtures::sr_default();
        p.q = 2.0; // q^2 = 4 > eps0 = 2
        assert!(p.validate().is_err());
        let mut p = fixtures::sr_default();
        p.rho = 1.5;
        assert!(p.validate().is_err());
    }
}
