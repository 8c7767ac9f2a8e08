//! Fixed-step backward integration of terminal-value ODE systems.
//!
//! Every coefficient system in this crate is a matrix/vector ODE with a
//! terminal condition at the horizon `T`. All of them are integrated by the
//! classic 4th-order Runge–Kutta scheme run backward in time on a uniform
//! grid (global error O(h^4)). No adaptivity: the flows are smooth on
//! `[0, T]` whenever they are solvable, and fixed steps keep results
//! reproducible and convergence-order checks clean.
//!
//! Matrix-valued states are stored flattened row-major inside a single state
//! vector so one integrator serves all systems. Blocks that are symmetric
//! under the exact flow can be re-projected after every step via
//! [`integrate_terminal_projected`].

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Uniform grid on `[0, T]` with `steps` intervals of width `h = T / steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Config(format!("horizon must be > 0, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    /// Default resolution: 2000 steps for horizons up to 2 time units,
    /// proportionally more beyond that.
    pub fn with_default_steps(horizon: f64) -> Result<Self> {
        let steps = if horizon <= 2.0 {
            2000
        } else {
            (1000.0 * horizon).ceil() as usize
        };
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Step width `h = T / steps`.
    pub fn step(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// The k-th grid point, `k * h`; `time(steps)` returns `T` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.step()
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= 0.0 && t <= self.horizon
    }
}

/// A state trajectory stored at every grid point.
///
/// `values[k]` is the flat state vector at `grid.time(k)`; matrix blocks are
/// row-major slices of that vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, values: Vec<DVector<f64>>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Config(format!(
                "trajectory has {} points, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// State at grid index `k`.
    pub fn at(&self, k: usize) -> &DVector<f64> {
        &self.values[k]
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn terminal(&self) -> &DVector<f64> {
        &self.values[self.grid.steps()]
    }

    /// Linear interpolation between the bracketing grid points; exact at
    /// grid points. Errors with [`Error::OutOfRange`] outside `[0, T]`.
    pub fn sample(&self, t: f64) -> Result<DVector<f64>> {
        if !t.is_finite() || !self.grid.contains(t) {
            return Err(Error::OutOfRange {
                t,
                horizon: self.grid.horizon(),
            });
        }
        let u = t / self.grid.step();
        let k = (u.floor() as usize).min(self.grid.steps());
        let w = u - k as f64;
        // Snap to the node when t is a grid point up to rounding in t/h.
        if w < 1e-9 || k == self.grid.steps() {
            return Ok(self.values[k].clone());
        }
        if w > 1.0 - 1e-9 {
            return Ok(self.values[k + 1].clone());
        }
        Ok(&self.values[k] * (1.0 - w) + &self.values[k + 1] * w)
    }
}

/// Bracketing grid indices and interpolation weight for time `t`, snapping
/// to nodes so grid points evaluate exactly. Returns `(k_lo, k_hi, w)` with
/// `k_lo == k_hi` at nodes.
pub(crate) fn bracket(grid: &TimeGrid, t: f64) -> Result<(usize, usize, f64)> {
    if !t.is_finite() || !grid.contains(t) {
        return Err(Error::OutOfRange {
            t,
            horizon: grid.horizon(),
        });
    }
    let u = t / grid.step();
    let k = (u.floor() as usize).min(grid.steps());
    let w = u - k as f64;
    if w < 1e-9 || k == grid.steps() {
        Ok((k, k, 0.0))
    } else if w > 1.0 - 1e-9 {
        Ok((k + 1, k + 1, 0.0))
    } else {
        Ok((k, k + 1, w))
    }
}

/// Linear interpolation of a per-grid-point scalar track.
pub(crate) fn lerp_scalar(vals: &[f64], grid: &TimeGrid, t: f64) -> Result<f64> {
    let (k0, k1, w) = bracket(grid, t)?;
    Ok(vals[k0] * (1.0 - w) + vals[k1] * w)
}

fn check_finite(state: &DVector<f64>, t: f64, context: &str) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp {
            t,
            context: context.to_string(),
        })
    }
}

/// Backward RK4 for `y'(t) = rhs(t, y)` with `y(T) = terminal_state`.
///
/// The returned trajectory holds the state at every grid point, with the
/// given terminal state stored bit-exactly at `t = T`.
pub fn integrate_terminal<F>(rhs: F, terminal_state: &DVector<f64>, grid: TimeGrid) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    integrate_terminal_projected(rhs, terminal_state, grid, |_| {})
}

/// Same as [`integrate_terminal`], applying `project` to the state after
/// every step (used to re-symmetrize matrix blocks whose exact flow
/// preserves symmetry; the drift being removed is pure round-off).
pub fn integrate_terminal_projected<F, P>(
    rhs: F,
    terminal_state: &DVector<f64>,
    grid: TimeGrid,
    project: P,
) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
    P: Fn(&mut DVector<f64>),
{
    check_finite(terminal_state, grid.horizon(), "terminal state not finite")?;
    let h = grid.step();
    let steps = grid.steps();
    let mut values = vec![DVector::zeros(terminal_state.len()); grid.len()];
    values[steps] = terminal_state.clone();

    let mut y = terminal_state.clone();
    for k in (0..steps).rev() {
        let t_hi = grid.time(k + 1);
        let t_mid = t_hi - 0.5 * h;
        let t_lo = grid.time(k);

        let k1 = rhs(t_hi, &y);
        let k2 = rhs(t_mid, &(&y - &k1 * (0.5 * h)));
        let k3 = rhs(t_mid, &(&y - &k2 * (0.5 * h)));
        let k4 = rhs(t_lo, &(&y - &k3 * h));

        y -= (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        project(&mut y);
        check_finite(&y, t_lo, "state escaped to non-finite values during backward integration")?;
        values[k] = y.clone();
    }

    Trajectory::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    /// Closed form of the scalar Riccati flow P' = P^2 - 1, P(T) = c with
    /// |c| < 1: P(t) = tanh((T - t) + artanh(c)). Verified by
    /// differentiation: d/dt tanh(T - t + a) = -sech^2 = tanh^2 - 1.
    fn tanh_solution(t: f64, horizon: f64, c: f64) -> f64 {
        ((horizon - t) + c.atanh()).tanh()
    }

    fn tanh_max_error(grid: TimeGrid, c: f64) -> f64 {
        let traj = integrate_terminal(
            |_, y| scalar(y[0] * y[0] - 1.0),
            &scalar(c),
            grid,
        )
        .unwrap();
        (0..grid.len())
            .map(|k| (traj.at(k)[0] - tanh_solution(grid.time(k), grid.horizon(), c)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_field_stays_constant() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let c = DVector::from_vec(vec![2.0, -3.5]);
        let traj = integrate_terminal(|_, y| DVector::zeros(y.len()), &c, grid).unwrap();
        for k in 0..grid.len() {
            assert_eq!(traj.at(k), &c);
        }
    }

    #[test]
    fn tanh_oracle_within_ten_h4() {
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let h = grid.step();
        assert!(tanh_max_error(grid, 0.5) <= 10.0 * h.powi(4));
    }

    #[test]
    fn exponential_oracle_within_ten_h4() {
        let a = -1.7;
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let traj = integrate_terminal(|_, y| y * a, &scalar(1.0), grid).unwrap();
        let h = grid.step();
        let err = (0..grid.len())
            .map(|k| (traj.at(k)[0] - (a * (grid.time(k) - 1.0)).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 10.0 * h.powi(4), "err = {err:.3e}");
    }

    #[test]
    fn halving_h_gives_order_four() {
        let coarse = tanh_max_error(TimeGrid::new(1.0, 40).unwrap(), 0.5);
        let fine = tanh_max_error(TimeGrid::new(1.0, 80).unwrap(), 0.5);
        let ratio = coarse / fine;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "order-4 convergence window violated: ratio = {ratio:.2}"
        );
    }

    #[test]
    fn terminal_condition_reproduced_bit_exactly() {
        let c = DVector::from_vec(vec![0.25, -1.0, 7.5]);
        let grid = TimeGrid::new(2.0, 100).unwrap();
        let traj = integrate_terminal(|t, y| y * t.sin(), &c, grid).unwrap();
        assert_eq!(traj.terminal(), &c);
        assert_eq!(traj.sample(2.0).unwrap(), c);
    }

    #[test]
    fn integration_is_deterministic() {
        let grid = TimeGrid::new(1.0, 123).unwrap();
        let run = || {
            integrate_terminal(|_, y: &DVector<f64>| scalar(y[0] * y[0] - 1.0), &scalar(0.3), grid)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sample_exact_at_grid_points() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let traj = integrate_terminal(|_, y| scalar(y[0] * y[0] - 1.0), &scalar(0.4), grid).unwrap();
        for k in 0..grid.len() {
            assert_eq!(traj.sample(grid.time(k)).unwrap(), *traj.at(k));
        }
    }

    #[test]
    fn sample_midpoint_of_linear_trajectory() {
        // x' = 1, x(T) = T reproduces x(t) = t; midpoints must be means.
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let traj = integrate_terminal(|_, _| scalar(1.0), &scalar(1.0), grid).unwrap();
        for k in 0..grid.steps() {
            let mid = 0.5 * (grid.time(k) + grid.time(k + 1));
            let want = 0.5 * (traj.at(k)[0] + traj.at(k + 1)[0]);
            assert!((traj.sample(mid).unwrap()[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sample_off_grid_within_interpolation_bound() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let h = grid.step();
        let traj = integrate_terminal(|_, y| scalar(y[0] * y[0] - 1.0), &scalar(0.5), grid).unwrap();
        for i in 0..300 {
            let t = 0.001 + 0.998 * (i as f64 / 299.0);
            let got = traj.sample(t).unwrap()[0];
            let want = tanh_solution(t, 1.0, 0.5);
            assert!(
                (got - want).abs() <= 10.0 * h * h,
                "t = {t}: |{got} - {want}| > 10 h^2"
            );
        }
    }

    #[test]
    fn sample_out_of_range_errors() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let traj = integrate_terminal(|_, _| scalar(0.0), &scalar(1.0), grid).unwrap();
        assert!(matches!(traj.sample(-0.1), Err(Error::OutOfRange { .. })));
        assert!(matches!(traj.sample(1.5), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn riccati_escape_reports_blowup() {
        // P' = -P^2, P(T) = 1 on [0, 2] escapes backward at t = T - 1.
        let grid = TimeGrid::new(2.0, 400).unwrap();
        let res = integrate_terminal(|_, y| scalar(-y[0] * y[0]), &scalar(1.0), grid);
        match res {
            Err(Error::BlowUp { t, .. }) => assert!(t < 1.2, "blow-up reported at t = {t}"),
            other => panic!("expected BlowUp, got {other:?}"),
        }
    }

    #[test]
    fn projection_is_applied_after_each_step() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let traj = integrate_terminal_projected(
            |_, y| y.clone(),
            &DVector::from_vec(vec![1.0, 2.0]),
            grid,
            |y| {
                let m = 0.5 * (y[0] + y[1]);
                y[0] = m;
                y[1] = m;
            },
        )
        .unwrap();
        for k in 0..grid.steps() {
            assert_eq!(traj.at(k)[0], traj.at(k)[1]);
        }
    }
}
