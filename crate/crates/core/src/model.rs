//! Model data and validation for the LQ social-optimization problem.
//!
//! Agent dynamics: `dX^i = (A X^i + B u^i + G Xbar^{-i}) dt + D dW^i + D0 dW^0`
//! with running cost `|x - Gamma xbar - eta|_Q^2 + u^T R u` and terminal cost
//! `|x - Gamma_f xbar - eta_f|_{Qf}^2`, where `xbar^{-i}` is the mean state of
//! all other agents. Coefficients are constant in time; heterogeneous agents
//! and time-varying coefficients are out of scope.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};

/// Relative tolerance for symmetry checks.
const SYMMETRY_TOL: f64 = 1e-12;

/// Coefficients of one LQ mean-field social optimization problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqModel {
    /// Drift matrix A (n x n).
    pub a: DMatrix<f64>,
    /// Input matrix B (n x n1).
    pub b: DMatrix<f64>,
    /// Mean-coupling matrix G (n x n).
    pub g: DMatrix<f64>,
    /// Idiosyncratic noise matrix D (n x n2).
    pub d: DMatrix<f64>,
    /// Common noise matrix D0 (n x n3).
    pub d0: DMatrix<f64>,
    /// Running state-cost weight Q (n x n, symmetric PSD).
    pub q: DMatrix<f64>,
    /// Control-cost weight R (n1 x n1, symmetric PD).
    pub r: DMatrix<f64>,
    /// Running mean-tracking matrix Gamma (n x n).
    pub gamma: DMatrix<f64>,
    /// Running offset eta (n).
    pub eta: DVector<f64>,
    /// Terminal weight Qf (n x n, symmetric PSD).
    pub qf: DMatrix<f64>,
    /// Terminal tracking matrix Gamma_f (n x n).
    pub gamma_f: DMatrix<f64>,
    /// Terminal offset eta_f (n).
    pub eta_f: DVector<f64>,
    /// Horizon T.
    pub horizon: f64,
}

impl LqModel {
    pub fn dim_state(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim_control(&self) -> usize {
        self.b.ncols()
    }

    pub fn dim_idiosyncratic(&self) -> usize {
        self.d.ncols()
    }

    pub fn dim_common(&self) -> usize {
        self.d0.ncols()
    }

    /// `B R^{-1} B^T`, the control-weighted quadratic kernel shared by every
    /// coefficient ODE.
    pub fn control_kernel(&self) -> DMatrix<f64> {
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .expect("validated model has invertible R");
        &self.b * r_inv * self.b.transpose()
    }

    /// `R^{-1} B^T`, the gain prefix of the feedback law.
    pub fn gain_prefix(&self) -> DMatrix<f64> {
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .expect("validated model has invertible R");
        r_inv * self.b.transpose()
    }

    /// Classify the model. Never fails; returns the full list of violations.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.dim_state();
        let n1 = self.dim_control();

        let mut check_dims = |name: &str, m: &DMatrix<f64>, rows: usize, cols: usize| {
            if m.nrows() != rows || m.ncols() != cols {
                violations.push(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                ));
            }
        };
        check_dims("A", &self.a, n, n);
        check_dims("B", &self.b, n, n1);
        check_dims("G", &self.g, n, n);
        check_dims("D", &self.d, n, self.dim_idiosyncratic());
        check_dims("D0", &self.d0, n, self.dim_common());
        check_dims("Q", &self.q, n, n);
        check_dims("R", &self.r, n1, n1);
        check_dims("Gamma", &self.gamma, n, n);
        check_dims("Qf", &self.qf, n, n);
        check_dims("Gamma_f", &self.gamma_f, n, n);
        if self.eta.len() != n {
            violations.push(format!("eta has length {}, expected {n}", self.eta.len()));
        }
        if self.eta_f.len() != n {
            violations.push(format!("eta_f has length {}, expected {n}", self.eta_f.len()));
        }

        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            violations.push(format!("horizon must be > 0, got {}", self.horizon));
        }

        for (name, m) in [("Q", &self.q), ("Qf", &self.qf), ("R", &self.r)] {
            if !is_symmetric(m) {
                violations.push(format!("{name} asymmetric beyond tolerance"));
            }
        }
        for (name, m) in [("Q", &self.q), ("Qf", &self.qf)] {
            if is_symmetric(m) && !is_psd(m) {
                violations.push(format!("{name} not positive semidefinite"));
            }
        }
        if is_symmetric(&self.r) && self.r.clone().cholesky().is_none() {
            let min_eig = self
                .r
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            violations.push(format!(
                "R not positive definite (smallest eigenvalue {min_eig:.3e})"
            ));
        }

        let finite = self.a.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.d.iter().all(|v| v.is_finite())
            && self.d0.iter().all(|v| v.is_finite())
            && self.q.iter().all(|v| v.is_finite())
            && self.r.iter().all(|v| v.is_finite())
            && self.gamma.iter().all(|v| v.is_finite())
            && self.eta.iter().all(|v| v.is_finite())
            && self.qf.iter().all(|v| v.is_finite())
            && self.gamma_f.iter().all(|v| v.is_finite())
            && self.eta_f.iter().all(|v| v.is_finite());
        if !finite {
            violations.push("model contains non-finite entries".into());
        }

        ValidationReport { violations }
    }

    /// Validate, returning the model or the first violation as an error.
    pub fn validated(self) -> Result<Self> {
        let report = self.validate();
        match report.violations.first() {
            None => Ok(self),
            Some(v) => Err(Error::Validation(v.clone())),
        }
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.norm().max(1.0);
    (m - m.transpose()).norm() <= SYMMETRY_TOL * scale
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    let scale = m.norm().max(1.0);
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .all(|&ev| ev >= -1e-10 * scale)
}

/// Outcome of [`LqModel::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Initial-state law of the agents (i.i.d., finite second moment).
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    PointMass {
        mean: DVector<f64>,
    },
    Gaussian {
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
    },
    UniformBox {
        mean: DVector<f64>,
        half_widths: DVector<f64>,
    },
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            Self::PointMass { mean }
            | Self::Gaussian { mean, .. }
            | Self::UniformBox { mean, .. } => mean.len(),
        }
    }

    /// A deterministic square root of the covariance (eigenvalue based so
    /// singular PSD covariances are accepted).
    fn covariance_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
        let eig = cov.clone().symmetric_eigen();
        let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|ev| ev.max(0.0).sqrt()));
        &eig.eigenvectors * sqrt
    }

    pub fn sample(&self, rng: &mut CounterRng) -> DVector<f64> {
        match self {
            Self::PointMass { mean } => mean.clone(),
            Self::Gaussian { mean, covariance } => {
                let z = rng.normal_vector(mean.len(), 1.0);
                mean + Self::covariance_factor(covariance) * z
            }
            Self::UniformBox { mean, half_widths } => {
                let u = DVector::from_fn(mean.len(), |_, _| rng.symmetric_uniform());
                mean + half_widths.component_mul(&u)
            }
        }
    }
}

/// Draw i.i.d. initial states for `n_agents` agents (1-based agent streams),
/// deterministic in `(seed, path)`. Agent i's draw does not depend on
/// `n_agents`, so population sweeps share initial conditions.
pub fn sample_initial_states(
    dist: &InitialDistribution,
    n_agents: usize,
    seed: u64,
    path: u64,
) -> Vec<DVector<f64>> {
    (1..=n_agents as u64)
        .map(|agent| {
            let mut rng = CounterRng::new(seed, Domain::Initial, path, 0, agent);
            dist.sample(&mut rng)
        })
        .collect()
}
