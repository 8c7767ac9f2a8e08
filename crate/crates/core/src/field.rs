//! Pointwise evaluation of the value surfaces at concrete
//! `(t, x, empirical measure)` arguments.
//!
//! Measures are equal-weight particle clouds; the quadratic forms only need
//! the cloud mean and `<mu, y'My>`, both computed exactly from the
//! particles. The measure derivative of the value function is materialized
//! with its normalizing constant so the normalization
//! `<mu, delta V(t,x,mu;.)> = 0` is directly testable; that constant cancels
//! in every downstream difference.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::LqModel;
use crate::value::{AdjustmentCoefficients, InstrumentalCoefficients, ValueCoefficients};

/// Equal-weight particle cloud representing an empirical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    particles: Vec<DVector<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(particles: Vec<DVector<f64>>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("empirical measure needs k >= 1 particles".into()));
        }
        let dim = particles[0].len();
        for p in &particles {
            if p.len() != dim {
                return Err(Error::Config("particles have mixed dimensions".into()));
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("particle with non-finite entries".into()));
            }
        }
        Ok(Self { particles })
    }

    /// The cloud of all states except `exclude` (the measure seen by that
    /// agent).
    pub fn excluding(states: &[DVector<f64>], exclude: usize) -> Result<Self> {
        let particles: Vec<_> = states
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != exclude)
            .map(|(_, s)| s.clone())
            .collect();
        Self::new(particles)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    /// Arithmetic mean of the particles.
    pub fn mean(&self) -> DVector<f64> {
        let sum = self
            .particles
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, p| acc + p);
        sum / self.len() as f64
    }

    /// `<mu, y' M y>`, the exact cloud average of the quadratic form.
    pub fn quad_mean(&self, m: &DMatrix<f64>) -> f64 {
        self.particles
            .iter()
            .map(|y| y.dot(&(m * y)))
            .sum::<f64>()
            / self.len() as f64
    }
}

/// Value function
/// `V(t,x,mu) = x'Px + xbar'L xbar + 2x'H xbar + 2x'S + 2xbar'theta + r`.
pub fn eval_value(
    v: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
    mu: &EmpiricalMeasure,
) -> Result<f64> {
    let xbar = mu.mean();
    let p = v.p_at(t)?;
    let lambda = v.lambda_at(t)?;
    let h = v.h_at(t)?;
    Ok(x.dot(&(&p * x))
        + xbar.dot(&(&lambda * &xbar))
        + 2.0 * x.dot(&(&h * &xbar))
        + 2.0 * x.dot(&v.s_at(t)?)
        + 2.0 * xbar.dot(&v.theta_at(t)?)
        + v.r_at(t)?)
}

/// Cooperative feedback law
/// `phi(t,x,mu) = -R^{-1}B'[Px + (Lambda+H+H') xbar + S + theta]`.
pub fn eval_control(
    v: &ValueCoefficients,
    model: &LqModel,
    t: f64,
    x: &DVector<f64>,
    mu: &EmpiricalMeasure,
) -> Result<DVector<f64>> {
    let xbar = mu.mean();
    let inner = v.p_at(t)? * x + v.coupling_at(t)? * xbar + v.s_at(t)? + v.theta_at(t)?;
    Ok(-(model.gain_prefix() * inner))
}

/// Population-average value `<mu, V(t,.,mu)>`, computed as the exact
/// empirical average over the particles.
pub fn eval_mean_value(v: &ValueCoefficients, t: f64, mu: &EmpiricalMeasure) -> Result<f64> {
    let mut acc = 0.0;
    for y in mu.particles() {
        acc += eval_value(v, t, y, mu)?;
    }
    Ok(acc / mu.len() as f64)
}

/// Mean adjustment term
/// `M(t,mu) = <mu, y'Pi1 y> + xbar'Pi2 xbar + 2xbar'theta + r`.
pub fn eval_adjustment(m: &AdjustmentCoefficients, t: f64, mu: &EmpiricalMeasure) -> Result<f64> {
    let xbar = mu.mean();
    Ok(mu.quad_mean(&m.pi1_at(t)?)
        + xbar.dot(&(m.pi2_at(t)? * &xbar))
        + 2.0 * xbar.dot(&m.theta_at(t)?)
        + m.r_at(t)?)
}

/// Measure derivative of the value function,
/// `delta V(t,x,mu;y) = 2xbar'L y + 2x'H y + 2y'theta + chi(t,x,mu)`, with
/// the normalizer chi fixed by `<mu(dy), delta V(t,x,mu;y)> = 0`.
pub fn eval_measure_derivative(
    v: &ValueCoefficients,
    t: f64,
    x: &DVector<f64>,
    mu: &EmpiricalMeasure,
    y: &DVector<f64>,
) -> Result<f64> {
    let xbar = mu.mean();
    let lambda = v.lambda_at(t)?;
    let h = v.h_at(t)?;
    let theta = v.theta_at(t)?;
    let linear = |y: &DVector<f64>| {
        2.0 * xbar.dot(&(&lambda * y)) + 2.0 * x.dot(&(&h * y)) + 2.0 * y.dot(&theta)
    };
    let chi = -linear(&xbar);
    Ok(linear(y) + chi)
}

/// Instrumental value function evaluated from the assembled coefficients.
pub fn eval_instrumental(
    u: &InstrumentalCoefficients,
    t: f64,
    x: &DVector<f64>,
    mu: &EmpiricalMeasure,
) -> Result<f64> {
    let xbar = mu.mean();
    Ok(x.dot(&(u.pi1_at(t)? * x))
        + mu.quad_mean(&u.pi2_at(t)?)
        + xbar.dot(&(u.pi3_at(t)? * &xbar))
        + 2.0 * x.dot(&(u.pi4_at(t)? * &xbar))
        + 2.0 * x.dot(&u.s_at(t)?)
        + 2.0 * xbar.dot(&u.theta_at(t)?)
        + u.r_at(t)?)
}

/// The minimizer functional
/// `Phi(t,x,u,mu) = V_x f(x,u,mu) + L(x,u,mu)
/// + <mu(dy), d_x delta V(t,y,mu;x) f(x,u,mu)>` whose minimizer over u is
/// the cooperative law. All gradients of the quadratic ansatz are closed
/// form.
pub fn eval_minimizer_functional(
    v: &ValueCoefficients,
    model: &LqModel,
    t: f64,
    x: &DVector<f64>,
    u_ctl: &DVector<f64>,
    mu: &EmpiricalMeasure,
) -> Result<f64> {
    let xbar = mu.mean();
    let drift = &model.a * x + &model.b * u_ctl + &model.g * &xbar;

    // V_x' = 2(Px + H xbar + S)
    let vx = (v.p_at(t)? * x + v.h_at(t)? * &xbar + v.s_at(t)?) * 2.0;
    // <mu(dy), d_x delta V(t,y,mu;x)>' = 2((Lambda + H') xbar + theta)
    let avg_dx =
        ((v.lambda_at(t)? + v.h_at(t)?.transpose()) * &xbar + v.theta_at(t)?) * 2.0;

    let track = x - &model.gamma * &xbar - &model.eta;
    let running = track.dot(&(&model.q * &track)) + u_ctl.dot(&(&model.r * u_ctl));

    Ok(vx.dot(&drift) + running + avg_dx.dot(&drift))
}

/// Benchmark social value `U(t, x1, mu) + (N-1) * <mu, V(t,.,mu)>` with
/// `N - 1` the particle count of `mu` (the measure of all other agents).
pub fn benchmark_social_value(
    u: &InstrumentalCoefficients,
    v: &ValueCoefficients,
    t: f64,
    x1: &DVector<f64>,
    mu_others: &EmpiricalMeasure,
) -> Result<f64> {
    let n_minus_1 = mu_others.len() as f64;
    Ok(eval_instrumental(u, t, x1, mu_others)? + n_minus_1 * eval_mean_value(v, t, mu_others)?)
}
