//! Pinned model fixtures shared by the test suites and the `check` command.

use nalgebra::{DMatrix, DVector};

use crate::model::LqModel;
use crate::systemic_risk::SrParams;

/// The 2-dimensional LQ fixture: generic (no zero couplings), stable drift,
/// coefficient norms below 2, horizon 1. Values are pinned so every residual
/// and tolerance in the test suites refers to the same problem.
pub fn lq2d() -> LqModel {
    LqModel {
        a: DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, -0.4]),
        b: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.2, 0.8]),
        g: DMatrix::from_row_slice(2, 2, &[0.2, 0.1, -0.1, 0.15]),
        d: DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.05, 0.2]),
        d0: DMatrix::from_row_slice(2, 1, &[0.15, 0.1]),
        q: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
        r: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.6]),
        gamma: DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.1, 0.5]),
        eta: DVector::from_vec(vec![0.3, -0.2]),
        qf: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.65]),
        gamma_f: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.0, 0.5]),
        eta_f: DVector::from_vec(vec![0.1, 0.2]),
        horizon: 1.0,
    }
}

/// The decoupled variant of [`lq2d`]: no mean coupling anywhere
/// (G = Gamma = Gamma_f = 0, eta = eta_f = 0). The value function collapses
/// to the standalone LQR value.
pub fn lq2d_decoupled() -> LqModel {
    let mut m = lq2d();
    m.g = DMatrix::zeros(2, 2);
    m.gamma = DMatrix::zeros(2, 2);
    m.gamma_f = DMatrix::zeros(2, 2);
    m.eta = DVector::zeros(2);
    m.eta_f = DVector::zeros(2);
    m
}

/// Zero-cost variant of [`lq2d`]: Q = Qf = 0, eta = eta_f = 0. Every
/// coefficient trajectory and every cost is identically zero.
pub fn lq2d_costless() -> LqModel {
    let mut m = lq2d();
    m.q = DMatrix::zeros(2, 2);
    m.qf = DMatrix::zeros(2, 2);
    m.eta = DVector::zeros(2);
    m.eta_f = DVector::zeros(2);
    m
}

/// Scalar fixture whose aggregate Riccati flow reduces to P' = P^2 - 1 with
/// P(T) = c, i.e. the tanh closed form: n = n1 = 1, A = G = 0, B = R = Q = 1,
/// Gamma = Gamma_f = 0, Qf = c, no noise, no offsets.
pub fn scalar_tanh(c: f64, horizon: f64) -> LqModel {
    LqModel {
        a: DMatrix::zeros(1, 1),
        b: DMatrix::identity(1, 1),
        g: DMatrix::zeros(1, 1),
        d: DMatrix::zeros(1, 1),
        d0: DMatrix::zeros(1, 1),
        q: DMatrix::identity(1, 1),
        r: DMatrix::identity(1, 1),
        gamma: DMatrix::zeros(1, 1),
        eta: DVector::zeros(1),
        qf: DMatrix::from_element(1, 1, c),
        gamma_f: DMatrix::zeros(1, 1),
        eta_f: DVector::zeros(1),
        horizon,
    }
}

/// Default systemic-risk parameters. q^2 <= eps0 holds (1 <= 2).
pub fn sr_default() -> SrParams {
    SrParams {
        sigma: 0.2,
        rho: 0.5,
        q: 1.0,
        eps0: 2.0,
        c: 1.0,
        horizon: 1.0,
    }
}
