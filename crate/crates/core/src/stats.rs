//! Statistics helpers shared by the experiment modules: Monte Carlo
//! mean/stderr, ordinary least squares, and an exact small-sample Kendall
//! tau trend test.

/// Sample mean and standard error (sample std / sqrt(n)); stderr is 0 for
/// fewer than two samples.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Ordinary least squares fit y = slope * x + intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (0 when fewer than 3 points).
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|xi| (xi - xbar) * (xi - xbar)).sum();
    let sxy: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, yi)| (xi - xbar) * (yi - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let slope_stderr = if x.len() > 2 {
        let ssr: f64 = x
            .iter()
            .zip(y)
            .map(|(xi, yi)| {
                let e = yi - (slope * xi + intercept);
                e * e
            })
            .sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    LinearFit {
        slope,
        intercept,
        slope_stderr,
    }
}

/// Kendall's S statistic: number of concordant minus discordant pairs in
/// index order (ties contribute zero).
fn kendall_s(values: &[f64]) -> i64 {
    let mut s = 0i64;
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            s += match values[j].partial_cmp(&values[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    s
}

/// Exact one-sided Kendall tau trend test against the alternative
/// "increasing in index order". Returns `(tau, p)` where `p` is the exact
/// permutation probability P(S >= S_observed) under the null of exchangeable
/// order. Sequences of up to 8 values are enumerated exactly; longer ones
/// use a normal approximation of S.
pub fn kendall_increasing_test(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 2, "trend test needs at least two values");
    let s_obs = kendall_s(values);
    let pairs = (n * (n - 1) / 2) as f64;
    let tau = s_obs as f64 / pairs;

    if n <= 8 {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut total = 0u64;
        let mut at_least = 0u64;
        permute(&mut idx, 0, &mut |perm| {
            let arranged: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
            total += 1;
            if kendall_s(&arranged) >= s_obs {
                at_least += 1;
            }
        });
        (tau, at_least as f64 / total as f64)
    } else {
        // Var(S) = n(n-1)(2n+5)/18 under the null (no tie correction).
        let nf = n as f64;
        let sigma = (nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0).sqrt();
        let zscore = (s_obs as f64 - 1.0) / sigma; // continuity correction
        (tau, 0.5 * erfc_approx(zscore / std::f64::consts::SQRT_2))
    }
}

fn permute(idx: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == idx.len() {
        visit(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        permute(idx, k + 1, visit);
        idx.swap(k, i);
    }
}

/// Abramowitz-Stegun 7.1.26 rational approximation of erfc, |err| < 1.5e-7.
fn erfc_approx(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-x * x).exp();
    if sign < 0.0 {
        1.0 + erf
    } else {
        1.0 - erf
    }
}
