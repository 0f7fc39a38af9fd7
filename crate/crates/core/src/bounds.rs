//! Information lower bounds from moment matching: the first moment order at
//! which two models differ, the resulting chi-square divergence, and the
//! orbit-distance bound it implies for any estimator.

use crate::cyclic::{relative_error, Distribution, Signal};
use crate::error::{check_len, MraError, Result};
use crate::moments::{moment_tensor_fourier_with, TensorBudget};

/// Moment orders below this relative size count as equal.
pub const MATCH_TOL: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distinguishing {
    /// Smallest `d` with `M^d` differing, if any up to the searched order.
    pub order: Option<usize>,
    /// `|Delta M^d|_F^2 / d!` at that order.
    pub k_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub order: usize,
    pub k_d: f64,
    /// `N / sigma^(2d)`.
    pub lambda_n: f64,
    /// Leading per-sample chi-square, `K_d / sigma^(2d)`.
    pub chi2: f64,
    /// `dist^2 / expm1(lambda_N K_d)`.
    pub bound: f64,
    /// Same bound with `(1 + chi2)^N - 1` in the denominator.
    pub bound_product: f64,
    /// `min_s |R_s x_tilde - x|^2 / |x|^2`.
    pub orbit_distance2: f64,
}

fn factorial(d: usize) -> f64 {
    (1..=d).map(|k| k as f64).product()
}

/// Searches `d = 1..=max_order` for the first moment where the two models differ.
pub fn first_distinguishing_order(
    x: &Signal,
    rho: &Distribution,
    x_tilde: &Signal,
    rho_tilde: &Distribution,
    max_order: usize,
    budget: &TensorBudget,
) -> Result<Distinguishing> {
    let len = x.len();
    check_len(len, rho.len())?;
    check_len(len, x_tilde.len())?;
    check_len(len, rho_tilde.len())?;
    for d in 1..=max_order {
        let a = moment_tensor_fourier_with(x, rho, d, budget)?;
        let b = moment_tensor_fourier_with(x_tilde, rho_tilde, d, budget)?;
        let diff = a.distance_sq(&b);
        let scale = a.norm_sq().max(b.norm_sq());
        if diff > MATCH_TOL * scale {
            return Ok(Distinguishing {
                order: Some(d),
                k_d: diff / factorial(d),
            });
        }
    }
    Ok(Distinguishing { order: None, k_d: 0.0 })
}

/// Leading term `sigma^(-2d) |Delta M^d|^2 / d!` of the per-sample
/// chi-square divergence, with the order `d` it came from.
pub fn chi2_leading(
    x: &Signal,
    rho: &Distribution,
    x_tilde: &Signal,
    rho_tilde: &Distribution,
    sigma: f64,
    max_order: usize,
    budget: &TensorBudget,
) -> Result<(usize, f64)> {
    if !(sigma > 0.0) {
        return Err(MraError::ZeroSigma(sigma));
    }
    let found = first_distinguishing_order(x, rho, x_tilde, rho_tilde, max_order, budget)?;
    let d = found.order.ok_or(MraError::Indistinguishable(max_order))?;
    Ok((d, found.k_d * sigma.powi(-2 * d as i32)))
}

/// Chapman-Robbins style lower bound on the normalized orbit error of any
/// estimator that sees `N` samples at noise level `sigma`.
pub fn orbit_bound(
    x: &Signal,
    rho: &Distribution,
    x_tilde: &Signal,
    rho_tilde: &Distribution,
    count: usize,
    sigma: f64,
    max_order: usize,
    budget: &TensorBudget,
) -> Result<BoundReport> {
    if count == 0 {
        return Err(MraError::InvalidConfig("sample count must be positive".into()));
    }
    let (order, chi2) = chi2_leading(x, rho, x_tilde, rho_tilde, sigma, max_order, budget)?;
    let k_d = chi2 * sigma.powi(2 * order as i32);
    let n = count as f64;
    let lambda_n = n * sigma.powi(-2 * order as i32);
    let orbit_distance2 = relative_error(x_tilde, x)?.powi(2);
    let bound = orbit_distance2 / (lambda_n * k_d).exp_m1();
    let bound_product = orbit_distance2 / (n * chi2.ln_1p()).exp_m1();
    Ok(BoundReport {
        order,
        k_d,
        lambda_n,
        chi2,
        bound,
        bound_product,
        orbit_distance2,
    })
}

/// `1 / (8 N snr^2)`: error floor when the distribution is aperiodic.
pub fn aperiodic_rate_bound(count: usize, snr: f64) -> f64 {
    1.0 / (8.0 * count as f64 * snr * snr)
}

/// `(L - 2l) / (2l) / (54 N snr^3)`: error floor when the distribution has period `l`.
pub fn periodic_rate_bound(count: usize, snr: f64, len: usize, period: usize) -> Result<f64> {
    if period == 0 || len % period != 0 || 2 * period >= len {
        return Err(MraError::InvalidPeriod { period, len });
    }
    let ratio = (len - 2 * period) as f64 / (2 * period) as f64;
    Ok(ratio / (54.0 * count as f64 * snr.powi(3)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyclic::shift;
    use crate::model::{gaussian_signal, periodic_distribution, random_simplex, stream_rng};
    use crate::moments::periodic_counterexample;

    #[test]
    fn rate_bound_values() {
        assert!((aperiodic_rate_bound(100, 1.0) - 0.00125).abs() < 1e-15);
        assert!((aperiodic_rate_bound(10, 1.0) - 0.0125).abs() < 1e-15);
        let v = periodic_rate_bound(1, 1.0, 4, 1).unwrap();
        assert!((v - 1.0 / 54.0).abs() < 1e-15);
        let v = periodic_rate_bound(10, 1.0, 12, 2).unwrap();
        assert!((v - 2.0 / 540.0).abs() < 1e-15);
        assert!(periodic_rate_bound(10, 1.0, 12, 6).is_err());
        assert!(periodic_rate_bound(10, 1.0, 12, 5).is_err());
    }

    #[test]
    fn orbit_equivalent_pairs_never_separate() {
        let mut rng = stream_rng(3, 0);
        let x = gaussian_signal(9, &mut rng);
        let rho = random_simplex(9, &mut rng);
        let xs = shift(&x, 4);
        let rs = rho.shifted(-4);
        let f = first_distinguishing_order(&x, &rho, &xs, &rs, 3, &TensorBudget::default()).unwrap();
        assert_eq!(f.order, None);
        assert!(matches!(
            chi2_leading(&x, &rho, &xs, &rs, 1.0, 3, &TensorBudget::default()),
            Err(MraError::Indistinguishable(3))
        ));
    }

    #[test]
    fn counterexample_separates_at_third_order() {
        let mut rng = stream_rng(4, 0);
        let x = gaussian_signal(12, &mut rng);
        let rho = periodic_distribution(12, &random_simplex(3, &mut rng)).unwrap();
        let xt = periodic_counterexample(&x, 3).unwrap();
        let f = first_distinguishing_order(&x, &rho, &xt, &rho, 3, &TensorBudget::default()).unwrap();
        assert_eq!(f.order, Some(3));
        let r = orbit_bound(&x, &rho, &xt, &rho, 1000, 2.0, 3, &TensorBudget::default()).unwrap();
        assert_eq!(r.order, 3);
        assert!(r.orbit_distance2 > 0.0);
        assert!(r.bound > 0.0 && r.bound.is_finite());
        // exp(N c) - 1 >= (1 + c)^N - 1, so the product form is never smaller.
        assert!(r.bound_product >= r.bound * (1.0 - 1e-12));
    }

    #[test]
    fn different_means_separate_at_first_order() {
        let x = Signal::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let xt = Signal::new(vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let u = Distribution::uniform(4);
        let f = first_distinguishing_order(&x, &u, &xt, &u, 3, &TensorBudget::default()).unwrap();
        assert_eq!(f.order, Some(1));
        // M^1 = 1/4 everywhere vs 1/2 everywhere.
        assert!((f.k_d - 4.0 * 0.0625).abs() < 1e-12);
        let r = orbit_bound(&x, &u, &xt, &u, 10, 1.0, 3, &TensorBudget::default()).unwrap();
        assert!((r.bound - 1.0 / (2.5f64).exp_m1()).abs() < 1e-12);
    }

    #[test]
    fn bound_decreases_with_samples() {
        let mut rng = stream_rng(5, 0);
        let x = gaussian_signal(10, &mut rng);
        let rho = periodic_distribution(10, &random_simplex(2, &mut rng)).unwrap();
        let xt = periodic_counterexample(&x, 2).unwrap();
        let b = TensorBudget::default();
        let mut last = f64::INFINITY;
        for n in [10, 100, 1000, 10000] {
            let r = orbit_bound(&x, &rho, &xt, &rho, n, 3.0, 3, &b).unwrap();
            assert!(r.bound < last);
            last = r.bound;
        }
    }
}
