//! Cyclic-signal algebra: translations, the DFT pair, circulant products and
//! orbit alignment.
//!
//! DFT convention: `(F z)[k] = sum_i z[i] exp(-2 pi i k i / L)` with the `1/L`
//! factor carried by the inverse. Under this convention the power spectrum
//! read off the second moment is `L * diag(F M2 F^-1)`.

use std::cell::RefCell;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{check_len, MraError, Result};

/// Real signal of length `L`, indexed modulo `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal(Vec<f64>);

impl Signal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(MraError::InvalidSignal);
        }
        Ok(Signal(values))
    }

    pub fn zeros(len: usize) -> Self {
        Signal(vec![0.0; len])
    }

    /// Unit impulse at index `at`.
    pub fn delta(len: usize, at: usize) -> Self {
        let mut v = vec![0.0; len];
        v[at % len] = 1.0;
        Signal(v)
    }

    pub(crate) fn from_vec(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Signal(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Signal {
        Signal(self.0.iter().map(|v| v * factor).collect())
    }
}

impl Deref for Signal {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for Signal {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Probability vector on the simplex (the shift distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Vec<f64>);

/// Allowed deviation of the total mass from one.
pub const SIMPLEX_TOL: f64 = 1e-12;

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(MraError::InvalidDistribution("empty".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(MraError::InvalidDistribution(format!("entry {bad} not in [0, inf)")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(MraError::InvalidDistribution(format!("mass {total} != 1")));
        }
        Ok(Distribution(probs))
    }

    /// Normalizes non-negative weights with a positive total.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MraError::InvalidDistribution(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(MraError::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Distribution(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(len: usize) -> Self {
        Distribution(vec![1.0 / len as f64; len])
    }

    pub fn dirac(len: usize, at: usize) -> Self {
        let mut v = vec![0.0; len];
        v[at % len] = 1.0;
        Distribution(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `R_s rho`.
    pub fn shifted(&self, s: i64) -> Distribution {
        Distribution(rotate(&self.0, s))
    }

    /// Distribution of `S + S'` for independent `S ~ self`, `S' ~ other`.
    pub fn convolve(&self, other: &Distribution) -> Distribution {
        let conv = circular_convolve(&self.0, &other.0);
        // Clamp FFT dust so the result stays on the simplex.
        let clamped: Vec<f64> = conv.into_iter().map(|v| v.max(0.0)).collect();
        Distribution::from_weights(clamped).expect("convolution of distributions has unit mass")
    }
}

impl Deref for Distribution {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// DFT coefficients of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(Vec<Complex64>);

impl Spectrum {
    pub fn new(coeffs: Vec<Complex64>) -> Self {
        Spectrum(coeffs)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }

    /// `coeffs[k] == conj(coeffs[-k])` within `tol`, which holds for real signals.
    pub fn is_conjugate_symmetric(&self, tol: f64) -> bool {
        let n = self.0.len();
        (0..n).all(|k| (self.0[k] - self.0[(n - k) % n].conj()).norm() <= tol)
    }

    pub fn power(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.norm_sqr()).collect()
    }
}

impl Deref for Spectrum {
    type Target = [Complex64];

    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

/// Result of aligning a candidate to a reference over all cyclic shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub shift: usize,
    pub aligned: Signal,
    pub error: f64,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn wrap(i: i64, len: usize) -> usize {
    i.rem_euclid(len as i64) as usize
}

/// Forward DFT of a real vector.
pub fn dft_slice(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_plan(x.len(), false).process(&mut buf);
    buf
}

/// Forward DFT of a complex vector.
pub fn dft_complex(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    fft_plan(x.len(), false).process(&mut buf);
    buf
}

/// Inverse DFT including the `1/L` factor.
pub fn idft_complex(coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut buf = coeffs.to_vec();
    fft_plan(coeffs.len(), true).process(&mut buf);
    let scale = 1.0 / coeffs.len() as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse DFT keeping the real part. Exact when `coeffs` is conjugate symmetric.
pub fn idft_real(coeffs: &[Complex64]) -> Vec<f64> {
    idft_complex(coeffs).into_iter().map(|c| c.re).collect()
}

pub fn dft(x: &Signal) -> Spectrum {
    Spectrum(dft_slice(x))
}

/// Inverse of [`dft`]. The imaginary part is dropped, which is exact for the
/// spectrum of a real signal.
pub fn idft(spectrum: &Spectrum) -> Signal {
    Signal::from_vec(idft_real(spectrum))
}

/// `out[i] = x[i - s]` with indices modulo `L`.
pub fn rotate(x: &[f64], s: i64) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| x[wrap(i as i64 - s, n)]).collect()
}

/// Cyclic translation `R_s x`.
pub fn shift(x: &Signal, s: i64) -> Signal {
    Signal(rotate(x, s))
}

/// `(a * b)[i] = sum_j a[j] b[i - j]`.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let fa = dft_slice(a);
    let fb = dft_slice(b);
    // Product of two conjugate-symmetric spectra is conjugate symmetric.
    idft_real(&fa.iter().zip(&fb).map(|(p, q)| p * q).collect::<Vec<_>>())
}

/// `c[s] = sum_i a[i - s] b[i] = <R_s a, b>`.
pub fn cross_correlate(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let fa = dft_slice(a);
    let fb = dft_slice(b);
    idft_real(&fa.iter().zip(&fb).map(|(p, q)| p.conj() * q).collect::<Vec<_>>())
}

/// `C_z v` for the circulant matrix with first column `z`, computed in the
/// Fourier domain.
pub fn circulant_multiply(first_column: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_len(first_column.len(), v.len())?;
    Ok(circular_convolve(first_column, v))
}

/// Dense `C_z` with `C_z[i, j] = z[i - j]`.
pub fn circulant_matrix(z: &[f64]) -> DMatrix<f64> {
    let n = z.len();
    DMatrix::from_fn(n, n, |i, j| z[wrap(i as i64 - j as i64, n)])
}

/// Best cyclic alignment of `candidate` onto `reference`.
///
/// Correlations for all shifts come from one FFT cross-correlation. Shifts whose
/// correlation is within rounding of the maximum count as ties and the smallest
/// index wins.
pub fn align(candidate: &[f64], reference: &[f64]) -> Result<AlignmentResult> {
    check_len(reference.len(), candidate.len())?;
    let corr = cross_correlate(candidate, reference);
    let best = corr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = norm(candidate) * norm(reference);
    let tie = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let shift = corr.iter().position(|&c| c >= best - tie).unwrap_or(0);
    let aligned = rotate(candidate, shift as i64);
    let error = aligned
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
        .sqrt();
    Ok(AlignmentResult {
        shift,
        aligned: Signal::from_vec(aligned),
        error,
    })
}

/// Aligns an estimated pair onto the truth: the shift is chosen on the
/// signal, and the distribution is moved the opposite way so that
/// `(R_s x_hat, R_{-s} rho_hat)` stays in the joint orbit.
pub fn align_pair(x_hat: &[f64], rho_hat: &[f64], x: &[f64]) -> Result<(AlignmentResult, Vec<f64>)> {
    check_len(x.len(), rho_hat.len())?;
    let a = align(x_hat, x)?;
    let rho = rotate(rho_hat, -(a.shift as i64));
    Ok((a, rho))
}

/// `min_s ||R_s estimate - truth|| / ||truth||`.
pub fn relative_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(truth.len(), estimate.len())?;
    let t = norm(truth);
    if t == 0.0 {
        return Err(MraError::ZeroNorm);
    }
    Ok(align(estimate, truth)?.error / t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn exhaustive_align(c: &[f64], r: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for s in 0..c.len() {
            let d = norm(
                &rotate(c, s as i64)
                    .iter()
                    .zip(r)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            );
            if d < best.1 - 1e-12 {
                best = (s, d);
            }
        }
        best
    }

    #[test]
    fn shift_definition() {
        let x = Signal::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(shift(&x, 0), x);
        assert_eq!(shift(&x, 1).as_slice(), &[4.0, 1.0, 2.0, 3.0]);
        assert_eq!(shift(&x, -1).as_slice(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(shift(&x, 5), shift(&x, 1));
    }

    #[test]
    fn shift_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(1..30);
            let x = Signal::new(random_vec(&mut rng, n)).unwrap();
            let a = rng.random_range(-40..40);
            let b = rng.random_range(-40..40);
            assert_eq!(shift(&shift(&x, a), b), shift(&x, a + b));
            assert!((shift(&x, a).norm() - x.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn dft_of_impulse_and_constant() {
        let spec = dft(&Signal::delta(7, 0));
        assert!(spec.iter().all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-14));
        let spec = dft(&Signal::new(vec![2.5; 6]).unwrap());
        assert!((spec[0] - Complex64::new(15.0, 0.0)).norm() < 1e-12);
        assert!(spec[1..].iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn dft_round_trip_parseval_and_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let x = Signal::new(random_vec(&mut rng, n)).unwrap();
            let spec = dft(&x);
            assert!(spec.is_conjugate_symmetric(1e-10));
            let back = idft(&spec);
            let diff = back.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
            let energy: f64 = spec.power().iter().sum();
            assert!((energy - n as f64 * x.norm().powi(2)).abs() < 1e-10 * energy.max(1.0));

            let s = rng.random_range(0..n as i64);
            let shifted = dft(&shift(&x, s));
            for k in 0..n {
                let phase = Complex64::from_polar(
                    1.0,
                    -2.0 * std::f64::consts::PI * (k as f64) * (s as f64) / n as f64,
                );
                assert!((shifted[k] - phase * spec[k]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn circulant_multiply_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..25);
            let x = random_vec(&mut rng, n);
            let v = random_vec(&mut rng, n);
            let dense = circulant_matrix(&x) * nalgebra::DVector::from_column_slice(&v);
            let fast = circulant_multiply(&x, &v).unwrap();
            for i in 0..n {
                assert!((dense[i] - fast[i]).abs() < 1e-10);
            }
        }
        let v = vec![0.3, -1.0, 2.0, 0.5];
        let id = circulant_multiply(&Signal::delta(4, 0), &v).unwrap();
        assert!(id.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-14));
        let col = circulant_multiply(&v, &Signal::delta(4, 0)).unwrap();
        assert!(col.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(circulant_multiply(&v, &[1.0]).is_err());
    }

    #[test]
    fn align_exact_shift() {
        let x = Signal::new(vec![3.0, -1.0, 0.5, 2.0, 0.0, 1.5, -2.0]).unwrap();
        let r = align(&shift(&x, 3), &x).unwrap();
        // shift(x, 3) needs R_4 to come back to x when L = 7
        assert_eq!(r.shift, 4);
        assert!(r.error < 1e-12);
        let r = align(&x, &x).unwrap();
        assert_eq!(r.shift, 0);
        assert!(r.error < 1e-12);
        assert!(align(&x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn align_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.random_range(1..20);
            let c = random_vec(&mut rng, n);
            let r = random_vec(&mut rng, n);
            let fast = align(&c, &r).unwrap();
            let (s, d) = exhaustive_align(&c, &r);
            assert_eq!(fast.shift, s);
            assert!((fast.error - d).abs() < 1e-10);
        }
    }

    #[test]
    fn align_ties_pick_smallest_shift() {
        // Period-2 signal: shifts 0 and 2 give identical correlation.
        let x = [1.0, -1.0, 1.0, -1.0];
        assert_eq!(align(&x, &x).unwrap().shift, 0);
        let y = rotate(&x, 1);
        assert_eq!(align(&y, &x).unwrap().shift, 1);
    }

    #[test]
    fn relative_error_basics() {
        let x = Signal::new(vec![1.0, 2.0, -0.5, 4.0, 0.25, 3.0]).unwrap();
        assert!(relative_error(&x, &x).unwrap() < 1e-14);
        assert!((relative_error(&x.scaled(2.0), &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(relative_error(&shift(&x, 5), &x).unwrap() < 1e-12);
        assert!(matches!(
            relative_error(&x, &Signal::zeros(6)),
            Err(MraError::ZeroNorm)
        ));
    }

    #[test]
    fn relative_error_orbit_invariance_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..20);
            let e = random_vec(&mut rng, n);
            let t = random_vec(&mut rng, n);
            let base = relative_error(&e, &t).unwrap();
            let s = rng.random_range(0..n as i64);
            let joint = relative_error(&rotate(&e, s), &rotate(&t, s)).unwrap();
            assert!((base - joint).abs() < 1e-10);
            assert!(base >= 0.0 && base <= (norm(&e) + norm(&t)) / norm(&t) + 1e-12);
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.5]).is_ok());
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![]).is_err());
        assert!(Distribution::from_weights(vec![0.0, 0.0]).is_err());
        let d = Distribution::from_weights(vec![1.0, 3.0]).unwrap();
        assert_eq!(d.as_slice(), &[0.25, 0.75]);
        let c = Distribution::dirac(5, 1).convolve(&Distribution::dirac(5, 2));
        assert!((c[3] - 1.0).abs() < 1e-12);
    }
}
