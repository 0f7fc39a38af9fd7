//! Spiked-covariance predictions for the top eigenvector of the sample
//! second moment, and the simulation that checks them.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rustfft::num_complex::Complex64;

use crate::cyclic::{dft_slice, idft_real, norm, rotate, Distribution, Signal};
use crate::error::{check_len, MraError, Result};
use crate::model::{gaussian_signal, sample_observations};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikedPrediction {
    /// Limiting squared cosine between clean and noisy top eigenvectors.
    pub cos2: f64,
    pub above_threshold: bool,
    /// `sigma^2 sqrt(gamma)`.
    pub critical_lambda: f64,
    /// `gamma = L / N`.
    pub aspect_ratio: f64,
}

/// `cos^2 = (1 - sigma^4 gamma / lambda^2) / (1 + sigma^2 gamma / lambda)`
/// above `lambda = sigma^2 sqrt(gamma)`, zero at or below it.
pub fn predicted_cosine2(lambda: f64, sigma: f64, gamma: f64) -> SpikedPrediction {
    let critical_lambda = sigma * sigma * gamma.sqrt();
    let above_threshold = lambda > critical_lambda;
    let cos2 = if above_threshold {
        let s2 = sigma * sigma;
        ((1.0 - s2 * s2 * gamma / (lambda * lambda)) / (1.0 + s2 * gamma / lambda)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    SpikedPrediction {
        cos2,
        above_threshold,
        critical_lambda,
        aspect_ratio: gamma,
    }
}

/// `|x|^2 max(rho)`: the top eigenvalue of `C_x D_rho C_x^T` once the Fourier
/// magnitudes of `x` are flattened to a common value.
pub fn spike_eigenvalue(x: &Signal, rho: &Distribution) -> Result<f64> {
    check_len(x.len(), rho.len())?;
    Ok(x.norm().powi(2) * rho.max())
}

/// `N* = L sigma^4 / (|x|^4 max(rho)^2)`.
pub fn sample_threshold(len: usize, sigma: f64, x_norm: f64, rho_max: f64) -> f64 {
    len as f64 * sigma.powi(4) / (x_norm.powi(4) * rho_max * rho_max)
}

/// Noise level at which `lambda = sigma^2 sqrt(L / N)`.
pub fn critical_sigma(lambda: f64, len: usize, count: usize) -> f64 {
    lambda.sqrt() * (len as f64 / count as f64).powf(-0.25)
}

/// Keeps the phases of `x` and sets every Fourier magnitude to `|x|`, so
/// the norm is unchanged and its shifts are mutually orthogonal.
pub fn flatten_spectrum(x: &Signal) -> Result<Signal> {
    let target = x.norm();
    let coeffs: Vec<Complex64> = dft_slice(x)
        .into_iter()
        .map(|c| {
            let m = c.norm();
            if m > 0.0 {
                c * (target / m)
            } else {
                Complex64::new(target, 0.0)
            }
        })
        .collect();
    Signal::new(idft_real(&coeffs))
}

/// `|<u, v>| / (|u| |v|)`.
pub fn abs_cosine(u: &[f64], v: &[f64]) -> f64 {
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    d.abs() / (norm(u) * norm(v))
}

/// Top eigenpair of `A A^T / n` for `A` with `n` columns, via the smaller of
/// `A A^T` and `A^T A`.
fn top_left_eigen(a: &DMatrix<f64>, n: f64) -> (f64, Vec<f64>) {
    let (rows, cols) = a.shape();
    if rows <= cols {
        let eig = SymmetricEigen::new(a * a.transpose() / n);
        let i = eig.eigenvalues.imax();
        (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect())
    } else {
        let eig = SymmetricEigen::new(a.transpose() * a / n);
        let i = eig.eigenvalues.imax();
        let u = a * eig.eigenvectors.column(i);
        let scale = u.norm();
        (eig.eigenvalues[i], u.iter().map(|v| v / scale).collect())
    }
}

/// One simulated draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikedDraw {
    /// Top eigenvalue of the clean matrix `X X^T / N`.
    pub lambda: f64,
    /// Cosine between the clean and noisy top eigenvectors.
    pub cosine: f64,
    pub predicted: SpikedPrediction,
    /// Orbit error of the noisy top eigenvector scaled to `|x|`, relative to `|x|^2`.
    pub mse: f64,
}

/// Draws `N` noisy shifted copies and compares the top eigenvectors of the
/// clean and noisy second-moment matrices.
pub fn spiked_draw(x: &Signal, rho: &Distribution, sigma: f64, count: usize, rng: &mut impl Rng) -> Result<SpikedDraw> {
    let len = x.len();
    check_len(len, rho.len())?;
    if !(sigma > 0.0) {
        return Err(MraError::ZeroSigma(sigma));
    }
    let obs = sample_observations(x, rho, sigma, count, rng)?;
    let shifts = obs.true_shifts().expect("generated data carries shifts");
    let n = count as f64;
    // Clean matrix = sum_l f_l (R_l x)(R_l x)^T over observed shift frequencies.
    let mut freq = vec![0.0f64; len];
    for &s in shifts {
        freq[s] += 1.0;
    }
    let support: Vec<usize> = (0..len).filter(|&l| freq[l] > 0.0).collect();
    let basis = DMatrix::from_fn(len, support.len(), |i, c| {
        let l = support[c];
        freq[l].sqrt() * x[(i + len - l) % len]
    });
    let (lambda, clean_top) = top_left_eigen(&basis, n);
    let y = DMatrix::from_column_slice(len, count, obs.data());
    let (_, noisy_top) = top_left_eigen(&y, n);
    let cosine = abs_cosine(&clean_top, &noisy_top);
    let predicted = predicted_cosine2(lambda, sigma, len as f64 / n);
    let estimate: Vec<f64> = noisy_top.iter().map(|v| v * x.norm()).collect();
    let mse = crate::cyclic::relative_error(&estimate, x)?
        .min(crate::cyclic::relative_error(&estimate.iter().map(|v| -v).collect::<Vec<_>>(), x)?)
        .powi(2);
    Ok(SpikedDraw {
        lambda,
        cosine,
        predicted,
        mse,
    })
}

/// Setup of the spiked experiment: a Gaussian signal of the given norm with
/// flattened spectrum, and `rho[i] ∝ i^2` on `i = 1..=support`.
pub fn spiked_instance(len: usize, x_norm: f64, support: usize, rng: &mut impl Rng) -> Result<(Signal, Distribution)> {
    if support == 0 || support >= len {
        return Err(MraError::InvalidConfig(format!("support {support} must lie in 1..L")));
    }
    let g = gaussian_signal(len, rng);
    let flat = flatten_spectrum(&g)?;
    let x = flat.scaled(x_norm / flat.norm());
    let w = (0..len).map(|i| if (1..=support).contains(&i) { (i * i) as f64 } else { 0.0 }).collect();
    Ok((x, Distribution::from_weights(w)?))
}

/// Shifts of a flat-spectrum signal are orthonormal up to `|x|^2`.
pub fn shift_gram(x: &Signal) -> DMatrix<f64> {
    let len = x.len();
    let shifts: Vec<Vec<f64>> = (0..len).map(|l| rotate(x, l as i64)).collect();
    DMatrix::from_fn(len, len, |i, j| shifts[i].iter().zip(&shifts[j]).map(|(a, b)| a * b).sum())
}
