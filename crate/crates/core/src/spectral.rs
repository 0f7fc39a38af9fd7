//! Recovery of `(x, rho)` from the first two moments by whitening the second
//! moment and reading `x` off an eigenvector.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rustfft::num_complex::Complex64;

use crate::cyclic::{circulant_matrix, dft_slice, idft_real, norm, rotate, Distribution, Signal};
use crate::error::{MraError, Result};
use crate::ls::{ls_objective, project_simplex};
use crate::model::{random_simplex, reshuffle, ObservationSet};
use crate::moments::{power_spectrum_from_m2, sample_moments, MomentPair, MomentSource};

/// Which eigenvector of the whitened second moment is taken as `R_s x~`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigSelector {
    #[default]
    LargestEigenvalue,
    MostIsolatedEigenvalue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOptions {
    pub reshuffle: bool,
    pub eig_selector: EigSelector,
    /// Power-spectrum floor relative to its largest entry.
    pub ps_floor: f64,
    pub project_rho: bool,
    /// Minimum isolation of the selected eigenvalue, relative to the largest.
    pub eig_gap_tol: f64,
    /// `|Sum(m1)|` below `dc_tol * ||m1||` is treated as zero.
    pub dc_tol: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            reshuffle: true,
            eig_selector: EigSelector::LargestEigenvalue,
            ps_floor: 1e-8,
            project_rho: true,
            eig_gap_tol: 1e-9,
            dc_tol: 1e-10,
        }
    }
}

impl SpectralOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.ps_floor > 0.0) {
            return Err(MraError::InvalidConfig(format!("ps_floor = {} must be positive", self.ps_floor)));
        }
        if !(self.eig_gap_tol >= 0.0) || !(self.dc_tol >= 0.0) {
            return Err(MraError::InvalidConfig("tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Solver diagnostics shared by every recovery method. Fields that do not
/// apply to a method are left at zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Smallest gap between adjacent eigenvalues of the whitened matrix.
    pub eigen_gap: f64,
    /// Smallest power-spectrum entry before flooring.
    pub ps_min: f64,
    /// Number of power-spectrum entries raised to the floor.
    pub ps_floored: usize,
    pub dc_sum: f64,
    pub iterations: usize,
    /// Moment-fit residual (spectral, least squares) or final marginal
    /// log-likelihood (EM).
    pub objective: f64,
    pub converged: bool,
}

/// Estimated signal and distribution. `rho_hat` lies on the simplex whenever
/// the producing method projects it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub x_hat: Signal,
    pub rho_hat: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl RecoveryResult {
    /// `rho_hat` as a distribution, projecting if it is not already one.
    pub fn rho_distribution(&self) -> Distribution {
        Distribution::new(self.rho_hat.clone()).unwrap_or_else(|_| project_simplex(&self.rho_hat))
    }
}

struct Whitened {
    matrix: DMatrix<f64>,
    power: Vec<f64>,
    ps_min: f64,
    floored: usize,
}

/// `Q m2 Q^T` with `Q = F^{-1} D_{P^{-1/2}} F`, real part, symmetrized.
fn whiten(m: &MomentPair, ps_floor: f64) -> Result<Whitened> {
    let raw = power_spectrum_from_m2(m.m2());
    let len = raw.len();
    let top = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ps_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    if !(top > 0.0) {
        return Err(MraError::VanishingSpectrum { ps_min, floor: 0.0 });
    }
    let floor = ps_floor * top;
    if ps_min < floor && m.source() == MomentSource::Population {
        return Err(MraError::VanishingSpectrum { ps_min, floor });
    }
    let mut floored = 0;
    let power: Vec<f64> = raw
        .iter()
        .map(|&p| {
            if p < floor {
                floored += 1;
                floor
            } else {
                p
            }
        })
        .collect();
    // P is even in k, so Q is a real symmetric circulant.
    let inv_sqrt: Vec<Complex64> = power.iter().map(|&p| Complex64::new(p.powf(-0.5), 0.0)).collect();
    let q = circulant_matrix(&idft_real(&inv_sqrt));
    let w = &q * m.m2() * q.transpose();
    let matrix = (&w + w.transpose()) * 0.5;
    debug_assert_eq!(matrix.nrows(), len);
    Ok(Whitened {
        matrix,
        power,
        ps_min,
        floored,
    })
}

/// Eigenpairs sorted by decreasing eigenvalue.
fn sorted_eigen(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Distance from `values[i]` to its nearest neighbour; `values` sorted.
fn isolation(values: &[f64], i: usize) -> f64 {
    let below = if i + 1 < values.len() { values[i] - values[i + 1] } else { f64::INFINITY };
    let above = if i > 0 { values[i - 1] - values[i] } else { f64::INFINITY };
    below.min(above)
}

/// `F^{-1}(P^{1/2} . F v)`, then scaled so that its sum equals `Sum(m1)`.
fn recolor_and_scale(v: &[f64], power: &[f64], dc_sum: f64) -> Result<Signal> {
    let colored: Vec<Complex64> = dft_slice(v).iter().zip(power).map(|(c, p)| c * p.sqrt()).collect();
    let tilde = idft_real(&colored);
    let s: f64 = tilde.iter().sum();
    if s == 0.0 || !s.is_finite() {
        return Err(MraError::ZeroDc { dc_sum });
    }
    Signal::new(tilde.iter().map(|t| t * dc_sum / s).collect())
}

/// `F^{-1}(F num / F den)`, with `|F den|` raised to `1e-8 * max |F den|`.
pub fn fourier_divide(num: &[f64], den: &[f64]) -> Vec<f64> {
    let fd = dft_slice(den);
    let fn_ = dft_slice(num);
    let floor = 1e-8 * fd.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let ratio: Vec<Complex64> = fn_
        .iter()
        .zip(&fd)
        .map(|(a, b)| {
            let mag = b.norm();
            let b = if mag >= floor {
                *b
            } else if mag > 0.0 {
                b * (floor / mag)
            } else {
                Complex64::new(floor, 0.0)
            };
            a / b
        })
        .collect();
    idft_real(&ratio)
}

fn check_dc(m: &MomentPair, dc_tol: f64) -> Result<f64> {
    let dc_sum: f64 = m.m1().iter().sum();
    if dc_sum.abs() < dc_tol * norm(m.m1()) || dc_sum == 0.0 {
        return Err(MraError::ZeroDc { dc_sum });
    }
    Ok(dc_sum)
}

/// Exact inversion of population moments, up to a common shift.
pub fn invert_moments(m: &MomentPair) -> Result<(Signal, Vec<f64>)> {
    let opts = SpectralOptions {
        project_rho: false,
        ..SpectralOptions::default()
    };
    let r = invert_moments_with(m, &opts)?;
    Ok((r.x_hat, r.rho_hat))
}

pub fn invert_moments_with(m: &MomentPair, opts: &SpectralOptions) -> Result<RecoveryResult> {
    opts.validate()?;
    let dc_sum = check_dc(m, opts.dc_tol)?;
    let w = whiten(m, opts.ps_floor)?;
    let (values, vectors) = sorted_eigen(w.matrix);
    let len = values.len();
    let eigen_gap = (0..len.saturating_sub(1)).map(|i| values[i] - values[i + 1]).fold(f64::INFINITY, f64::min);
    let pick = match opts.eig_selector {
        EigSelector::LargestEigenvalue => 0,
        EigSelector::MostIsolatedEigenvalue => (0..len)
            .max_by(|&a, &b| isolation(&values, a).total_cmp(&isolation(&values, b)))
            .unwrap_or(0),
    };
    let gap = isolation(&values, pick);
    let tol = opts.eig_gap_tol * values[0].abs();
    if gap <= tol {
        return Err(MraError::DegenerateEigengap { gap, tol });
    }
    let v: Vec<f64> = vectors.column(pick).iter().copied().collect();
    let x_hat = recolor_and_scale(&v, &w.power, dc_sum)?;
    let mut rho_hat = fourier_divide(m.m1(), &x_hat);
    if opts.project_rho {
        rho_hat = project_simplex(&rho_hat).into_inner();
    }
    let objective = ls_objective(&x_hat, &rho_hat, m, 1.0);
    Ok(RecoveryResult {
        x_hat,
        rho_hat,
        diagnostics: Diagnostics {
            eigen_gap: if eigen_gap.is_finite() { eigen_gap } else { 0.0 },
            ps_min: w.ps_min,
            ps_floored: w.floored,
            dc_sum,
            iterations: 1,
            objective,
            converged: true,
        },
    })
}

/// Full noisy pipeline: optional reshuffle by a random `theta`, sample
/// moments, inversion, and `rho_hat = C_theta^{-1} rho_hat'`.
pub fn recover(obs: &ObservationSet, opts: &SpectralOptions, rng: &mut impl Rng) -> Result<RecoveryResult> {
    opts.validate()?;
    let inner = SpectralOptions {
        project_rho: false,
        ..opts.clone()
    };
    let (m, theta) = if opts.reshuffle {
        let theta = random_simplex(obs.len(), rng);
        (sample_moments(&reshuffle(obs, &theta, rng)?), Some(theta))
    } else {
        (sample_moments(obs), None)
    };
    let mut result = invert_moments_with(&m, &inner)?;
    if let Some(theta) = theta {
        result.rho_hat = fourier_divide(&result.rho_hat, &theta);
    }
    if opts.project_rho {
        result.rho_hat = project_simplex(&result.rho_hat).into_inner();
    }
    Ok(result)
}

/// Recovery for even `L` when `rho` may have period `L/2`. The top eigenspace
/// of the whitened matrix is then spanned by `R_l x~` and `R_{l+L/2} x~`; both
/// are orthogonal to their own half-length translation, and they are the only
/// such directions in that plane.
pub fn recover_half_periodic(m: &MomentPair) -> Result<Signal> {
    let len = m.len();
    if len % 2 != 0 {
        return Err(MraError::InvalidPeriod { period: len / 2, len });
    }
    let opts = SpectralOptions::default();
    let dc_sum = check_dc(m, opts.dc_tol)?;
    let w = whiten(m, opts.ps_floor)?;
    let (values, vectors) = sorted_eigen(w.matrix);
    let cluster_tol = 1e-8 * values[0].abs().max(f64::MIN_POSITIVE);
    let dim = values.iter().take_while(|&&v| values[0] - v <= cluster_tol).count();
    let half = len / 2;
    let cross = |a: &[f64], b: &[f64]| -> f64 {
        let rb = rotate(b, half as i64);
        a.iter().zip(&rb).map(|(p, q)| p * q).sum()
    };
    let col = |j: usize| -> Vec<f64> { vectors.column(j).iter().copied().collect() };
    let tol = 1e-6;
    let u = match dim {
        1 => {
            let u = col(0);
            let b = cross(&u, &u);
            if b.abs() >= tol {
                return Err(MraError::NoOrthogonalEigenvector { best: b.abs() });
            }
            u
        }
        2 => {
            // Isotropic direction of the form <u, R u> on the plane: exists iff
            // the 2x2 form is indefinite.
            let (u1, u2) = (col(0), col(1));
            let form = nalgebra::Matrix2::new(cross(&u1, &u1), cross(&u1, &u2), cross(&u2, &u1), cross(&u2, &u2));
            let form = (form + form.transpose()) * 0.5;
            let eig = form.symmetric_eigen();
            let (b1, b2) = (eig.eigenvalues[0], eig.eigenvalues[1]);
            if b1 * b2 > tol * tol {
                return Err(MraError::NoOrthogonalEigenvector { best: b1.abs().min(b2.abs()) });
            }
            let (c1, c2) = (b2.abs().sqrt(), b1.abs().sqrt());
            let (e1, e2) = (eig.eigenvectors.column(0), eig.eigenvectors.column(1));
            let a = c1 * e1[0] + c2 * e2[0];
            let b = c1 * e1[1] + c2 * e2[1];
            u1.iter().zip(&u2).map(|(p, q)| a * p + b * q).collect()
        }
        // The claim does not cover larger eigenspaces (e.g. uniform rho).
        _ => return Err(MraError::NoOrthogonalEigenvector { best: f64::NAN }),
    };
    recolor_and_scale(&u, &w.power, dc_sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cyclic::{align_pair, relative_error};
    use crate::model::{gaussian_signal, sample_observations, stream_rng};
    use crate::moments::population_moments;

    #[test]
    fn delta_signal_recovers_distribution() {
        let rho = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let x = Signal::delta(3, 0);
        let m = population_moments(&x, &rho).unwrap();
        let (xh, rh) = invert_moments(&m).unwrap();
        let (a, r) = align_pair(&xh, &rh, &x).unwrap();
        assert!(a.error < 1e-10);
        assert!(r.iter().zip(rho.iter()).all(|(p, q)| (p - q).abs() < 1e-10));
    }

    #[test]
    fn exact_inversion_random_instances() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..100 {
            let len = rng.random_range(5..=32);
            let x = gaussian_signal(len, &mut rng);
            let rho = random_simplex(len, &mut rng);
            let m = population_moments(&x, &rho).unwrap();
            let (xh, rh) = invert_moments(&m).unwrap();
            let (a, r) = align_pair(&xh, &rh, &x).unwrap();
            assert!(a.error / x.norm() < 1e-8, "L = {len}: {}", a.error / x.norm());
            assert!(r.iter().zip(rho.iter()).all(|(p, q)| (p - q).abs() < 1e-8));
        }
    }

    #[test]
    fn whitened_eigenvalues_are_rho() {
        let mut rng = stream_rng(2, 0);
        let x = gaussian_signal(11, &mut rng);
        let rho = random_simplex(11, &mut rng);
        let m = population_moments(&x, &rho).unwrap();
        let (values, _) = sorted_eigen(whiten(&m, 1e-8).unwrap().matrix);
        let mut sorted = rho.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!(values.iter().zip(&sorted).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn shifted_inputs_give_same_orbit() {
        let mut rng = stream_rng(3, 0);
        let x = gaussian_signal(9, &mut rng);
        let rho = random_simplex(9, &mut rng);
        let base = invert_moments(&population_moments(&x, &rho).unwrap()).unwrap();
        let m = population_moments(&crate::cyclic::shift(&x, 4), &rho.shifted(-4)).unwrap();
        let other = invert_moments(&m).unwrap();
        assert!(relative_error(&other.0, &base.0).unwrap() < 1e-10);
    }

    #[test]
    fn most_isolated_selector() {
        let mut rng = stream_rng(4, 0);
        let x = gaussian_signal(10, &mut rng);
        let rho = random_simplex(10, &mut rng);
        let m = population_moments(&x, &rho).unwrap();
        let opts = SpectralOptions {
            eig_selector: EigSelector::MostIsolatedEigenvalue,
            ..SpectralOptions::default()
        };
        let r = invert_moments_with(&m, &opts).unwrap();
        assert!(relative_error(&r.x_hat, &x).unwrap() < 1e-8);
        assert!(Distribution::new(r.rho_hat.clone()).is_ok());
    }

    #[test]
    fn error_conditions() {
        let rho = Distribution::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let zero_mean = Signal::new(vec![1.0, -2.0, 0.5, 0.5]).unwrap();
        let m = population_moments(&zero_mean, &rho).unwrap();
        assert!(matches!(invert_moments(&m), Err(MraError::ZeroDc { .. })));
        // DFT vanishes at k = 2 for (1, 1, 0, 0).
        let holes = Signal::new(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let m = population_moments(&holes, &rho).unwrap();
        assert!(matches!(invert_moments(&m), Err(MraError::VanishingSpectrum { .. })));
        let x = Signal::new(vec![1.0, 0.3, -0.2, 0.6]).unwrap();
        let tied = Distribution::new(vec![0.35, 0.35, 0.2, 0.1]).unwrap();
        let m = population_moments(&x, &tied).unwrap();
        assert!(matches!(invert_moments(&m), Err(MraError::DegenerateEigengap { .. })));
        let bad = SpectralOptions {
            ps_floor: 0.0,
            ..SpectralOptions::default()
        };
        assert!(invert_moments_with(&m, &bad).is_err());
    }

    #[test]
    fn noiseless_pipeline() {
        let mut rng = stream_rng(5, 0);
        let x = gaussian_signal(12, &mut rng);
        let rho = random_simplex(12, &mut rng);
        let obs = sample_observations(&x, &rho, 0.0, 10_000, &mut rng).unwrap();
        let r = recover(&obs, &SpectralOptions::default(), &mut rng).unwrap();
        assert!(relative_error(&r.x_hat, &x).unwrap() < 1e-6);
        assert!(Distribution::new(r.rho_hat.clone()).is_ok());
    }

    /// Rows `R_s x` repeated exactly `counts[s]` times, so the sample
    /// moments equal the population moments of `counts / N`.
    fn exact_rows(x: &Signal, counts: &[usize]) -> ObservationSet {
        let mut data = Vec::new();
        for (s, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                data.extend(rotate(x, s as i64));
            }
        }
        ObservationSet::new(x.len(), data, 0.0, None).unwrap()
    }

    #[test]
    fn reshuffle_resolves_tied_top_entries() {
        let mut rng = stream_rng(6, 0);
        let x = gaussian_signal(6, &mut rng);
        let counts = [30, 30, 20, 10, 6, 4];
        let obs = exact_rows(&x, &counts);
        let off = SpectralOptions {
            reshuffle: false,
            ..SpectralOptions::default()
        };
        assert!(matches!(recover(&obs, &off, &mut rng), Err(MraError::DegenerateEigengap { .. })));
        let on = recover(&obs, &SpectralOptions::default(), &mut rng).unwrap();
        // Reshuffling resamples shifts, so accuracy is limited by N = 100.
        assert!(relative_error(&on.x_hat, &x).unwrap() < 0.5);
    }

    #[test]
    fn stability_is_linear() {
        let eps = [1e-6, 1e-4, 1e-2];
        for t in 0..5 {
            let mut rng = stream_rng(7, t);
            let len = 8;
            let x = gaussian_signal(len, &mut rng);
            let rho = random_simplex(len, &mut rng);
            let m = population_moments(&x, &rho).unwrap();
            let dir1 = gaussian_signal(len, &mut rng).into_inner();
            let raw = DMatrix::from_fn(len, len, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let dir2 = (&raw + raw.transpose()) * 0.5;
            let (n1, n2) = (norm(&dir1), dir2.norm());
            let errs: Vec<f64> = eps
                .iter()
                .map(|&e| {
                    let m1: Vec<f64> = m.m1().iter().zip(&dir1).map(|(a, d)| a + e * d / n1).collect();
                    let m2 = m.m2() + &dir2 * (e / n2);
                    let p = MomentPair::new(m1, m2, MomentSource::Sample { count: 1, sigma: 0.0 }).unwrap();
                    let r = invert_moments_with(&p, &SpectralOptions::default()).unwrap();
                    relative_error(&r.x_hat, &x).unwrap()
                })
                .collect();
            let slope = (errs[1].ln() - errs[0].ln()) / (eps[1].ln() - eps[0].ln());
            assert!((slope - 1.0).abs() < 0.2, "slope {slope}, errors {errs:?}");
        }
    }

    #[test]
    fn half_periodic_recovery() {
        let mut rng = stream_rng(8, 0);
        let rho = Distribution::new(vec![0.4, 0.1, 0.4, 0.1]).unwrap();
        for _ in 0..20 {
            let x = gaussian_signal(4, &mut rng);
            let m = population_moments(&x, &rho).unwrap();
            let xh = recover_half_periodic(&m).unwrap();
            assert!(relative_error(&xh, &x).unwrap() < 1e-8);
        }
        for len in [6, 8, 12] {
            let x = gaussian_signal(len, &mut rng);
            let base = random_simplex(len / 2, &mut rng);
            let periodic = crate::model::periodic_distribution(len, base.as_slice()).unwrap();
            let xh = recover_half_periodic(&population_moments(&x, &periodic).unwrap()).unwrap();
            assert!(relative_error(&xh, &x).unwrap() < 1e-8);
            let generic = random_simplex(len, &mut rng);
            let xh = recover_half_periodic(&population_moments(&x, &generic).unwrap()).unwrap();
            assert!(relative_error(&xh, &x).unwrap() < 1e-8);
        }
        let x = gaussian_signal(8, &mut rng);
        let m = population_moments(&x, &Distribution::uniform(8)).unwrap();
        assert!(matches!(recover_half_periodic(&m), Err(MraError::NoOrthogonalEigenvector { .. })));
        let m = population_moments(&gaussian_signal(5, &mut rng), &Distribution::uniform(5)).unwrap();
        assert!(recover_half_periodic(&m).is_err());
    }

    #[test]
    fn fourier_divide_inverts_convolution() {
        let mut rng = stream_rng(9, 0);
        let a = random_simplex(7, &mut rng);
        let b = random_simplex(7, &mut rng);
        let c = a.convolve(&b);
        let back = fourier_divide(&c, &b);
        assert!(back.iter().zip(a.iter()).all(|(p, q)| (p - q).abs() < 1e-10));
    }
}
