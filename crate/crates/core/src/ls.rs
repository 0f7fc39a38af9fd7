//! Least-squares fit of `(x, rho)` to estimated first and second moments,
//! with `rho` constrained to the probability simplex.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::cyclic::{circular_convolve, cross_correlate, dft_slice, idft_real, Distribution, Signal};
use crate::error::{check_len, MraError, Result};
use crate::model::stream_rng;
use crate::moments::{MomentPair, MomentSource};
use crate::spectral::{Diagnostics, RecoveryResult};

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_simplex(v: &[f64]) -> Distribution {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    let out: Vec<f64> = v.iter().map(|&a| (a - tau).max(0.0)).collect();
    Distribution::from_weights(out).expect("projection has positive mass")
}

/// `C_x D_rho C_x^T`, built column by column as `x * (rho . R_j-row of C_x)`.
fn model_m2(x: &[f64], rho: &[f64]) -> DMatrix<f64> {
    let len = x.len();
    let fx = dft_slice(x);
    let mut out = DMatrix::zeros(len, len);
    let mut w = vec![0.0; len];
    for j in 0..len {
        for (l, slot) in w.iter_mut().enumerate() {
            *slot = rho[l] * x[(j + len - l) % len];
        }
        let fw = dft_slice(&w);
        let col = idft_real(&fx.iter().zip(&fw).map(|(a, b)| a * b).collect::<Vec<Complex64>>());
        out.column_mut(j).copy_from_slice(&col);
    }
    out
}

fn residuals(x: &[f64], rho: &[f64], m: &MomentPair) -> (DMatrix<f64>, Vec<f64>) {
    let a = model_m2(x, rho) - m.m2();
    let r = circular_convolve(x, rho).iter().zip(m.m1()).map(|(p, q)| p - q).collect();
    (a, r)
}

/// `||m2 - C_x D_rho C_x^T||_F^2 + lambda ||m1 - C_x rho||^2`.
pub fn ls_objective(x: &[f64], rho: &[f64], m: &MomentPair, lambda: f64) -> f64 {
    let (a, r) = residuals(x, rho, m);
    a.norm_squared() + lambda * r.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient blocks `(d/dx, d/drho)` of [`ls_objective`].
///
/// With `A = C_x D_rho C_x^T - m2`, `r = C_x rho - m1` and `G = A C_x`:
/// `d/dx[m] = 4 sum_l rho[l] G[m + l, l] + 2 lambda C_rho^T r` and
/// `d/drho[l] = 2 sum_i x[i - l] G[i, l] + 2 lambda (C_x^T r)[l]`.
pub fn ls_gradient(x: &[f64], rho: &[f64], m: &MomentPair, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (_, gx, gr) = objective_and_gradient(x, rho, m, lambda);
    (gx, gr)
}

fn objective_and_gradient(x: &[f64], rho: &[f64], m: &MomentPair, lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let len = x.len();
    let (a, r) = residuals(x, rho, m);
    let f = a.norm_squared() + lambda * r.iter().map(|v| v * v).sum::<f64>();
    // Row i of G is the cross-correlation of x with row i of A.
    let g: Vec<Vec<f64>> = (0..len)
        .map(|i| {
            let row: Vec<f64> = a.row(i).iter().copied().collect();
            cross_correlate(x, &row)
        })
        .collect();
    let corr_rho = cross_correlate(rho, &r);
    let corr_x = cross_correlate(x, &r);
    let gx = (0..len)
        .map(|mm| {
            let s: f64 = (0..len).map(|l| rho[l] * g[(mm + l) % len][l]).sum();
            4.0 * s + 2.0 * lambda * corr_rho[mm]
        })
        .collect();
    let gr = (0..len)
        .map(|l| {
            let s: f64 = (0..len).map(|i| x[(i + len - l) % len] * g[i][l]).sum();
            2.0 * s + 2.0 * lambda * corr_x[l]
        })
        .collect();
    (f, gx, gr)
}

/// Weight `1 / (L (1 + 3 sigma^2))` balancing the two residuals.
pub fn auto_lambda(len: usize, sigma: f64) -> f64 {
    1.0 / (len as f64 * (1.0 + 3.0 * sigma * sigma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsOptions {
    /// `None` selects [`auto_lambda`].
    pub lambda: Option<f64>,
    pub max_iters: usize,
    pub restarts: usize,
    /// Stop once an accepted step lowers the objective by less than
    /// `tol * max(f, tiny)`.
    pub tol: f64,
    /// Armijo sufficient-decrease factor.
    pub armijo: f64,
    /// Step shrink factor on rejection.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for LsOptions {
    fn default() -> Self {
        LsOptions {
            lambda: None,
            max_iters: 2000,
            restarts: 5,
            tol: 1e-10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
        }
    }
}

impl LsOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(MraError::InvalidConfig(format!("lambda = {l} must be positive")));
            }
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(MraError::InvalidConfig("max_iters and restarts must be >= 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(MraError::InvalidConfig("line-search factors must lie in (0, 1)".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(MraError::InvalidConfig("tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// One projected-gradient descent run.
#[derive(Debug, Clone, PartialEq)]
pub struct LsFit {
    pub x: Vec<f64>,
    pub rho: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// Projected gradient from `(x0, rho0)`: Barzilai-Borwein trial step, then
/// backtracking until `f(z') <= f(z) + <g, z' - z> + |z' - z|^2 / (2t)` and
/// `f(z') <= f(z) - armijo |z' - z|^2 / t`.
pub fn ls_descent(m: &MomentPair, x0: &[f64], rho0: &[f64], lambda: f64, opts: &LsOptions) -> Result<LsFit> {
    let len = m.len();
    check_len(len, x0.len())?;
    check_len(len, rho0.len())?;
    let mut x = x0.to_vec();
    let mut rho = project_simplex(rho0).into_inner();
    let (mut f, mut gx, mut gr) = objective_and_gradient(&x, &rho, m, lambda);
    let mut history = vec![f];
    let mut step = 1.0 / (1.0 + gx.iter().chain(&gr).map(|v| v * v).sum::<f64>().sqrt());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let mut t = step;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&gx).map(|(a, g)| a - t * g).collect();
            let rn = project_simplex(&rho.iter().zip(&gr).map(|(a, g)| a - t * g).collect::<Vec<_>>()).into_inner();
            let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let dr: Vec<f64> = rn.iter().zip(&rho).map(|(a, b)| a - b).collect();
            let d2: f64 = dx.iter().chain(&dr).map(|v| v * v).sum();
            if d2 == 0.0 {
                break;
            }
            let lin: f64 = dx.iter().zip(&gx).chain(dr.iter().zip(&gr)).map(|(a, b)| a * b).sum();
            let fnew = ls_objective(&xn, &rn, m, lambda);
            if fnew <= f + lin + d2 / (2.0 * t) && fnew <= f - opts.armijo * d2 / t {
                accepted = Some((xn, rn, fnew, dx, dr));
                break;
            }
            t *= opts.backtrack;
        }
        let Some((xn, rn, fnew, dx, dr)) = accepted else {
            // No admissible step: stationary to working precision.
            converged = true;
            break;
        };
        let (_, gxn, grn) = objective_and_gradient(&xn, &rn, m, lambda);
        let sy: f64 = dx
            .iter()
            .zip(gxn.iter().zip(&gx))
            .chain(dr.iter().zip(grn.iter().zip(&gr)))
            .map(|(s, (a, b))| s * (a - b))
            .sum();
        let ss: f64 = dx.iter().chain(&dr).map(|v| v * v).sum();
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { t * 2.0 };
        let decrease = f - fnew;
        x = xn;
        rho = rn;
        f = fnew;
        gx = gxn;
        gr = grn;
        history.push(f);
        if decrease <= opts.tol * f.max(1e-300) || f == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(LsFit {
        x,
        rho,
        objective: f,
        iterations,
        converged,
        history,
    })
}

/// Random start matching the two scale facts the moments give away: the
/// entries of `x` sum to `Sum(m1)` and `|x|^2 = tr m2` for population
/// moments. The zero-mean part of `x0` is Gaussian; `rho0` lies halfway
/// between uniform and a flat Dirichlet draw.
pub fn ls_initial_point(m: &MomentPair, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let len = m.len();
    let n = len as f64;
    let g: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let g_mean = g.iter().sum::<f64>() / n;
    let fluct: Vec<f64> = g.iter().map(|v| v - g_mean).collect();
    let dc = m.m1().iter().sum::<f64>() / n;
    let energy = (m.m2().trace() - n * dc * dc).max(0.0);
    let fnorm = crate::cyclic::norm(&fluct);
    let scale = if energy > 0.0 && fnorm > 0.0 { energy.sqrt() / fnorm } else { 1.0 };
    let x = fluct.iter().map(|v| dc + scale * v).collect();
    let e: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = e.iter().sum();
    let rho = e.iter().map(|v| 0.5 / n + 0.5 * v / total).collect();
    (x, rho)
}

/// The second-moment residual is even in `x`, so descent can settle on
/// `-R_s x`, held there only by the weaker first-moment term. When flipping
/// the sign lowers the objective, descent resumes from the flipped point.
fn reflect_and_continue(m: &MomentPair, fit: LsFit, lambda: f64, opts: &LsOptions) -> Result<LsFit> {
    let neg: Vec<f64> = fit.x.iter().map(|v| -v).collect();
    if ls_objective(&neg, &fit.rho, m, lambda) >= fit.objective {
        return Ok(fit);
    }
    let more = ls_descent(m, &neg, &fit.rho, lambda, opts)?;
    let mut history = fit.history;
    history.extend(more.history);
    Ok(LsFit {
        iterations: fit.iterations + more.iterations,
        history,
        ..more
    })
}

/// Best of `opts.restarts` projected-gradient runs from random starts. Each
/// restart draws from its own stream, so the result does not depend on
/// scheduling.
pub fn run_ls(m: &MomentPair, opts: &LsOptions, rng: &mut impl Rng) -> Result<RecoveryResult> {
    Ok(run_ls_all(m, opts, rng)?.0)
}

/// As [`run_ls`], also returning every restart's fit.
pub fn run_ls_all(m: &MomentPair, opts: &LsOptions, rng: &mut impl Rng) -> Result<(RecoveryResult, Vec<LsFit>)> {
    opts.validate()?;
    let sigma = match m.source() {
        MomentSource::Population => 0.0,
        MomentSource::Sample { sigma, .. } => sigma,
    };
    let lambda = opts.lambda.unwrap_or_else(|| auto_lambda(m.len(), sigma));
    let key: u64 = rng.random();
    let fits = (0..opts.restarts as u64)
        .into_par_iter()
        .map(|r| {
            let mut local = stream_rng(key, r);
            let (x0, rho0) = ls_initial_point(m, &mut local);
            let fit = ls_descent(m, &x0, &rho0, lambda, opts)?;
            reflect_and_continue(m, fit, lambda, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let best = fits
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one restart");
    let result = RecoveryResult {
        x_hat: Signal::new(best.x.clone()).map_err(|_| MraError::InvalidConfig("least squares diverged".into()))?,
        rho_hat: best.rho.clone(),
        diagnostics: Diagnostics {
            iterations: best.iterations,
            objective: best.objective,
            converged: best.converged,
            dc_sum: m.m1().iter().sum(),
            ..Diagnostics::default()
        },
    };
    Ok((result, fits))
}
