//! Expectation-maximization over the latent shifts, either updating the shift
//! distribution jointly with the signal or holding it at uniform.

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::cyclic::{dft_slice, fft_plan, idft_complex, Distribution, Signal};
use crate::error::{check_len, MraError, Result};
use crate::model::ObservationSet;
use crate::spectral::{recover, Diagnostics, RecoveryResult, SpectralOptions};

/// Floor applied to distribution iterates before renormalizing.
const RHO_FLOOR: f64 = 1e-12;
/// Observations per leaf of the reduction tree.
const BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmVariant {
    /// Signal and distribution are both updated.
    #[default]
    Modified,
    /// The distribution is held at uniform.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum EmInit {
    /// Unit-norm Gaussian signal, uniform distribution.
    #[default]
    RandomNormal,
    /// Spectral estimate; falls back to `RandomNormal` if inversion fails.
    SpectralWarmStart,
    Provided(Signal, Distribution),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once `|x_{k+1} - x_k| + |rho_{k+1} - rho_k|` falls below this.
    pub tol: f64,
    pub init: EmInit,
    pub variant: EmVariant,
    /// Squared-extrapolation cycles of three passes in place of single
    /// updates. Each cycle keeps the extrapolated point only if its
    /// likelihood beats that of the plain two-step iterate, so ascent and
    /// the set of fixed points are unchanged.
    pub accelerate: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 500,
            tol: 1e-8,
            init: EmInit::RandomNormal,
            variant: EmVariant::Modified,
            accelerate: false,
        }
    }
}

impl EmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(MraError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(MraError::InvalidConfig(format!("tol = {} must be positive", self.tol)));
        }
        Ok(())
    }
}

/// Current iterate with the marginal log-likelihood evaluated at it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub x: Signal,
    pub rho: Distribution,
    pub loglik: f64,
    pub iter: usize,
}

/// Lengths up to this use dense `L x L` products instead of batched FFTs.
const DENSE_MAX_LEN: usize = 48;

/// Observations with their energies and, for long signals, spectra
/// precomputed once per run.
struct EmData<'a> {
    len: usize,
    count: usize,
    sigma: f64,
    rows: &'a [f64],
    /// Row-major DFTs of the observations; empty on the dense path.
    spectra: Vec<Complex64>,
    energy: Vec<f64>,
}

impl<'a> EmData<'a> {
    fn new(obs: &'a ObservationSet) -> Result<Self> {
        let sigma = obs.sigma();
        if !(sigma > 0.0) {
            return Err(MraError::ZeroSigma(sigma));
        }
        let len = obs.len();
        let spectra = if len <= DENSE_MAX_LEN {
            Vec::new()
        } else {
            let mut s: Vec<Complex64> = obs.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft_plan(len, false).process(&mut s);
            s
        };
        let energy = obs.rows().map(|r| r.iter().map(|v| v * v).sum()).collect();
        Ok(EmData {
            len,
            count: obs.count(),
            sigma,
            rows: obs.data(),
            spectra,
            energy,
        })
    }

    fn dense(&self) -> bool {
        self.spectra.is_empty()
    }

    /// Observations `[start, end)` as the columns of an `L x rows` view.
    fn block(&self, start: usize, end: usize) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.rows[start * self.len..end * self.len], self.len, end - start)
    }
}

/// Sums over a block of observations.
struct Accum {
    loglik: f64,
    mass: Vec<f64>,
    /// `sum_j sum_l w_jl R_{-l} y_j`.
    back: Vec<f64>,
}

/// Per-iteration constants shared by every observation.
struct Frame {
    fx_conj: Vec<Complex64>,
    /// Column `l` is `R_l x`; used on the dense path.
    shifts: DMatrix<f64>,
    x_energy: f64,
    log_prior: Vec<f64>,
}

impl Frame {
    fn new(x: &[f64], rho: &[f64], variant: EmVariant) -> Self {
        let len = x.len();
        let log_prior = match variant {
            EmVariant::Modified => rho.iter().map(|p| p.ln()).collect(),
            EmVariant::Uniform => vec![-(len as f64).ln(); len],
        };
        Frame {
            fx_conj: dft_slice(x).into_iter().map(|c| c.conj()).collect(),
            shifts: DMatrix::from_fn(len, len, |i, l| x[(i + len - l) % len]),
            x_energy: x.iter().map(|v| v * v).sum(),
            log_prior,
        }
    }
}

/// `c[r * L + l] = <R_l x, y_{start + r}>`.
fn block_correlations(data: &EmData, frame: &Frame, start: usize, end: usize) -> Vec<f64> {
    let len = data.len;
    if data.dense() {
        let c = frame.shifts.tr_mul(&data.block(start, end));
        return c.as_slice().to_vec();
    }
    let mut buf: Vec<Complex64> = data.spectra[start * len..end * len]
        .chunks_exact(len)
        .flat_map(|fy| fy.iter().zip(&frame.fx_conj).map(|(a, b)| a * b))
        .collect();
    fft_plan(len, true).process(&mut buf);
    buf.iter().map(|c| c.re / len as f64).collect()
}

/// Posterior weights for observations `[start, end)`, row-major, with the
/// per-row log normalizers.
fn block_weights(data: &EmData, frame: &Frame, start: usize, end: usize) -> (Vec<f64>, Vec<f64>) {
    let len = data.len;
    let rows = end - start;
    let mut weights = block_correlations(data, frame, start, end);
    let inv_two_var = 1.0 / (2.0 * data.sigma * data.sigma);
    let mut lse = Vec::with_capacity(rows);
    for (r, row) in weights.chunks_exact_mut(len).enumerate() {
        let y_energy = data.energy[start + r];
        for (w, lp) in row.iter_mut().zip(&frame.log_prior) {
            *w = (2.0 * *w - frame.x_energy - y_energy) * inv_two_var + lp;
        }
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for w in row.iter_mut() {
            *w = (*w - top).exp();
            total += *w;
        }
        for w in row.iter_mut() {
            *w /= total;
        }
        lse.push(top + total.ln());
    }
    (weights, lse)
}

fn leaf(data: &EmData, frame: &Frame, start: usize, end: usize) -> Accum {
    let len = data.len;
    let (weights, lse) = block_weights(data, frame, start, end);
    let mut mass = vec![0.0; len];
    for row in weights.chunks_exact(len) {
        for (m, w) in mass.iter_mut().zip(row) {
            *m += w;
        }
    }
    let back = if data.dense() {
        // b[l, k] = sum_j w_jl y_j[k]; the back-shifted sum at i collects b[l, i + l].
        let wt = DMatrixView::from_slice(&weights, len, end - start);
        let b = wt * data.block(start, end).transpose();
        (0..len).map(|i| (0..len).map(|l| b[(l, (i + l) % len)]).sum()).collect()
    } else {
        let mut fw: Vec<Complex64> = weights.iter().map(|&w| Complex64::new(w, 0.0)).collect();
        fft_plan(len, false).process(&mut fw);
        // F(sum_l w_l R_{-l} y) = Fy . conj(Fw).
        let mut back = vec![Complex64::default(); len];
        for (fy, fw) in data.spectra[start * len..end * len].chunks_exact(len).zip(fw.chunks_exact(len)) {
            for ((b, a), w) in back.iter_mut().zip(fy).zip(fw) {
                *b += a * w.conj();
            }
        }
        idft_complex(&back).into_iter().map(|c| c.re).collect()
    };
    let constant = -0.5 * len as f64 * (2.0 * std::f64::consts::PI * data.sigma * data.sigma).ln();
    let loglik = lse.iter().map(|v| v + constant).sum();
    Accum { loglik, mass, back }
}

/// Fixed pairwise tree over blocks, so the reduction order depends on `N` only.
fn reduce(data: &EmData, frame: &Frame, start: usize, end: usize) -> Accum {
    let rows = end - start;
    if rows <= BLOCK {
        return leaf(data, frame, start, end);
    }
    let mid = start + rows.div_ceil(2 * BLOCK) * BLOCK;
    let (mut a, b) = rayon::join(|| reduce(data, frame, start, mid), || reduce(data, frame, mid, end));
    a.loglik += b.loglik;
    for (p, q) in a.mass.iter_mut().zip(&b.mass) {
        *p += q;
    }
    for (p, q) in a.back.iter_mut().zip(&b.back) {
        *p += q;
    }
    a
}

/// One pass over the data: the log-likelihood at `(x, rho)` and the next
/// iterate.
fn pass(data: &EmData, x: &[f64], rho: &[f64], variant: EmVariant) -> (f64, Signal, Distribution) {
    let frame = Frame::new(x, rho, variant);
    let acc = reduce(data, &frame, 0, data.count);
    let n = data.count as f64;
    let x_next = Signal::from_vec(acc.back.iter().map(|v| v / n).collect());
    let rho_next = match variant {
        EmVariant::Modified => floored(acc.mass),
        EmVariant::Uniform => Distribution::uniform(data.len),
    };
    (acc.loglik, x_next, rho_next)
}

/// `W / sum(W)` with every entry raised to `RHO_FLOOR`, so that support lost
/// to underflow can return.
fn floored(w: Vec<f64>) -> Distribution {
    let total: f64 = w.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0) {
        return Distribution::uniform(w.len());
    }
    Distribution::from_weights(w.iter().map(|v| (v.max(0.0) / total).max(RHO_FLOOR)).collect()).expect("positive weights")
}

/// Posterior shift probabilities, `N x L`, each row summing to one.
pub fn posterior_weights(x: &Signal, rho: &Distribution, obs: &ObservationSet, variant: EmVariant) -> Result<DMatrix<f64>> {
    check_len(obs.len(), x.len())?;
    check_len(obs.len(), rho.len())?;
    let data = EmData::new(obs)?;
    let frame = Frame::new(x, rho, variant);
    let (w, _) = block_weights(&data, &frame, 0, data.count);
    Ok(DMatrix::from_row_slice(data.count, data.len, &w))
}

/// `sum_j log sum_l rho[l] N(y_j; R_l x, sigma^2 I)`, constants included.
pub fn marginal_log_likelihood(x: &Signal, rho: &Distribution, obs: &ObservationSet) -> Result<f64> {
    check_len(obs.len(), x.len())?;
    check_len(obs.len(), rho.len())?;
    let data = EmData::new(obs)?;
    Ok(pass(&data, x, rho, EmVariant::Modified).0)
}

/// Maximizer `w / sum(w)` of `sum_l w[l] log q[l]` over the simplex.
pub fn simplex_weighted_log_max(w: &[f64]) -> Result<Distribution> {
    if let Some(&bad) = w.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(MraError::NonPositiveWeight(bad));
    }
    Distribution::from_weights(w.to_vec())
}

fn log_prior_dist(state_rho: &Distribution, variant: EmVariant) -> Distribution {
    match variant {
        EmVariant::Modified => state_rho.clone(),
        EmVariant::Uniform => Distribution::uniform(state_rho.len()),
    }
}

/// One EM update; the returned state carries the log-likelihood at its own
/// parameters.
pub fn em_step(state: &EmState, obs: &ObservationSet, opts: &EmOptions) -> Result<EmState> {
    check_len(obs.len(), state.x.len())?;
    check_len(obs.len(), state.rho.len())?;
    let data = EmData::new(obs)?;
    let (_, x, rho) = pass(&data, &state.x, &state.rho, opts.variant);
    let loglik = pass(&data, &x, &log_prior_dist(&rho, opts.variant), opts.variant).0;
    Ok(EmState {
        x,
        rho,
        loglik,
        iter: state.iter + 1,
    })
}

/// Starting point for [`run_em`].
pub fn initial_state(obs: &ObservationSet, opts: &EmOptions, rng: &mut impl Rng) -> Result<EmState> {
    let len = obs.len();
    let random = |rng: &mut dyn rand::RngCore| {
        let g: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = crate::cyclic::norm(&g);
        (Signal::from_vec(g.into_iter().map(|v| v / n).collect()), Distribution::uniform(len))
    };
    let (x, rho) = match &opts.init {
        EmInit::RandomNormal => random(rng),
        EmInit::SpectralWarmStart => match recover(obs, &SpectralOptions::default(), rng) {
            Ok(r) => (r.x_hat.clone(), r.rho_distribution()),
            Err(_) => random(rng),
        },
        EmInit::Provided(x, rho) => {
            check_len(len, x.len())?;
            check_len(len, rho.len())?;
            (x.clone(), rho.clone())
        }
    };
    let rho = match opts.variant {
        EmVariant::Modified => Distribution::from_weights(rho.iter().map(|v| v.max(RHO_FLOOR)).collect())?,
        EmVariant::Uniform => Distribution::uniform(len),
    };
    Ok(EmState {
        x,
        rho,
        loglik: f64::NAN,
        iter: 0,
    })
}

/// Full EM run with the log-likelihood of every iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    pub result: RecoveryResult,
    /// `loglik[k]` is evaluated at iterate `k`, starting from the initial point.
    pub loglik: Vec<f64>,
}

pub fn run_em(obs: &ObservationSet, opts: &EmOptions, rng: &mut impl Rng) -> Result<RecoveryResult> {
    Ok(run_em_traced(obs, opts, rng)?.result)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// `theta0 - 2 a r + a^2 v` with `r = theta1 - theta0`, `v = theta2 - 2 theta1 + theta0`
/// and `a = -|r| / |v|` capped at -1, where `a = -1` reproduces `theta2`.
fn extrapolate(p0: &[f64], p1: &[f64], p2: &[f64], a: f64) -> Vec<f64> {
    p0.iter()
        .zip(p1)
        .zip(p2)
        .map(|((t0, t1), t2)| {
            let r = t1 - t0;
            let v = t2 - 2.0 * t1 + t0;
            t0 - 2.0 * a * r + a * a * v
        })
        .collect()
}

fn step_ratio(p0: &[&[f64]], p1: &[&[f64]], p2: &[&[f64]]) -> Option<f64> {
    let (mut rr, mut vv) = (0.0, 0.0);
    for ((a, b), c) in p0.iter().zip(p1).zip(p2) {
        for ((t0, t1), t2) in a.iter().zip(b.iter()).zip(c.iter()) {
            rr += (t1 - t0).powi(2);
            vv += (t2 - 2.0 * t1 + t0).powi(2);
        }
    }
    (vv > 0.0).then(|| (-(rr / vv).sqrt()).min(-1.0))
}

/// Each pass yields the likelihood of the current iterate together with the
/// next one, so a run of `k` updates costs `k + 1` passes. `max_iters`
/// bounds the number of updating passes in both modes.
pub fn run_em_traced(obs: &ObservationSet, opts: &EmOptions, rng: &mut impl Rng) -> Result<EmTrace> {
    opts.validate()?;
    let data = EmData::new(obs)?;
    let start = initial_state(obs, opts, rng)?;
    let (mut x, mut rho) = (start.x, start.rho);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let (ll, x1, rho1) = pass(&data, &x, &rho, opts.variant);
        history.push(ll);
        if converged || iterations == opts.max_iters {
            break;
        }
        iterations += 1;
        converged = distance(&x, &x1) + distance(&rho, &rho1) < opts.tol;
        if converged || !opts.accelerate || iterations + 2 > opts.max_iters {
            x = x1;
            rho = rho1;
            continue;
        }
        let (ll1, x2, rho2) = pass(&data, &x1, &rho1, opts.variant);
        iterations += 1;
        let Some(a) = step_ratio(&[&x, &rho], &[&x1, &rho1], &[&x2, &rho2]) else {
            x = x2;
            rho = rho2;
            continue;
        };
        let xe = Signal::from_vec(extrapolate(&x, &x1, &x2, a));
        let rhoe = match opts.variant {
            EmVariant::Modified => floored(extrapolate(&rho, &rho1, &rho2, a)),
            EmVariant::Uniform => rho2.clone(),
        };
        let (lle, x3, rho3) = pass(&data, &xe, &rhoe, opts.variant);
        iterations += 1;
        if lle.is_finite() && lle >= ll1 {
            x = x3;
            rho = rho3;
        } else {
            x = x2;
            rho = rho2;
        }
    }
    let loglik = *history.last().expect("at least one pass");
    Ok(EmTrace {
        result: RecoveryResult {
            x_hat: x,
            rho_hat: rho.into_inner(),
            diagnostics: Diagnostics {
                iterations,
                objective: loglik,
                converged,
                dc_sum: obs.rows().flatten().sum::<f64>() / obs.count() as f64,
                ..Diagnostics::default()
            },
        },
        loglik: history,
    })
}
