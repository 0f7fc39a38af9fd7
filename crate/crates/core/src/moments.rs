//! First and second moments, the power spectrum, order-`d` moment tensors
//! and the periodic-distribution counterexample.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;

use crate::cyclic::{circular_convolve, dft_slice, fft_plan, idft_real, rotate, Distribution, Signal};
use crate::error::{check_len, MraError, Result};
use crate::model::ObservationSet;

/// Where a [`MomentPair`] came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentSource {
    Population,
    Sample { count: usize, sigma: f64 },
}

/// First moment `m1` (length `L`) and second moment `m2` (`L x L`, symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    m1: Vec<f64>,
    m2: DMatrix<f64>,
    source: MomentSource,
}

impl MomentPair {
    /// `m2` is symmetrized; population input must already be symmetric to 1e-10.
    pub fn new(m1: Vec<f64>, m2: DMatrix<f64>, source: MomentSource) -> Result<Self> {
        let len = m1.len();
        if len == 0 {
            return Err(MraError::InvalidSignal);
        }
        check_len(len, m2.nrows())?;
        check_len(len, m2.ncols())?;
        if m1.iter().chain(m2.iter()).any(|v| !v.is_finite()) {
            return Err(MraError::Format("moments must be finite".into()));
        }
        if source == MomentSource::Population {
            let asym = (&m2 - m2.transpose()).amax();
            if asym > 1e-10 * m2.amax().max(1.0) {
                return Err(MraError::Format(format!("population m2 is not symmetric ({asym:e})")));
            }
        }
        let m2 = (&m2 + m2.transpose()) * 0.5;
        Ok(MomentPair { m1, m2, source })
    }

    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn m1(&self) -> &[f64] {
        &self.m1
    }

    pub fn m2(&self) -> &DMatrix<f64> {
        &self.m2
    }

    pub fn source(&self) -> MomentSource {
        self.source
    }

    pub fn power_spectrum(&self) -> Vec<f64> {
        power_spectrum_from_m2(&self.m2)
    }
}

/// `m1 = x * rho`, `m2 = C_x D_rho C_x^T`.
pub fn population_moments(x: &Signal, rho: &Distribution) -> Result<MomentPair> {
    let len = x.len();
    check_len(len, rho.len())?;
    let m1 = circular_convolve(x, rho);
    let mut m2 = DMatrix::zeros(len, len);
    for (l, &p) in rho.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let v = nalgebra::DVector::from_vec(rotate(x, l as i64));
        m2.ger(p, &v, &v, 1.0);
    }
    MomentPair::new(m1, m2, MomentSource::Population)
}

/// Rows per leaf of the summation tree.
const BLOCK_ROWS: usize = 4096;

struct Partial {
    sum: Vec<f64>,
    outer: DMatrix<f64>,
}

/// Sums rows `[start, end)`. The tree splits at the block boundary nearest
/// the midpoint, so the summation order depends on `N` only, not on the
/// number of threads.
fn partial_sums(obs: &ObservationSet, start: usize, end: usize) -> Partial {
    let len = obs.len();
    let rows = end - start;
    if rows <= BLOCK_ROWS {
        let block = DMatrix::from_row_slice(rows, len, &obs.data()[start * len..end * len]);
        let sum = block.row_sum().iter().copied().collect();
        let outer = block.tr_mul(&block);
        return Partial { sum, outer };
    }
    let mid = start + rows.div_ceil(2 * BLOCK_ROWS) * BLOCK_ROWS;
    let (mut a, b) = rayon::join(|| partial_sums(obs, start, mid), || partial_sums(obs, mid, end));
    for (s, t) in a.sum.iter_mut().zip(&b.sum) {
        *s += t;
    }
    a.outer += b.outer;
    a
}

/// `m1 = mean(y_j)`, `m2 = mean(y_j y_j^T) - sigma^2 I`, symmetrized.
pub fn sample_moments(obs: &ObservationSet) -> MomentPair {
    let n = obs.count();
    let sigma = obs.sigma();
    let Partial { sum, outer } = partial_sums(obs, 0, n);
    let m1 = sum.into_iter().map(|s| s / n as f64).collect();
    let mut m2 = outer / n as f64;
    for i in 0..obs.len() {
        m2[(i, i)] -= sigma * sigma;
    }
    MomentPair::new(m1, m2, MomentSource::Sample { count: n, sigma }).expect("finite observations")
}

/// `L diag(F m2 F^{-1})`, i.e. the DFT of the wrapped diagonal sums
/// `a[d] = sum_i m2[i, i - d]`.
pub fn power_spectrum_from_m2(m2: &DMatrix<f64>) -> Vec<f64> {
    let len = m2.nrows();
    let diag: Vec<f64> = (0..len)
        .map(|d| (0..len).map(|i| m2[(i, (i + len - d) % len)]).sum())
        .collect();
    dft_slice(&diag).into_iter().map(|c| c.re).collect()
}

/// Memory limits for order-`d` tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorBudget {
    pub max_order: usize,
    pub max_entries: usize,
}

impl Default for TensorBudget {
    fn default() -> Self {
        TensorBudget {
            max_order: 3,
            max_entries: 1 << 24,
        }
    }
}

impl TensorBudget {
    fn check(&self, order: usize, len: usize) -> Result<usize> {
        let entries = len.checked_pow(order as u32);
        match entries {
            Some(n) if order >= 1 && order <= self.max_order && n <= self.max_entries => Ok(n),
            _ => Err(MraError::BudgetExceeded {
                order,
                len,
                max_order: self.max_order,
                max_entries: self.max_entries,
            }),
        }
    }
}

/// Dense order-`d` tensor over `Z_L^d`, row-major: the last index varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor {
    order: usize,
    len: usize,
    entries: Vec<f64>,
}

impl MomentTensor {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.order);
        self.entries[index.iter().fold(0, |acc, &k| acc * self.len + k)]
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    /// `|self - other|^2`; panics on shape mismatch.
    pub fn distance_sq(&self, other: &MomentTensor) -> f64 {
        assert_eq!((self.order, self.len), (other.order, other.len));
        self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).powi(2)).sum()
    }

    /// Largest deviation under a swap of two adjacent indices; adjacent
    /// transpositions generate every permutation.
    pub fn asymmetry(&self) -> f64 {
        let (d, len) = (self.order, self.len);
        let mut worst = 0.0f64;
        let mut idx = vec![0usize; d];
        for flat in 0..self.entries.len() {
            let mut r = flat;
            for slot in idx.iter_mut().rev() {
                *slot = r % len;
                r /= len;
            }
            for i in 0..d.saturating_sub(1) {
                idx.swap(i, i + 1);
                worst = worst.max((self.get(&idx) - self.entries[flat]).abs());
                idx.swap(i, i + 1);
            }
        }
        worst
    }
}

fn outer_push<T: Copy + std::ops::Mul<Output = T>>(t: &[T], v: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(t.len() * v.len());
    for &a in t {
        out.extend(v.iter().map(|&b| a * b));
    }
    out
}

pub fn moment_tensor_direct(x: &Signal, rho: &Distribution, d: usize) -> Result<MomentTensor> {
    moment_tensor_direct_with(x, rho, d, &TensorBudget::default())
}

/// `M[k] = sum_l rho[l] prod_i x[k_i - l]`, accumulated as a weighted sum of
/// rank-one tensors `(R_l x)^{(x) d}`.
pub fn moment_tensor_direct_with(x: &Signal, rho: &Distribution, d: usize, budget: &TensorBudget) -> Result<MomentTensor> {
    let len = x.len();
    check_len(len, rho.len())?;
    let size = budget.check(d, len)?;
    let mut entries = vec![0.0; size];
    for (l, &p) in rho.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let v = rotate(x, l as i64);
        let mut t = vec![p];
        for _ in 0..d {
            t = outer_push(&t, &v);
        }
        for (e, a) in entries.iter_mut().zip(t) {
            *e += a;
        }
    }
    Ok(MomentTensor { order: d, len, entries })
}

/// The `d`-dimensional DFT of the moment tensor,
/// `Frho[(a_1 + ... + a_d) mod L] prod_j Fx[a_j]`, row-major.
pub fn moment_fourier_array(x: &Signal, rho: &Distribution, d: usize, budget: &TensorBudget) -> Result<Vec<Complex64>> {
    let len = x.len();
    check_len(len, rho.len())?;
    let size = budget.check(d, len)?;
    let fx = dft_slice(x);
    let frho = dft_slice(rho);
    let mut out = Vec::with_capacity(size);
    let mut idx = vec![0usize; d];
    for _ in 0..size {
        let total = idx.iter().sum::<usize>() % len;
        out.push(idx.iter().fold(frho[total], |acc, &a| acc * fx[a]));
        for slot in idx.iter_mut().rev() {
            *slot += 1;
            if *slot < len {
                break;
            }
            *slot = 0;
        }
    }
    Ok(out)
}

pub fn moment_tensor_fourier(x: &Signal, rho: &Distribution, d: usize) -> Result<MomentTensor> {
    moment_tensor_fourier_with(x, rho, d, &TensorBudget::default())
}

/// Inverts [`moment_fourier_array`] with one batch of length-`L` inverse FFTs
/// per axis.
pub fn moment_tensor_fourier_with(x: &Signal, rho: &Distribution, d: usize, budget: &TensorBudget) -> Result<MomentTensor> {
    let len = x.len();
    let mut data = moment_fourier_array(x, rho, d, budget)?;
    let plan = fft_plan(len, true);
    let mut line = vec![Complex64::default(); len];
    for axis in 0..d {
        let stride = len.pow((d - 1 - axis) as u32);
        let block = stride * len;
        for base in (0..data.len()).step_by(block) {
            for off in 0..stride {
                for (i, slot) in line.iter_mut().enumerate() {
                    *slot = data[base + off + i * stride];
                }
                plan.process(&mut line);
                for (i, v) in line.iter().enumerate() {
                    data[base + off + i * stride] = *v / len as f64;
                }
            }
        }
    }
    Ok(MomentTensor {
        order: d,
        len,
        entries: data.into_iter().map(|c| c.re).collect(),
    })
}

/// Tangent direction `(z, theta)` at `(x, rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDirection {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
}

impl PerturbationDirection {
    pub fn new(z: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        check_len(z.len(), theta.len())?;
        Ok(PerturbationDirection { z, theta })
    }

    /// `theta` sums to zero and does not push `rho` below zero.
    pub fn validate_against(&self, rho: &Distribution) -> Result<()> {
        check_len(rho.len(), self.theta.len())?;
        let total: f64 = self.theta.iter().sum();
        let scale = self.theta.iter().map(|t| t.abs()).sum::<f64>().max(1.0);
        if total.abs() > 1e-12 * scale {
            return Err(MraError::InvalidDistribution(format!(
                "direction theta sums to {total:e}, not 0"
            )));
        }
        if rho.iter().zip(&self.theta).any(|(&p, &t)| p == 0.0 && t < 0.0) {
            return Err(MraError::InvalidDistribution(
                "direction theta is negative where rho vanishes".into(),
            ));
        }
        Ok(())
    }
}

pub fn directional_derivative(
    x: &Signal,
    rho: &Distribution,
    v: &PerturbationDirection,
    d: usize,
) -> Result<MomentTensor> {
    directional_derivative_with(x, rho, v, d, &TensorBudget::default())
}

/// `sum_l [theta[l] prod_i x[k_i - l] + rho[l] sum_i z[k_i - l] prod_{m != i} x[k_m - l]]`,
/// built per shift by the product rule on `(u + h w)^{(x) d}`.
pub fn directional_derivative_with(
    x: &Signal,
    rho: &Distribution,
    v: &PerturbationDirection,
    d: usize,
    budget: &TensorBudget,
) -> Result<MomentTensor> {
    let len = x.len();
    check_len(len, rho.len())?;
    check_len(len, v.z.len())?;
    v.validate_against(rho)?;
    let size = budget.check(d, len)?;
    let mut entries = vec![0.0; size];
    for l in 0..len {
        let (p, th) = (rho[l], v.theta[l]);
        if p == 0.0 && th == 0.0 {
            continue;
        }
        let u = rotate(x, l as i64);
        let w = rotate(&v.z, l as i64);
        let mut t0 = vec![1.0];
        let mut t1 = vec![0.0];
        for _ in 0..d {
            let mut next1 = outer_push(&t1, &u);
            for (a, b) in next1.iter_mut().zip(outer_push(&t0, &w)) {
                *a += b;
            }
            t1 = next1;
            t0 = outer_push(&t0, &u);
        }
        for ((e, a), b) in entries.iter_mut().zip(t0).zip(t1) {
            *e += th * a + p * b;
        }
    }
    Ok(MomentTensor { order: d, len, entries })
}

/// Flips the sign of every Fourier coefficient outside `{t L / ell}`. Against
/// any `ell`-periodic distribution the result shares the first two moments
/// of `x1` while leaving its orbit.
pub fn periodic_counterexample(x1: &Signal, ell: usize) -> Result<Signal> {
    let len = x1.len();
    if ell == 0 || len % ell != 0 || 2 * ell >= len {
        return Err(MraError::InvalidPeriod { period: ell, len });
    }
    let step = len / ell;
    let coeffs: Vec<Complex64> = dft_slice(x1)
        .into_iter()
        .enumerate()
        .map(|(k, c)| if k % step == 0 { c } else { -c })
        .collect();
    Ok(Signal::from_vec(idft_real(&coeffs)))
}
