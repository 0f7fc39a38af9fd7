//! Synthetic data for the observation model `y_j = R_{s_j} x + sigma g_j`,
//! shift-distribution families and the reshuffling step.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cyclic::{rotate, wrap, Distribution, Signal};
use crate::error::{check_len, MraError, Result};

/// Generator used by every stochastic routine.
pub type MraRng = ChaCha8Rng;

/// Deterministic per-stream generator: `seed` picks the key, `stream` the
/// ChaCha stream, so trial `i` of an experiment always sees the same draws
/// regardless of how trials are scheduled across threads.
pub fn stream_rng(seed: u64, stream: u64) -> MraRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `N x L` measurements with their noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    len: usize,
    data: Vec<f64>,
    sigma: f64,
    true_shifts: Option<Vec<usize>>,
}

impl ObservationSet {
    /// `data` is row-major with rows of length `len`.
    pub fn new(len: usize, data: Vec<f64>, sigma: f64, true_shifts: Option<Vec<usize>>) -> Result<Self> {
        if len == 0 || data.is_empty() || data.len() % len != 0 {
            return Err(MraError::InvalidConfig(format!(
                "data of size {} is not a non-empty multiple of L = {len}",
                data.len()
            )));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(MraError::InvalidConfig(format!("sigma = {sigma} must be >= 0")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MraError::InvalidConfig("observations must be finite".into()));
        }
        let n = data.len() / len;
        if let Some(s) = &true_shifts {
            check_len(n, s.len())?;
            if s.iter().any(|&v| v >= len) {
                return Err(MraError::InvalidConfig("true shift out of range".into()));
            }
        }
        Ok(ObservationSet {
            len,
            data,
            sigma,
            true_shifts,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], sigma: f64) -> Result<Self> {
        let len = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * len);
        for r in rows {
            check_len(len, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(len, data, sigma, None)
    }

    /// Signal length `L`.
    pub fn len(&self) -> usize {
        self.len
    }

    /// Number of measurements `N`.
    pub fn count(&self) -> usize {
        self.data.len() / self.len
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.len..(j + 1) * self.len]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.len)
    }

    pub fn true_shifts(&self) -> Option<&[usize]> {
        self.true_shifts.as_deref()
    }

    pub fn without_shifts(mut self) -> Self {
        self.true_shifts = None;
        self
    }
}

/// `rho[t] ∝ exp(-t^2 / s^2)` with `t` taken as its signed representative in
/// `(-L/2, L/2]`, so the mass is centred on shift 0.
pub fn wrapped_gaussian_distribution(len: usize, s: f64) -> Result<Distribution> {
    if !(s > 0.0) {
        return Err(MraError::InvalidConfig(format!("concentration s = {s} must be positive")));
    }
    let w = (0..len)
        .map(|t| {
            let signed = if 2 * t > len { t as f64 - len as f64 } else { t as f64 };
            (-(signed * signed) / (s * s)).exp()
        })
        .collect();
    Distribution::from_weights(w)
}

/// I.i.d. `Uniform[0, 1)` entries normalized by their sum.
pub fn random_simplex(len: usize, rng: &mut impl Rng) -> Distribution {
    loop {
        let w: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        if w.iter().sum::<f64>() > 0.0 {
            return Distribution::from_weights(w).expect("positive weights");
        }
    }
}

/// Tiles `base` exactly `len / base.len()` times and normalizes.
pub fn periodic_distribution(len: usize, base: &[f64]) -> Result<Distribution> {
    let period = base.len();
    if period == 0 || len % period != 0 {
        return Err(MraError::InvalidConfig(format!(
            "period {period} does not divide L = {len}"
        )));
    }
    Distribution::from_weights((0..len).map(|i| base[i % period]).collect())
}

/// Smallest `p` in `1..L` with `rho[k + p] == rho[k]` for all `k` (within `tol`).
pub fn period_of(rho: &[f64], tol: f64) -> Option<usize> {
    let n = rho.len();
    (1..n).find(|&p| (0..n).all(|k| (rho[(k + p) % n] - rho[k]).abs() <= tol))
}

/// Shape of a shift distribution for generated data.
#[derive(Debug, Clone, PartialEq)]
pub enum DistributionKind {
    Uniform,
    Dirac,
    WrappedGaussian(f64),
    RandomSimplex,
    /// Period `ell`; a random base block is drawn when `base` is `None`.
    Periodic { period: usize, base: Option<Vec<f64>> },
    Explicit(Vec<f64>),
}

impl DistributionKind {
    pub fn build(&self, len: usize, rng: &mut impl Rng) -> Result<Distribution> {
        match self {
            DistributionKind::Uniform => Ok(Distribution::uniform(len)),
            DistributionKind::Dirac => Ok(Distribution::dirac(len, 0)),
            DistributionKind::WrappedGaussian(s) => wrapped_gaussian_distribution(len, *s),
            DistributionKind::RandomSimplex => Ok(random_simplex(len, rng)),
            DistributionKind::Periodic { period, base } => {
                let base = match base {
                    Some(b) => {
                        check_len(*period, b.len())?;
                        b.clone()
                    }
                    None => random_simplex(*period, rng).into_inner(),
                };
                periodic_distribution(len, &base)
            }
            DistributionKind::Explicit(p) => {
                check_len(len, p.len())?;
                Distribution::from_weights(p.clone())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            DistributionKind::Uniform => "uniform".into(),
            DistributionKind::Dirac => "dirac".into(),
            DistributionKind::WrappedGaussian(s) => format!("wrapped_gaussian:{s}"),
            DistributionKind::RandomSimplex => "random".into(),
            DistributionKind::Periodic { period, .. } => format!("periodic:{period}"),
            DistributionKind::Explicit(_) => "explicit".into(),
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| MraError::InvalidConfig(format!("bad number list {s:?}"))))
        .collect()
}

/// `uniform`, `dirac`, `random`, `wrapped_gaussian:s`, `periodic:ell`, or
/// comma-separated weights.
impl std::str::FromStr for DistributionKind {
    type Err = MraError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || MraError::InvalidConfig(format!("bad distribution {s:?}"));
        Ok(match s.split_once(':') {
            None if s == "uniform" => DistributionKind::Uniform,
            None if s == "dirac" => DistributionKind::Dirac,
            None if s == "random" => DistributionKind::RandomSimplex,
            None if s.contains(',') => DistributionKind::Explicit(parse_list(s)?),
            Some(("wrapped_gaussian", v)) => DistributionKind::WrappedGaussian(v.parse().map_err(|_| bad())?),
            Some(("periodic", v)) => DistributionKind::Periodic {
                period: v.parse().map_err(|_| bad())?,
                base: None,
            },
            _ => return Err(bad()),
        })
    }
}

/// Signal presets for generated data.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalKind {
    /// I.i.d. standard normal entries.
    Gaussian,
    /// I.i.d. normal entries rescaled to unit norm.
    UnitGaussian,
    /// Piecewise-constant step signal.
    HaarLike,
    Explicit(Vec<f64>),
}

/// `haar`, `gaussian`, `unit_gaussian`, or comma-separated values.
impl std::str::FromStr for SignalKind {
    type Err = MraError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "haar" => SignalKind::HaarLike,
            "gaussian" => SignalKind::Gaussian,
            "unit_gaussian" => SignalKind::UnitGaussian,
            _ if s.contains(',') => SignalKind::Explicit(parse_list(s)?),
            _ => return Err(MraError::InvalidConfig(format!("unknown signal {s:?}"))),
        })
    }
}

impl SignalKind {
    pub fn build(&self, len: usize, rng: &mut impl Rng) -> Result<Signal> {
        match self {
            SignalKind::Gaussian => Ok(gaussian_signal(len, rng)),
            SignalKind::UnitGaussian => {
                let x = gaussian_signal(len, rng);
                let n = x.norm();
                Ok(x.scaled(1.0 / n))
            }
            SignalKind::HaarLike => Ok(haar_like_signal(len)),
            SignalKind::Explicit(v) => {
                check_len(len, v.len())?;
                Signal::new(v.clone())
            }
        }
    }
}

pub fn gaussian_signal(len: usize, rng: &mut impl Rng) -> Signal {
    Signal::from_vec((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Uneven plateaus (1, -1/2, 3/4, 0) over roughly 1/4, 1/4, 3/20 and 7/20 of
/// the length; for `L = 20` the blocks have lengths 5, 5, 3, 7.
pub fn haar_like_signal(len: usize) -> Signal {
    let cuts = [0.25, 0.5, 0.65, 1.0];
    let levels = [1.0, -0.5, 0.75, 0.0];
    let values = (0..len)
        .map(|i| {
            let t = (i as f64 + 0.5) / len as f64;
            let block = cuts.iter().position(|&c| t < c).unwrap_or(3);
            levels[block]
        })
        .collect();
    Signal::from_vec(values)
}

/// Draws `n` rows `R_{s_j} x + sigma g_j` with `s_j ~ rho`.
pub fn sample_observations(
    x: &Signal,
    rho: &Distribution,
    sigma: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ObservationSet> {
    let len = x.len();
    check_len(len, rho.len())?;
    if n == 0 {
        return Err(MraError::InvalidConfig("N must be at least 1".into()));
    }
    if !(sigma >= 0.0) {
        return Err(MraError::InvalidConfig(format!("sigma = {sigma} must be >= 0")));
    }
    let index = WeightedIndex::new(rho.as_slice())
        .map_err(|e| MraError::InvalidDistribution(e.to_string()))?;
    let rotations: Vec<Vec<f64>> = (0..len).map(|s| rotate(x, s as i64)).collect();
    let mut data = Vec::with_capacity(n * len);
    let mut shifts = Vec::with_capacity(n);
    for _ in 0..n {
        let s = index.sample(rng);
        shifts.push(s);
        for &v in &rotations[s] {
            let g: f64 = rng.sample(StandardNormal);
            data.push(v + sigma * g);
        }
    }
    ObservationSet::new(len, data, sigma, Some(shifts))
}

/// Re-shifts each row by an independent `s'_j ~ theta`; the effective shift
/// distribution of the output is `rho * theta`.
pub fn reshuffle(obs: &ObservationSet, theta: &Distribution, rng: &mut impl Rng) -> Result<ObservationSet> {
    let len = obs.len();
    check_len(len, theta.len())?;
    let index = WeightedIndex::new(theta.as_slice())
        .map_err(|e| MraError::InvalidDistribution(e.to_string()))?;
    let mut data = Vec::with_capacity(obs.data().len());
    let mut extra = Vec::with_capacity(obs.count());
    for row in obs.rows() {
        let s = index.sample(rng);
        extra.push(s);
        data.extend((0..len).map(|i| row[wrap(i as i64 - s as i64, len)]));
    }
    let true_shifts = obs
        .true_shifts()
        .map(|old| old.iter().zip(&extra).map(|(a, b)| (a + b) % len).collect());
    ObservationSet::new(len, data, obs.sigma(), true_shifts)
}

/// Averages the rows after undoing the known shifts. Baseline only: it reads
/// the diagnostic `true_shifts`, which no recovery method is allowed to use.
pub fn oracle_aligned_estimate(obs: &ObservationSet) -> Result<Signal> {
    let shifts = obs.true_shifts().ok_or(MraError::MissingShifts)?;
    let len = obs.len();
    let mut acc = vec![0.0; len];
    for (row, &s) in obs.rows().zip(shifts) {
        for (i, a) in acc.iter_mut().enumerate() {
            *a += row[(i + s) % len];
        }
    }
    let n = obs.count() as f64;
    Ok(Signal::from_vec(acc.into_iter().map(|a| a / n).collect()))
}

/// Parameters for [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub len: usize,
    pub count: usize,
    pub sigma: f64,
    pub seed: u64,
    pub distribution: DistributionKind,
    pub signal: SignalKind,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.len < 2 {
            return Err(MraError::InvalidConfig(format!("L = {} must be >= 2", self.len)));
        }
        if self.count == 0 {
            return Err(MraError::InvalidConfig("N must be >= 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(MraError::InvalidConfig(format!("sigma = {} must be >= 0", self.sigma)));
        }
        if let DistributionKind::Periodic { period, .. } = self.distribution {
            if period == 0 || self.len % period != 0 {
                return Err(MraError::InvalidConfig(format!(
                    "period {period} does not divide L = {}",
                    self.len
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth and observations produced by [`generate`].
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub signal: Signal,
    pub rho: Distribution,
    pub observations: ObservationSet,
}

/// Builds signal, distribution and observations from one seeded stream, in
/// that order.
pub fn generate(cfg: &GeneratorConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, 0);
    let signal = cfg.signal.build(cfg.len, &mut rng)?;
    let rho = cfg.distribution.build(cfg.len, &mut rng)?;
    let observations = sample_observations(&signal, &rho, cfg.sigma, cfg.count, &mut rng)?;
    Ok(GeneratedData {
        signal,
        rho,
        observations,
    })
}
