//! Experiment runner: parameter grids, per-trial seeded streams, summary
//! statistics, slope fits and minimal SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::bounds::{aperiodic_rate_bound, orbit_bound, periodic_rate_bound};
use crate::cyclic::{relative_error, Distribution, Signal};
use crate::em::{run_em, EmOptions, EmVariant};
use crate::error::{MraError, Result};
use crate::io::{ExperimentReport, ReportRow};
use crate::ls::{run_ls, LsOptions};
use crate::model::{
    gaussian_signal, periodic_distribution, random_simplex, sample_observations, stream_rng, wrapped_gaussian_distribution,
    MraRng, SignalKind,
};
use crate::moments::{moment_tensor_fourier, periodic_counterexample, population_moments, sample_moments, TensorBudget};
use crate::spectral::{recover, SpectralOptions};
use crate::spiked::{sample_threshold, spiked_draw, spiked_instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentKind {
    SlopeRandom,
    SlopeUniform,
    EmCompare,
    MethodCompare,
    Spiked,
    Counterexample,
    BoundsTable,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::SlopeRandom,
        ExperimentKind::SlopeUniform,
        ExperimentKind::EmCompare,
        ExperimentKind::MethodCompare,
        ExperimentKind::Spiked,
        ExperimentKind::Counterexample,
        ExperimentKind::BoundsTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SlopeRandom => "slope_random",
            ExperimentKind::SlopeUniform => "slope_uniform",
            ExperimentKind::EmCompare => "em_compare",
            ExperimentKind::MethodCompare => "method_compare",
            ExperimentKind::Spiked => "spiked",
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::BoundsTable => "bounds_table",
        }
    }

    /// Default parameters as `(key, value, paper-scale value)`.
    fn defaults(self) -> &'static [(&'static str, &'static str, &'static str)] {
        match self {
            ExperimentKind::SlopeRandom => &[
                ("L", "15", "15"),
                ("N", "10000", "10000"),
                ("sigma", "geom:0.25:5:10", "geom:0.25:5:10"),
                ("trials", "60", "300"),
                ("max_iters", "1500", "1500"),
            ],
            ExperimentKind::SlopeUniform => &[
                ("L", "15", "15"),
                ("N", "35000", "35000"),
                ("sigma", "geom:0.5:5:8", "geom:0.5:5:8"),
                ("trials", "60", "300"),
                ("max_iters", "1500", "1500"),
            ],
            ExperimentKind::EmCompare => &[
                ("L", "25", "25"),
                ("N", "2000", "2000"),
                ("sigma", "1", "1"),
                ("s", "lin:3:9:7", "lin:3:9:7"),
                ("trials", "20", "20"),
                ("max_iters", "1500", "1500"),
            ],
            ExperimentKind::MethodCompare => &[
                ("L", "15", "15"),
                ("N", "100000", "100000"),
                ("sigma", "geom:0.01:10:20", "geom:0.01:10:20"),
                ("trials", "10", "40"),
                ("max_iters", "400", "400"),
            ],
            ExperimentKind::Spiked => &[
                ("L", "400", "400"),
                ("norm", "10", "10"),
                ("support", "5", "5"),
                ("threshold_sigma", "5.5313", "5.5313"),
                ("extra_samples", "100", "100"),
                ("sigma", "geom:0.1:10:12", "geom:0.1:10:12"),
                ("trials", "20", "200"),
            ],
            ExperimentKind::Counterexample => &[("L", "15", "15"), ("ell", "5", "5"), ("trials", "20", "20")],
            ExperimentKind::BoundsTable => &[
                ("L", "15", "15"),
                ("ell", "5", "5"),
                ("N", "1000", "1000"),
                ("sigma", "3", "3"),
                ("trials", "20", "20"),
                ("max_iters", "1500", "1500"),
            ],
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = MraError;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MraError::InvalidConfig(format!("unknown experiment kind {s:?}")))
    }
}

/// Parses `a,b,c`, `lin:lo:hi:n` or `geom:lo:hi:n`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || MraError::InvalidConfig(format!("bad grid {spec:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let grid = if let Some(rest) = spec.strip_prefix("lin:").or_else(|| spec.strip_prefix("geom:")) {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let (lo, hi) = (num(parts[0])?, num(parts[1])?);
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        let t = |k: usize| if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
        if spec.starts_with("lin:") {
            (0..n).map(|k| lo + (hi - lo) * t(k)).collect()
        } else {
            if !(lo > 0.0 && hi > 0.0) {
                return Err(bad());
            }
            (0..n).map(|k| lo * (hi / lo).powf(t(k))).collect()
        }
    } else {
        spec.split(',').map(num).collect::<Result<Vec<f64>>>()?
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub overrides: BTreeMap<String, String>,
    /// Switches to the full-size repeat counts.
    pub paper_scale: bool,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            overrides: BTreeMap::new(),
            paper_scale: false,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.overrides.insert(key.to_string(), value.to_string());
        self
    }

    fn raw(&self, key: &str) -> Result<String> {
        if let Some(v) = self.overrides.get(key) {
            return Ok(v.clone());
        }
        self.kind
            .defaults()
            .iter()
            .find(|d| d.0 == key)
            .map(|d| if self.paper_scale { d.2 } else { d.1 }.to_string())
            .ok_or_else(|| MraError::InvalidConfig(format!("{} has no parameter {key:?}", self.kind.name())))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|f| *f >= 0.0 && f.fract() == 0.0 && *f <= usize::MAX as f64)
            .map(|f| f as usize)
            .ok_or_else(|| MraError::InvalidConfig(format!("{key} = {v:?} is not a non-negative integer")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        v.trim().parse().map_err(|_| MraError::InvalidConfig(format!("{key} = {v:?} is not a number")))
    }

    pub fn grid(&self, key: &str) -> Result<Vec<f64>> {
        parse_grid(&self.raw(key)?)
    }

    /// Resolved parameters, defaults included, in key order.
    pub fn resolved(&self) -> Result<BTreeMap<String, String>> {
        self.kind.defaults().iter().map(|d| Ok((d.0.to_string(), self.raw(d.0)?))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for key in self.overrides.keys() {
            if !self.kind.defaults().iter().any(|d| d.0 == key) {
                return Err(MraError::InvalidConfig(format!("{} has no parameter {key:?}", self.kind.name())));
            }
        }
        for (key, ..) in self.kind.defaults() {
            match *key {
                "sigma" | "s" => {
                    let g = self.grid(key)?;
                    if g.iter().any(|v| !(*v > 0.0)) {
                        return Err(MraError::InvalidConfig(format!("{key} grid must be positive")));
                    }
                }
                "norm" | "threshold_sigma" => {
                    if !(self.f64(key)? > 0.0) {
                        return Err(MraError::InvalidConfig(format!("{key} must be positive")));
                    }
                }
                "extra_samples" => {
                    self.usize(key)?;
                }
                _ => {
                    if self.usize(key)? == 0 {
                        return Err(MraError::InvalidConfig(format!("{key} must be >= 1")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Order statistics and means of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    /// Mean of `ln(value)`.
    pub mean_log: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `None` for an empty sample.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Some(Summary {
        count: v.len(),
        median: quantile(&v, 0.5),
        q1: quantile(&v, 0.25),
        q3: quantile(&v, 0.75),
        mean: v.iter().sum::<f64>() / n,
        mean_log: v.iter().map(|x| x.ln()).sum::<f64>() / n,
    })
}

/// Ordinary least squares `y = a + b x`, returning `(b, a)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MraError::InvalidConfig("a line fit needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(MraError::InvalidConfig("a line fit needs distinct abscissae".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    Ok((b, my - b * mx))
}

/// Slope of `log_error` against `ln(sigma)` over the largest-sigma half (odd
/// counts give the shared middle point to both halves), and over the
/// smallest-sigma half.
pub fn half_slopes(sigmas: &[f64], log_errors: &[f64]) -> Result<(f64, f64)> {
    let n = sigmas.len();
    let mut pts: Vec<(f64, f64)> = sigmas.iter().map(|s| s.ln()).zip(log_errors.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = n.div_ceil(2);
    let split = |p: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { p.iter().copied().unzip() };
    let (sx, sy) = split(&pts[..half]);
    let (lx, ly) = split(&pts[n - half..]);
    Ok((fit_line(&lx, &ly)?.0, fit_line(&sx, &sy)?.0))
}

/// Stream for trial `trial` at grid point `point`.
pub fn trial_rng(seed: u64, point: usize, trial: usize) -> MraRng {
    stream_rng(seed, ((point as u64) << 32) | trial as u64)
}

/// Runs `trials` independent trials in parallel; results are in trial order
/// and independent of scheduling.
pub fn run_trials<T: Send>(
    seed: u64,
    point: usize,
    trials: usize,
    f: impl Fn(usize, &mut MraRng) -> Result<T> + Sync,
) -> Vec<Result<T>> {
    (0..trials)
        .into_par_iter()
        .map(|t| f(t, &mut trial_rng(seed, point, t)))
        .collect()
}

struct RowBase<'a> {
    experiment: &'a str,
    len: usize,
    count: usize,
    sigma: f64,
    param: f64,
}

impl RowBase<'_> {
    fn row(&self, method: &str, statistic: &str, value: f64) -> ReportRow {
        ReportRow {
            experiment: self.experiment.to_string(),
            method: method.to_string(),
            len: self.len,
            count: self.count,
            sigma: self.sigma,
            param: self.param,
            statistic: statistic.to_string(),
            value,
        }
    }

    /// Median, quartiles, means, success count and failure count.
    fn summary_rows(&self, method: &str, values: &[f64], failures: usize) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        if let Some(s) = summarize(values) {
            for (name, v) in [
                ("median", s.median),
                ("q1", s.q1),
                ("q3", s.q3),
                ("mean", s.mean),
                ("mean_log", s.mean_log),
            ] {
                rows.push(self.row(method, name, v));
            }
        }
        rows.push(self.row(method, "trials", values.len() as f64));
        rows.push(self.row(method, "failures", failures as f64));
        rows
    }
}

/// Splits per-trial per-method values into successes and a failure count per method.
fn collect_methods(methods: &[&str], results: Vec<Result<Vec<f64>>>) -> Vec<(Vec<f64>, usize)> {
    let mut out = vec![(Vec::new(), 0); methods.len()];
    for r in results {
        match r {
            Ok(vals) => {
                for (slot, v) in out.iter_mut().zip(vals) {
                    if v.is_finite() {
                        slot.0.push(v);
                    } else {
                        slot.1 += 1;
                    }
                }
            }
            Err(_) => out.iter_mut().for_each(|slot| slot.1 += 1),
        }
    }
    out
}

fn em_error(obs: &crate::model::ObservationSet, x: &Signal, opts: &EmOptions, rng: &mut MraRng) -> f64 {
    run_em(obs, opts, rng)
        .and_then(|r| relative_error(&r.x_hat, x))
        .unwrap_or(f64::NAN)
}

/// Parameter-change tolerance for harness EM runs. Reported errors are
/// 1e-3 or larger, so tighter stopping only spends passes.
const EM_TOL: f64 = 1e-6;

fn em_options(cfg: &ExperimentConfig, variant: EmVariant) -> Result<EmOptions> {
    Ok(EmOptions {
        max_iters: cfg.usize("max_iters")?,
        tol: EM_TOL,
        variant,
        accelerate: true,
        ..EmOptions::default()
    })
}

/// Runs a configured experiment. Trials draw from [`trial_rng`] streams of
/// `seed`, so the report depends only on `(config, seed)`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::default();
    report.metadata.insert("kind".into(), cfg.kind.name().into());
    report.metadata.insert("seed".into(), seed.to_string());
    report.metadata.insert("paper_scale".into(), cfg.paper_scale.to_string());
    for (k, v) in cfg.resolved()? {
        report.metadata.insert(format!("param.{k}"), v);
    }
    report.rows = match cfg.kind {
        ExperimentKind::SlopeRandom | ExperimentKind::SlopeUniform => slope_rows(cfg, seed)?,
        ExperimentKind::EmCompare => em_compare_rows(cfg, seed)?,
        ExperimentKind::MethodCompare => method_compare_rows(cfg, seed, None)?,
        ExperimentKind::Spiked => spiked_rows(cfg, seed)?,
        ExperimentKind::Counterexample => counterexample_rows(cfg, seed)?,
        ExperimentKind::BoundsTable => bounds_rows(cfg, seed)?,
    };
    Ok(report)
}

fn slope_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ReportRow>> {
    let name = cfg.kind.name();
    let (len, count, trials) = (cfg.usize("L")?, cfg.usize("N")?, cfg.usize("trials")?);
    let sigmas = cfg.grid("sigma")?;
    let uniform = cfg.kind == ExperimentKind::SlopeUniform;
    let opts = em_options(cfg, EmVariant::Modified)?;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for (p, &sigma) in sigmas.iter().enumerate() {
        let results = run_trials(seed, p, trials, |_, rng| {
            let x = gaussian_signal(len, rng);
            let rho = if uniform { Distribution::uniform(len) } else { random_simplex(len, rng) };
            let obs = sample_observations(&x, &rho, sigma, count, rng)?;
            Ok(vec![em_error(&obs, &x, &opts, rng)])
        });
        let (values, failures) = collect_methods(&["em"], results).remove(0);
        let base = RowBase {
            experiment: name,
            len,
            count,
            sigma,
            param: f64::NAN,
        };
        rows.extend(base.summary_rows("em", &values, failures));
        logs.push(summarize(&values).map_or(f64::NAN, |s| s.mean_log));
    }
    if sigmas.len() >= 4 && logs.iter().all(|v| v.is_finite()) {
        let (large, small) = half_slopes(&sigmas, &logs)?;
        let half = sigmas.len().div_ceil(2);
        let mut sorted = sigmas.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        // sigma and param hold the ends of the fitted range.
        for (stat, value, lo, hi) in [
            ("slope_large", large, sorted[n - half], sorted[n - 1]),
            ("slope_small", small, sorted[0], sorted[half - 1]),
        ] {
            let base = RowBase {
                experiment: name,
                len,
                count,
                sigma: lo,
                param: hi,
            };
            rows.push(base.row("em", stat, value));
        }
    }
    Ok(rows)
}

fn em_compare_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ReportRow>> {
    let (len, count, trials) = (cfg.usize("L")?, cfg.usize("N")?, cfg.usize("trials")?);
    let sigma = cfg.f64("sigma")?;
    // One fixed unit-norm signal for every distribution and repeat.
    let x = SignalKind::UnitGaussian.build(len, &mut stream_rng(seed, u64::MAX))?;
    let modified = em_options(cfg, EmVariant::Modified)?;
    let uniform = em_options(cfg, EmVariant::Uniform)?;
    let methods = ["em_modified", "em_uniform"];
    let mut rows = Vec::new();
    for (p, &s) in cfg.grid("s")?.iter().enumerate() {
        let rho = wrapped_gaussian_distribution(len, s)?;
        let results = run_trials(seed, p, trials, |_, rng| {
            let obs = sample_observations(&x, &rho, sigma, count, rng)?;
            let key: u64 = rand::Rng::random(rng);
            // Both variants start from the same random point.
            let a = em_error(&obs, &x, &modified, &mut stream_rng(key, 0));
            let b = em_error(&obs, &x, &uniform, &mut stream_rng(key, 0));
            Ok(vec![a, b])
        });
        let base = RowBase {
            experiment: "em_compare",
            len,
            count,
            sigma,
            param: s,
        };
        for (m, (values, failures)) in methods.iter().zip(collect_methods(&methods, results)) {
            rows.extend(base.summary_rows(m, &values, failures));
        }
    }
    Ok(rows)
}

/// Method comparison over the sigma grid, or over the grid points listed in
/// `only` (indices into the grid).
pub fn method_compare_rows(cfg: &ExperimentConfig, seed: u64, only: Option<&[usize]>) -> Result<Vec<ReportRow>> {
    let (len, count, trials) = (cfg.usize("L")?, cfg.usize("N")?, cfg.usize("trials")?);
    let em = em_options(cfg, EmVariant::Modified)?;
    let methods = ["spectral", "em", "ls"];
    let mut rows = Vec::new();
    for (p, &sigma) in cfg.grid("sigma")?.iter().enumerate() {
        if only.is_some_and(|o| !o.contains(&p)) {
            continue;
        }
        let results = run_trials(seed, p, trials, |_, rng| {
            let x = SignalKind::UnitGaussian.build(len, rng)?;
            let rho = random_simplex(len, rng);
            let obs = sample_observations(&x, &rho, sigma, count, rng)?;
            let moments = sample_moments(&obs);
            let spectral = recover(&obs, &SpectralOptions::default(), rng)
                .and_then(|r| relative_error(&r.x_hat, &x))
                .unwrap_or(f64::NAN);
            let ls = run_ls(&moments, &LsOptions::default(), rng)
                .and_then(|r| relative_error(&r.x_hat, &x))
                .unwrap_or(f64::NAN);
            let em = em_error(&obs, &x, &em, rng);
            Ok(vec![spectral, em, ls])
        });
        let base = RowBase {
            experiment: "method_compare",
            len,
            count,
            sigma,
            param: f64::NAN,
        };
        for (m, (values, failures)) in methods.iter().zip(collect_methods(&methods, results)) {
            rows.extend(base.summary_rows(m, &values, failures));
        }
    }
    Ok(rows)
}

/// `N = extra + N*` with `N*` the sample threshold at `threshold_sigma`.
pub fn spiked_sample_count(cfg: &ExperimentConfig) -> Result<usize> {
    let (len, support) = (cfg.usize("L")?, cfg.usize("support")?);
    let norm = cfg.f64("norm")?;
    let total: f64 = (1..=support).map(|i| (i * i) as f64).sum();
    let rho_max = (support * support) as f64 / total;
    let nstar = sample_threshold(len, cfg.f64("threshold_sigma")?, norm, rho_max);
    Ok(cfg.usize("extra_samples")? + nstar.round() as usize)
}

fn spiked_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ReportRow>> {
    let (len, support, trials) = (cfg.usize("L")?, cfg.usize("support")?, cfg.usize("trials")?);
    let norm = cfg.f64("norm")?;
    let count = spiked_sample_count(cfg)?;
    let methods = ["cosine", "cosine_predicted", "mse", "mse_predicted"];
    let mut rows = Vec::new();
    for (p, &sigma) in cfg.grid("sigma")?.iter().enumerate() {
        let results = run_trials(seed, p, trials, |_, rng| {
            let (x, rho) = spiked_instance(len, norm, support, rng)?;
            let d = spiked_draw(&x, &rho, sigma, count, rng)?;
            let c = d.predicted.cos2.sqrt();
            // Unaligned error of the unit eigenvector scaled to |x|: 2 - 2 cos.
            Ok(vec![d.cosine, c, d.mse, 2.0 - 2.0 * c])
        });
        let base = RowBase {
            experiment: "spiked",
            len,
            count,
            sigma,
            param: norm,
        };
        for (m, (values, failures)) in methods.iter().zip(collect_methods(&methods, results)) {
            rows.extend(base.summary_rows(m, &values, failures));
        }
    }
    Ok(rows)
}

/// A signal, a period-`ell` distribution and the counterexample partner.
pub fn counterexample_instance(len: usize, ell: usize, rng: &mut MraRng) -> Result<(Signal, Distribution, Signal)> {
    let x = gaussian_signal(len, rng);
    let rho = periodic_distribution(len, &random_simplex(ell, rng))?;
    let partner = periodic_counterexample(&x, ell)?;
    Ok((x, rho, partner))
}

fn counterexample_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ReportRow>> {
    let (len, ell, trials) = (cfg.usize("L")?, cfg.usize("ell")?, cfg.usize("trials")?);
    let methods = ["dm1", "dm2", "dm3", "orbit_distance"];
    let results = run_trials(seed, 0, trials, |_, rng| {
        let (x, rho, xt) = counterexample_instance(len, ell, rng)?;
        let a = population_moments(&x, &rho)?;
        let b = population_moments(&xt, &rho)?;
        let dm1 = a.m1().iter().zip(b.m1()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let dm2 = (a.m2() - b.m2()).norm();
        let dm3 = moment_tensor_fourier(&x, &rho, 3)?
            .distance_sq(&moment_tensor_fourier(&xt, &rho, 3)?)
            .sqrt();
        Ok(vec![dm1, dm2, dm3, relative_error(&xt, &x)?])
    });
    let base = RowBase {
        experiment: "counterexample",
        len,
        count: 0,
        sigma: 0.0,
        param: ell as f64,
    };
    let mut rows = Vec::new();
    for (m, (values, failures)) in methods.iter().zip(collect_methods(&methods, results)) {
        rows.extend(base.summary_rows(m, &values, failures));
    }
    Ok(rows)
}

fn bounds_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ReportRow>> {
    let (len, ell, count, trials) = (cfg.usize("L")?, cfg.usize("ell")?, cfg.usize("N")?, cfg.usize("trials")?);
    let sigma = cfg.f64("sigma")?;
    let em = em_options(cfg, EmVariant::Modified)?;
    let methods = ["orbit_bound", "em_mse"];
    let results = run_trials(seed, 0, trials, |_, rng| {
        let (x, rho, xt) = counterexample_instance(len, ell, rng)?;
        let bound = orbit_bound(&x, &rho, &xt, &rho, count, sigma, 3, &TensorBudget::default())?;
        let obs = sample_observations(&x, &rho, sigma, count, rng)?;
        Ok(vec![bound.bound, em_error(&obs, &x, &em, rng).powi(2)])
    });
    let base = RowBase {
        experiment: "bounds_table",
        len,
        count,
        sigma,
        param: ell as f64,
    };
    let mut rows = Vec::new();
    for (m, (values, failures)) in methods.iter().zip(collect_methods(&methods, results)) {
        rows.extend(base.summary_rows(m, &values, failures));
    }
    // Closed-form rates at a reference signal energy of L (unit-variance entries).
    let snr = len as f64 / (sigma * sigma);
    rows.push(base.row("aperiodic_rate", "value", aperiodic_rate_bound(count, snr)));
    rows.push(base.row("periodic_rate", "value", periodic_rate_bound(count, snr, len, ell)?));
    Ok(rows)
}

/// Which report column supplies the horizontal axis of a chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Sigma,
    Param,
}

/// Chart axis for an experiment kind.
pub fn default_axis(kind: ExperimentKind) -> Axis {
    match kind {
        ExperimentKind::EmCompare | ExperimentKind::Counterexample | ExperimentKind::BoundsTable => Axis::Param,
        _ => Axis::Sigma,
    }
}

/// One polyline per method of `statistic` against the chosen axis, with
/// both axes logarithmic when `log` is set. Built from report rows only.
pub fn svg_chart(report: &ExperimentReport, statistic: &str, axis: Axis, log: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let tf = |v: f64| if log { v.log10() } else { v };
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in report.rows.iter().filter(|r| r.statistic == statistic) {
        let x = match axis {
            Axis::Sigma => r.sigma,
            Axis::Param => r.param,
        };
        let (px, py) = (tf(x), tf(r.value));
        if px.is_finite() && py.is_finite() {
            series.entry(r.method.as_str()).or_default().push((px, py));
        }
    }
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let axis_name = match axis {
        Axis::Sigma => "sigma",
        Axis::Param => "param",
    };
    let scale = if log { "log10 " } else { "" };
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{scale}{axis_name}</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" font-size="13" transform="rotate(-90 15 {})" text-anchor="middle">{scale}{statistic}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor_x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(svg, r#"<text x="{anchor_x:.1}" y="{}" text-anchor="middle" font-size="11">{v:.3}</text>"#, H - PAD + 15.0);
    }
    for (v, anchor_y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(svg, r#"<text x="{}" y="{anchor_y:.1}" text-anchor="end" font-size="11">{v:.3}</text>"#, PAD - 5.0);
    }
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{method}</text>"#,
            W - PAD + 5.0 - 100.0,
            PAD + 15.0 * (i as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_parse() {
        assert_eq!(parse_grid("1,2.5").unwrap(), vec![1.0, 2.5]);
        assert_eq!(parse_grid("lin:3:9:7").unwrap(), vec![3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let g = parse_grid("geom:0.01:10:4").unwrap();
        assert!((g[1] - 0.1).abs() < 1e-12 && (g[3] - 10.0).abs() < 1e-12);
        for bad in ["", "lin:1:2", "geom:0:1:3", "lin:1:2:0", "a,b"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((s.median, s.q1, s.q3, s.mean), (2.5, 1.75, 3.25, 2.5));
        assert!((s.mean_log - (24f64).ln() / 4.0).abs() < 1e-15);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn slopes_recover_power_laws() {
        let sig: Vec<f64> = parse_grid("geom:0.1:10:9").unwrap();
        // Error ~ sigma below 1 and ~ sigma^3 above.
        let logs: Vec<f64> = sig.iter().map(|s| if *s <= 1.0 { s.ln() } else { 3.0 * s.ln() }).collect();
        let (large, small) = half_slopes(&sig, &logs).unwrap();
        assert!((large - 3.0).abs() < 1e-12 && (small - 1.0).abs() < 1e-12);
        assert!(fit_line(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let c = ExperimentConfig::new(ExperimentKind::EmCompare);
        c.validate().unwrap();
        assert_eq!(c.usize("L").unwrap(), 25);
        assert!(c.clone().with("bogus", 1).validate().is_err());
        assert!(c.clone().with("trials", 0).validate().is_err());
        assert!(c.clone().with("s", "lin:3:9:0").validate().is_err());
        let mut p = ExperimentConfig::new(ExperimentKind::Spiked);
        assert_eq!(p.usize("trials").unwrap(), 20);
        p.paper_scale = true;
        assert_eq!(p.usize("trials").unwrap(), 200);
        assert_eq!(spiked_sample_count(&p).unwrap(), 281);
        assert!("nope".parse::<ExperimentKind>().is_err());
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
            ExperimentConfig::new(k).validate().unwrap();
        }
    }

    #[test]
    fn small_runs_are_reproducible() {
        let cfg = ExperimentConfig::new(ExperimentKind::Counterexample).with("trials", 3);
        let a = run_experiment(&cfg, 5).unwrap();
        assert_eq!(a, run_experiment(&cfg, 5).unwrap());
        let dm2 = a.select("dm2", "median").next().unwrap().value;
        assert!(dm2 < 1e-10);
        let cfg = ExperimentConfig::new(ExperimentKind::EmCompare)
            .with("N", 200)
            .with("trials", 2)
            .with("s", "3,9")
            .with("max_iters", 20);
        let a = run_experiment(&cfg, 1).unwrap();
        assert_eq!(a, run_experiment(&cfg, 1).unwrap());
        assert_eq!(a.select("em_uniform", "median").count(), 2);
        let svg = svg_chart(&a, "median", Axis::Param, true);
        assert!(svg.starts_with("<svg") && svg.contains("em_modified") && svg.contains("polyline"));
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(ExperimentReport::read_csv(&mut buf.as_slice()).unwrap(), a);
    }
}
