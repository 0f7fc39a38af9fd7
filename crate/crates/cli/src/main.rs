//! `mra`: generate data, recover signals, run experiments and evaluate bounds.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 solver failure,
//! 3 I/O failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mra_core::bounds::{aperiodic_rate_bound, orbit_bound, periodic_rate_bound};
use mra_core::cyclic::relative_error;
use mra_core::em::{run_em, EmOptions, EmVariant};
use mra_core::harness::{counterexample_instance, default_axis, run_experiment, svg_chart, ExperimentConfig, ExperimentKind};
use mra_core::io::{load_moments, load_observations, load_recovery, save_observations, save_recovery};
use mra_core::ls::{run_ls, LsOptions};
use mra_core::model::{generate, stream_rng, GeneratorConfig, ObservationSet};
use mra_core::moments::{sample_moments, MomentPair, TensorBudget};
use mra_core::spectral::{invert_moments_with, recover, Diagnostics, RecoveryResult, SpectralOptions};
use mra_core::MraError;

#[derive(Parser, Debug)]
#[command(name = "mra", version, about = "Multireference alignment toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Root seed; every result is a function of the inputs and this seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Key-value file with `key = value` lines; `#` starts a comment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use full-size repeat counts for experiments.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw observations. Keys: L, N, sigma, signal, distribution.
    Generate {
        /// Also write the true signal and distribution as a recovery file.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Estimate the signal and distribution from observations or moments.
    Recover {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Spectral)]
        method: Method,
        /// Recovery file holding the true signal; prints the relative error.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Squared-extrapolation acceleration for EM.
        #[arg(long)]
        accelerate: bool,
        /// Skip the random reshuffling step of the spectral method.
        #[arg(long)]
        no_reshuffle: bool,
    },
    /// Run an experiment and write its report as CSV.
    Experiment {
        /// slope_random, slope_uniform, em_compare, method_compare, spiked,
        /// counterexample or bounds_table; may also be given as `kind` in the config.
        kind: Option<String>,
        /// Also write an SVG chart of this statistic.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, default_value = "median")]
        statistic: String,
    },
    /// Lower bounds for the periodic counterexample pair and the rate bounds.
    /// Keys: L, ell, N, sigma, max_order.
    Bounds,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Spectral,
    Em,
    UniformEm,
    Ls,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl From<MraError> for Failure {
    fn from(e: MraError) -> Self {
        let code = match e {
            MraError::InvalidConfig(_) => 1,
            MraError::Io(_) | MraError::Csv(_) | MraError::Format(_) => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 3, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    let settings = Settings::load(&cli.global)?;
    match cli.command {
        Command::Generate { truth } => cmd_generate(&cli.global, settings, truth.as_deref()),
        Command::Recover {
            input,
            method,
            truth,
            max_iters,
            accelerate,
            no_reshuffle,
        } => cmd_recover(&cli.global, &input, method, truth.as_deref(), max_iters, accelerate, no_reshuffle),
        Command::Experiment { kind, svg, statistic } => cmd_experiment(&cli.global, settings, kind, svg.as_deref(), &statistic),
        Command::Bounds => cmd_bounds(&cli.global, settings),
    }
}

/// Merged `key = value` settings; every key must be consumed.
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn load(g: &Global) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = &g.config {
            let text = fs::read_to_string(path).map_err(|e| Failure {
                code: 3,
                message: format!("{}: {e}", path.display()),
            })?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Failure::usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for s in &g.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Failure::usage(format!("--set {s:?}: expected KEY=VALUE")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Settings(map))
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> CliResult<T> {
        match self.0.remove(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Failure::usage(format!("{key} = {v:?} is not valid"))),
        }
    }

    fn take_str(&mut self, key: &str, default: &str) -> String {
        self.0.remove(key).unwrap_or_else(|| default.to_string())
    }

    fn finish(self) -> CliResult<()> {
        match self.0.keys().next() {
            None => Ok(()),
            Some(k) => Err(Failure::usage(format!("unknown setting {k:?}"))),
        }
    }
}

fn require_out(g: &Global) -> CliResult<&Path> {
    g.out.as_deref().ok_or_else(|| Failure::usage("--out is required"))
}

fn cmd_generate(g: &Global, mut s: Settings, truth: Option<&Path>) -> CliResult<()> {
    let cfg = GeneratorConfig {
        len: s.take("L", 20)?,
        count: s.take("N", 1000)?,
        // The Haar preset is shown at unit noise.
        sigma: s.take("sigma", 1.0)?,
        seed: g.seed,
        signal: s.take_str("signal", "haar").parse()?,
        distribution: s.take_str("distribution", "random").parse()?,
    };
    s.finish()?;
    let out = require_out(g)?;
    let data = generate(&cfg)?;
    save_observations(&data.observations, out)?;
    if let Some(path) = truth {
        let res = RecoveryResult {
            x_hat: data.signal.clone(),
            rho_hat: data.rho.as_slice().to_vec(),
            diagnostics: Diagnostics::default(),
        };
        save_recovery(&res, path)?;
    }
    println!(
        "wrote {}: L={} N={} sigma={} signal={:?} distribution={}",
        out.display(),
        cfg.len,
        cfg.count,
        cfg.sigma,
        cfg.signal,
        cfg.distribution.label()
    );
    Ok(())
}

enum Input {
    Observations(ObservationSet),
    Moments(MomentPair),
}

fn load_input(path: &Path) -> CliResult<Input> {
    match load_observations(path) {
        Ok(obs) => Ok(Input::Observations(obs)),
        Err(MraError::Io(e)) => Err(Failure {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }),
        Err(first) => load_moments(path).map(Input::Moments).map_err(|_| Failure {
            code: 3,
            message: format!("{}: neither observations nor moments ({first})", path.display()),
        }),
    }
}

fn cmd_recover(
    g: &Global,
    input: &Path,
    method: Method,
    truth: Option<&Path>,
    max_iters: Option<usize>,
    accelerate: bool,
    no_reshuffle: bool,
) -> CliResult<()> {
    let data = load_input(input)?;
    let mut rng = stream_rng(g.seed, 0);
    let spectral = SpectralOptions {
        reshuffle: !no_reshuffle,
        ..SpectralOptions::default()
    };
    let result = match (method, &data) {
        (Method::Spectral, Input::Observations(obs)) => recover(obs, &spectral, &mut rng)?,
        (Method::Spectral, Input::Moments(m)) => invert_moments_with(m, &spectral)?,
        (Method::Ls, d) => {
            let m = match d {
                Input::Observations(obs) => sample_moments(obs),
                Input::Moments(m) => m.clone(),
            };
            let mut opts = LsOptions::default();
            if let Some(n) = max_iters {
                opts.max_iters = n;
            }
            run_ls(&m, &opts, &mut rng)?
        }
        (Method::Em | Method::UniformEm, Input::Observations(obs)) => {
            let mut opts = EmOptions {
                accelerate,
                variant: if method == Method::Em { EmVariant::Modified } else { EmVariant::Uniform },
                ..EmOptions::default()
            };
            if let Some(n) = max_iters {
                opts.max_iters = n;
            }
            run_em(obs, &opts, &mut rng)?
        }
        (_, Input::Moments(_)) => return Err(Failure::usage("EM needs observations, not moments")),
    };
    if let Some(out) = &g.out {
        save_recovery(&result, out)?;
    }
    let d = &result.diagnostics;
    println!(
        "method={method:?} iterations={} objective={:.6e} converged={}",
        d.iterations, d.objective, d.converged
    );
    if let Some(path) = truth {
        let t = load_recovery(path)?;
        println!("relative_error={:.6e}", relative_error(&result.x_hat, &t.x_hat)?);
    }
    Ok(())
}

/// `git rev-parse HEAD` of the working directory, if any.
fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn cmd_experiment(g: &Global, mut s: Settings, kind: Option<String>, svg: Option<&Path>, statistic: &str) -> CliResult<()> {
    let from_config = s.0.remove("kind");
    let name = kind
        .or(from_config)
        .ok_or_else(|| Failure::usage("experiment kind missing (argument or `kind` setting)"))?;
    let kind: ExperimentKind = name.parse()?;
    let mut cfg = ExperimentConfig::new(kind);
    cfg.paper_scale = g.paper_scale;
    cfg.overrides = std::mem::take(&mut s.0);
    let out = require_out(g)?;
    let start = Instant::now();
    let mut report = run_experiment(&cfg, g.seed)?;
    report.metadata.insert("git_revision".into(), git_revision());
    report
        .metadata
        .insert("wall_seconds".into(), format!("{:.3}", start.elapsed().as_secs_f64()));
    let mut w = std::io::BufWriter::new(fs::File::create(out)?);
    report.write_csv(&mut w)?;
    std::io::Write::flush(&mut w)?;
    if let Some(path) = svg {
        fs::write(path, svg_chart(&report, statistic, default_axis(kind), true))?;
    }
    for r in report.rows.iter().filter(|r| r.statistic.starts_with("slope")) {
        println!("{} {} = {:.4}", r.method, r.statistic, r.value);
    }
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn cmd_bounds(g: &Global, mut s: Settings) -> CliResult<()> {
    let len: usize = s.take("L", 15)?;
    let ell: usize = s.take("ell", 5)?;
    let count: usize = s.take("N", 1000)?;
    let sigma: f64 = s.take("sigma", 3.0)?;
    let max_order: usize = s.take("max_order", 3)?;
    s.finish()?;
    let (x, rho, xt) = counterexample_instance(len, ell, &mut stream_rng(g.seed, 0))?;
    let b = orbit_bound(&x, &rho, &xt, &rho, count, sigma, max_order, &TensorBudget::default())?;
    let snr = x.norm().powi(2) / (sigma * sigma);
    let mut lines = vec![
        ("order", b.order.to_string()),
        ("k_d", format!("{:.6e}", b.k_d)),
        ("lambda_n", format!("{:.6e}", b.lambda_n)),
        ("chi2", format!("{:.6e}", b.chi2)),
        ("orbit_distance2", format!("{:.6e}", b.orbit_distance2)),
        ("bound", format!("{:.6e}", b.bound)),
        ("bound_product", format!("{:.6e}", b.bound_product)),
        ("snr", format!("{snr:.6e}")),
        ("aperiodic_rate_bound", format!("{:.6e}", aperiodic_rate_bound(count, snr))),
    ];
    lines.push(("periodic_rate_bound", format!("{:.6e}", periodic_rate_bound(count, snr, len, ell)?)));
    let text: String = lines.iter().map(|(k, v)| format!("{k},{v}\n")).collect();
    print!("{text}");
    if let Some(out) = &g.out {
        fs::write(out, format!("field,value\n{text}"))?;
    }
    Ok(())
}
