//! `qsec` command-line runner.
//!
//! Exit codes: 0 success, 1 user error (bad config, bad input, missing
//! file), 2 internal error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qsec::estimation::{self, Envelope, FitModel, FitResult, GammaPrior, PosteriorSettings};
use qsec::experiments::{self, CurveData, ExperimentConfig};

use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Model(#[from] qsec::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use qsec::Error as E;
        match self {
            CliError::Io { .. } | CliError::Usage(_) => 1,
            CliError::Model(e) => match e {
                E::Config { .. }
                | E::Parse(_)
                | E::Table { .. }
                | E::Io(_)
                | E::InvalidArgument(_)
                | E::TooFewPoints { .. }
                | E::NonPositiveContrast(_)
                | E::NoPhotonModel
                | E::ZeroCoupling
                | E::FitNotConverged { .. }
                | E::UnknownMarker(_) => 1,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qsec", version, about = "Hybrid-register sensing with error correction: simulation and analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML config file, or a manifest.toml from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "QSEC_OUT_DIR", default_value = "qsec-out")]
    out: PathBuf,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Readout probability against sensing time for each n_ec.
    QsecRabi {
        /// Run a single n_ec instead of the configured list.
        #[arg(long)]
        n_ec: Option<u8>,
        #[arg(long)]
        shots: Option<u64>,
    },
    /// Phase-flip injection with and without correction.
    SingleError {
        #[arg(long)]
        shots: Option<u64>,
        /// Error rotation angle (rad).
        #[arg(long)]
        angle: Option<f64>,
    },
    /// CPMG sensing with bit-flip errors swept in angle and time.
    BitflipCpmg {
        #[arg(long)]
        n_ec: Option<u8>,
        #[arg(long)]
        shots: Option<u64>,
    },
    /// Nuclear coherence against number of optical resets.
    ResetCoherence {
        #[arg(long)]
        resets: Option<usize>,
        #[arg(long)]
        shots: Option<u64>,
    },
    /// Drive-only curves for n_ec 0 and 2 with the hyperfine beat check.
    NoNoiseSim {
        #[arg(long)]
        shots: Option<u64>,
    },
    /// Least-squares decay-cosine fit of a curve file.
    Fit(FitArgs),
    /// Posterior over the decay rate of a curve file.
    Posterior {
        #[command(flatten)]
        fit: FitArgs,
        /// Upper edge of the uniform prior on gamma (1/s).
        #[arg(long, default_value_t = 1e6)]
        gamma_max: f64,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 3_000)]
        burn_in: usize,
    },
    /// Sensitivity curve S(tau) from a fit file.
    Sensitivity {
        /// Fit table written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Second fit table; reports where its curve crosses below the first.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Longest sensing time (s); default 4/gamma.
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Check a config and print it with all defaults resolved.
    Validate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Column {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Single,
    Double,
}

impl From<ModelArg> for FitModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Single => FitModel::Single,
            ModelArg::Double => FitModel::Double,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Curve table written by one of the experiment subcommands.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Single)]
    model: ModelArg,
    /// Which y column to fit. `sampled` is weighted by y_err.
    #[arg(long, value_enum, default_value_t = Column::Sampled)]
    column: Column,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    outputs.push(path.to_path_buf());
    Ok(())
}

fn load_config(global: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = read(path)?;
            match manifest::config_from_manifest(&text)? {
                Some(cfg) => cfg,
                None => ExperimentConfig::from_toml_str(&text)?,
            }
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "curve".into())
}

fn curve_columns(c: &CurveData, column: Column) -> (&[f64], Option<&[f64]>) {
    match column {
        Column::Exact => (&c.y_exact, None),
        Column::Sampled => (&c.y_sampled, Some(&c.y_err)),
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    let out = &cli.global.out;
    let mut outputs = Vec::new();
    let mut cfg = load_config(&cli.global)?;
    let mut extra: Vec<(String, String)> = Vec::new();
    let name = subcommand_name(&cli.command);

    match &cli.command {
        Command::QsecRabi { n_ec, shots } => {
            if let Some(n) = n_ec {
                cfg.qsec_rabi.n_ec = vec![*n];
            }
            if let Some(s) = shots {
                cfg.qsec_rabi.shots = *s;
            }
            for c in experiments::run_qsec_rabi(&cfg)? {
                write(&out.join(format!("{}.tsv", c.label)), &c.to_table(), &mut outputs)?;
            }
        }
        Command::SingleError { shots, angle } => {
            if let Some(s) = shots {
                cfg.single_error.shots = *s;
            }
            if let Some(a) = angle {
                cfg.single_error.angle = *a;
            }
            let r = experiments::run_single_phase_error(&cfg)?;
            for c in [&r.ec_with_error, &r.ec_error_free, &r.no_ec_with_error, &r.no_ec_error_free] {
                write(&out.join(format!("{}.tsv", c.label)), &c.to_table(), &mut outputs)?;
            }
        }
        Command::BitflipCpmg { n_ec, shots } => {
            if let Some(n) = n_ec {
                cfg.bitflip_cpmg.n_ec = vec![*n];
            }
            if let Some(s) = shots {
                cfg.bitflip_cpmg.shots = *s;
            }
            let r = experiments::run_bitflip_cpmg(&cfg)?;
            for case in &r.cases {
                let c = &case.curve;
                write(&out.join("bitflip_curves").join(format!("{}.tsv", c.label)), &c.to_table(), &mut outputs)?;
            }
            write(&out.join("bitflip_summary.tsv"), &r.summary_table(), &mut outputs)?;
        }
        Command::ResetCoherence { resets, shots } => {
            if let Some(k) = resets {
                cfg.reset_coherence.resets = *k;
            }
            if let Some(s) = shots {
                cfg.reset_coherence.shots = *s;
            }
            let c = experiments::run_reset_coherence(&cfg)?;
            println!(
                "coherence after {} resets: {:.6}",
                cfg.reset_coherence.resets,
                c.y_exact.last().copied().unwrap_or(1.0)
            );
            write(&out.join("reset_coherence.tsv"), &c.to_table(), &mut outputs)?;
        }
        Command::NoNoiseSim { shots } => {
            if let Some(s) = shots {
                cfg.no_noise.shots = *s;
            }
            let r = experiments::run_no_noise_sim(&cfg)?;
            let pass = r.beat_power_ec > 0.05 && r.beat_power_no_ec < 1e-6;
            println!(
                "relative power at {:.1} kHz: n_ec=2 {:.4}, n_ec=0 {:.2e}; spectral check: {}",
                r.beat_frequency / 1e3,
                r.beat_power_ec,
                r.beat_power_no_ec,
                if pass { "pass" } else { "fail" }
            );
            extra.push(("spectral_check".into(), if pass { "pass" } else { "fail" }.into()));
            write(&out.join(format!("{}.tsv", r.no_ec.label)), &r.no_ec.to_table(), &mut outputs)?;
            write(&out.join(format!("{}.tsv", r.ec.label)), &r.ec.to_table(), &mut outputs)?;
        }
        Command::Fit(args) => {
            let curve = CurveData::from_table(&read(&args.input)?)?;
            let (y, err) = curve_columns(&curve, args.column);
            let fit = estimation::fit_curve(&curve.x, y, err, args.model.into(), None)?;
            println!(
                "gamma = {:.6e} 1/s (1/gamma = {:.3} us), omega/2pi = {:.4} kHz, contrast = {:.4}{}",
                fit.gamma(),
                1e6 / fit.gamma(),
                fit.omega() / std::f64::consts::TAU / 1e3,
                fit.contrast(),
                if fit.gamma_identified { "" } else { " (no oscillation: gamma unidentified)" }
            );
            extra.push(("input".into(), args.input.display().to_string()));
            write(&out.join(format!("{}.fit.tsv", stem(&args.input))), &fit.to_table(), &mut outputs)?;
        }
        Command::Posterior {
            fit,
            gamma_max,
            chains,
            samples,
            burn_in,
        } => {
            let curve = CurveData::from_table(&read(&fit.input)?)?;
            let settings = PosteriorSettings {
                chains: *chains,
                samples: *samples,
                burn_in: *burn_in,
                seed: cfg.seed,
                ..Default::default()
            };
            let post = estimation::posterior_gamma(
                &curve.x,
                &curve.y_sampled,
                &curve.y_err,
                fit.model.into(),
                GammaPrior { gamma_max: *gamma_max },
                &settings,
            )?;
            println!(
                "gamma mode {:.4e}, mean {:.4e} +/- {:.2e}, 95% CI [{:.4e}, {:.4e}], acceptance {:.3}, R-hat {:.4}",
                post.mode, post.mean, post.std, post.ci.0, post.ci.1, post.acceptance_rate, post.r_hat
            );
            for w in &post.warnings {
                eprintln!("warning: {w}");
            }
            extra.push(("input".into(), fit.input.display().to_string()));
            let base = stem(&fit.input);
            write(&out.join(format!("{base}.posterior.tsv")), &post.to_table(), &mut outputs)?;
            write(&out.join(format!("{base}.posterior_summary.tsv")), &post.summary_table(), &mut outputs)?;
        }
        Command::Sensitivity {
            fit,
            compare,
            t_max,
            points,
        } => {
            let first = FitResult::from_table(&read(fit)?)?;
            let env = Envelope::from_fit(&first);
            let t_max = t_max.unwrap_or(if env.gamma > 0.0 { 4.0 / env.gamma } else { 1e-3 });
            if !(t_max > 0.0) || *points == 0 {
                return Err(CliError::Usage("--t-max must be positive and --points at least 1".into()));
            }
            let times: Vec<f64> = (1..=*points).map(|i| t_max * i as f64 / *points as f64).collect();
            let curve = estimation::sensitivity_curve(&first, &times)?;
            match curve.tau_star {
                Some(t) => println!("tau* = {:.4} us", t * 1e6),
                None => println!("S(tau) decreases monotonically (gamma = 0)"),
            }
            if let Some(other) = compare {
                let second = Envelope::from_fit(&FitResult::from_table(&read(other)?)?);
                match estimation::crossover(&second, &env, t_max * 1e-6, t_max * 10.0) {
                    Some(t) => println!("{} crosses below {} at tau = {:.4} us", other.display(), fit.display(), t * 1e6),
                    None => println!("no crossover in range"),
                }
            }
            extra.push(("input".into(), fit.display().to_string()));
            write(&out.join(format!("{}.sensitivity.tsv", stem(fit))), &curve.to_table(), &mut outputs)?;
        }
        Command::Validate => {
            cfg.validate()?;
            println!("# config valid; resolved values:");
            print!("{}", cfg.to_toml_string());
            return Ok(());
        }
    }

    let m = RunManifest::new(
        name,
        cli.global.config.as_deref(),
        &cfg,
        outputs.clone(),
        started.elapsed().as_secs_f64(),
        extra,
    );
    let mut sink = Vec::new();
    write(&out.join(format!("{name}.manifest.toml")), &m.to_toml(), &mut sink)?;
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::QsecRabi { .. } => "qsec-rabi",
        Command::SingleError { .. } => "single-error",
        Command::BitflipCpmg { .. } => "bitflip-cpmg",
        Command::ResetCoherence { .. } => "reset-coherence",
        Command::NoNoiseSim { .. } => "no-noise-sim",
        Command::Fit(_) => "fit",
        Command::Posterior { .. } => "posterior",
        Command::Sensitivity { .. } => "sensitivity",
        Command::Validate => "validate",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
