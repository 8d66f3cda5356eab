use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nlrobust::experiment::runner::load_source;
use nlrobust::experiment::sweep::SweepPoint;
use nlrobust::experiment::{
    delta_h, emit_jsonl, emit_metrics, metrics_csv, parse_config, run_experiment,
    run_grad_check_suite, sweep_lambdas, sweep_noise_rates, ExperimentConfig,
};
use nlrobust::noise::empirical_noise_rate;
use nlrobust::{Error, LambdaSchedule, NoiseSpec};

#[derive(Parser)]
#[command(name = "nlrobust", version, about = "Noisy-label training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunOpts {
    /// Experiment config file (`key = value` lines).
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Metrics CSV path (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a JSON-lines mirror next to each CSV.
    #[arg(long)]
    jsonl: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write per-epoch metrics.
    Run(RunOpts),
    /// Repeat a config across noise rates and/or entropy schedules.
    Sweep {
        #[command(flatten)]
        opts: RunOpts,
        /// Comma-separated noise rates, e.g. 0.2,0.4,0.6,0.8.
        #[arg(long, value_delimiter = ',')]
        noise_rates: Vec<f64>,
        /// Comma-separated schedules, e.g. none,constant:0.1,linear:0.3.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<String>,
    },
    /// Check every loss gradient against finite differences.
    GradCheck {
        /// Random points per loss.
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corrupt a config's training labels and write `index,clean,noisy` rows.
    MakeNoise {
        config: PathBuf,
        /// `symmetric:<rate>` or `asymmetric:<rate>:<map>`.
        spec: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Format { .. } | Error::Io { .. } | Error::InvalidInput(_) => 2,
        Error::Divergence { .. } => 3,
        Error::OracleFailure(_) => 1,
    }
}

fn load(opts: &RunOpts) -> Result<ExperimentConfig, Error> {
    let mut cfg = parse_config(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = opts.epochs {
        cfg.set_epochs(epochs)?;
    }
    if let Some(out) = &opts.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

fn jsonl_path(csv: &Path) -> PathBuf {
    csv.with_extension("jsonl")
}

fn cmd_run(opts: &RunOpts) -> Result<(), Error> {
    let cfg = load(opts)?;
    let records = run_experiment(&cfg)?;
    match &cfg.output {
        Some(path) => {
            emit_metrics(&records, path)?;
            if opts.jsonl {
                emit_jsonl(&records, &jsonl_path(path))?;
            }
            let last = records.last().expect("at least one epoch");
            eprintln!(
                "{}: test_acc={:.4} val_acc={:.4} delta_h={}",
                path.display(),
                last.test_acc,
                last.val_acc,
                delta_h(&records).map_or("n/a".into(), |d| format!("{d:.4}"))
            );
        }
        None if opts.jsonl => {
            return Err(Error::Config {
                key: "output".into(),
                reason: "--jsonl needs an output path".into(),
            })
        }
        None => print!("{}", metrics_csv(&records)),
    }
    Ok(())
}

fn cmd_sweep(opts: &RunOpts, rates: &[f64], lambdas: &[String]) -> Result<(), Error> {
    let cfg = load(opts)?;
    let base = cfg.output.clone().ok_or_else(|| Error::Config {
        key: "output".into(),
        reason: "sweeps need an output path (config `output` or --out)".into(),
    })?;
    if rates.is_empty() && lambdas.is_empty() {
        return Err(Error::Config {
            key: "sweep".into(),
            reason: "give --noise-rates and/or --lambdas".into(),
        });
    }
    let mut points: Vec<SweepPoint> = Vec::new();
    if !rates.is_empty() {
        points.extend(sweep_noise_rates(&cfg, rates, Some(&base))?);
    }
    if !lambdas.is_empty() {
        let schedules = lambdas
            .iter()
            .map(|s| match s.trim() {
                "none" => Ok(None),
                text => LambdaSchedule::parse(text, cfg.epochs).map(Some),
            })
            .collect::<Result<Vec<_>, _>>()?;
        points.extend(sweep_lambdas(&cfg, &schedules, Some(&base))?);
    }
    for p in &points {
        let path = p.path.as_ref().expect("sweeps write files");
        if opts.jsonl {
            emit_jsonl(&p.records, &jsonl_path(path))?;
        }
        let last = p.records.last().expect("at least one epoch");
        println!("{}\t{}\ttest_acc={:.4}", p.tag, path.display(), last.test_acc);
    }
    Ok(())
}

fn cmd_grad_check(points: usize, seed: u64) -> Result<bool, Error> {
    let report = run_grad_check_suite(points, seed)?;
    print!("{report}");
    Ok(report.passed())
}

fn cmd_make_noise(
    config: &Path,
    spec: &str,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<(), Error> {
    let cfg = parse_config(config)?;
    let (pool, _) = load_source(&cfg)?;
    let spec = NoiseSpec::parse(spec, pool.num_classes(), seed.unwrap_or(cfg.seed))?;
    let noisy = spec.apply(&pool.labels)?;
    let mut csv = String::from("index,clean,noisy\n");
    for (i, (c, n)) in pool.labels.labels().iter().zip(noisy.labels()).enumerate() {
        let _ = writeln!(csv, "{i},{c},{n}");
    }
    match out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?,
        None => print!("{csv}"),
    }
    eprintln!(
        "{spec}: {} labels, realized flip rate {:.4}",
        noisy.len(),
        empirical_noise_rate(&pool.labels, &noisy)?
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(opts) => cmd_run(opts),
        Command::Sweep {
            opts,
            noise_rates,
            lambdas,
        } => cmd_sweep(opts, noise_rates, lambdas),
        Command::GradCheck { points, seed } => match cmd_grad_check(*points, *seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::MakeNoise {
            config,
            spec,
            seed,
            out,
        } => cmd_make_noise(config, spec, *seed, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
