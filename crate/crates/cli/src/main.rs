//! Experiment CLI: seeded training runs, grid sweeps, normaliser clouds and
//! the numerical verification suites, all reporting CSV.
//!
//! Settings come from an optional plain-text `key=value` config file plus
//! command-line flags; flags win. The only environment variable consulted is
//! `DATA_DIR` (dataset root). Exit codes: 0 success, 1 usage error,
//! 2 verification or numerical failure, 3 I/O failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use replab_core::data::{
    load_cifar10, load_cifar10_test, synthetic_gaussian, Dataset, CIFAR_CLASSES, CIFAR_DIM,
};
use replab_core::divergence::{
    verify_affine_suite, verify_attention_suite, verify_batched_suite, verify_conv_suite,
    verify_lr_policy_suite, SuiteOutcome, TRIAL_CSV_HEADER,
};
use replab_core::experiment::{
    clouds_to_csv, make_clouds, records_to_csv, run_sweep, run_training, summary_lines, ArchSpec,
    ExperimentConfig, OptimizerKind, SweepKind,
};
use replab_core::network::{ActivationKind, ConvPreset, NormaliserKind};
use replab_core::{Error, Result};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "replab",
    version,
    about = "Corrected affine layers, divergence verification and desk-scale ablations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a dense stack and report per-epoch CSV metrics.
    Train(TrainArgs),
    /// Train across a width or batch-size grid and fit the accuracy trend.
    Sweep(SweepArgs),
    /// Push a 2-D standard-normal cloud through a normaliser.
    Clouds(CloudsArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Train a convolutional preset (PatchNorm and baselines).
    PatchnormTrain(PatchnormTrainArgs),
}

/// Options shared by every training-style command.
#[derive(Args, Clone)]
struct RunOpts {
    /// Plain-text key=value settings file; flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Normaliser / correction to build the network with.
    #[arg(long)]
    normaliser: Option<String>,
    /// Activation between layers.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    eta: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// Independent repeats; repeat r trains with seed seed+r.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Standardize features with train-split statistics.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    standardize: Option<bool>,
    /// Repeats trained in parallel; output is independent of this.
    #[arg(long)]
    jobs: Option<usize>,
    /// CIFAR-10 directory or batch file (default: $DATA_DIR).
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use a synthetic Gaussian dataset with this many training samples.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Comma-separated layer widths, e.g. 3072,32,10.
    #[arg(long)]
    arch: Option<String>,
    #[command(flatten)]
    opts: RunOpts,
}

#[derive(Args)]
struct SweepArgs {
    /// width or batch_size.
    #[arg(long)]
    kind: Option<String>,
    /// Comma-separated grid values, e.g. 8,16,32,64,128.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated layer widths the sweep starts from.
    #[arg(long)]
    arch: Option<String>,
    #[command(flatten)]
    opts: RunOpts,
}

#[derive(Args)]
struct CloudsArgs {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Normaliser to push the cloud through.
    #[arg(long)]
    normaliser: Option<String>,
    /// Number of points.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// affine, batched, conv, attention, lr_policy, or all.
    #[arg(long)]
    suite: Option<String>,
    /// Trials per suite.
    #[arg(long)]
    trials: Option<usize>,
    /// Residual tolerance (default: each suite's own).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-trial CSV rows here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PatchnormTrainArgs {
    /// gap-net or reduce-net.
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    opts: RunOpts,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                EXIT_OK
            } else {
                EXIT_USAGE
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Clouds(args) => cmd_clouds(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::PatchnormTrain(args) => cmd_patchnorm_train(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Usage problems exit 1, I/O problems 3, numerical/verification failures 2.
fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io(_) | Error::Format { .. } => EXIT_IO,
        _ => EXIT_VERIFY,
    }
}

// --- config file ---------------------------------------------------------

const KNOWN_KEYS: [&str; 18] = [
    "arch",
    "normaliser",
    "activation",
    "epochs",
    "batch_size",
    "eta",
    "optimizer",
    "repeats",
    "seed",
    "standardize",
    "jobs",
    "data",
    "synthetic",
    "out",
    "kind",
    "grid",
    "n",
    "trials",
];

fn load_config_file(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let Some(path) = path else {
        return Ok(HashMap::new());
    };
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got '{raw}'",
                path.display(),
                lineno + 1
            )));
        };
        let key = k.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) && !["tol", "suite", "preset"].contains(&key.as_str())
        {
            return Err(Error::Config(format!(
                "{}:{}: unknown config key '{key}'",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn parse_key<T: FromStr>(file: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match file.get(key) {
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("config key '{key}' = '{s}': {e}"))),
        None => Ok(None),
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("width '{w}' in arch '{s}': {e}")))
        })
        .collect()
}

// --- shared run resolution -----------------------------------------------

enum DataSource {
    Cifar(PathBuf),
    Synthetic(usize),
}

struct ResolvedRun {
    cfg: ExperimentConfig,
    jobs: usize,
    out: Option<PathBuf>,
    source: DataSource,
}

fn resolve_run(
    opts: &RunOpts,
    file: &HashMap<String, String>,
    arch: ArchSpec,
    default_normaliser: NormaliserKind,
) -> Result<ResolvedRun> {
    let normaliser = match opts.normaliser.as_deref().or(file.get("normaliser").map(String::as_str))
    {
        Some(s) => NormaliserKind::parse(s)?,
        None => default_normaliser,
    };
    let activation = match opts.activation.as_deref().or(file.get("activation").map(String::as_str))
    {
        Some(s) => ActivationKind::parse(s)?,
        None => ActivationKind::Tanh,
    };
    let optimizer = match opts.optimizer.as_deref().or(file.get("optimizer").map(String::as_str)) {
        Some(s) => OptimizerKind::parse(s)?,
        None => OptimizerKind::Sgd,
    };
    let cfg = ExperimentConfig {
        arch,
        normaliser,
        activation,
        epochs: opts.epochs.or(parse_key(file, "epochs")?).unwrap_or(10),
        batch_size: opts.batch_size.or(parse_key(file, "batch_size")?).unwrap_or(32),
        eta: opts.eta.or(parse_key(file, "eta")?).unwrap_or(0.001),
        optimizer,
        repeats: opts.repeats.or(parse_key(file, "repeats")?).unwrap_or(3),
        seed: opts.seed.or(parse_key(file, "seed")?).unwrap_or(1),
        standardize: opts.standardize.or(parse_key(file, "standardize")?).unwrap_or(false),
    };
    cfg.validate()?;
    let source = if let Some(path) = &opts.data {
        DataSource::Cifar(path.clone())
    } else if let Some(n) = opts.synthetic {
        DataSource::Synthetic(n)
    } else if let Some(path) = file.get("data") {
        DataSource::Cifar(PathBuf::from(path))
    } else if let Some(n) = parse_key(file, "synthetic")? {
        DataSource::Synthetic(n)
    } else if let Ok(dir) = std::env::var("DATA_DIR") {
        DataSource::Cifar(PathBuf::from(dir))
    } else {
        return Err(Error::Config(
            "no dataset: pass --data PATH, --synthetic N, or set DATA_DIR".into(),
        ));
    };
    Ok(ResolvedRun {
        jobs: opts.jobs.or(parse_key(file, "jobs")?).unwrap_or(1).max(1),
        out: opts.out.clone().or_else(|| file.get("out").map(PathBuf::from)),
        cfg,
        source,
    })
}

fn load_datasets(run: &ResolvedRun) -> Result<(Dataset, Dataset)> {
    let input_dim = run.cfg.arch.input_dim();
    let classes = run.cfg.arch.classes().unwrap_or(CIFAR_CLASSES);
    let (mut train, mut test) = match &run.source {
        DataSource::Synthetic(n) => {
            if *n == 0 {
                return Err(Error::Config("--synthetic needs at least one sample".into()));
            }
            let n_test = (*n / 5).max(classes);
            (
                synthetic_gaussian(*n, input_dim, classes, run.cfg.seed ^ 0x7EA1_5EED)?,
                synthetic_gaussian(n_test, input_dim, classes, run.cfg.seed ^ 0x7E57_5EED)?,
            )
        }
        DataSource::Cifar(path) => {
            if input_dim != CIFAR_DIM {
                return Err(Error::Config(format!(
                    "arch input width {input_dim} does not match CIFAR-10's {CIFAR_DIM}"
                )));
            }
            if classes != CIFAR_CLASSES {
                return Err(Error::Config(format!(
                    "arch output width {classes} does not match CIFAR-10's {CIFAR_CLASSES} classes"
                )));
            }
            (load_cifar10(path)?, load_cifar10_test(path)?)
        }
    };
    if run.cfg.standardize {
        let (m, s) = train.column_stats();
        train = train.standardized_by(&m, &s)?;
        test = test.standardized_by(&m, &s)?;
    }
    Ok((train, test))
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// --- commands ------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<u8> {
    let file = load_config_file(args.opts.config.as_deref())?;
    let widths = match args.arch.as_deref().or(file.get("arch").map(String::as_str)) {
        Some(s) => parse_widths(s)?,
        None => vec![3072, 32, 10],
    };
    let run = resolve_run(&args.opts, &file, ArchSpec::Dense(widths), NormaliserKind::None)?;
    let (train, test) = load_datasets(&run)?;
    let records = run_training(&run.cfg, &train, &test, run.jobs)?;
    write_text(run.out.as_deref(), &records_to_csv(&records))?;
    eprintln!(
        "config {}  ({} on {}, {} repeats)",
        run.cfg.fingerprint(),
        run.cfg.normaliser.name(),
        match &run.source {
            DataSource::Cifar(p) => p.display().to_string(),
            DataSource::Synthetic(n) => format!("synthetic n={n}"),
        },
        run.cfg.repeats
    );
    for line in summary_lines(&records) {
        eprintln!("{line}");
    }
    let wall: f64 = records.iter().map(|r| r.wall_time_secs).sum();
    eprintln!("total wall time {wall:.1}s");
    Ok(EXIT_OK)
}

fn cmd_sweep(args: SweepArgs) -> Result<u8> {
    let file = load_config_file(args.opts.config.as_deref())?;
    let kind = match args.kind.as_deref().or(file.get("kind").map(String::as_str)) {
        Some(s) => SweepKind::parse(s)?,
        None => return Err(Error::Config("sweep needs --kind width|batch_size".into())),
    };
    let grid: Vec<usize> = match args.grid.as_deref().or(file.get("grid").map(String::as_str)) {
        Some(s) => parse_widths(s)?,
        None => return Err(Error::Config("sweep needs --grid, e.g. --grid 8,16,32".into())),
    };
    let widths = match args.arch.as_deref().or(file.get("arch").map(String::as_str)) {
        Some(s) => parse_widths(s)?,
        None => vec![3072, 32, 10],
    };
    let run = resolve_run(&args.opts, &file, ArchSpec::Dense(widths), NormaliserKind::None)?;
    let (train, test) = load_datasets(&run)?;
    let result = run_sweep(&run.cfg, kind, &grid, &train, &test, run.jobs)?;
    write_text(run.out.as_deref(), &result.to_csv())?;
    eprintln!(
        "{} sweep over {:?}: slope {:.4e} ± {:.4e} accuracy/unit ({:.4e} ± {:.4e} %/unit)",
        result.kind.name(),
        grid,
        result.fit.slope,
        result.fit.slope_stderr,
        100.0 * result.fit.slope,
        100.0 * result.fit.slope_stderr,
    );
    Ok(EXIT_OK)
}

fn cmd_clouds(args: CloudsArgs) -> Result<u8> {
    let file = load_config_file(args.config.as_deref())?;
    let normaliser = match args.normaliser.as_deref().or(file.get("normaliser").map(String::as_str))
    {
        Some(s) => NormaliserKind::parse(s)?,
        None => return Err(Error::Config("clouds needs --normaliser".into())),
    };
    let n = args.n.or(parse_key(&file, "n")?).unwrap_or(1000);
    let seed = args.seed.or(parse_key(&file, "seed")?).unwrap_or(1);
    let points = make_clouds(normaliser, n, seed)?;
    let out = args.out.or_else(|| file.get("out").map(PathBuf::from));
    write_text(out.as_deref(), &clouds_to_csv(&points))?;
    Ok(EXIT_OK)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let file = load_config_file(args.config.as_deref())?;
    let suite = args
        .suite
        .or_else(|| file.get("suite").cloned())
        .unwrap_or_else(|| "all".to_string());
    let trials = args.trials.or(parse_key(&file, "trials")?).unwrap_or(100);
    let tol = match args.tol {
        Some(t) => Some(t),
        None => parse_key(&file, "tol")?,
    };
    let seed = args.seed.or(parse_key(&file, "seed")?).unwrap_or(1);
    if let Some(t) = tol {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::Config(format!("tolerance must be positive, got {t}")));
        }
    }

    let names: Vec<&str> = if suite == "all" {
        vec!["affine", "batched", "conv", "attention", "lr_policy"]
    } else {
        vec![suite.as_str()]
    };
    let mut rows = vec![TRIAL_CSV_HEADER.to_string()];
    let mut all_pass = true;
    for name in names {
        let outcome: SuiteOutcome = match name {
            "affine" => verify_affine_suite(trials, tol.unwrap_or(1e-4), seed)?,
            "batched" => verify_batched_suite(trials, tol.unwrap_or(1e-4), seed)?,
            "conv" => verify_conv_suite(trials, tol.unwrap_or(1e-12), seed)?,
            "attention" => verify_attention_suite(trials, seed)?,
            "lr_policy" => verify_lr_policy_suite(trials, tol.unwrap_or(1e-4), seed)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown suite '{other}'; expected affine, batched, conv, attention, lr_policy or all"
                )));
            }
        };
        println!(
            "suite {:<9} {}  ({} trials, {} failures, worst residual {:.3e})",
            outcome.name,
            if outcome.passed() { "PASS" } else { "FAIL" },
            outcome.trials,
            outcome.failures,
            outcome.worst_residual
        );
        all_pass &= outcome.passed();
        rows.extend(outcome.rows.iter().map(|r| r.csv_row()));
    }
    if let Some(out) = args.out.or_else(|| file.get("out").map(PathBuf::from)) {
        fs::write(out, rows.join("\n") + "\n")?;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_VERIFY })
}

fn cmd_patchnorm_train(args: PatchnormTrainArgs) -> Result<u8> {
    let file = load_config_file(args.opts.config.as_deref())?;
    let preset = match args.preset.as_deref().or(file.get("preset").map(String::as_str)) {
        Some(s) => ConvPreset::parse(s)?,
        None => ConvPreset::GapNet,
    };
    let run = resolve_run(
        &args.opts,
        &file,
        ArchSpec::Conv(preset),
        NormaliserKind::PatchnormAffine,
    )?;
    let (train, test) = load_datasets(&run)?;
    let records = run_training(&run.cfg, &train, &test, run.jobs)?;
    write_text(run.out.as_deref(), &records_to_csv(&records))?;
    eprintln!(
        "config {}  ({} {} preset, {} repeats)",
        run.cfg.fingerprint(),
        run.cfg.normaliser.name(),
        preset.name(),
        run.cfg.repeats
    );
    for line in summary_lines(&records) {
        eprintln!("{line}");
    }
    Ok(EXIT_OK)
}
