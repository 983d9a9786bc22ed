//! `hamur`: prepare datasets, train, evaluate, sweep and compare.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hamur_core::config::ExperimentConfig;
use hamur_core::experiment::{self, load_splits, RunOutcome, SweepAxis};
use hamur_core::metrics::{evaluate_scores, TotalMode};
use hamur_core::prepare::{self, SyntheticConfig};
use hamur_core::train::EpochRecord;
use hamur_core::{checkpoint, Error};

#[derive(Parser)]
#[command(name = "hamur", version, about = "Multi-domain CTR training with hyper-network adapters")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert raw data into a canonical CSV plus `.spec.toml` sidecar.
    Prepare(PrepareArgs),
    /// Train one model and write a run directory.
    Train(RunArgs),
    /// Score a split with a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// One full training run per value of `k` or the hyper-network width.
    Sweep(SweepArgs),
    /// Backbone alone against backbone with adapters, same seed.
    Compare(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetName {
    Movielens,
    Synthetic,
}

#[derive(Args)]
struct PrepareArgs {
    dataset: DatasetName,
    /// Directory holding users.dat, movies.dat and ratings.dat.
    #[arg(long, required_if_eq("dataset", "movielens"))]
    raw: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = hamur_core::config::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    instances: usize,
    #[arg(long, default_value_t = 3)]
    domains: u32,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config and `HAMUR_OUT`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `model.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Average per-domain AUCs instead of pooling all instances.
    #[arg(long)]
    macro_total: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `k` or `hyper_dim`.
    #[arg(long)]
    axis: String,
    /// Comma-separated positive integers.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Run up to N values at once, each in its own process.
    #[arg(long, value_name = "N")]
    parallel: Option<usize>,
}

enum Failure {
    Core(Error),
    /// Already reported; exit with this status.
    Exit(u8),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Lookup { .. }
        | Error::Io(_)
        | Error::Checkpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::ConfigHash { .. } => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let parent = args.config.parent().filter(|p| !p.as_os_str().is_empty());
    let base = std::path::absolute(parent.unwrap_or(Path::new(".")))?;
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Config {
        field: "--config".into(),
        message: format!("cannot read {}: {e}", args.config.display()),
    })?;
    let mut config = ExperimentConfig::from_toml(&text, &base)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    Ok(config)
}

fn log_epoch(tag: &str, r: &EpochRecord) {
    let auc = r.valid.total.auc.map_or("NA".into(), |a| format!("{a:.6}"));
    eprintln!(
        "{tag}epoch {:>3}  loss {:.6}  valid_auc {auc}  steps {}  {:.1}s",
        r.epoch, r.train_loss, r.steps, r.seconds
    );
}

fn prepare_cmd(a: &PrepareArgs) -> Result<(), Failure> {
    let ds = match a.dataset {
        DatasetName::Movielens => prepare::movielens(a.raw.as_deref().expect("clap enforces --raw"))?,
        DatasetName::Synthetic => {
            let cfg = SyntheticConfig {
                instances: a.instances,
                num_domains: a.domains,
                label_noise: a.label_noise,
                ..SyntheticConfig::default()
            };
            prepare::synthetic(&cfg, a.seed)?
        }
    };
    let spec = prepare::write_prepared(&ds, &a.out)?;
    let counts = ds.domain_counts();
    let shares: Vec<String> = counts
        .iter()
        .enumerate()
        .map(|(d, &n)| format!("domain {}: {n} ({:.1}%)", d + 1, 100.0 * n as f64 / ds.len() as f64))
        .collect();
    eprintln!("wrote {} rows to {} and {}", ds.len(), a.out.display(), spec.display());
    eprintln!("{}", shares.join(", "));
    Ok(())
}

fn finish_run(outcome: &RunOutcome, dir: &Path) -> Result<(), Failure> {
    experiment::write_run(outcome, dir)?;
    print!("{}", experiment::metrics_table(&outcome.test));
    eprintln!("run written to {}", dir.display());
    Ok(())
}

fn train_cmd(a: &RunArgs) -> Result<(), Failure> {
    let config = load_config(a)?;
    let splits = load_splits(&config)?;
    let outcome = experiment::run(&config, &splits, &mut |r| log_epoch("", r))?;
    finish_run(&outcome, &config.output.dir)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<(), Failure> {
    let config = load_config(&a.run)?;
    let path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.output.dir.join(experiment::CHECKPOINT_FILE));
    let model = checkpoint::load(&path, Some(&config.model_config()))?;
    let splits = load_splits(&config)?;
    let ds = match a.split {
        SplitName::Train => &splits.train,
        SplitName::Valid => &splits.valid,
        SplitName::Test => &splits.test,
    };
    let scores = model.predict(ds, config.train.eval_batch_size)?;
    let mode = if a.macro_total { TotalMode::Macro } else { TotalMode::Pooled };
    print!("{}", experiment::metrics_table(&evaluate_scores(ds, &scores, mode)?));
    Ok(())
}

fn sweep_dir(out: &Path, axis: SweepAxis, value: usize) -> PathBuf {
    out.join(format!("{}={value}", axis.name()))
}

/// Total test AUC from a run directory's metrics table.
fn read_total_auc(dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(dir.join(experiment::METRICS_FILE)).ok()?;
    let line = text.lines().find(|l| l.starts_with("total\t"))?;
    line.split('\t').nth(2)?.parse().ok()
}

type SweepRows = Vec<(usize, Option<f64>)>;

/// Failed runs become `NA` rows; the first error is returned alongside.
fn sweep_in_process(config: &ExperimentConfig, axis: SweepAxis, values: &[usize]) -> Result<(SweepRows, Option<Failure>), Failure> {
    let splits = load_splits(config)?;
    let rows = experiment::sweep(config, &splits, axis, values, &mut |value, outcome| {
        let dir = sweep_dir(&config.output.dir, axis, value);
        match outcome {
            Ok(o) => {
                if let Err(e) = experiment::write_run(o, &dir) {
                    eprintln!("{}={value}: cannot write run: {e}", axis.name());
                }
            }
            Err(e) => eprintln!("{}={value}: failed: {e}", axis.name()),
        }
    });
    let mut first_error = None;
    let table = rows
        .into_iter()
        .map(|r| match r.outcome {
            Ok(o) => (r.value, o.test.total.auc),
            Err(e) => {
                first_error.get_or_insert(Failure::Exit(exit_code(&e)));
                (r.value, None)
            }
        })
        .collect();
    Ok((table, first_error))
}

fn sweep_parallel(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
    jobs: usize,
) -> Result<(SweepRows, Option<Failure>), Failure> {
    let exe = std::env::current_exe()?;
    let mut rows = Vec::new();
    let mut first_error = None;
    for chunk in values.chunks(jobs.max(1)) {
        let mut children = Vec::new();
        for &value in chunk {
            let dir = sweep_dir(&config.output.dir, axis, value);
            std::fs::create_dir_all(&dir)?;
            let cfg_path = dir.join("sweep.toml");
            std::fs::write(&cfg_path, axis.apply(config, value).to_toml())?;
            let child = Command::new(&exe)
                .args(["train", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&dir)
                .stdout(std::process::Stdio::null())
                .spawn()?;
            children.push((value, dir, child));
        }
        for (value, dir, mut child) in children {
            let status = child.wait()?;
            if status.success() {
                rows.push((value, read_total_auc(&dir)));
            } else {
                eprintln!("{}={value}: failed with {status}", axis.name());
                let code = status.code().and_then(|c| u8::try_from(c).ok()).unwrap_or(1);
                first_error.get_or_insert(Failure::Exit(code));
                rows.push((value, None));
            }
        }
    }
    Ok((rows, first_error))
}

fn finish_sweep_table(config: &ExperimentConfig, axis: SweepAxis, rows: &[(usize, Option<f64>)]) -> Result<(), Failure> {
    let table = experiment::sweep_table(axis, rows);
    std::fs::create_dir_all(&config.output.dir)?;
    std::fs::write(config.output.dir.join(format!("sweep_{}.tsv", axis.name())), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<(), Failure> {
    let axis: SweepAxis = a.axis.parse()?;
    if let Some(&bad) = a.values.iter().find(|&&v| v == 0) {
        return Err(Error::Config {
            field: "--values".into(),
            message: format!("values must be positive, got {bad}"),
        }
        .into());
    }
    let config = load_config(&a.run)?;
    for &v in &a.values {
        axis.apply(&config, v).validate()?;
    }
    let (rows, failure) = match a.parallel {
        Some(jobs) => sweep_parallel(&config, axis, &a.values, jobs)?,
        None => sweep_in_process(&config, axis, &a.values)?,
    };
    finish_sweep_table(&config, axis, &rows)?;
    failure.map_or(Ok(()), Err)
}

fn compare_cmd(a: &RunArgs) -> Result<(), Failure> {
    let config = load_config(a)?;
    let splits = load_splits(&config)?;
    let (base, hamur) = experiment::compare(&config, &splits, &mut |tag, r| log_epoch(&format!("[{tag}] "), r))?;
    let out = &config.output.dir;
    experiment::write_run(&base, &out.join("baseline"))?;
    experiment::write_run(&hamur, &out.join("hamur"))?;
    let table = experiment::compare_table(&base.test, &hamur.test);
    std::fs::write(out.join("compare.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Prepare(a) => prepare_cmd(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Evaluate(a) => evaluate_cmd(a),
        Cmd::Sweep(a) => sweep_cmd(a),
        Cmd::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Exit(code)) => ExitCode::from(code),
    }
}
