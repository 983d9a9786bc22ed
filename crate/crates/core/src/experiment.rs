//! End-to-end runs: data loading, training, evaluation, sweeps and
//! backbone comparisons, plus their on-disk artifacts.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{load_csv, split, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, EvalReport, GroupMetrics, TotalMode};
use crate::model::HamurModel;
use crate::train::{train, EpochRecord, TrainReport};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const REPORT_FILE: &str = "report.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    if !config.data.path.exists() {
        return Err(Error::Data(format!("data file {} does not exist", config.data.path.display())));
    }
    let all = load_csv(&config.data.path, &config.data.spec)?;
    let [a, b, c] = config.data.split;
    let (train, valid, test) = split(&all, (a, b, c), config.data.split_seed)?;
    Ok(Splits { train, valid, test })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub model: HamurModel,
    pub report: TrainReport,
    pub test: EvalReport,
}

pub fn run(config: &ExperimentConfig, splits: &Splits, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<RunOutcome> {
    config.validate()?;
    let mut model = HamurModel::new(config.model_config(), config.seed)?;
    let report = train(
        &mut model,
        &splits.train,
        &splits.valid,
        &config.train,
        &config.optim,
        config.seed,
        on_epoch,
    )?;
    let scores = model.predict(&splits.test, config.train.eval_batch_size)?;
    let test = evaluate_scores(&splits.test, &scores, TotalMode::Pooled)?;
    Ok(RunOutcome {
        config: config.clone(),
        model,
        report,
        test,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

fn rows(report: &EvalReport) -> impl Iterator<Item = (String, &GroupMetrics)> {
    report
        .domains
        .iter()
        .enumerate()
        .map(|(i, m)| ((i + 1).to_string(), m))
        .chain(std::iter::once(("total".to_string(), &report.total)))
}

/// Tab-separated per-domain and total metrics.
pub fn metrics_table(report: &EvalReport) -> String {
    let mut out = String::from("domain\tn\tauc\tlogloss\n");
    for (name, m) in rows(report) {
        let _ = writeln!(out, "{name}\t{}\t{}\t{}", m.n, fmt_opt(m.auc), fmt_opt(m.logloss));
    }
    out
}

/// Writes the resolved config, seed, epoch report, checkpoint and test
/// metrics into `dir`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG), outcome.config.to_toml())?;
    std::fs::write(dir.join(SEED_FILE), format!("{}\n", outcome.config.seed))?;
    std::fs::write(dir.join(REPORT_FILE), outcome.report.to_json_lines())?;
    checkpoint::save(&outcome.model, &dir.join(CHECKPOINT_FILE))?;
    std::fs::write(dir.join(METRICS_FILE), metrics_table(&outcome.test))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Representation matrix size `k`.
    Rank,
    /// Hyper-network hidden width `m`.
    HyperDim,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(SweepAxis::Rank),
            "hyper_dim" => Ok(SweepAxis::HyperDim),
            other => Err(Error::config("--axis", format!("unknown axis `{other}` (expected k or hyper_dim)"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rank => "k",
            SweepAxis::HyperDim => "hyper_dim",
        }
    }

    pub fn apply(self, config: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = config.clone();
        match self {
            SweepAxis::Rank => c.hyper.rank = value,
            SweepAxis::HyperDim => c.hyper.hidden = value,
        }
        c
    }
}

#[derive(Debug)]
pub struct SweepRow {
    pub value: usize,
    pub outcome: Result<RunOutcome>,
}

/// One full run per value over a shared split. Failed runs are kept as rows.
pub fn sweep(
    config: &ExperimentConfig,
    splits: &Splits,
    axis: SweepAxis,
    values: &[usize],
    on_run: &mut dyn FnMut(usize, &Result<RunOutcome>),
) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| {
            let outcome = run(&axis.apply(config, value), splits, &mut |_| {});
            on_run(value, &outcome);
            SweepRow { value, outcome }
        })
        .collect()
}

/// Two-column table of the swept value against total test AUC.
pub fn sweep_table(axis: SweepAxis, rows: &[(usize, Option<f64>)]) -> String {
    let mut out = format!("{}\tauc\n", axis.name());
    for (v, auc) in rows {
        let _ = writeln!(out, "{v}\t{}", fmt_opt(*auc));
    }
    out
}

/// The same configuration with adapters switched off.
pub fn baseline_config(config: &ExperimentConfig) -> ExperimentConfig {
    let mut c = config.clone();
    c.adapter.enabled = false;
    c
}

/// Trains the plain backbone and the backbone with adapters under one seed.
pub fn compare(
    config: &ExperimentConfig,
    splits: &Splits,
    on_epoch: &mut dyn FnMut(&str, &EpochRecord),
) -> Result<(RunOutcome, RunOutcome)> {
    let mut with_adapters = config.clone();
    with_adapters.adapter.enabled = true;
    let base = run(&baseline_config(config), splits, &mut |r| on_epoch("baseline", r))?;
    let hamur = run(&with_adapters, splits, &mut |r| on_epoch("hamur", r))?;
    Ok((base, hamur))
}

pub fn compare_table(base: &EvalReport, hamur: &EvalReport) -> String {
    let mut out = String::from("domain\tn\tbaseline_auc\thamur_auc\tbaseline_logloss\thamur_logloss\n");
    for ((name, b), (_, h)) in rows(base).zip(rows(hamur)) {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}\t{}",
            b.n,
            fmt_opt(b.auc),
            fmt_opt(h.auc),
            fmt_opt(b.logloss),
            fmt_opt(h.logloss)
        );
    }
    out
}
