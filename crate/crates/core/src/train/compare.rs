//! Multi-seed comparison of several run configs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::RunConfig;
use super::data::load_dataset;
use super::run::{median, run_with_data, write_json, RunOptions, RunSummary};

#[derive(Clone, Debug, Default)]
pub struct CompareOptions {
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub sparsity: f64,
    pub runs: usize,
    pub accuracy_median: f64,
    pub accuracy_min: f64,
    pub accuracy_max: f64,
    /// Median across seeds of each run's early gradient-norm median.
    pub early_grad_norm_median: f64,
    pub final_sparsity_median: f64,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    /// Run summaries, config-major then seed.
    pub runs: Vec<RunSummary>,
    pub methods: Vec<MethodSummary>,
}

impl CompareReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn runs_of<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a RunSummary> + 'a {
        self.runs.iter().filter(move |r| r.name == name)
    }
}

fn sparsity_of(r: &RunSummary) -> f64 {
    r.target_sparsity.unwrap_or(0.0)
}

fn summarise(name: &str, runs: &[&RunSummary]) -> MethodSummary {
    let acc: Vec<f64> = runs.iter().map(|r| r.final_test_accuracy).collect();
    MethodSummary {
        method: name.to_string(),
        sparsity: runs.first().map_or(0.0, |r| sparsity_of(r)),
        runs: runs.len(),
        accuracy_median: median(&acc),
        accuracy_min: acc.iter().copied().fold(f64::INFINITY, f64::min),
        accuracy_max: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        early_grad_norm_median: median(&runs.iter().map(|r| r.early_grad_norm_median).collect::<Vec<_>>()),
        final_sparsity_median: median(&runs.iter().map(|r| r.final_sparsity).collect::<Vec<_>>()),
    }
}

/// Runs every config once per seed. Config names must be distinct.
pub fn compare(configs: &[RunConfig], seeds: &[u64], opts: &CompareOptions) -> Result<CompareReport> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one config and one seed".into()));
    }
    for (i, c) in configs.iter().enumerate() {
        if configs[..i].iter().any(|d| d.name == c.name) {
            return Err(Error::Config(format!("duplicate method name {}", c.name)));
        }
    }
    let mut runs = Vec::with_capacity(configs.len() * seeds.len());
    for cfg in configs {
        let data = load_dataset(&cfg.data)?;
        for &seed in seeds {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let ro = RunOptions {
                out_dir: opts
                    .out_dir
                    .as_ref()
                    .map(|d| d.join("runs").join(&cfg.name).join(format!("seed{seed}"))),
                deterministic: opts.deterministic,
                verbose: opts.verbose,
            };
            runs.push(run_with_data(&cfg, data.clone(), &ro)?.summary);
        }
    }
    let methods = configs
        .iter()
        .map(|c| summarise(&c.name, &runs.iter().filter(|r| r.name == c.name).collect::<Vec<_>>()))
        .collect();
    let report = CompareReport { runs, methods };
    if let Some(dir) = &opts.out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    method: &'a str,
    sparsity: f64,
    seed: u64,
    final_test_accuracy: f64,
}

#[derive(Serialize)]
struct EpochRow<'a> {
    method: &'a str,
    sparsity: f64,
    seed: u64,
    epoch: u32,
    value: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn put<S: Serialize>(w: &mut csv::Writer<std::fs::File>, path: &Path, row: S) -> Result<()> {
    w.serialize(row).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `summary.csv`, `summary.json` and the long-form curve files.
pub fn write_report(dir: &Path, report: &CompareReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("summary.csv");
    let mut w = csv_writer(&path)?;
    for m in &report.methods {
        put(&mut w, &path, m)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("summary.json"), &report.methods)?;

    let path = dir.join("accuracy_vs_sparsity.csv");
    let mut w = csv_writer(&path)?;
    for r in &report.runs {
        put(
            &mut w,
            &path,
            AccuracyRow {
                method: &r.name,
                sparsity: sparsity_of(r),
                seed: r.seed,
                final_test_accuracy: r.final_test_accuracy,
            },
        )?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    type Pick = fn(&super::run::EpochLog) -> f64;
    let curves: [(&str, Pick); 2] = [
        ("grad_norm_vs_epoch.csv", |e| e.grad_norm_sum),
        ("density_vs_epoch.csv", |e| e.density),
    ];
    for (file, pick) in curves {
        let path = dir.join(file);
        let mut w = csv_writer(&path)?;
        for r in &report.runs {
            for e in &r.epochs {
                put(
                    &mut w,
                    &path,
                    EpochRow {
                        method: &r.name,
                        sparsity: sparsity_of(r),
                        seed: r.seed,
                        epoch: e.epoch,
                        value: pick(e),
                    },
                )?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
