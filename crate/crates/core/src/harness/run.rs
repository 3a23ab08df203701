//! Grid execution: optimizer x learning rate x seed, one CSV per cell.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::generator::FactorPair;
use crate::optim::{init_factors, Optimizer, OptimizerKind};
use crate::problems::{make_problem, ProblemInstance};
use crate::sampling::derive_seed;
use crate::VERSION;

use super::config::ExperimentConfig;

/// Loss above which a cell is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Frobenius norm of the weight-space gradient.
    pub grad_norm: f64,
    pub wall_clock_ns: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub optimizer: OptimizerKind,
    pub lr_index: usize,
    pub learning_rate: f64,
    pub seed_index: usize,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!(
            "cell{:04}_{}_lr{}_seed{}.csv",
            self.index,
            self.optimizer.name(),
            self.lr_index,
            self.seed_index
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub problem_seed: u64,
    pub init_seed: u64,
    pub initial_loss: f64,
    pub records: Vec<StepRecord>,
    /// Step at which the cell stopped, with the reason.
    pub diverged: Option<(usize, String)>,
}

impl CellResult {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }

    /// First step whose loss is at most `threshold` times the initial loss.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        let level = threshold * self.initial_loss;
        self.records.iter().find(|r| r.loss <= level).map(|r| r.step)
    }

    pub fn to_csv(&self, cfg: &ExperimentConfig, problem: &ProblemInstance<f64>) -> String {
        let mut out = String::new();
        let mut meta = |k: &str, v: &str| {
            let _ = writeln!(out, "# {k}={v}");
        };
        meta("optimizer", self.cell.optimizer.name());
        meta("learning_rate", &self.cell.learning_rate.to_string());
        for (k, v) in cfg.metadata() {
            meta(&k, &v);
        }
        for (k, v) in problem.spec.metadata() {
            meta(k, &v);
        }
        meta("seed_index", &self.cell.seed_index.to_string());
        meta("init_seed", &self.init_seed.to_string());
        meta("version", VERSION);
        match &self.diverged {
            Some((step, why)) => {
                meta("diverged", "true");
                meta("diverged_at", &step.to_string());
                meta("diverged_reason", why);
            }
            None => meta("diverged", "false"),
        }
        out.push_str("step,loss,grad_norm,wall_clock_ns\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.grad_norm, r.wall_clock_ns);
        }
        out
    }
}

/// Cells in deterministic order: optimizer, then learning rate, then seed.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let o = &cfg.optimizers;
    let mut cells = Vec::new();
    for &optimizer in &o.names {
        for (lr_index, &learning_rate) in o.learning_rates.iter().enumerate() {
            for seed_index in 0..cfg.problem.seeds {
                cells.push(Cell { index: cells.len(), optimizer, lr_index, learning_rate, seed_index });
            }
        }
    }
    cells
}

/// `(problem_seed, init_seed)` for a seed replicate. Shared by every
/// optimizer and learning rate so they face identical instances.
pub fn replicate_seeds(master: u64, seed_index: usize) -> (u64, u64) {
    let replicate = derive_seed(master, seed_index as u64);
    (derive_seed(replicate, 0), derive_seed(replicate, 1))
}

pub fn problem_for(cfg: &ExperimentConfig, seed_index: usize) -> crate::Result<ProblemInstance<f64>> {
    let p = &cfg.problem;
    let (problem_seed, _) = replicate_seeds(cfg.run.master_seed, seed_index);
    make_problem(p.kind, p.m, p.n, p.planted_rank, p.condition_number, problem_seed)
}

/// Runs one cell to completion or divergence.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, problem: &ProblemInstance<f64>) -> crate::Result<CellResult> {
    let p = &cfg.problem;
    let (problem_seed, init_seed) = replicate_seeds(cfg.run.master_seed, cell.seed_index);
    let ocfg = cfg.optimizers.optimizer_config(cell.learning_rate);
    let mut opt = Optimizer::new(cell.optimizer, ocfg, p.m, p.n, p.rank)?;
    let mut fp: FactorPair<f64> = init_factors(p.m, p.n, p.rank, init_seed)?;
    let start = Instant::now();
    let clock = |timing: bool| if timing { start.elapsed().as_nanos() } else { 0 };

    let (loss, g) = problem.loss_and_gradient(&fp)?;
    let initial_loss = loss;
    let mut records = vec![StepRecord { step: 0, loss, grad_norm: g.norm(), wall_clock_ns: clock(cfg.run.timing) }];
    let mut grad = g;
    let mut diverged = None;
    for step in 1..=cfg.run.steps {
        fp = match opt.step(&fp, &grad) {
            Ok(next) => next,
            Err(e) => {
                diverged = Some((step, e.to_string()));
                break;
            }
        };
        let (loss, g) = match problem.loss_and_gradient(&fp) {
            Ok(v) => v,
            Err(e) => {
                diverged = Some((step, e.to_string()));
                break;
            }
        };
        records.push(StepRecord { step, loss, grad_norm: g.norm(), wall_clock_ns: clock(cfg.run.timing) });
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            diverged = Some((step, format!("loss {loss} exceeds {DIVERGENCE_LOSS:e}")));
            break;
        }
        grad = g;
    }
    if let Some((step, why)) = &diverged {
        log::warn!("{} diverged at step {step}: {why}", cell.file_name());
    }
    Ok(CellResult { cell: cell.clone(), problem_seed, init_seed, initial_loss, records, diverged })
}

/// Per-optimizer summary at its best learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSummary {
    pub optimizer: OptimizerKind,
    pub best_learning_rate: f64,
    /// Median over seeds; `None` when the median seed never reaches the threshold.
    pub median_steps_to_threshold: Option<usize>,
    pub median_final_loss: f64,
    pub median_final_relative_loss: f64,
    pub diverged_cells: usize,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub results: Vec<CellResult>,
    pub summaries: Vec<OptimizerSummary>,
}

/// Lower median of optional step counts, `None` sorting last.
pub fn median_steps(mut v: Vec<Option<usize>>) -> Option<usize> {
    v.sort_by_key(|s| s.unwrap_or(usize::MAX));
    v.get((v.len().saturating_sub(1)) / 2).copied().flatten()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn summarize(cfg: &ExperimentConfig, results: &[CellResult]) -> Vec<OptimizerSummary> {
    let threshold = cfg.run.threshold;
    cfg.optimizers
        .names
        .iter()
        .map(|&optimizer| {
            let mut best: Option<(Option<usize>, f64, OptimizerSummary)> = None;
            let mut diverged_cells = 0;
            for (lr_index, &lr) in cfg.optimizers.learning_rates.iter().enumerate() {
                let cells: Vec<&CellResult> = results
                    .iter()
                    .filter(|r| r.cell.optimizer == optimizer && r.cell.lr_index == lr_index)
                    .collect();
                diverged_cells += cells.iter().filter(|r| r.diverged.is_some()).count();
                let steps = median_steps(cells.iter().map(|r| r.steps_to_threshold(threshold)).collect());
                let final_rel = median(
                    cells
                        .iter()
                        .map(|r| if r.diverged.is_some() { f64::INFINITY } else { r.final_loss() / r.initial_loss })
                        .collect(),
                );
                let final_abs = median(
                    cells
                        .iter()
                        .map(|r| if r.diverged.is_some() { f64::INFINITY } else { r.final_loss() })
                        .collect(),
                );
                let candidate = OptimizerSummary {
                    optimizer,
                    best_learning_rate: lr,
                    median_steps_to_threshold: steps,
                    median_final_loss: final_abs,
                    median_final_relative_loss: final_rel,
                    diverged_cells: 0,
                };
                let better = match &best {
                    None => true,
                    Some((bs, bf, _)) => {
                        let key = (steps.unwrap_or(usize::MAX), final_rel);
                        let bkey = (bs.unwrap_or(usize::MAX), *bf);
                        key.0 < bkey.0 || (key.0 == bkey.0 && key.1.total_cmp(&bkey.1).is_lt())
                    }
                };
                if better {
                    best = Some((steps, final_rel, candidate));
                }
            }
            let mut s = best.expect("at least one learning rate").2;
            s.diverged_cells = diverged_cells;
            s
        })
        .collect()
}

pub fn summary_csv(summaries: &[OptimizerSummary]) -> String {
    let mut out = String::from(
        "optimizer,best_learning_rate,median_steps_to_threshold,median_final_loss,median_final_relative_loss,diverged_cells\n",
    );
    for s in summaries {
        let steps = s.median_steps_to_threshold.map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.optimizer.name(),
            s.best_learning_rate,
            steps,
            s.median_final_loss,
            s.median_final_relative_loss,
            s.diverged_cells
        );
    }
    out
}

/// Runs every cell and returns results in cell order.
pub fn run_grid(cfg: &ExperimentConfig, threads: usize) -> crate::Result<GridOutcome> {
    let problems: Vec<ProblemInstance<f64>> =
        (0..cfg.problem.seeds).map(|s| problem_for(cfg, s)).collect::<crate::Result<_>>()?;
    let cells = enumerate_cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| crate::Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(cfg, cell, &problems[cell.seed_index]))
            .collect::<crate::Result<_>>()
    })?;
    let summaries = summarize(cfg, &results);
    Ok(GridOutcome { results, summaries })
}

/// Writes one CSV per cell plus `summary.csv` into `out_dir`.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &GridOutcome, out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for r in &outcome.results {
        let problem = problem_for(cfg, r.cell.seed_index).map_err(|e| io::Error::other(e.to_string()))?;
        let path = out_dir.join(r.cell.file_name());
        fs::write(&path, r.to_csv(cfg, &problem))?;
        written.push(path);
    }
    let path = out_dir.join("summary.csv");
    fs::write(&path, summary_csv(&outcome.summaries))?;
    written.push(path);
    Ok(written)
}
