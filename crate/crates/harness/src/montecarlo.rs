//! Many independent games in parallel, aggregated in seed order.

use crate::config::RunConfig;
use crate::game::{run_game, EndReason, GameLog};
use crate::HarnessError;
use jenga_core::rng::mix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    pub attempts: usize,
    pub extracted: usize,
    pub stuck_correct: usize,
    pub errors: usize,
    /// Correct attempts (extracted or correctly stuck) before the game ended.
    pub correct: usize,
    pub collapsed: bool,
    pub success_fraction: f64,
}

impl RunRow {
    fn from_log(run: usize, log: &GameLog) -> Self {
        let t = &log.totals;
        RunRow {
            run,
            seed: log.seed,
            attempts: t.attempts,
            extracted: t.extracted_ok,
            stuck_correct: t.stuck_correct,
            errors: t.errors,
            correct: t.correct(),
            collapsed: log.end == EndReason::Collapse,
            success_fraction: t.success_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

impl Stat {
    /// Population statistics; NaN for an empty sample.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                max: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub base_seed: u64,
    pub config_hash: String,
    pub extracted: Stat,
    pub stuck_correct: Stat,
    pub errors: Stat,
    pub attempts: Stat,
    pub correct: Stat,
    /// Attempts of the games that ended in a collapse.
    pub attempts_to_collapse: Option<Stat>,
    pub collapse_fraction: f64,
    /// Correct attempts over all attempts, pooled across runs.
    pub success_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub rows: Vec<RunRow>,
    pub summary: Summary,
}

pub fn run_seed(base_seed: u64, run: usize) -> u64 {
    mix(base_seed, run as u64)
}

pub fn summarize(rows: &[RunRow], base_seed: u64, config_hash: &str) -> Summary {
    let col = |f: fn(&RunRow) -> usize| rows.iter().map(|r| f(r) as f64).collect::<Vec<_>>();
    let collapsed: Vec<f64> = rows.iter().filter(|r| r.collapsed).map(|r| r.attempts as f64).collect();
    let total_attempts: usize = rows.iter().map(|r| r.attempts).sum();
    let total_correct: usize = rows.iter().map(|r| r.correct).sum();
    Summary {
        runs: rows.len(),
        base_seed,
        config_hash: config_hash.to_string(),
        extracted: Stat::of(&col(|r| r.extracted)),
        stuck_correct: Stat::of(&col(|r| r.stuck_correct)),
        errors: Stat::of(&col(|r| r.errors)),
        attempts: Stat::of(&col(|r| r.attempts)),
        correct: Stat::of(&col(|r| r.correct)),
        collapse_fraction: collapsed.len() as f64 / rows.len().max(1) as f64,
        attempts_to_collapse: (!collapsed.is_empty()).then(|| Stat::of(&collapsed)),
        success_fraction: if total_attempts == 0 {
            0.0
        } else {
            total_correct as f64 / total_attempts as f64
        },
    }
}

/// Plays `n_runs` games with seeds `mix(base_seed, i)`. Runs are
/// independent and results come back in run order regardless of threading.
pub fn monte_carlo(config: &RunConfig, n_runs: usize, base_seed: u64) -> Result<MonteCarlo, HarnessError> {
    if n_runs == 0 {
        return Err(HarnessError::Config("at least one run is required".into()));
    }
    config.validate()?;
    let logs: Vec<GameLog> = (0..n_runs)
        .into_par_iter()
        .map(|i| run_game(config, run_seed(base_seed, i)))
        .collect::<Result<_, _>>()?;
    let rows: Vec<RunRow> = logs.iter().enumerate().map(|(i, l)| RunRow::from_log(i, l)).collect();
    let summary = summarize(&rows, base_seed, &config.hash());
    Ok(MonteCarlo { rows, summary })
}
