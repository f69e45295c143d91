//! Seed fan-out shared by `run` and `compare`.
//!
//! Seeds execute on a bounded rayon pool; results are reassembled in seed
//! order so the CSV bytes never depend on scheduling. A deadline, when set,
//! is checked before each seed starts and once more at the end, so a budget
//! overrun still flushes every completed seed.

use std::time::Instant;

use rayon::prelude::*;

use sbsrl::learner::{baseline_mean_run, sbsrl_run, RunResult, TerminationReason};

use crate::config::{Experiment, LoopKind};
use crate::report::CsvEpisodeRow;
use crate::{CliError, Result};

/// Everything a finished (possibly truncated) group of seed runs produced.
pub struct GroupOutcome {
    pub rows: Vec<CsvEpisodeRow>,
    pub reasons: Vec<(u64, TerminationReason)>,
    pub results: Vec<(u64, RunResult)>,
    /// Set when a seed failed or the deadline tripped; completed seeds are
    /// still present in `rows`.
    pub abort: Option<CliError>,
}

impl GroupOutcome {
    pub fn completed_seeds(&self) -> Vec<u64> {
        self.results.iter().map(|(s, _)| *s).collect()
    }
}

/// Runs one experiment over `seeds`, honoring an optional deadline.
pub fn run_group(
    exp: &Experiment,
    seeds: &[u64],
    parallelism: usize,
    deadline: Option<(Instant, f64)>,
) -> GroupOutcome {
    let runner = |seed: u64| -> Result<RunResult> {
        if let Some((start, budget)) = deadline {
            let elapsed = start.elapsed().as_secs_f64();
            if elapsed > budget {
                return Err(CliError::BudgetExceeded { elapsed, budget });
            }
        }
        let mut sink = |_: &sbsrl::learner::EpisodeLog| {};
        let res = match exp.loop_kind {
            LoopKind::Sbsrl => sbsrl_run(&exp.run, seed, &mut sink),
            LoopKind::MeanBaseline => baseline_mean_run(&exp.run, seed, &mut sink),
        };
        Ok(res?)
    };

    let outcomes: Vec<(u64, Result<RunResult>)> = if parallelism > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build();
        match pool {
            Ok(pool) => pool.install(|| {
                seeds
                    .par_iter()
                    .map(|&seed| (seed, runner(seed)))
                    .collect()
            }),
            Err(_) => seeds.iter().map(|&seed| (seed, runner(seed))).collect(),
        }
    } else {
        seeds.iter().map(|&seed| (seed, runner(seed))).collect()
    };

    let mut results = Vec::new();
    let mut abort = None;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(res) => results.push((seed, res)),
            Err(e) => {
                if abort.is_none() {
                    abort = Some(e);
                }
            }
        }
    }
    if abort.is_none() {
        if let Some((start, budget)) = deadline {
            let elapsed = start.elapsed().as_secs_f64();
            if elapsed > budget {
                abort = Some(CliError::BudgetExceeded { elapsed, budget });
            }
        }
    }

    let rows = crate::report::rows_from_results(&results);
    let reasons = results
        .iter()
        .map(|(s, r)| (*s, r.termination))
        .collect();
    GroupOutcome {
        rows,
        reasons,
        results,
        abort,
    }
}
