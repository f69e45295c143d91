//! Frozen CSV and JSON artifacts.
//!
//! `episodes.csv` is the one artifact other tools consume, so its header is
//! a compile-time constant guarded by a golden test, floats use the shortest
//! round-trip form with `.` decimals, booleans serialize as 0/1, and rows
//! are grouped by seed in manifest order. `wall_time_s` is written as 0.0:
//! the byte-for-byte reproducibility contract outranks timing telemetry,
//! which remains available in the in-memory episode logs.

use std::path::Path;

use sbsrl::learner::{EpisodeLog, RunResult, TerminationReason};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const CSV_HEADER: &str = "seed,episode,j_r_true,j_c_true,max_inst_cost,j_s_planned,beta_n,\
                              d_sigma_n,delta_zeta,feasible_safe,feasible_explore,terminated,\
                              wall_time_s";

/// One `episodes.csv` data row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvEpisodeRow {
    pub seed: u64,
    pub episode: usize,
    pub j_r_true: f64,
    pub j_c_true: f64,
    pub max_inst_cost: f64,
    pub j_s_planned: f64,
    pub beta_n: f64,
    pub d_sigma_n: f64,
    pub delta_zeta: f64,
    pub feasible_safe: bool,
    pub feasible_explore: bool,
    pub terminated: bool,
    pub wall_time_s: f64,
}

impl CsvEpisodeRow {
    pub fn from_log(seed: u64, log: &EpisodeLog) -> Self {
        CsvEpisodeRow {
            seed,
            episode: log.episode,
            j_r_true: log.j_r_true,
            j_c_true: log.j_c_true,
            max_inst_cost: log.max_inst_cost,
            j_s_planned: log.planned_j_s,
            beta_n: log.beta_n,
            d_sigma_n: log.d_sigma_n,
            delta_zeta: log.delta_zeta,
            feasible_safe: log.feasible_safe,
            feasible_explore: log.feasible_explore,
            terminated: log.terminated,
            wall_time_s: 0.0,
        }
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.episode,
            self.j_r_true,
            self.j_c_true,
            self.max_inst_cost,
            self.j_s_planned,
            self.beta_n,
            self.d_sigma_n,
            self.delta_zeta,
            self.feasible_safe as u8,
            self.feasible_explore as u8,
            self.terminated as u8,
            self.wall_time_s,
        )
    }

    pub fn parse(path: &Path, line_no: usize, line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        let header_fields = header_fields();
        if fields.len() != header_fields.len() {
            return Err(CliError::file(
                path,
                format!(
                    "line {line_no}: expected {} fields, got {}",
                    header_fields.len(),
                    fields.len()
                ),
            ));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i].parse().map_err(|_| {
                CliError::file(
                    path,
                    format!(
                        "line {line_no}: column `{}`: bad number `{}`",
                        header_fields[i], fields[i]
                    ),
                )
            })
        };
        let b = |i: usize| -> Result<bool> {
            match fields[i] {
                "0" => Ok(false),
                "1" => Ok(true),
                v => Err(CliError::file(
                    path,
                    format!(
                        "line {line_no}: column `{}`: expected 0/1, got `{v}`",
                        header_fields[i]
                    ),
                )),
            }
        };
        Ok(CsvEpisodeRow {
            seed: f(0)? as u64,
            episode: f(1)? as usize,
            j_r_true: f(2)?,
            j_c_true: f(3)?,
            max_inst_cost: f(4)?,
            j_s_planned: f(5)?,
            beta_n: f(6)?,
            d_sigma_n: f(7)?,
            delta_zeta: f(8)?,
            feasible_safe: b(9)?,
            feasible_explore: b(10)?,
            terminated: b(11)?,
            wall_time_s: f(12)?,
        })
    }
}

fn header_fields() -> Vec<&'static str> {
    CSV_HEADER.split(',').collect()
}

/// Writes `episodes.csv`: header, then rows, LF line endings.
pub fn write_episodes_csv(path: &Path, rows: &[CsvEpisodeRow]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::file(path, format!("cannot write csv: {e}")))
}

/// Reads `episodes.csv` back, enforcing the frozen header. An extra leading
/// `config` column (the merged compare format) is accepted and returned as
/// group labels.
pub fn read_episodes_csv(path: &Path) -> Result<(Vec<String>, Vec<CsvEpisodeRow>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::file(path, format!("cannot read csv: {e}")))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::file(path, "empty file, expected a header".to_string()))?;
    let grouped = if header == CSV_HEADER {
        false
    } else if header == format!("config,{CSV_HEADER}") {
        true
    } else {
        let missing = CSV_HEADER
            .split(',')
            .find(|col| !header.split(',').any(|h| h == *col))
            .unwrap_or("header");
        return Err(CliError::file(
            path,
            format!("missing column `{missing}` (header mismatch)"),
        ));
    };
    let mut groups = Vec::new();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (group, rest) = if grouped {
            let (g, rest) = line.split_once(',').ok_or_else(|| {
                CliError::file(path, format!("line {}: missing config column", idx + 1))
            })?;
            (g.to_string(), rest)
        } else {
            (String::new(), line)
        };
        rows.push(CsvEpisodeRow::parse(path, idx + 1, rest)?);
        groups.push(group);
    }
    Ok((groups, rows))
}

/// Per-seed digest recomputable from the CSV columns alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    /// `j_r_true` of the last logged episode.
    pub final_reward: f64,
    /// Episodes with `j_c_true > d`.
    pub total_violations: usize,
    /// Index of the last logged episode.
    pub termination_episode: usize,
    pub termination_reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub config: String,
    pub cost_budget: f64,
    pub seeds: Vec<SeedSummary>,
}

/// Builds the per-seed digest from rows, so that the JSON is by construction
/// a column-wise aggregation of the CSV.
pub fn summarize_rows(
    config: &str,
    cost_budget: f64,
    seeds: &[u64],
    rows: &[CsvEpisodeRow],
    reasons: &[(u64, TerminationReason)],
) -> RunSummary {
    let seed_digest = |seed: u64| -> SeedSummary {
        let mine: Vec<&CsvEpisodeRow> = rows.iter().filter(|r| r.seed == seed).collect();
        let last = mine.last().expect("summarize_rows: seed with no rows");
        let reason = reasons
            .iter()
            .find(|(s, _)| *s == seed)
            .map(|(_, r)| r.to_string())
            .unwrap_or_default();
        SeedSummary {
            seed,
            final_reward: last.j_r_true,
            total_violations: mine.iter().filter(|r| r.j_c_true > cost_budget).count(),
            termination_episode: last.episode,
            termination_reason: reason,
        }
    };
    RunSummary {
        config: config.to_string(),
        cost_budget,
        seeds: seeds.iter().map(|&s| seed_digest(s)).collect(),
    }
}

pub fn write_summary_json(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::file(path, format!("cannot serialize summary: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::file(path, format!("cannot write summary: {e}")))
}

pub fn read_summary_json(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::file(path, format!("cannot read summary: {e}")))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::file(path, format!("cannot parse summary: {e}")))
}

/// Flattens per-seed results into rows in the given seed order.
pub fn rows_from_results(results: &[(u64, RunResult)]) -> Vec<CsvEpisodeRow> {
    let mut rows = Vec::new();
    for (seed, res) in results {
        for log in &res.episodes {
            rows.push(CsvEpisodeRow::from_log(*seed, log));
        }
    }
    rows
}

/// Appends stdout-style progress for one finished seed.
pub fn describe_result(seed: u64, res: &RunResult) -> String {
    let last = res.episodes.last();
    format!(
        "seed {seed}: {} episodes, termination {}, final j_r {:.3}, final j_c {:.3}",
        res.episodes.len(),
        res.termination,
        last.map_or(f64::NAN, |e| e.j_r_true),
        last.map_or(f64::NAN, |e| e.j_c_true),
    )
}
