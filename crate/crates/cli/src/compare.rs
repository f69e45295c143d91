//! The comparison orchestrator: for every provided config it runs the full
//! loop and the mean-only baseline, plus one fixed-threshold ablation group
//! per requested `d_sigma^0` value (applied to the first config). Outputs
//! are merged into one CSV keyed by group name, with a bar chart and a
//! summary array alongside.

use std::path::Path;
use std::time::Instant;

use sbsrl::learner::DsigmaMode;

use crate::config::{Experiment, LoopKind};
use crate::driver::{run_group, GroupOutcome};
use crate::plot::{bars_svg, BarGroup};
use crate::report::{summarize_rows, RunSummary, CSV_HEADER};
use crate::{CliError, Result};

/// One named variant to run.
pub struct GroupSpec {
    pub name: String,
    pub exp: Experiment,
}

/// Expands configs into comparison groups with collision-free names.
pub fn expand_groups(configs: &[Experiment], ablation: &[f64]) -> Vec<GroupSpec> {
    let mut names: Vec<String> = Vec::new();
    let mut unique = |base: String| -> String {
        let mut name = base.clone();
        let mut k = 1;
        while names.contains(&name) {
            k += 1;
            name = format!("{base}-{k}");
        }
        names.push(name.clone());
        name
    };

    let mut groups = Vec::new();
    for cfg in configs {
        let mut sbsrl = cfg.clone();
        sbsrl.loop_kind = LoopKind::Sbsrl;
        groups.push(GroupSpec {
            name: unique(cfg.name.clone()),
            exp: sbsrl,
        });
        let mut mean = cfg.clone();
        mean.loop_kind = LoopKind::MeanBaseline;
        groups.push(GroupSpec {
            name: unique(format!("{}-mean", cfg.name)),
            exp: mean,
        });
    }
    for &v in ablation {
        let base = &configs[0];
        let mut exp = base.clone();
        exp.loop_kind = LoopKind::Sbsrl;
        exp.run.dsigma = if v == 0.0 {
            DsigmaMode::Zero
        } else {
            DsigmaMode::Fixed(v)
        };
        groups.push(GroupSpec {
            name: unique(format!("{}-dsigma-{v}", base.name)),
            exp,
        });
    }
    groups
}

pub struct CompareOutcome {
    pub summaries: Vec<RunSummary>,
    pub abort: Option<CliError>,
}

/// Runs all groups and writes `merged.csv`, `bars.svg`, and
/// `compare_summary.json` into `out_dir`. The first config's wall-clock
/// budget, if any, covers the whole comparison.
pub fn run_compare(
    groups: &[GroupSpec],
    seeds: &[u64],
    parallelism: usize,
    wall_clock_budget_s: Option<f64>,
    out_dir: &Path,
) -> Result<CompareOutcome> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::file(out_dir, format!("cannot create out dir: {e}")))?;
    let deadline = wall_clock_budget_s.map(|b| (Instant::now(), b));

    let mut merged = String::new();
    merged.push_str("config,");
    merged.push_str(CSV_HEADER);
    merged.push('\n');
    let mut bar_rows: Vec<BarGroup> = Vec::new();
    let mut summaries = Vec::new();
    let mut abort = None;

    for group in groups {
        let GroupOutcome {
            rows,
            reasons,
            results,
            abort: group_abort,
        } = run_group(&group.exp, seeds, parallelism, deadline);

        for row in &rows {
            merged.push_str(&group.name);
            merged.push(',');
            merged.push_str(&row.to_line());
            merged.push('\n');
        }
        let budget = group.exp.run.env.cost_budget;
        if !results.is_empty() {
            let done: Vec<u64> = results.iter().map(|(s, _)| *s).collect();
            summaries.push(summarize_rows(&group.name, budget, &done, &rows, &reasons));
        }
        // Raw reward total for now; normalized across groups below.
        bar_rows.push(BarGroup {
            name: group.name.clone(),
            norm_reward: rows.iter().map(|r| r.j_r_true).sum(),
            max_violation: rows
                .iter()
                .map(|r| (r.j_c_true - budget).max(0.0))
                .fold(0.0, f64::max),
        });

        if let Some(e) = group_abort {
            abort = Some(e);
            break;
        }
    }

    // Re-normalize rewards across every group in one pass.
    let best = bar_rows.iter().map(|g| g.norm_reward).fold(0.0f64, f64::max);
    if best > 0.0 {
        for g in bar_rows.iter_mut() {
            g.norm_reward /= best;
        }
    }

    let csv_path = out_dir.join("merged.csv");
    std::fs::write(&csv_path, merged)
        .map_err(|e| CliError::file(&csv_path, format!("cannot write csv: {e}")))?;
    let svg_path = out_dir.join("bars.svg");
    std::fs::write(&svg_path, bars_svg(&bar_rows))
        .map_err(|e| CliError::file(&svg_path, format!("cannot write svg: {e}")))?;
    let sum_path = out_dir.join("compare_summary.json");
    let mut text = serde_json::to_string_pretty(&summaries)
        .map_err(|e| CliError::file(&sum_path, format!("cannot serialize summary: {e}")))?;
    text.push('\n');
    std::fs::write(&sum_path, text)
        .map_err(|e| CliError::file(&sum_path, format!("cannot write summary: {e}")))?;

    Ok(CompareOutcome { summaries, abort })
}
