//! The `sbsrl` binary. Exit codes: 0 success, 2 config/input error,
//! 3 runtime abort, 4 wall-clock budget exceeded. `SBSRL_SEED` overrides the
//! configured seed list (a `--seeds` flag still wins over both).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use sbsrl::kernel::{KernelKind, KernelSpec};
use sbsrl::sampler::{sample_budget, small_ball_exponent, BudgetInputs, SmallBallConfig};

use sbsrl_cli::config::{self, Experiment};
use sbsrl_cli::driver::run_group;
use sbsrl_cli::report::{
    describe_result, summarize_rows, write_episodes_csv, write_summary_json,
};
use sbsrl_cli::{compare, plot, CliError};

#[derive(Parser)]
#[command(name = "sbsrl", version, about = "Safe GP model-based RL experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one config across seeds, writing episodes.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if absent).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated seed list overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        /// Worker pool size overriding the config.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Also print summary.json to stdout.
        #[arg(long)]
        json: bool,
    },
    /// Sample-budget calculator: M samples needed for zeta-closeness.
    Budget {
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        zeta: f64,
        /// RKHS norm bound B on each output coordinate.
        #[arg(long, value_name = "B")]
        rkhs_bound: f64,
        /// Output dimension of the dynamics.
        #[arg(long)]
        d_x: usize,
        /// squared-exp | linear | matern52.
        #[arg(long, default_value = "squared-exp")]
        kernel: String,
        /// Comma-separated, one per input dimension; defaults to 1.0 x d_x.
        #[arg(long)]
        lengthscales: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        signal_variance: f64,
        /// Monte-Carlo draws for the small-ball estimate.
        #[arg(long, default_value_t = 4000)]
        draws: usize,
        /// Cap on the returned M.
        #[arg(long, default_value_t = 1_000_000)]
        cap: u64,
        /// Testing hook: bypass the Monte-Carlo estimate and force the
        /// combined exponent d_x (B^2/2 + phi) to this value.
        #[arg(long)]
        force_exponent: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Render SVG charts from an episodes.csv (plain or merged).
    Plot {
        #[arg(long)]
        csv: PathBuf,
        /// curves | bars.
        #[arg(long, default_value = "curves")]
        kind: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Cost budget d for rules and violation bars; defaults to the
        /// value recorded in summary.json next to the CSV.
        #[arg(long)]
        budget: Option<f64>,
        /// Print the written paths as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run sbsrl + mean baseline (+ exploration-threshold ablations) for
    /// each config and merge the outputs.
    Compare {
        /// Config files; each contributes an sbsrl and a baseline group.
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Comma-separated d_sigma^0 values, each an extra group on the
        /// first config.
        #[arg(long)]
        dsigma_ablation: Option<String>,
        /// Also print the summary array to stdout.
        #[arg(long)]
        json: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run {
            config,
            out,
            seeds,
            parallelism,
            json,
        } => cmd_run(&config, &out, seeds.as_deref(), parallelism, json),
        Cmd::Budget {
            delta,
            zeta,
            rkhs_bound,
            d_x,
            kernel,
            lengthscales,
            signal_variance,
            draws,
            cap,
            force_exponent,
            json,
        } => cmd_budget(
            delta,
            zeta,
            rkhs_bound,
            d_x,
            &kernel,
            lengthscales.as_deref(),
            signal_variance,
            draws,
            cap,
            force_exponent,
            json,
        ),
        Cmd::Plot {
            csv,
            kind,
            out,
            budget,
            json,
        } => cmd_plot(&csv, &kind, &out, budget, json),
        Cmd::Compare {
            configs,
            out,
            seeds,
            parallelism,
            dsigma_ablation,
            json,
        } => cmd_compare(
            &configs,
            &out,
            seeds.as_deref(),
            parallelism,
            dsigma_ablation.as_deref(),
            json,
        ),
    };
    std::process::exit(code);
}

/// Flag > SBSRL_SEED > manifest list.
fn resolve_seeds(exp: &Experiment, flag: Option<&str>) -> Result<Vec<u64>, String> {
    if let Some(list) = flag {
        let seeds: Result<Vec<u64>, _> = list.split(',').map(|s| s.trim().parse()).collect();
        let seeds = seeds.map_err(|_| format!("--seeds: bad list `{list}`"))?;
        if seeds.is_empty() {
            return Err("--seeds: list must be nonempty".to_string());
        }
        return Ok(seeds);
    }
    if let Ok(v) = std::env::var("SBSRL_SEED") {
        let seed: u64 = v
            .parse()
            .map_err(|_| format!("SBSRL_SEED: bad seed `{v}`"))?;
        return Ok(vec![seed]);
    }
    Ok(exp.manifest.seeds.clone())
}

fn exit_for_abort(e: &CliError) -> i32 {
    match e {
        CliError::BudgetExceeded { .. } => 4,
        _ => 3,
    }
}

fn cmd_run(
    config: &Path,
    out: &Path,
    seeds_flag: Option<&str>,
    parallelism_flag: Option<usize>,
    json: bool,
) -> i32 {
    let exp = match config::load(config) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    let seeds = match resolve_seeds(&exp, seeds_flag) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return 2;
        }
    };
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("config error: output directory {}: {e}", out.display());
        return 2;
    }
    let parallelism = parallelism_flag.unwrap_or(exp.manifest.parallelism);
    let deadline = exp
        .manifest
        .wall_clock_budget_s
        .map(|b| (Instant::now(), b));

    let outcome = run_group(&exp, &seeds, parallelism, deadline);
    for (seed, res) in &outcome.results {
        eprintln!("{}", describe_result(*seed, res));
    }

    let done = outcome.completed_seeds();
    let summary = summarize_rows(
        &exp.name,
        exp.run.env.cost_budget,
        &done,
        &outcome.rows,
        &outcome.reasons,
    );
    let csv_path = out.join("episodes.csv");
    if let Err(e) = write_episodes_csv(&csv_path, &outcome.rows) {
        eprintln!("error: {e}");
        return 3;
    }
    let sum_path = out.join("summary.json");
    if let Err(e) = write_summary_json(&sum_path, &summary) {
        eprintln!("error: {e}");
        return 3;
    }
    if json {
        match serde_json::to_string_pretty(&summary) {
            Ok(s) => println!("{s}"),
            Err(e) => {
                eprintln!("error: {e}");
                return 3;
            }
        }
    }
    match outcome.abort {
        Some(e) => {
            eprintln!("aborted after {} of {} seeds: {e}", done.len(), seeds.len());
            exit_for_abort(&e)
        }
        None => 0,
    }
}

#[derive(Serialize)]
struct BudgetJson {
    #[serde(rename = "M")]
    m: u64,
    phi_hat: f64,
    zeta: f64,
    delta: f64,
    clamped: bool,
}

#[allow(clippy::too_many_arguments)]
fn cmd_budget(
    delta: f64,
    zeta: f64,
    rkhs_bound: f64,
    d_x: usize,
    kernel: &str,
    lengthscales: Option<&str>,
    signal_variance: f64,
    draws: usize,
    cap: u64,
    force_exponent: Option<f64>,
    json: bool,
) -> i32 {
    let inner = || -> sbsrl_cli::Result<BudgetJson> {
        let (phi_hat, inputs) = match force_exponent {
            Some(e) => {
                // rkhs_bound 1e-8 contributes B^2/2 = 5e-17, which rounds
                // away against any exponent of interest; the forced value
                // passes through exactly.
                let inputs = BudgetInputs {
                    delta,
                    zeta,
                    rkhs_bound: 1e-8,
                    d_x: 1,
                    small_ball_exponent: e,
                    cap,
                };
                (e, inputs)
            }
            None => {
                let kind = match kernel {
                    "squared-exp" => KernelKind::SquaredExp,
                    "linear" => KernelKind::Linear,
                    "matern52" => KernelKind::Matern52,
                    other => {
                        return Err(CliError::File {
                            path: "--kernel".to_string(),
                            msg: format!("unknown kernel `{other}`"),
                        })
                    }
                };
                let ls: Vec<f64> = match lengthscales {
                    Some(list) => list
                        .split(',')
                        .map(|s| s.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| CliError::File {
                            path: "--lengthscales".to_string(),
                            msg: format!("bad list `{list}`"),
                        })?,
                    None => vec![1.0; d_x],
                };
                let spec = KernelSpec::new(kind, ls, signal_variance)?;
                let mut ball = SmallBallConfig::default_for_dim(spec.input_dim());
                ball.n_draws = draws;
                let phi = small_ball_exponent(&spec, zeta, &ball)?;
                let inputs = BudgetInputs {
                    delta,
                    zeta,
                    rkhs_bound,
                    d_x,
                    small_ball_exponent: phi,
                    cap,
                };
                (phi, inputs)
            }
        };
        let budget = sample_budget(&inputs)?;
        Ok(BudgetJson {
            m: budget.m,
            phi_hat,
            zeta,
            delta,
            clamped: budget.capped,
        })
    };
    match inner() {
        Ok(b) => {
            if json {
                match serde_json::to_string_pretty(&b) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return 3;
                    }
                }
            } else {
                println!("phi_hat = {}", b.phi_hat);
                println!("M = {}{}", b.m, if b.clamped { " (clamped to cap)" } else { "" });
            }
            0
        }
        Err(e) => {
            eprintln!("config error: {e}");
            2
        }
    }
}

fn cmd_plot(csv: &Path, kind: &str, out: &Path, budget: Option<f64>, json: bool) -> i32 {
    let budget = match budget {
        Some(b) => b,
        None => {
            let sibling = csv.with_file_name("summary.json");
            match sbsrl_cli::report::read_summary_json(&sibling) {
                Ok(s) => s.cost_budget,
                Err(_) => {
                    eprintln!(
                        "config error: no --budget given and {} not readable",
                        sibling.display()
                    );
                    return 2;
                }
            }
        }
    };
    match plot::render(csv, kind, out, budget) {
        Ok(paths) => {
            if json {
                let list: Vec<String> =
                    paths.iter().map(|p| p.display().to_string()).collect();
                match serde_json::to_string(&list) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return 3;
                    }
                }
            } else {
                for p in paths {
                    println!("wrote {}", p.display());
                }
            }
            0
        }
        Err(e) => {
            eprintln!("config error: {e}");
            2
        }
    }
}

fn cmd_compare(
    configs: &[PathBuf],
    out: &Path,
    seeds_flag: Option<&str>,
    parallelism_flag: Option<usize>,
    ablation_flag: Option<&str>,
    json: bool,
) -> i32 {
    let mut exps = Vec::new();
    for path in configs {
        match config::load(path) {
            Ok(e) => exps.push(e),
            Err(e) => {
                eprintln!("config error: {e}");
                return 2;
            }
        }
    }
    let ablation: Vec<f64> = match ablation_flag {
        None => Vec::new(),
        Some(list) => match list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<Vec<f64>, _>>()
        {
            Ok(v) => v,
            Err(_) => {
                eprintln!("config error: --dsigma-ablation: bad list `{list}`");
                return 2;
            }
        },
    };
    let seeds = match resolve_seeds(&exps[0], seeds_flag) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return 2;
        }
    };
    let parallelism = parallelism_flag.unwrap_or(exps[0].manifest.parallelism);
    let budget = exps[0].manifest.wall_clock_budget_s;

    let groups = compare::expand_groups(&exps, &ablation);
    match compare::run_compare(&groups, &seeds, parallelism, budget, out) {
        Ok(outcome) => {
            if json {
                match serde_json::to_string_pretty(&outcome.summaries) {
                    Ok(s) => println!("{s}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return 3;
                    }
                }
            }
            match outcome.abort {
                Some(e) => {
                    eprintln!("aborted: {e}");
                    exit_for_abort(&e)
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            3
        }
    }
}
