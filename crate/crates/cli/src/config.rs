//! Flat dotted-key experiment configs.
//!
//! One `key = value` assignment per line, `#` starts a comment, blank lines
//! are ignored. Keys are grouped by dotted prefixes (`env.`, `kernel.`,
//! `run.`, `planner.`, `probe.`, `mc.`, `weights.`, `manifest.`); the full
//! schema with defaults lives in `docs/config.md`. Unknown keys are errors:
//! a typo must fail loudly, not silently fall back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sbsrl::envs::EnvSpec;
use sbsrl::gp::{MeanFn, PriorSpec};
use sbsrl::kernel::{KernelKind, KernelSpec};
use sbsrl::learner::{DsigmaMode, MSpec, RunConfig};
use sbsrl::planner::{IcemParams, McConfig, PenaltyWeights, RolloutMode};
use sbsrl::sampler::SampleEngine;

use crate::{CliError, Result};

/// Which loop the harness drives for this config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopKind {
    Sbsrl,
    MeanBaseline,
}

/// Orchestration settings that live next to the algorithm config.
#[derive(Debug, Clone)]
pub struct ManifestDefaults {
    pub seeds: Vec<u64>,
    pub parallelism: usize,
    pub wall_clock_budget_s: Option<f64>,
}

/// A parsed config file: the core run configuration plus harness settings.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub path: PathBuf,
    pub run: RunConfig,
    pub loop_kind: LoopKind,
    pub manifest: ManifestDefaults,
}

/// Key-value store with consumption tracking; leftovers are unknown keys.
struct KvMap {
    path: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvMap {
    fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped.split_once('=').ok_or_else(|| CliError::Config {
                path: path.display().to_string(),
                line,
                msg: format!("expected `key = value`, got `{stripped}`"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), (value, line)).is_some() {
                return Err(CliError::Config {
                    path: path.display().to_string(),
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KvMap {
            path: path.display().to_string(),
            entries,
        })
    }

    fn err(&self, line: usize, msg: String) -> CliError {
        CliError::Config {
            path: self.path.clone(),
            line,
            msg,
        }
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn take_parsed<T, F>(&mut self, key: &str, what: &str, f: F) -> Result<Option<T>>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        match self.take(key) {
            None => Ok(None),
            Some((v, line)) => f(&v).map(Some).ok_or_else(|| {
                self.err(line, format!("`{key}`: expected {what}, got `{v}`"))
            }),
        }
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_parsed(key, "a float", |v| v.parse().ok())
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take_parsed(key, "a non-negative integer", |v| v.parse().ok())
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.take_parsed(key, "true or false", |v| match v {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    fn take_f64_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.take_parsed(key, "a comma-separated float list", |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect()
        })
    }

    fn take_u64_list(&mut self, key: &str) -> Result<Option<Vec<u64>>> {
        self.take_parsed(key, "a comma-separated integer list", |v| {
            v.split(',').map(|s| s.trim().parse().ok()).collect()
        })
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return Err(CliError::Config {
                path: self.path,
                line,
                msg: format!("unknown key `{key}`"),
            });
        }
        Ok(())
    }
}

/// Loads and validates a config file.
pub fn load(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::file(path, format!("cannot read config: {e}")))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".to_string());
    from_str(path, &name, &text)
}

/// Parses config text; split from `load` so tests can feed strings.
pub fn from_str(path: &Path, name: &str, text: &str) -> Result<Experiment> {
    let mut kv = KvMap::parse(path, text)?;

    let env = parse_env(&mut kv)?;
    let kernel = parse_kernel(&mut kv, &env)?;
    let prior = parse_prior(&mut kv, &env)?;
    let mut run = RunConfig::new(env, kernel, prior);
    parse_run(&mut kv, &mut run)?;
    parse_icem(&mut kv, "planner", &mut run.planner)?;
    parse_icem(&mut kv, "probe", &mut run.probe_planner)?;
    parse_mc(&mut kv, &mut run.mc)?;
    parse_weights(&mut kv, &mut run)?;

    let loop_kind = match kv.take("run.loop") {
        None => LoopKind::Sbsrl,
        Some((v, line)) => match v.as_str() {
            "sbsrl" => LoopKind::Sbsrl,
            "mean-baseline" => LoopKind::MeanBaseline,
            _ => {
                return Err(kv.err(
                    line,
                    format!("`run.loop`: expected sbsrl or mean-baseline, got `{v}`"),
                ))
            }
        },
    };

    let manifest = parse_manifest(&mut kv)?;
    kv.finish()?;
    run.validate()?;

    Ok(Experiment {
        name: name.to_string(),
        path: path.to_path_buf(),
        run,
        loop_kind,
        manifest,
    })
}

fn parse_env(kv: &mut KvMap) -> Result<EnvSpec> {
    let (name, line) = kv.take("env.name").ok_or_else(|| CliError::Config {
        path: kv.path.clone(),
        line: 0,
        msg: "missing required key `env.name`".to_string(),
    })?;
    let mut env = match name.as_str() {
        "pendulum" => EnvSpec::pendulum(),
        "cartpole" => EnvSpec::cartpole(),
        _ => {
            return Err(kv.err(
                line,
                format!("`env.name`: expected pendulum or cartpole, got `{name}`"),
            ))
        }
    };
    if let Some(h) = kv.take_usize("env.horizon")? {
        env.horizon = h;
    }
    if let Some(s) = kv.take_f64("env.noise_std")? {
        env.noise_std = s;
    }
    if let Some(d) = kv.take_f64("env.cost_budget")? {
        env.cost_budget = d;
    }
    Ok(env)
}

fn parse_kernel(kv: &mut KvMap, env: &EnvSpec) -> Result<KernelSpec> {
    let kind = match kv.take("kernel.kind") {
        None => KernelKind::SquaredExp,
        Some((v, line)) => match v.as_str() {
            "squared-exp" => KernelKind::SquaredExp,
            "linear" => KernelKind::Linear,
            "matern52" => KernelKind::Matern52,
            _ => {
                return Err(kv.err(
                    line,
                    format!("`kernel.kind`: expected squared-exp, linear, or matern52, got `{v}`"),
                ))
            }
        },
    };
    let ls = kv
        .take_f64_list("kernel.lengthscales")?
        .unwrap_or_else(|| vec![1.0; env.query_dim()]);
    let sv = kv.take_f64("kernel.signal_variance")?.unwrap_or(1.0);
    Ok(KernelSpec::new(kind, ls, sv)?)
}

fn parse_prior(kv: &mut KvMap, env: &EnvSpec) -> Result<PriorSpec> {
    let b = kv.take_f64("prior.rkhs_bound")?.unwrap_or(1.0);
    let noise = kv.take_f64("prior.noise_std")?.unwrap_or(env.noise_std);
    Ok(PriorSpec::new(MeanFn::Zero, b, noise)?)
}

fn parse_run(kv: &mut KvMap, run: &mut RunConfig) -> Result<()> {
    if let Some(v) = kv.take_f64("run.delta")? {
        run.delta = v;
    }
    if let Some(v) = kv.take_f64("run.zeta")? {
        run.zeta = v;
    }
    if let Some(v) = kv.take_f64("run.margin")? {
        run.margin = Some(v);
    }
    if let Some((v, line)) = kv.take("run.m_samples") {
        run.m_samples = if let Some(cap) = v.strip_prefix("auto:") {
            MSpec::Auto {
                cap: cap.parse().map_err(|_| {
                    kv.err(line, format!("`run.m_samples`: bad auto cap `{cap}`"))
                })?,
            }
        } else {
            MSpec::Fixed(v.parse().map_err(|_| {
                kv.err(
                    line,
                    format!("`run.m_samples`: expected a count or auto:<cap>, got `{v}`"),
                )
            })?)
        };
    }
    if let Some((v, line)) = kv.take("run.dsigma") {
        run.dsigma = if v == "zero" {
            DsigmaMode::Zero
        } else if let Some(x) = v.strip_prefix("fixed:") {
            DsigmaMode::Fixed(x.parse().map_err(|_| {
                kv.err(line, format!("`run.dsigma`: bad fixed value `{x}`"))
            })?)
        } else if let Some(x) = v.strip_prefix("theory:") {
            DsigmaMode::Theory {
                eps: x.parse().map_err(|_| {
                    kv.err(line, format!("`run.dsigma`: bad theory eps `{x}`"))
                })?,
            }
        } else {
            return Err(kv.err(
                line,
                format!("`run.dsigma`: expected zero, fixed:<v>, or theory:<eps>, got `{v}`"),
            ));
        };
    }
    if let Some(v) = kv.take_bool("run.resample_each_episode")? {
        run.resample_each_episode = v;
    }
    if let Some((v, line)) = kv.take("run.engine") {
        run.engine = if v == "lazy" {
            SampleEngine::LazyPathwise
        } else if let Some(x) = v.strip_prefix("rff:") {
            SampleEngine::RandomFourier {
                n_features: x.parse().map_err(|_| {
                    kv.err(line, format!("`run.engine`: bad feature count `{x}`"))
                })?,
            }
        } else {
            return Err(kv.err(
                line,
                format!("`run.engine`: expected lazy or rff:<n>, got `{v}`"),
            ));
        };
    }
    if let Some(v) = kv.take_usize("run.layer_window")? {
        run.layer_window = Some(v);
    }
    if let Some(v) = kv.take_f64("run.beta_scale")? {
        run.beta_scale = v;
    }
    if let Some(v) = kv.take_usize("run.max_episodes")? {
        run.max_episodes = v;
    }
    if let Some(v) = kv.take_usize("run.offline_episodes")? {
        run.offline_episodes = v;
    }
    if let Some(v) = kv.take_f64("run.probe_tol")? {
        run.probe_tol = v;
    }
    if let Some(v) = kv.take_usize("run.warm_check_rollouts")? {
        run.warm_check_rollouts = v;
    }
    Ok(())
}

fn parse_icem(kv: &mut KvMap, prefix: &str, p: &mut IcemParams) -> Result<()> {
    if let Some(v) = kv.take_usize(&format!("{prefix}.population"))? {
        p.population = v;
    }
    if let Some(v) = kv.take_usize(&format!("{prefix}.iterations"))? {
        p.iterations = v;
    }
    if let Some(v) = kv.take_f64(&format!("{prefix}.elite_frac"))? {
        p.elite_frac = v;
    }
    if let Some(v) = kv.take_f64(&format!("{prefix}.noise_exponent"))? {
        p.noise_exponent = v;
    }
    if let Some(v) = kv.take_f64(&format!("{prefix}.elite_keep_frac"))? {
        p.elite_keep_frac = v;
    }
    if let Some(v) = kv.take_f64(&format!("{prefix}.init_std_frac"))? {
        p.init_std_frac = v;
    }
    if let Some(v) = kv.take_f64(&format!("{prefix}.min_std_frac"))? {
        p.min_std_frac = v;
    }
    if let Some(v) = kv.take_bool(&format!("{prefix}.shift_elites"))? {
        p.shift_elites = v;
    }
    Ok(())
}

fn parse_mc(kv: &mut KvMap, mc: &mut McConfig) -> Result<()> {
    if let Some(v) = kv.take_usize("mc.n_mean_rollouts")? {
        mc.n_mean_rollouts = v;
    }
    if let Some(v) = kv.take_usize("mc.n_cost_rollouts")? {
        mc.n_cost_rollouts = v;
    }
    if let Some((v, line)) = kv.take("mc.mode") {
        mc.mode = if v == "per-sample" {
            RolloutMode::PerSample
        } else if v == "mean-only" {
            RolloutMode::MeanOnly
        } else if let Some(x) = v.strip_prefix("ts1:") {
            RolloutMode::Ts1 {
                particles: x.parse().map_err(|_| {
                    kv.err(line, format!("`mc.mode`: bad particle count `{x}`"))
                })?,
            }
        } else {
            return Err(kv.err(
                line,
                format!("`mc.mode`: expected per-sample, mean-only, or ts1:<n>, got `{v}`"),
            ));
        };
    }
    if let Some(v) = kv.take_bool("mc.js_combined")? {
        mc.js_combined = v;
    }
    Ok(())
}

fn parse_weights(kv: &mut KvMap, run: &mut RunConfig) -> Result<()> {
    let lc = kv.take_f64("weights.lambda_c")?;
    let ls = kv.take_f64("weights.lambda_sigma")?;
    if lc.is_some() || ls.is_some() {
        let base = PenaltyWeights::for_env(&run.env);
        run.weights = Some(PenaltyWeights {
            lambda_c: lc.unwrap_or(base.lambda_c),
            lambda_sigma: ls.unwrap_or(base.lambda_sigma),
        });
    }
    Ok(())
}

fn parse_manifest(kv: &mut KvMap) -> Result<ManifestDefaults> {
    let seeds = kv.take_u64_list("manifest.seeds")?.unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        return Err(CliError::Config {
            path: kv.path.clone(),
            line: 0,
            msg: "`manifest.seeds`: seed list must be nonempty".to_string(),
        });
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(CliError::Config {
            path: kv.path.clone(),
            line: 0,
            msg: "`manifest.seeds`: seeds must be distinct".to_string(),
        });
    }
    let parallelism = kv.take_usize("manifest.parallelism")?.unwrap_or(1);
    if parallelism == 0 {
        return Err(CliError::Config {
            path: kv.path.clone(),
            line: 0,
            msg: "`manifest.parallelism`: must be >= 1".to_string(),
        });
    }
    let wall_clock_budget_s = kv.take_f64("manifest.wall_clock_budget_s")?;
    Ok(ManifestDefaults {
        seeds,
        parallelism,
        wall_clock_budget_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Experiment> {
        from_str(Path::new("test.cfg"), "test", text)
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let exp = parse("env.name = pendulum\nkernel.signal_variance = 0.02\n").unwrap();
        assert_eq!(exp.run.env.horizon, 100);
        assert_eq!(exp.manifest.seeds, vec![0]);
        assert_eq!(exp.loop_kind, LoopKind::Sbsrl);
        assert!(matches!(exp.run.m_samples, MSpec::Fixed(30)));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse("env.name = pendulum\nrun.zetta = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `run.zetta`"), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let err = parse("env.name = pendulum\nrun.delta = 0.1\nrun.delta = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate key"), "{err}");
    }

    #[test]
    fn invalid_delta_names_the_invariant() {
        let err = parse("env.name = pendulum\nrun.delta = 0.9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("delta"), "{msg}");
        assert!(msg.contains("(0, 1/2)"), "{msg}");
    }

    #[test]
    fn variant_keys_parse() {
        let exp = parse(
            "env.name = cartpole\n\
             env.horizon = 50\n\
             kernel.kind = matern52\n\
             kernel.lengthscales = 1, 1, 1, 1, 2, 2\n\
             run.m_samples = auto:16\n\
             run.zeta = 0.001\n\
             run.dsigma = theory:2.5\n\
             run.engine = lazy\n\
             run.loop = mean-baseline\n\
             mc.mode = ts1:7\n\
             manifest.seeds = 3, 1, 2\n",
        )
        .unwrap();
        assert_eq!(exp.run.env.horizon, 50);
        assert!(matches!(exp.run.m_samples, MSpec::Auto { cap: 16 }));
        assert!(matches!(exp.run.engine, SampleEngine::LazyPathwise));
        assert_eq!(exp.loop_kind, LoopKind::MeanBaseline);
        assert!(matches!(exp.run.mc.mode, RolloutMode::Ts1 { particles: 7 }));
        assert_eq!(exp.manifest.seeds, vec![3, 1, 2]);
        match exp.run.dsigma {
            DsigmaMode::Theory { eps } => assert_eq!(eps, 2.5),
            other => panic!("wrong dsigma: {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let exp = parse(
            "# experiment\n\
             env.name = pendulum  # swing-up\n\
             \n\
             run.max_episodes = 7\n",
        )
        .unwrap();
        assert_eq!(exp.run.max_episodes, 7);
    }
}
