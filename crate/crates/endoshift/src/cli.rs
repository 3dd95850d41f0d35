//! Config-driven campaign runner behind the `endoshift` binary.
//!
//! Configs are flat key/value TOML with units spelled in the key names
//! (`timeout_s`, `safe_distance_m`). Unknown keys are rejected with the
//! offending line. A run executes the selected methods end to end — shared
//! predictor fine-tuning, the calibration campaign, and a paired-seed test
//! evaluation — and writes plain-CSV artifacts plus a manifest that fully
//! determines a rerun. All outputs are reproducible byte-for-byte from
//! (config, root seed), independent of the worker-thread count.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::conformal::QuantileVector;
use crate::iterate::{
    self, derive_seed, Evaluation, IterationConfig, Method, MethodOutcome,
};
use crate::metrics::MetricsReport;
use crate::predictor::{self, PredictorModel};
use crate::sim::{self, PolicySpec};
use crate::trajectory::Trajectory;

/// Environment variable overriding the output directory.
pub const OUT_DIR_ENV: &str = "ENDOSHIFT_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration or arguments (exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Failure while executing a valid plan (exit code 3).
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSelector {
    All,
    One(Method),
}

impl MethodSelector {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "all" => Ok(MethodSelector::All),
            "ncp" => Ok(MethodSelector::One(Method::Ncp)),
            "bcp" => Ok(MethodSelector::One(Method::Bcp)),
            "icp" => Ok(MethodSelector::One(Method::Icp)),
            "iscp" => Ok(MethodSelector::One(Method::Iscp)),
            other => Err(CliError::Config(format!(
                "unknown method {other:?} (expected ncp|bcp|icp|iscp|all)"
            ))),
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        match self {
            MethodSelector::All => vec![Method::Ncp, Method::Bcp, Method::Icp, Method::Iscp],
            MethodSelector::One(m) => vec![*m],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    ConstantVelocity,
    Autoregressive,
}

/// Fully resolved experiment: campaign config plus run-level knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: MethodSelector,
    pub iteration: IterationConfig,
    pub gamma_icp: f64,
    pub gamma_iscp: f64,
    /// Episodes collected under the nominal policy to fine-tune the shared
    /// predictor used by NCP/BCP/ICP.
    pub tune_budget: usize,
    pub test_episodes: usize,
    pub predictor_kind: PredictorKind,
    /// How many test episodes to persist as JSONL samples.
    pub save_episodes: usize,
    pub out_dir: PathBuf,
}

const KNOWN_KEYS: [&str; 36] = [
    "method",
    "n_agents",
    "cp_aware",
    "diameter_m",
    "epsilon",
    "delta",
    "gamma_icp",
    "gamma_iscp",
    "phi_m",
    "horizon_steps",
    "k_cal",
    "k_tune",
    "bcp_budget",
    "tune_budget",
    "max_iterations",
    "test_episodes",
    "root_seed",
    "window",
    "ridge_lambda",
    "predictor",
    "timeout_s",
    "dt_s",
    "wheelbase_m",
    "phi_max_rad",
    "a_max_mps2",
    "v_min_mps",
    "v_max_mps",
    "safe_distance_m",
    "collision_radius_m",
    "goal_radius_m",
    "min_start_separation_m",
    "goal_jitter_rad",
    "n_projections",
    "solver_iterations_per_level",
    "save_episodes",
    "out_dir",
];

fn key_line(text: &str, key: &str) -> String {
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_start();
        if trimmed.starts_with(key)
            && trimmed[key.len()..].trim_start().starts_with('=')
        {
            return format!(" (line {})", i + 1);
        }
    }
    String::new()
}

struct ConfigReader<'a> {
    table: toml::Table,
    text: &'a str,
}

impl<'a> ConfigReader<'a> {
    fn new(text: &'a str) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for key in table.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown key {key:?}{}",
                    key_line(text, key)
                )));
            }
        }
        for (key, value) in &table {
            if value.is_table() || value.is_array() {
                return Err(CliError::Config(format!(
                    "key {key:?} must be a flat scalar{}",
                    key_line(text, key)
                )));
            }
        }
        Ok(Self { table, text })
    }

    fn bad(&self, key: &str, expected: &str) -> CliError {
        CliError::Config(format!(
            "key {key:?} must be {expected}{}",
            key_line(self.text, key)
        ))
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| self.bad(key, "a number")),
        }
    }

    fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_integer()
                .filter(|i| *i >= 0)
                .map(|i| i as usize)
                .ok_or_else(|| self.bad(key, "a non-negative integer")),
        }
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.table.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_integer()
                .filter(|i| *i >= 0)
                .map(|i| i as u64)
                .ok_or_else(|| self.bad(key, "a non-negative integer")),
        }
    }

    fn string(&self, key: &str, default: &str) -> Result<String, CliError> {
        match self.table.get(key) {
            None => Ok(default.to_string()),
            Some(v) => v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| self.bad(key, "a string")),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let r = ConfigReader::new(text)?;

        let n_agents = r.usize("n_agents", 2)?;
        let cp_aware = match r.string("cp_aware", "ego")?.as_str() {
            "ego" => {
                let mut v = vec![false; n_agents];
                if let Some(first) = v.first_mut() {
                    *first = true;
                }
                v
            }
            "all" => vec![true; n_agents],
            other => {
                return Err(CliError::Config(format!(
                    "cp_aware must be \"ego\" or \"all\", got {other:?}"
                )))
            }
        };

        let mut iteration = IterationConfig::two_agent_default(r.u64("root_seed", 0)?);
        iteration.n_agents = n_agents;
        iteration.cp_aware = cp_aware;
        iteration.diameter = r.f64("diameter_m", 10.0)?;
        iteration.cp.epsilon = r.f64("epsilon", 0.15)?;
        iteration.cp.delta = r.f64("delta", 0.01)?;
        iteration.cp.phi = r.f64("phi_m", 0.1)?;
        iteration.calibration_episodes = r.usize("k_cal", 250)?;
        iteration.tuning_episodes = r.usize("k_tune", 250)?;
        iteration.bcp_budget = r.usize("bcp_budget", 4 * iteration.calibration_episodes)?;
        iteration.max_iterations = r.usize("max_iterations", 12)?;
        iteration.window = r.usize("window", 5)?;
        iteration.ridge = r.f64("ridge_lambda", 1e-6)?;
        iteration.n_projections = r.usize("n_projections", 64)?;
        iteration.episode.horizon = r.usize("horizon_steps", 10)?;
        iteration.episode.sim.timeout_s = r.f64("timeout_s", 30.0)?;
        iteration.episode.sim.collision_radius = r.f64("collision_radius_m", 0.3)?;
        iteration.episode.sim.goal_radius = r.f64("goal_radius_m", 0.3)?;
        iteration.episode.sim.min_start_separation = r.f64("min_start_separation_m", 2.0)?;
        iteration.episode.sim.goal_jitter = r.f64("goal_jitter_rad", 0.35)?;
        iteration.episode.dynamics.dt = r.f64("dt_s", 0.1)?;
        iteration.episode.dynamics.l = r.f64("wheelbase_m", 1.0)?;
        iteration.episode.dynamics.phi_max = r.f64("phi_max_rad", 0.6)?;
        iteration.episode.dynamics.a_max = r.f64("a_max_mps2", 2.0)?;
        iteration.episode.dynamics.v_min = r.f64("v_min_mps", -1.0)?;
        iteration.episode.dynamics.v_max = r.f64("v_max_mps", 3.0)?;
        iteration.episode.safe_distance = r.f64("safe_distance_m", 0.5)?;
        iteration.episode.solver.iterations_per_level =
            r.usize("solver_iterations_per_level", 60)?;

        let predictor_kind = match r.string("predictor", "autoregressive")?.as_str() {
            "autoregressive" => PredictorKind::Autoregressive,
            "constant_velocity" => PredictorKind::ConstantVelocity,
            other => {
                return Err(CliError::Config(format!(
                    "predictor must be \"autoregressive\" or \"constant_velocity\", got {other:?}"
                )))
            }
        };

        let cfg = ExperimentConfig {
            method: MethodSelector::parse(&r.string("method", "all")?)?,
            gamma_icp: r.f64("gamma_icp", 0.8)?,
            gamma_iscp: r.f64("gamma_iscp", 0.9)?,
            tune_budget: r.usize("tune_budget", 1000)?,
            test_episodes: r.usize("test_episodes", 200)?,
            predictor_kind,
            save_episodes: r.usize("save_episodes", 4)?,
            out_dir: PathBuf::from(r.string("out_dir", "runs/out")?),
            iteration,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut probe = self.iteration.clone();
        probe.cp.gamma = self.gamma_icp;
        probe.validate().map_err(|e| CliError::Config(e.to_string()))?;
        probe.cp.gamma = self.gamma_iscp;
        probe.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.test_episodes == 0 {
            return Err(CliError::Config("test_episodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Campaign config with the method's smoothing weight resolved.
    pub fn iteration_for(&self, method: Method) -> IterationConfig {
        let mut cfg = self.iteration.clone();
        cfg.cp.gamma = match method {
            Method::Iscp => self.gamma_iscp,
            _ => self.gamma_icp,
        };
        cfg
    }

    /// Canonical flat-TOML rendering; parsing it back yields an identical
    /// config (the manifest embeds this).
    pub fn canonical_toml(&self) -> String {
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        let quote = |s: &str| format!("{s:?}");
        let it = &self.iteration;
        map.insert(
            "method",
            quote(match self.method {
                MethodSelector::All => "all",
                MethodSelector::One(m) => m.as_str(),
            }),
        );
        map.insert("n_agents", it.n_agents.to_string());
        map.insert(
            "cp_aware",
            quote(if it.cp_aware.iter().all(|b| *b) { "all" } else { "ego" }),
        );
        map.insert("diameter_m", float_toml(it.diameter));
        map.insert("epsilon", float_toml(it.cp.epsilon));
        map.insert("delta", float_toml(it.cp.delta));
        map.insert("gamma_icp", float_toml(self.gamma_icp));
        map.insert("gamma_iscp", float_toml(self.gamma_iscp));
        map.insert("phi_m", float_toml(it.cp.phi));
        map.insert("horizon_steps", it.episode.horizon.to_string());
        map.insert("k_cal", it.calibration_episodes.to_string());
        map.insert("k_tune", it.tuning_episodes.to_string());
        map.insert("bcp_budget", it.bcp_budget.to_string());
        map.insert("tune_budget", self.tune_budget.to_string());
        map.insert("max_iterations", it.max_iterations.to_string());
        map.insert("test_episodes", self.test_episodes.to_string());
        map.insert("root_seed", it.root_seed.to_string());
        map.insert("window", it.window.to_string());
        map.insert("ridge_lambda", float_toml(it.ridge));
        map.insert(
            "predictor",
            quote(match self.predictor_kind {
                PredictorKind::Autoregressive => "autoregressive",
                PredictorKind::ConstantVelocity => "constant_velocity",
            }),
        );
        map.insert("timeout_s", float_toml(it.episode.sim.timeout_s));
        map.insert("dt_s", float_toml(it.episode.dynamics.dt));
        map.insert("wheelbase_m", float_toml(it.episode.dynamics.l));
        map.insert("phi_max_rad", float_toml(it.episode.dynamics.phi_max));
        map.insert("a_max_mps2", float_toml(it.episode.dynamics.a_max));
        map.insert("v_min_mps", float_toml(it.episode.dynamics.v_min));
        map.insert("v_max_mps", float_toml(it.episode.dynamics.v_max));
        map.insert("safe_distance_m", float_toml(it.episode.safe_distance));
        map.insert(
            "collision_radius_m",
            float_toml(it.episode.sim.collision_radius),
        );
        map.insert("goal_radius_m", float_toml(it.episode.sim.goal_radius));
        map.insert(
            "min_start_separation_m",
            float_toml(it.episode.sim.min_start_separation),
        );
        map.insert("goal_jitter_rad", float_toml(it.episode.sim.goal_jitter));
        map.insert("n_projections", it.n_projections.to_string());
        map.insert(
            "solver_iterations_per_level",
            it.episode.solver.iterations_per_level.to_string(),
        );
        map.insert("save_episodes", self.save_episodes.to_string());
        map.insert("out_dir", quote(&self.out_dir.to_string_lossy()));
        map.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn float_toml(v: f64) -> String {
    // TOML floats need a decimal point or exponent.
    let s = v.to_string();
    if s.contains('.') || s.contains('e') || s.contains("inf") {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub method: Option<MethodSelector>,
    pub threads: Option<usize>,
    pub dry_run: bool,
    /// Takes precedence over both the env var and the config.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct MethodRun {
    pub method: Method,
    pub report: iterate::IterationReport,
    pub test_metrics: MetricsReport,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub methods: Vec<MethodRun>,
    pub dry_run: bool,
}

/// Stream tag for the shared predictor fine-tuning collection.
const SHARED_TUNE_STREAM: u64 = 20;

fn resolve_out_dir(cfg: &ExperimentConfig, overrides: &RunOverrides) -> PathBuf {
    if let Some(dir) = &overrides.out_dir {
        return dir.clone();
    }
    if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
        if !dir.is_empty() {
            return PathBuf::from(dir);
        }
    }
    cfg.out_dir.clone()
}

/// Fine-tune the shared predictor on episodes collected under the nominal
/// policy (constant-velocity forecasts, zero thresholds).
fn fit_shared_predictor(cfg: &ExperimentConfig) -> Result<PredictorModel, CliError> {
    if cfg.predictor_kind == PredictorKind::ConstantVelocity {
        return Ok(PredictorModel::ConstantVelocity);
    }
    use rayon::prelude::*;
    let it = &cfg.iteration;
    let policies: Vec<PolicySpec> = (0..it.n_agents)
        .map(|_| {
            PolicySpec::avoiding(
                QuantileVector::zeros(it.horizon()),
                PredictorModel::ConstantVelocity,
            )
        })
        .collect();
    let trajectories: Vec<Trajectory> = (0..cfg.tune_budget as u64)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(it.root_seed, SHARED_TUNE_STREAM, i);
            let scenario = sim::generate_scenario(it.n_agents, it.diameter, seed, &it.episode.sim)
                .map_err(runtime)?;
            Ok(sim::run_episode(&scenario, &policies, &it.episode)
                .map_err(runtime)?
                .trajectory())
        })
        .collect::<Result<_, CliError>>()?;
    predictor::fit(&trajectories, it.window, it.ridge).map_err(runtime)
}

fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    shared: &PredictorModel,
) -> Result<MethodOutcome, CliError> {
    let it = cfg.iteration_for(method);
    match method {
        Method::Ncp => iterate::run_ncp(&it, shared),
        Method::Bcp => iterate::run_bcp(&it, shared),
        Method::Icp => iterate::run_icp(&it, shared),
        Method::Iscp => iterate::run_iscp(&it, shared),
    }
    .map_err(runtime)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(runtime)?;
    }
    fs::write(path, contents).map_err(runtime)
}

fn metrics_csv_row(method: &str, m: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}\n",
        method,
        m.collision_rate,
        m.deviation_ego,
        m.deviation_other,
        opt(m.misdetection_rate),
        opt(m.avg_nav_time_s),
        m.success_rate
    )
}

const METRICS_HEADER: &str =
    "method,collision_pct,deviation_ego_m,deviation_other_m,misdetection_pct,avg_nav_time_s,success_pct\n";

fn write_method_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &MethodOutcome,
    eval: &Evaluation,
) -> Result<(), CliError> {
    let report = &outcome.report;
    let mut buf = Vec::new();
    report.write_iterations_csv(&mut buf).map_err(runtime)?;
    write_file(&dir.join("iterations.csv"), &buf)?;

    let mut buf = Vec::new();
    report.write_misdetection_csv(&mut buf).map_err(runtime)?;
    write_file(&dir.join("misdetection_per_step.csv"), &buf)?;

    let mut buf = Vec::new();
    report.write_quantiles_csv(&mut buf).map_err(runtime)?;
    write_file(&dir.join("q_over_steps.csv"), &buf)?;

    let mut buf = Vec::new();
    report.write_shift_csv(&mut buf).map_err(runtime)?;
    write_file(&dir.join("shift.csv"), &buf)?;

    for (j, q) in report.final_q.iter().enumerate() {
        let mut buf = Vec::new();
        q.write_csv(&mut buf).map_err(runtime)?;
        write_file(&dir.join(format!("q_final_agent{j}.csv")), &buf)?;
    }

    let mut buf = Vec::new();
    outcome.predictor.save_json(&mut buf).map_err(runtime)?;
    write_file(&dir.join("predictor.json"), &buf)?;

    for agent_scores in &report.scores {
        for (r, matrix) in agent_scores.rounds.iter().enumerate() {
            let mut buf = Vec::new();
            matrix.write_csv(&mut buf).map_err(runtime)?;
            write_file(
                &dir.join(format!("scores_r{r}_agent{}.csv", agent_scores.agent)),
                &buf,
            )?;
        }
    }

    write_file(
        &dir.join("metrics.csv"),
        format!(
            "{METRICS_HEADER}{}",
            metrics_csv_row(report.method.as_str(), &eval.metrics)
        )
        .as_bytes(),
    )?;
    write_file(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(&eval.metrics)
            .map_err(runtime)?
            .as_bytes(),
    )?;

    // Dataset-conditional coverage bound of the final calibration round,
    // reported as a diagnostic.
    if let Some(agent_scores) = report.scores.first() {
        if let Some(last_round) = agent_scores.rounds.last() {
            let k = last_round.n_trajectories();
            let epsilon = cfg.iteration.cp.epsilon;
            let delta = cfg.iteration.cp.delta;
            let bound =
                crate::conformal::coverage_lower_bound(k, epsilon, delta).map_err(runtime)?;
            write_file(
                &dir.join("coverage_bound.csv"),
                format!("k,epsilon,delta,coverage_lower_bound\n{k},{epsilon},{delta},{bound}\n")
                    .as_bytes(),
            )?;
        }
    }

    let fingerprints = eval.scenario_fingerprints.join("\n");
    write_file(&dir.join("test_fingerprints.txt"), fingerprints.as_bytes())?;

    for (i, episode) in eval.episodes.iter().take(cfg.save_episodes).enumerate() {
        let mut buf = Vec::new();
        episode.write_jsonl(&mut buf).map_err(runtime)?;
        write_file(&dir.join(format!("episode_test_{i}.jsonl")), &buf)?;
    }
    Ok(())
}

fn with_thread_pool<T: Send>(
    threads: Option<usize>,
    body: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match threads {
        None => body(),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(runtime)?;
            pool.install(body)
        }
    }
}

/// Execute the selected methods end to end and write all artifacts.
pub fn cmd_run(config_path: &Path, overrides: &RunOverrides) -> Result<RunSummary, CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(method) = overrides.method {
        cfg.method = method;
    }
    let out_dir = resolve_out_dir(&cfg, overrides);
    let methods = cfg.method.methods();

    if overrides.dry_run {
        let mut plan = String::new();
        plan.push_str("resolved configuration:\n");
        plan.push_str(&cfg.canonical_toml());
        plan.push_str(&format!("output directory: {}\n", out_dir.display()));
        plan.push_str(&format!(
            "methods: {}\n",
            methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
        ));
        plan.push_str(&format!(
            "episode budget: tune {} + per-method campaigns (K={} x <= {} iterations, BCP {}) + {} test episodes each\n",
            cfg.tune_budget,
            cfg.iteration.calibration_episodes,
            cfg.iteration.max_iterations,
            cfg.iteration.bcp_budget,
            cfg.test_episodes
        ));
        print!("{plan}");
        return Ok(RunSummary {
            out_dir,
            methods: Vec::new(),
            dry_run: true,
        });
    }

    with_thread_pool(overrides.threads, || {
        run_campaign(&cfg, &out_dir, &methods)
    })
}

fn run_campaign(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    methods: &[Method],
) -> Result<RunSummary, CliError> {
    let shared = fit_shared_predictor(cfg)?;
    let scenarios = iterate::test_scenarios(
        &cfg.iteration,
        cfg.test_episodes,
        cfg.iteration.root_seed,
    )
    .map_err(runtime)?;

    let mut summary_rows = String::from(METRICS_HEADER);
    let mut method_runs = Vec::new();
    for &method in methods {
        let outcome = run_method(cfg, method, &shared)?;
        let it = cfg.iteration_for(method);
        let eval = iterate::evaluate_policy(
            &it,
            &outcome.report.final_q,
            &outcome.predictor,
            &scenarios,
        )
        .map_err(runtime)?;
        write_method_artifacts(&out_dir.join(method.as_str()), cfg, &outcome, &eval)?;
        summary_rows.push_str(&metrics_csv_row(method.as_str(), &eval.metrics));
        method_runs.push(MethodRun {
            method,
            report: outcome.report,
            test_metrics: eval.metrics,
        });
    }
    write_file(&out_dir.join("summary.csv"), summary_rows.as_bytes())?;
    write_manifest(cfg, out_dir, methods)?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        methods: method_runs,
        dry_run: false,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: String,
    config_sha256: String,
    config_toml: String,
    root_seed: u64,
    methods: Vec<String>,
}

fn write_manifest(cfg: &ExperimentConfig, out_dir: &Path, methods: &[Method]) -> Result<(), CliError> {
    let canonical = cfg.canonical_toml();
    let digest = Sha256::digest(canonical.as_bytes());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        config_toml: canonical,
        root_seed: cfg.iteration.root_seed,
        methods: methods.iter().map(|m| m.as_str().to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    write_file(&out_dir.join("manifest.json"), json.as_bytes())
}

#[derive(Debug)]
pub struct EvaluateSummary {
    pub reports: Vec<(Method, MetricsReport)>,
    /// Scenario fingerprints of the fresh test set (shared by every method).
    pub fingerprints: Vec<String>,
}

/// Re-evaluate the stored thresholds and predictor of a finished run on a
/// fresh seeded test set; paired seeds give scenario-identical comparisons
/// across methods and runs.
pub fn cmd_evaluate(run_dir: &Path, seed: u64) -> Result<EvaluateSummary, CliError> {
    let manifest_path = run_dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| CliError::Config(format!("manifest: {e}")))?;
    let cfg = ExperimentConfig::parse(&manifest.config_toml)?;

    let mut reports = Vec::new();
    let mut fingerprints = Vec::new();
    for name in &manifest.methods {
        let method = match MethodSelector::parse(name)? {
            MethodSelector::One(m) => m,
            MethodSelector::All => return Err(CliError::Config("manifest lists 'all'".into())),
        };
        let dir = run_dir.join(name);
        let it = cfg.iteration_for(method);
        let mut qs = Vec::new();
        for j in 0..it.n_agents {
            let path = dir.join(format!("q_final_agent{j}.csv"));
            let file = fs::File::open(&path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            qs.push(QuantileVector::read_csv(BufReader::new(file)).map_err(runtime)?);
        }
        let predictor_path = dir.join("predictor.json");
        let file = fs::File::open(&predictor_path)
            .map_err(|e| CliError::Config(format!("{}: {e}", predictor_path.display())))?;
        let model = PredictorModel::load_json(BufReader::new(file)).map_err(runtime)?;

        let scenarios = iterate::test_scenarios(&it, cfg.test_episodes, seed).map_err(runtime)?;
        let eval = iterate::evaluate_policy(&it, &qs, &model, &scenarios).map_err(runtime)?;

        let mut csv = String::from(METRICS_HEADER);
        csv.push_str(&metrics_csv_row(name, &eval.metrics));
        write_file(&dir.join(format!("metrics_eval_seed{seed}.csv")), csv.as_bytes())?;
        if fingerprints.is_empty() {
            fingerprints = eval.scenario_fingerprints.clone();
        } else if fingerprints != eval.scenario_fingerprints {
            return Err(CliError::Runtime(
                "paired test sets diverged across methods".into(),
            ));
        }
        reports.push((method, eval.metrics));
    }
    Ok(EvaluateSummary {
        reports,
        fingerprints,
    })
}

#[derive(Debug)]
pub struct SweepSummary {
    pub out_dir: PathBuf,
    pub children: Vec<(f64, PathBuf)>,
}

/// Run the campaign once per parameter value with shared seeds and emit a
/// comparison table. Only the smoothing weight is sweepable.
pub fn cmd_sweep(
    config_path: &Path,
    parameter: &str,
    values: &[f64],
    overrides: &RunOverrides,
) -> Result<SweepSummary, CliError> {
    if parameter != "gamma" {
        return Err(CliError::Config(format!(
            "unsupported sweep parameter {parameter:?} (supported: gamma)"
        )));
    }
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    for v in values {
        if !(0.0..=1.0).contains(v) {
            return Err(CliError::Config(format!("gamma {v} outside [0,1]")));
        }
    }
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let base = ExperimentConfig::parse(&text)?;
    let out_root = resolve_out_dir(&base, overrides);

    let mut children = Vec::new();
    let mut comparison = String::from("gamma,method,collision_pct,deviation_ego_m,deviation_other_m,misdetection_pct,avg_nav_time_s,success_pct\n");
    for &value in values {
        let mut cfg = base.clone();
        if let Some(method) = overrides.method {
            cfg.method = method;
        }
        cfg.gamma_icp = value;
        cfg.gamma_iscp = value;
        let child_dir = out_root.join(format!("gamma_{value}"));
        let methods = cfg.method.methods();
        let summary = with_thread_pool(overrides.threads, || {
            run_campaign(&cfg, &child_dir, &methods)
        })?;
        for run in &summary.methods {
            let row = metrics_csv_row(run.method.as_str(), &run.test_metrics);
            comparison.push_str(&format!("{value},{row}"));
        }
        children.push((value, child_dir));
    }
    write_file(&out_root.join("sweep_comparison.csv"), comparison.as_bytes())?;

    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "parameter": parameter,
        "values": values,
        "children": children
            .iter()
            .map(|(v, p)| serde_json::json!({"value": v, "dir": p.file_name().unwrap().to_string_lossy()}))
            .collect::<Vec<_>>(),
    });
    write_file(
        &out_root.join("sweep_manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(runtime)?.as_bytes(),
    )?;
    Ok(SweepSummary {
        out_dir: out_root,
        children,
    })
}
