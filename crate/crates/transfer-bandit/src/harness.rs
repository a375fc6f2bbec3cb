//! Configuration-driven experiment runner: multi-seed sweeps over scenarios
//! and policies, per-round trace CSVs, checkpointed summaries, diagnostics
//! JSON, and SVG regret curves.
//!
//! Results depend only on the configuration and base seed, never on thread
//! count or wall clock: runs are the unit of concurrency, each run owns its
//! RNG substreams, and outputs are committed in a fixed task order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::diagnostics::{self, DiagnosticsReport, RegretTrace};
use crate::env::{
    generate_offline, BanditInstance, Normalize, OfflineSpec, RewardModel, RunRngs, SupportLaw,
};
use crate::error::{Error, Result};
use crate::offline::{fit_ridge_with_dim, BiasCertificate, OfflineRidge};
use crate::policy::{PolicyConfig, PolicyMode};
use crate::sim::simulate;
use crate::spd::{SpdMatrix, Vector};

/// Default SupLinUCB constant in the pooled-better diagnostic. Regret
/// analyses of this family leave the constant symbolic; 44 is a conventional
/// choice and the report always echoes the value used.
pub const DEFAULT_C_SL: f64 = 44.0;

// ---------------------------------------------------------------------------
// Raw config: sections of key-value pairs
// ---------------------------------------------------------------------------

/// Flat sectioned key-value config text, before typing. Scenario overrides
/// are applied at this level so every derived scenario goes through the same
/// validation.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    /// `(name, overrides)` pairs from the `[sweep]` section, in file order.
    scenarios: Vec<(String, Vec<(String, String)>)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = strip_comment(raw_line).trim().to_string();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::config(
                        format!("line {}", lineno + 1),
                        "unterminated section header",
                    ));
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::config(
                    format!("{section}: line {}", lineno + 1),
                    "expected key = value",
                ));
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if section == "sweep" {
                if key != "scenario" {
                    return Err(Error::config(
                        format!("sweep.{key}"),
                        "only `scenario` entries are allowed in [sweep]",
                    ));
                }
                cfg.push_scenario(&value)?;
            } else {
                cfg.sections
                    .entry(section.clone())
                    .or_default()
                    .insert(key, value);
            }
        }
        Ok(cfg)
    }

    fn push_scenario(&mut self, value: &str) -> Result<()> {
        // scenario = name | section.key=value; section.key=value
        let (name, rest) = match value.split_once('|') {
            Some((n, r)) => (n.trim().to_string(), r.trim()),
            None => (value.trim().to_string(), ""),
        };
        if name.is_empty() {
            return Err(Error::config("sweep.scenario", "scenario needs a name"));
        }
        let mut overrides = Vec::new();
        for piece in rest.split(';') {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            let Some(eq) = piece.find('=') else {
                return Err(Error::config(
                    format!("sweep.scenario.{name}"),
                    format!("override `{piece}` is not key=value"),
                ));
            };
            let key = piece[..eq].trim();
            if !key.contains('.') {
                return Err(Error::config(
                    format!("sweep.scenario.{name}.{key}"),
                    "override keys are section-qualified, e.g. instance.theta_star",
                ));
            }
            overrides.push((key.to_string(), piece[eq + 1..].trim().to_string()));
        }
        self.scenarios.push((name, overrides));
        Ok(())
    }

    /// Applies `section.key = value` overrides, failing on keys that the base
    /// config never declared.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<RawConfig> {
        let mut out = self.clone();
        out.scenarios.clear();
        for (qualified, value) in overrides {
            let (section, key) = qualified.split_once('.').expect("checked at parse time");
            let Some(slot) = out.sections.get_mut(section).and_then(|s| s.get_mut(key)) else {
                return Err(Error::config(
                    qualified.clone(),
                    "sweep overrides may only touch keys declared in the base config",
                ));
            };
            *slot = value.clone();
        }
        Ok(out)
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::config(format!("{section}.{key}"), "missing required key"))
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(idx) => &line[..idx],
        None => line,
    }
}

fn parse_f64(section: &str, key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|e| Error::config(format!("{section}.{key}"), format!("not a number: {e}")))
}

fn parse_usize(section: &str, key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|e| Error::config(format!("{section}.{key}"), format!("not a count: {e}")))
}

fn parse_u64(section: &str, key: &str, value: &str) -> Result<u64> {
    value
        .parse::<u64>()
        .map_err(|e| Error::config(format!("{section}.{key}"), format!("not a seed: {e}")))
}

/// `[a, b, c]` -> vec of tokens.
fn parse_list(section: &str, key: &str, value: &str) -> Result<Vec<String>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| {
            Error::config(format!("{section}.{key}"), "expected a bracketed list [..]")
        })?;
    Ok(inner
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}

fn parse_f64_list(section: &str, key: &str, value: &str) -> Result<Vec<f64>> {
    parse_list(section, key, value)?
        .iter()
        .map(|tok| parse_f64(section, key, tok))
        .collect()
}

/// `[[a, b], [c, d]]` -> vec of vecs.
fn parse_nested_list(section: &str, key: &str, value: &str) -> Result<Vec<Vec<f64>>> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| {
            Error::config(
                format!("{section}.{key}"),
                "expected a nested list [[..],..]",
            )
        })?;
    let mut rows = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    for (i, ch) in inner.char_indices() {
        match ch {
            '[' => {
                if depth == 0 {
                    start = Some(i + 1);
                }
                depth += 1;
            }
            ']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    let row = &inner[start.take().unwrap_or(i)..i];
                    rows.push(
                        row.split(',')
                            .map(|s| s.trim())
                            .filter(|s| !s.is_empty())
                            .map(|tok| parse_f64(section, key, tok))
                            .collect::<Result<Vec<f64>>>()?,
                    );
                }
            }
            _ => {}
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Typed experiment configuration
// ---------------------------------------------------------------------------

/// Certificate specification from the `[certificate]` section.
#[derive(Debug, Clone)]
pub enum CertificateSpec {
    Fixed(BiasCertificate),
    /// Epoch-learned only; no fixed pair supplied.
    Epoch,
    None,
}

/// One fully-typed scenario ready to run.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub instance: BanditInstance,
    pub offline: OfflineSpec,
    pub certificate: CertificateSpec,
    pub delta_bias: f64,
}

/// The experiment as a whole.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioConfig>,
    pub policies: Vec<PolicyMode>,
    pub t_horizon: usize,
    pub n_runs: usize,
    pub base_seed: u64,
    pub out_dir: PathBuf,
    pub checkpoints: usize,
    pub threads: usize,
    pub c_sl: f64,
    pub svg: bool,
}

fn parse_law(raw: &RawConfig, section: &str, key: &str, d: usize) -> Result<SupportLaw> {
    let law = raw.require(section, key)?;
    match law {
        "gaussian" => {
            let normalize = match raw.get(section, "normalize").unwrap_or("always") {
                "always" => Normalize::Always,
                "clip" => Normalize::Clip,
                other => {
                    return Err(Error::config(
                        format!("{section}.normalize"),
                        format!("unknown mode `{other}` (use clip|always)"),
                    ))
                }
            };
            Ok(SupportLaw::GaussianUnitBall { normalize })
        }
        "fixed" => {
            let rows = parse_nested_list(section, "actions", raw.require(section, "actions")?)?;
            let mut actions = Vec::with_capacity(rows.len());
            for row in rows {
                if row.len() != d {
                    return Err(Error::config(
                        format!("{section}.actions"),
                        format!("action has {} entries, d = {d}", row.len()),
                    ));
                }
                actions.push(
                    Vector::new(row)
                        .map_err(|e| Error::config(format!("{section}.actions"), e.to_string()))?,
                );
            }
            Ok(SupportLaw::FixedActionSet(actions))
        }
        "box" => {
            let lower = parse_f64_list(section, "box_lower", raw.require(section, "box_lower")?)?;
            let upper = parse_f64_list(section, "box_upper", raw.require(section, "box_upper")?)?;
            if lower.len() != d || upper.len() != d {
                return Err(Error::config(
                    format!("{section}.box_lower"),
                    "box bounds must have d entries",
                ));
            }
            Ok(SupportLaw::BoxSupport { lower, upper })
        }
        other => Err(Error::config(
            format!("{section}.{key}"),
            format!("unknown law `{other}` (use gaussian|fixed|box)"),
        )),
    }
}

fn parse_m_bias(value: &str, d: usize) -> Result<SpdMatrix> {
    let path = "certificate.m_bias";
    if let Some(rest) = value.strip_prefix("diag:") {
        let diag = parse_f64_list("certificate", "m_bias", rest.trim())?;
        if diag.len() != d {
            return Err(Error::config(path, format!("diag needs {d} entries")));
        }
        SpdMatrix::diag(&diag).map_err(|e| Error::config(path, e.to_string()))
    } else if let Some(rest) = value.strip_prefix("dense:") {
        let rows = parse_nested_list("certificate", "m_bias", rest.trim())?;
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(Error::config(path, format!("dense needs {d}x{d} entries")));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        SpdMatrix::from_entries(d, entries).map_err(|e| Error::config(path, e.to_string()))
    } else {
        Err(Error::config(
            path,
            "expected `diag: [..]` or `dense: [[..]]`",
        ))
    }
}

/// Builds one typed scenario from raw (post-override) key-values.
fn build_scenario(raw: &RawConfig, name: &str) -> Result<ScenarioConfig> {
    let d = parse_usize("instance", "d", raw.require("instance", "d")?)?;
    let k = parse_usize("instance", "k", raw.require("instance", "k")?)?;
    let sigma = parse_f64("instance", "sigma", raw.require("instance", "sigma")?)?;
    let theta_star = Vector::new(parse_f64_list(
        "instance",
        "theta_star",
        raw.require("instance", "theta_star")?,
    )?)
    .map_err(|e| Error::config("instance.theta_star", e.to_string()))?;
    let theta_dagger = Vector::new(parse_f64_list(
        "offline",
        "theta_dagger",
        raw.require("offline", "theta_dagger")?,
    )?)
    .map_err(|e| Error::config("offline.theta_dagger", e.to_string()))?;
    if theta_star.dim() != d || theta_dagger.dim() != d {
        return Err(Error::config(
            "instance.theta_star",
            "parameter dimensions must equal d",
        ));
    }
    let s_bound = match raw.get("instance", "s").unwrap_or("auto") {
        "auto" => theta_star.norm2().max(theta_dagger.norm2()),
        num => parse_f64("instance", "s", num)?,
    };
    let instance = BanditInstance {
        theta_star,
        k,
        d,
        sigma,
        s_bound,
        context_law: parse_law(raw, "instance", "context_law", d)?,
        reward_model: RewardModel::Gaussian,
    };
    instance
        .validate()
        .map_err(|e| Error::config("instance.s", e.to_string()))?;
    let offline = OfflineSpec {
        theta_dagger,
        n_off: parse_usize("offline", "n_off", raw.require("offline", "n_off")?)?,
        covariate_law: parse_law(raw, "offline", "covariate_law", d)?,
        reward_model: RewardModel::Gaussian,
    };

    let kind = raw.get("certificate", "kind").unwrap_or("none");
    let certificate = match kind {
        "fixed" => {
            let rho = parse_f64("certificate", "rho", raw.require("certificate", "rho")?)?;
            let m_bias = parse_m_bias(raw.require("certificate", "m_bias")?, d)?;
            CertificateSpec::Fixed(
                BiasCertificate::new(m_bias, rho)
                    .map_err(|e| Error::config("certificate.rho", e.to_string()))?,
            )
        }
        "epoch" => CertificateSpec::Epoch,
        "none" => CertificateSpec::None,
        other => {
            return Err(Error::config(
                "certificate.kind",
                format!("unknown kind `{other}` (use fixed|epoch|none)"),
            ))
        }
    };
    let delta_bias = match raw.get("certificate", "delta_bias") {
        Some(v) => parse_f64("certificate", "delta_bias", v)?,
        None => 0.05,
    };
    Ok(ScenarioConfig {
        name: name.to_string(),
        instance,
        offline,
        certificate,
        delta_bias,
    })
}

/// Loads and fully validates an experiment config. `expand_sweep` controls
/// whether `[sweep]` scenarios are instantiated (the `sweep` subcommand) or
/// only the base scenario runs (the `run` subcommand).
pub fn load_experiment(text: &str, expand_sweep: bool) -> Result<ExperimentConfig> {
    let raw = RawConfig::parse(text)?;
    let policies = parse_list("run", "policies", raw.require("run", "policies")?)?
        .iter()
        .map(|name| {
            PolicyMode::parse(name).ok_or_else(|| {
                Error::config(
                    "run.policies",
                    format!(
                        "unknown policy `{name}` (use suplinucb|minucb|epoch_minucb|warmstart|offline_greedy)"
                    ),
                )
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if policies.is_empty() {
        return Err(Error::config("run.policies", "need at least one policy"));
    }
    let t_horizon = parse_usize("run", "t", raw.require("run", "t")?)?;
    if t_horizon == 0 {
        return Err(Error::config("run.t", "horizon must be >= 1"));
    }
    let n_runs = match raw.get("run", "runs") {
        Some(v) => parse_usize("run", "runs", v)?,
        None => 20,
    };
    if n_runs == 0 {
        return Err(Error::config("run.runs", "need at least one run"));
    }
    let base_seed = match raw.get("run", "base_seed") {
        Some(v) => parse_u64("run", "base_seed", v)?,
        None => 42,
    };
    let out_dir = PathBuf::from(raw.get("run", "out").unwrap_or("out"));
    let checkpoints = match raw.get("run", "checkpoints") {
        Some(v) => parse_usize("run", "checkpoints", v)?.max(1),
        None => 200,
    };
    let threads = match raw.get("run", "threads") {
        Some(v) => parse_usize("run", "threads", v)?.max(1),
        None => 1,
    };
    let c_sl = match raw.get("run", "c_sl") {
        Some(v) => parse_f64("run", "c_sl", v)?,
        None => DEFAULT_C_SL,
    };

    let mut scenarios = Vec::new();
    if expand_sweep && !raw.scenarios.is_empty() {
        for (name, overrides) in &raw.scenarios {
            let derived = raw.with_overrides(overrides)?;
            scenarios.push(build_scenario(&derived, name)?);
        }
    } else {
        scenarios.push(build_scenario(&raw, "base")?);
    }

    // A fixed-certificate policy needs a fixed certificate in every scenario.
    for scenario in &scenarios {
        if policies.contains(&PolicyMode::FixedCertificate)
            && !matches!(scenario.certificate, CertificateSpec::Fixed(_))
        {
            return Err(Error::config(
                "certificate.kind",
                format!(
                    "policy `minucb` in scenario `{}` needs kind = fixed",
                    scenario.name
                ),
            ));
        }
    }

    Ok(ExperimentConfig {
        scenarios,
        policies,
        t_horizon,
        n_runs,
        base_seed,
        out_dir,
        checkpoints,
        threads,
        c_sl,
        svg: true,
    })
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Aggregated curve for one (scenario, policy): checkpointed per-run regrets.
#[derive(Debug, Clone)]
pub struct CurveSummary {
    pub scenario: String,
    pub policy: String,
    pub checkpoint_ts: Vec<usize>,
    /// `[checkpoint][run]` cumulative regrets (successful runs only).
    pub per_run: Vec<Vec<f64>>,
}

impl CurveSummary {
    pub fn mean_at(&self, i: usize) -> f64 {
        let runs = &self.per_run[i];
        runs.iter().sum::<f64>() / runs.len().max(1) as f64
    }

    pub fn std_at(&self, i: usize) -> f64 {
        let runs = &self.per_run[i];
        if runs.len() < 2 {
            return 0.0;
        }
        let mean = self.mean_at(i);
        let var =
            runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (runs.len() - 1) as f64;
        var.sqrt()
    }

    pub fn final_mean(&self) -> f64 {
        self.mean_at(self.checkpoint_ts.len() - 1)
    }
}

#[derive(Debug, Serialize)]
struct DiagnosticsEntry {
    scenario: String,
    policy: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<DiagnosticsReport>,
}

/// The in-memory result of `run_experiment`.
pub struct ResultSet {
    pub curves: Vec<CurveSummary>,
    pub failures: usize,
}

struct TaskResult {
    checkpoint_regrets: Vec<f64>,
    diag: DiagnosticsEntry,
}

fn checkpoint_times(t_horizon: usize, checkpoints: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=checkpoints)
        .map(|i| (t_horizon * i).div_ceil(checkpoints))
        .collect();
    ts.dedup();
    ts
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Executes one (scenario, policy, run) cell: simulates, verifies the
/// trajectory assertions, writes the trace CSV, and builds the per-run
/// diagnostics report plus checkpointed regrets.
fn run_one(
    cfg: &ExperimentConfig,
    scenario: &ScenarioConfig,
    mode: PolicyMode,
    run_idx: usize,
    checkpoint_ts: &[usize],
    trace_path: &Path,
) -> Result<(Vec<f64>, DiagnosticsReport)> {
    let mut rngs = RunRngs::derive(cfg.base_seed, run_idx as u64);
    let data = generate_offline(
        &scenario.offline,
        scenario.instance.sigma,
        &mut rngs.offline_noise,
    );
    let ridge: OfflineRidge = fit_ridge_with_dim(&data, scenario.instance.d)?;
    let fixed_cert = match &scenario.certificate {
        CertificateSpec::Fixed(c) => Some(c.clone()),
        _ => None,
    };
    let policy_cert = fixed_cert
        .as_ref()
        .filter(|_| mode == PolicyMode::FixedCertificate);
    let mut policy_cfg = PolicyConfig::new(
        cfg.t_horizon,
        scenario.instance.sigma,
        scenario.instance.s_bound,
        mode,
    );
    policy_cfg.delta_bias = scenario.delta_bias;
    let outcome = simulate(
        &scenario.instance,
        &ridge,
        policy_cert,
        policy_cfg,
        &mut rngs,
    )?;
    diagnostics::verify_trajectory(&outcome.trace, &ridge, policy_cert, &outcome.epoch_certs)?;
    if outcome.checks.best_arm_elimination_faults > 0 || outcome.checks.stopping_bound_faults > 0 {
        return Err(Error::InvariantViolation(format!(
            "{} elimination faults, {} stopping-bound faults",
            outcome.checks.best_arm_elimination_faults, outcome.checks.stopping_bound_faults
        )));
    }
    write_trace_csv(
        trace_path,
        &outcome.trace,
        mode,
        cfg.base_seed + run_idx as u64,
    )?;
    let report = diagnostics::build_report(
        &outcome.trace,
        &ridge,
        fixed_cert.as_ref(),
        &outcome.epoch_certs,
        cfg.c_sl,
    )?;
    let regrets = checkpoint_ts
        .iter()
        .map(|&t| outcome.trace.rows[t - 1].cum_regret)
        .collect();
    Ok((regrets, report))
}

fn write_trace_csv(path: &Path, trace: &RegretTrace, mode: PolicyMode, seed: u64) -> Result<()> {
    let mut out = String::with_capacity(trace.rows.len() * 64);
    out.push_str(
        "t,policy,seed,arm,stop_layer,regret_inc,w_on,w_pool,w_agg,psi_routed,branch_used\n",
    );
    for row in &trace.rows {
        let w_pool = if row.w_pool.is_finite() {
            format!("{}", row.w_pool)
        } else {
            String::new()
        };
        let branch = match mode {
            PolicyMode::OfflineGreedy => "off",
            _ if row.branch_pool => "pool",
            _ => "on",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.t,
            mode.name(),
            seed,
            row.arm,
            row.stop_layer,
            row.regret_inc,
            row.w_on,
            w_pool,
            row.w_agg,
            row.psi,
            branch
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Runs the full grid and writes every output file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultSet> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let ts = checkpoint_times(cfg.t_horizon, cfg.checkpoints);

    struct Task {
        scenario_idx: usize,
        policy_idx: usize,
        run_idx: usize,
    }
    let mut tasks = Vec::new();
    for scenario_idx in 0..cfg.scenarios.len() {
        for policy_idx in 0..cfg.policies.len() {
            for run_idx in 0..cfg.n_runs {
                tasks.push(Task {
                    scenario_idx,
                    policy_idx,
                    run_idx,
                });
            }
        }
    }

    let results: Mutex<Vec<Option<TaskResult>>> =
        Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.threads.min(tasks.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= tasks.len() {
                    break;
                }
                let task = &tasks[idx];
                let scenario = &cfg.scenarios[task.scenario_idx];
                let mode = cfg.policies[task.policy_idx];
                let seed = cfg.base_seed + task.run_idx as u64;
                let trace_path = cfg.out_dir.join(format!(
                    "trace_{}_{}_{}.csv",
                    sanitize(&scenario.name),
                    mode.name(),
                    seed
                ));
                let outcome = run_one(cfg, scenario, mode, task.run_idx, &ts, &trace_path);
                let result = match outcome {
                    Ok((checkpoint_regrets, report)) => TaskResult {
                        checkpoint_regrets,
                        diag: DiagnosticsEntry {
                            scenario: scenario.name.clone(),
                            policy: mode.name().to_string(),
                            seed,
                            failed: None,
                            report: Some(report),
                        },
                    },
                    Err(e) => TaskResult {
                        checkpoint_regrets: Vec::new(),
                        diag: DiagnosticsEntry {
                            scenario: scenario.name.clone(),
                            policy: mode.name().to_string(),
                            seed,
                            failed: Some(e.to_string()),
                            report: None,
                        },
                    },
                };
                results.lock().expect("results lock")[idx] = Some(result);
            });
        }
    });

    let results = results.into_inner().expect("results lock");
    let mut curves = Vec::new();
    let mut diag_entries = Vec::new();
    let mut failures = 0usize;
    for scenario_idx in 0..cfg.scenarios.len() {
        for policy_idx in 0..cfg.policies.len() {
            let mut per_run: Vec<Vec<f64>> = vec![Vec::new(); ts.len()];
            for run_idx in 0..cfg.n_runs {
                let task_idx =
                    (scenario_idx * cfg.policies.len() + policy_idx) * cfg.n_runs + run_idx;
                let result = results[task_idx]
                    .as_ref()
                    .expect("every task slot is filled");
                if result.diag.failed.is_some() {
                    failures += 1;
                } else {
                    for (i, &r) in result.checkpoint_regrets.iter().enumerate() {
                        per_run[i].push(r);
                    }
                }
            }
            curves.push(CurveSummary {
                scenario: cfg.scenarios[scenario_idx].name.clone(),
                policy: cfg.policies[policy_idx].name().to_string(),
                checkpoint_ts: ts.clone(),
                per_run,
            });
        }
    }
    for result in results {
        diag_entries.push(result.expect("filled").diag);
    }

    write_summary_csv(&cfg.out_dir.join("summary.csv"), &curves)?;
    let diag_path = cfg.out_dir.join("diagnostics.json");
    let json = serde_json::to_string_pretty(&diag_entries)
        .map_err(|e| Error::Input(format!("diagnostics serialization: {e}")))?;
    fs::write(&diag_path, json).map_err(|e| Error::io(diag_path.display().to_string(), e))?;
    if cfg.svg {
        let svg = svg_regret_curves(cfg, &curves);
        let svg_path = cfg.out_dir.join("regret_curves.svg");
        fs::write(&svg_path, svg).map_err(|e| Error::io(svg_path.display().to_string(), e))?;
    }
    Ok(ResultSet { curves, failures })
}

fn write_summary_csv(path: &Path, curves: &[CurveSummary]) -> Result<()> {
    let mut out = String::new();
    out.push_str("scenario,policy,t,regret_mean,regret_std,n_runs\n");
    for curve in curves {
        for (i, &t) in curve.checkpoint_ts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                curve.scenario,
                curve.policy,
                t,
                curve.mean_at(i),
                curve.std_at(i),
                curve.per_run[i].len()
            );
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// SVG output
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Renders one panel per scenario, one polyline per policy, and a shaded
/// mean +- 1 sample-standard-deviation band per curve.
pub fn svg_regret_curves(cfg: &ExperimentConfig, curves: &[CurveSummary]) -> String {
    let panel_w = 380.0;
    let panel_h = 300.0;
    let margin = 48.0;
    let plot_w = panel_w - 2.0 * margin;
    let plot_h = panel_h - 2.0 * margin;
    let n_panels = cfg.scenarios.len().max(1);
    let width = panel_w * n_panels as f64;
    let height = panel_h + 24.0 * cfg.policies.len() as f64 / 2.0 + 30.0;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (p, scenario) in cfg.scenarios.iter().enumerate() {
        let x0 = p as f64 * panel_w + margin;
        let y0 = margin;
        let panel_curves: Vec<&CurveSummary> = curves
            .iter()
            .filter(|c| c.scenario == scenario.name)
            .collect();
        let t_max = cfg.t_horizon as f64;
        let mut y_max = 1e-9_f64;
        for curve in &panel_curves {
            for i in 0..curve.checkpoint_ts.len() {
                y_max = y_max.max(curve.mean_at(i) + curve.std_at(i));
            }
        }
        let sx = move |t: f64| x0 + t / t_max * plot_w;
        let sy = move |r: f64| y0 + plot_h - (r / y_max * plot_h);

        // Axes.
        let _ = write!(
            svg,
            "<line x1=\"{x0}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + plot_h,
            x0 + plot_w,
            y0 + plot_h
        );
        let _ = write!(
            svg,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + plot_h
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
            x0 + plot_w / 2.0,
            y0 - 16.0,
            xml_escape(&scenario.name)
        );
        for frac in [0.0, 0.5, 1.0] {
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
                sx(frac * t_max),
                y0 + plot_h + 14.0,
                (frac * t_max) as usize
            );
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{:.0}</text>\n",
                x0 - 4.0,
                sy(frac * y_max) + 3.0,
                frac * y_max
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">t</text>\n",
            x0 + plot_w / 2.0,
            y0 + plot_h + 28.0
        );

        for (ci, curve) in panel_curves.iter().enumerate() {
            let color = PALETTE[ci % PALETTE.len()];
            if curve.per_run.iter().any(|r| r.is_empty()) {
                continue;
            }
            // Band polygon: mean + std forward, mean - std backward.
            let mut band = String::from("<polygon points=\"");
            for (i, &t) in curve.checkpoint_ts.iter().enumerate() {
                let _ = write!(
                    band,
                    "{:.2},{:.2} ",
                    sx(t as f64),
                    sy(curve.mean_at(i) + curve.std_at(i))
                );
            }
            for (i, &t) in curve.checkpoint_ts.iter().enumerate().rev() {
                let _ = write!(
                    band,
                    "{:.2},{:.2} ",
                    sx(t as f64),
                    sy((curve.mean_at(i) - curve.std_at(i)).max(0.0))
                );
            }
            let _ = write!(
                band,
                "\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
            );
            svg.push_str(&band);

            let mut line = String::from("<polyline points=\"");
            for (i, &t) in curve.checkpoint_ts.iter().enumerate() {
                let _ = write!(line, "{:.2},{:.2} ", sx(t as f64), sy(curve.mean_at(i)));
            }
            let _ = write!(
                line,
                "\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
            );
            svg.push_str(&line);
        }
    }

    // Legend: policy colors plus the band convention.
    let legend_y = panel_h + 10.0;
    for (ci, policy) in cfg.policies.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let lx = 48.0 + (ci as f64) * 140.0;
        let _ = write!(
            svg,
            "<rect x=\"{lx}\" y=\"{legend_y}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n"
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            lx + 16.0,
            legend_y + 10.0,
            policy.name()
        );
    }
    let _ = write!(
        svg,
        "<text x=\"48\" y=\"{}\" font-size=\"10\" fill=\"#555\">band = mean &#177; 1 sample std over runs</text>\n",
        legend_y + 28.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

/// Reduced-scale verification suite: exact-math properties of the SPD kernel
/// plus trajectory assertions on simulated runs (T = 500, 20 seeds, d = 3).
/// Prints one line per suite; returns an error on the first failure.
pub fn selftest(mut log: impl std::io::Write) -> Result<()> {
    use crate::spd;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    let mut rng = ChaCha12Rng::seed_from_u64(0xB1A5);
    let random_spd = |d: usize, rng: &mut ChaCha12Rng| {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..d {
                    s += a[k * d + i] * a[k * d + j];
                }
                m[i * d + j] = s;
            }
        }
        SpdMatrix::from_entries(d, m).expect("gram + identity is SPD")
    };
    let random_vec = |d: usize, rng: &mut ChaCha12Rng| {
        Vector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
    };

    // Matrix-determinant lemma under rank-one updates.
    for i in 0..300 {
        let d = 2 + (i % 7);
        let m = random_spd(d, &mut rng);
        let x = random_vec(d, &mut rng);
        let updated = m.rank_one_update(&x)?;
        let diff = updated.log_det() - m.log_det() - (1.0 + m.inv_norm(&x)?.powi(2)).ln();
        if diff.abs() > 1e-8 {
            return Err(Error::InvariantViolation(format!(
                "determinant lemma failed: log-gap {diff}"
            )));
        }
    }
    writeln!(
        log,
        "selftest: determinant lemma on 300 rank-one updates ... ok"
    )
    .ok();

    // Parallel-sum variational identity.
    for i in 0..200 {
        let d = 2 + (i % 5);
        let a = random_spd(d, &mut rng);
        let b = random_spd(d, &mut rng);
        let x = random_vec(d, &mut rng);
        let m = spd::parallel_sum(&a, &b)?;
        let sum = a.add_sym(b.entries())?;
        let u = Vector::new(sum.solve(&b.mul_vec(x.as_slice()))).expect("finite");
        let v = x.sub(&u);
        let lhs = m.elliptic_norm(&x)?.powi(2);
        let rhs = a.elliptic_norm(&u)?.powi(2) + b.elliptic_norm(&v)?.powi(2);
        if (lhs - rhs).abs() > 1e-8 * rhs.max(1.0) {
            return Err(Error::InvariantViolation(format!(
                "parallel-sum identity failed: {lhs} vs {rhs}"
            )));
        }
    }
    writeln!(
        log,
        "selftest: parallel-sum variational identity on 200 triples ... ok"
    )
    .ok();

    // Waterfilling closed forms.
    let g = SpdMatrix::diag(&[1.0, 3.0])?;
    let phi = spd::waterfill_phi(&g, 1.0)?;
    if (phi - 2.0_f64.ln()).abs() > 1e-10 {
        return Err(Error::InvariantViolation(
            "waterfill (1,3) case failed".into(),
        ));
    }
    let phi2 = spd::waterfill_phi(&SpdMatrix::identity(2), 2.0)?;
    if (phi2 - 2.0 * 2.0_f64.ln()).abs() > 1e-10 {
        return Err(Error::InvariantViolation(
            "waterfill identity case failed".into(),
        ));
    }
    writeln!(log, "selftest: waterfilling closed forms ... ok").ok();

    // Generalized eigenvalue vs power iteration on M^{-1} G (same spectrum as
    // the symmetric pencil).
    for _ in 0..10 {
        let d = 4;
        let g = random_spd(d, &mut rng);
        let m = random_spd(d, &mut rng);
        let mut v = vec![1.0; d];
        let mut lambda = 1.0;
        for _ in 0..10_000 {
            let w = m.solve(&g.mul_vec(&v));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        let got = spd::gen_eig_max(&g, &m)?;
        if (got - lambda).abs() > 1e-7 * lambda.max(1.0) {
            return Err(Error::InvariantViolation(format!(
                "gen_eig_max {got} vs power iteration {lambda}"
            )));
        }
    }
    writeln!(
        log,
        "selftest: generalized eigenvalue vs power iteration ... ok"
    )
    .ok();

    // Trajectory invariants on simulated runs.
    let t_horizon = 500;
    let theta_star = Vector::new(vec![0.8, 0.4, 0.2]).expect("finite");
    let theta_dagger = Vector::new(vec![0.7, 0.45, 0.25]).expect("finite");
    let gap = theta_star.sub(&theta_dagger);
    let cert = BiasCertificate::new(SpdMatrix::identity(3), gap.norm2() * 1.05)?;
    let instance = BanditInstance {
        s_bound: theta_star.norm2().max(theta_dagger.norm2()),
        theta_star,
        k: 3,
        d: 3,
        sigma: 0.1,
        context_law: SupportLaw::GaussianUnitBall {
            normalize: Normalize::Always,
        },
        reward_model: RewardModel::Gaussian,
    };
    for mode in [PolicyMode::FixedCertificate, PolicyMode::EpochCertificate] {
        for run_idx in 0..20u64 {
            let mut rngs = RunRngs::derive(42, run_idx);
            let spec = OfflineSpec {
                theta_dagger: theta_dagger.clone(),
                n_off: 300,
                covariate_law: SupportLaw::GaussianUnitBall {
                    normalize: Normalize::Always,
                },
                reward_model: RewardModel::Gaussian,
            };
            let data = generate_offline(&spec, instance.sigma, &mut rngs.offline_noise);
            let ridge = fit_ridge_with_dim(&data, 3)?;
            let policy_cert = (mode == PolicyMode::FixedCertificate).then_some(&cert);
            let cfg = PolicyConfig::new(t_horizon, instance.sigma, instance.s_bound, mode);
            let outcome = simulate(&instance, &ridge, policy_cert, cfg, &mut rngs)?;
            diagnostics::verify_trajectory(
                &outcome.trace,
                &ridge,
                policy_cert,
                &outcome.epoch_certs,
            )?;
            if outcome.checks.best_arm_elimination_faults > 0
                || outcome.checks.stopping_bound_faults > 0
            {
                return Err(Error::InvariantViolation(format!(
                    "run {run_idx} ({mode:?}): ground-truth checks failed"
                )));
            }
        }
        writeln!(
            log,
            "selftest: trajectory invariants, 20 seeds at T=500 ({}) ... ok",
            mode.name()
        )
        .ok();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// diag subcommand support
// ---------------------------------------------------------------------------

/// Recomputes what a per-round trace CSV supports (regret totals, layer
/// routing, raw psi path sums) and reconciles the envelope fields stored in
/// `diagnostics.json`. The CSV schema intentionally omits feature vectors, so
/// Gram-based quantities are verified from the stored reports rather than
/// recomputed.
pub fn diag_dir(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trace_") && n.ends_with(".csv"))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Input(format!(
            "no trace_*.csv files under {}",
            dir.display()
        )));
    }
    for path in &entries {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut total_regret = 0.0;
        let mut psi_sum = 0.0;
        let mut rounds = 0usize;
        let mut layer_counts: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 11 {
                return Err(Error::Input(format!(
                    "{}: line {} has {} columns, expected 11",
                    path.display(),
                    i + 1,
                    cols.len()
                )));
            }
            rounds += 1;
            let layer: usize = cols[4].parse().map_err(|_| {
                Error::Input(format!(
                    "{}: bad stop_layer at line {}",
                    path.display(),
                    i + 1
                ))
            })?;
            *layer_counts.entry(layer).or_default() += 1;
            total_regret += cols[5].parse::<f64>().unwrap_or(f64::NAN);
            psi_sum += cols[9].parse::<f64>().unwrap_or(f64::NAN);
        }
        let routed: usize = layer_counts.values().sum();
        if routed != rounds {
            return Err(Error::InvariantViolation(format!(
                "{}: layer routing covers {routed} of {rounds} rounds",
                path.display()
            )));
        }
        let _ = writeln!(
            out,
            "{}: rounds={rounds} total_regret={total_regret:.6} raw_psi_sum={psi_sum:.6} layers_used={}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("?"),
            layer_counts.len()
        );
    }
    let diag_path = dir.join("diagnostics.json");
    if diag_path.exists() {
        let text = fs::read_to_string(&diag_path)
            .map_err(|e| Error::io(diag_path.display().to_string(), e))?;
        let parsed: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("diagnostics.json: {e}")))?;
        let mut checked = 0usize;
        if let Some(arr) = parsed.as_array() {
            for entry in arr {
                if let Some(report) = entry.get("report") {
                    let lhs = report["envelope_lhs"].as_f64().unwrap_or(f64::NAN);
                    let rhs = report["envelope_rhs"].as_f64().unwrap_or(f64::NAN);
                    if !(lhs <= rhs + 1e-6) {
                        return Err(Error::InvariantViolation(format!(
                            "stored envelope violated: {lhs} > {rhs}"
                        )));
                    }
                    checked += 1;
                }
            }
        }
        let _ = writeln!(
            out,
            "diagnostics.json: {checked} reports, envelope holds in all"
        );
    }
    Ok(out)
}
