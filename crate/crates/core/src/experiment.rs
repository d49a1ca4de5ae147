//! Multi-round experiments: sampling, running, persisting.
//!
//! Output layout:
//!
//! ```text
//! <output_dir>/manifest.json         config, host, seed, input hashes
//! <output_dir>/round-0000.jsonl      one ClientRunResult per line
//! <output_dir>/round-0000/client-0000/params.bin   (real mode)
//! ```

use std::fs;
use std::io;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enforcer::{check_support, BackendKind, Enforcer, EnforcerError};
use crate::perfmodel::{load_workload, PerfError};
use crate::profiles::{load_catalogs, plan_enforcement, Catalog, HostCapabilities, ProfileError};
use crate::sampler::{load_popularity_table, sample_federation, PopularityTable, SamplerError, SamplerFilter};
use crate::scheduler::{run_round, ClientRunResult, RoundContext, RoundReport, RunMode, SchedulerError, TaskTemplate, Timeline};
use crate::WorkloadSpec;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Golden-ratio increment mixed into the seed per round, so rounds draw
/// different federations while round 0 uses the seed unchanged.
const ROUND_SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn round_seed(seed: u64, round_idx: usize) -> u64 {
    seed.wrapping_add((round_idx as u64).wrapping_mul(ROUND_SEED_STEP))
}

pub fn report_file(output_dir: &Path, round_idx: usize) -> PathBuf {
    output_dir.join(format!("round-{round_idx:04}.jsonl"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub catalog_paths: Vec<PathBuf>,
    #[serde(default)]
    pub popularity_path: Option<PathBuf>,
    /// Required in simulated mode.
    #[serde(default)]
    pub workload_path: Option<PathBuf>,
    /// Fixed federation used for every round instead of sampling.
    #[serde(default)]
    pub federation: Option<Vec<String>>,
    #[serde(default)]
    pub clients_per_round: usize,
    #[serde(default = "one")]
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    pub mode: RunMode,
    #[serde(default = "default_backend")]
    pub backend: BackendKind,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub degrade_allowed: bool,
    /// Host to simulate; defaults to the workload's reference host.
    #[serde(default)]
    pub host_profile_id: Option<String>,
    /// Global parameters handed to every client; an empty file is created
    /// when absent.
    #[serde(default)]
    pub params_in: Option<PathBuf>,
    pub task: TaskTemplate,
    #[serde(default)]
    pub filter: SamplerFilter,
}

/// Drops `.` and folds `..` without touching the filesystem.
fn normalize(path: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

fn one() -> usize {
    1
}

fn default_backend() -> BackendKind {
    BackendKind::Real
}

impl ExperimentConfig {
    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = normalize(&base.join(&*p));
            }
        };
        self.catalog_paths.iter_mut().for_each(fix);
        self.popularity_path.as_mut().map(fix);
        self.workload_path.as_mut().map(fix);
        self.params_in.as_mut().map(fix);
        fix(&mut self.output_dir);
        fix(&mut self.task.working_dir);
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let cfg = |m: String| Err(ExperimentError::Config(m));
        if self.rounds == 0 {
            return cfg("rounds must be at least 1".into());
        }
        if self.catalog_paths.is_empty() {
            return cfg("catalog_paths is empty".into());
        }
        if self.task.argv.is_empty() {
            return cfg("task.argv is empty".into());
        }
        if !self.task.timeout_s.is_finite() || self.task.timeout_s <= 0.0 {
            return cfg("task.timeout_s must be finite and positive".into());
        }
        if self.federation.is_none() && self.popularity_path.is_none() && self.clients_per_round > 0 {
            return cfg("either federation or popularity_path is required".into());
        }
        if self.mode == RunMode::Simulated && self.workload_path.is_none() {
            return cfg("simulated mode requires workload_path".into());
        }
        let paths = self
            .catalog_paths
            .iter()
            .chain(&self.popularity_path)
            .chain(&self.workload_path)
            .chain(&self.params_in);
        for p in paths {
            if !p.exists() {
                return cfg(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Enforcer(#[from] EnforcerError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl ExperimentError {
    /// True for problems with the inputs rather than with running them.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Profile(_)
                | ExperimentError::Sampler(_)
                | ExperimentError::Perf(_)
        )
    }

    pub fn is_privilege(&self) -> bool {
        matches!(
            self,
            ExperimentError::Enforcer(EnforcerError::PrivilegeError { .. })
                | ExperimentError::Scheduler(SchedulerError::Enforcer(EnforcerError::PrivilegeError { .. }))
        )
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> ExperimentError {
    let context = context.into();
    move |source| ExperimentError::Io { context, source }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String, ExperimentError> {
    fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(io_err(format!("reading {}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round_idx: usize,
    pub seed: u64,
    pub federation: Vec<String>,
    pub report_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub mode: RunMode,
    pub seed: u64,
    pub host: HostCapabilities,
    /// SHA-256 of the merged catalog in canonical JSON form.
    pub catalog_sha256: String,
    pub popularity_sha256: Option<String>,
    pub workload_sha256: Option<String>,
    pub rounds: Vec<RoundPlan>,
    pub config: ExperimentConfig,
}

/// Inputs loaded and checked, federations drawn.
#[derive(Debug, Clone)]
pub struct PreparedExperiment {
    pub config: ExperimentConfig,
    pub catalog: Catalog,
    pub table: Option<PopularityTable>,
    pub workload: Option<WorkloadSpec>,
    pub rounds: Vec<RoundPlan>,
    catalog_sha256: String,
    popularity_sha256: Option<String>,
    workload_sha256: Option<String>,
}

impl PreparedExperiment {
    /// The host simulated mode runs against: the configured host profile
    /// (or the workload's reference host) with no capabilities.
    pub fn simulated_host(&self) -> Result<HostCapabilities, ExperimentError> {
        let id = self
            .config
            .host_profile_id
            .clone()
            .or_else(|| self.workload.as_ref().map(|w| w.reference_host_id.clone()))
            .ok_or_else(|| ExperimentError::Config("no host_profile_id and no workload".into()))?;
        let hw = self.catalog.resolve(&id)?.clone();
        Ok(HostCapabilities::without_capabilities(hw))
    }

    pub fn manifest(&self, host: &HostCapabilities) -> Manifest {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            mode: self.config.mode,
            seed: self.config.seed,
            host: host.clone(),
            catalog_sha256: self.catalog_sha256.clone(),
            popularity_sha256: self.popularity_sha256.clone(),
            workload_sha256: self.workload_sha256.clone(),
            rounds: self.rounds.clone(),
            config: self.config.clone(),
        }
    }
}

/// Loads every input and draws each round's federation.
pub fn prepare(config: ExperimentConfig) -> Result<PreparedExperiment, ExperimentError> {
    config.validate()?;
    let catalog = load_catalogs(&config.catalog_paths)?;
    let catalog_sha256 = sha256_hex(catalog.to_json_string().as_bytes());

    let (table, popularity_sha256) = match (&config.federation, &config.popularity_path) {
        (None, Some(p)) => (Some(load_popularity_table(p, &catalog)?), Some(file_hash(p)?)),
        _ => (None, None),
    };
    let (workload, workload_sha256) = match &config.workload_path {
        Some(p) => (Some(load_workload::<f64>(p)?), Some(file_hash(p)?)),
        None => (None, None),
    };
    if let Some(w) = &workload {
        catalog.resolve(&w.reference_host_id)?;
    }
    if let Some(fed) = &config.federation {
        for id in fed {
            catalog.resolve(id)?;
        }
    }

    let rounds = (0..config.rounds)
        .map(|r| {
            let seed = round_seed(config.seed, r);
            let federation = match (&config.federation, &table) {
                (Some(fed), _) => fed.clone(),
                (None, Some(t)) => sample_federation(t, &catalog, config.clients_per_round, seed, &config.filter)?,
                (None, None) => Vec::new(),
            };
            Ok(RoundPlan {
                round_idx: r,
                seed,
                federation,
                report_file: format!("round-{r:04}.jsonl"),
            })
        })
        .collect::<Result<Vec<_>, SamplerError>>()?;

    Ok(PreparedExperiment {
        config,
        catalog,
        table,
        workload,
        rounds,
        catalog_sha256,
        popularity_sha256,
        workload_sha256,
    })
}

/// Fails before anything is touched if a real-mode plan needs a mechanism
/// the backend lacks (unless degrading is allowed).
pub fn preflight(prep: &PreparedExperiment, host: &HostCapabilities, enforcer: &Enforcer) -> Result<(), ExperimentError> {
    for round in &prep.rounds {
        for id in &round.federation {
            let plan = plan_enforcement(prep.catalog.resolve(id)?, host)?;
            check_support(enforcer.capabilities(), &plan, prep.config.degrade_allowed)?;
        }
    }
    Ok(())
}

pub fn write_report(path: &Path, runs: &[ClientRunResult]) -> Result<(), ExperimentError> {
    let mut out = String::new();
    for run in runs {
        out.push_str(&serde_json::to_string(run).expect("results serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), ExperimentError> {
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(format!("writing {}", path.display())))
}

fn params_in_path(prep: &PreparedExperiment) -> Result<PathBuf, ExperimentError> {
    if let Some(p) = &prep.config.params_in {
        return Ok(p.clone());
    }
    let p = prep.config.output_dir.join("params_in.bin");
    if prep.config.mode == RunMode::Real && !p.exists() {
        fs::write(&p, b"").map_err(io_err(format!("writing {}", p.display())))?;
    }
    Ok(p)
}

/// Runs every round in order, persisting each report as soon as the round
/// ends. `on_round` sees each report (the CLI prints a summary line).
///
/// In real mode, leftovers from a previous crash are reported and cleared
/// first, and the host is reset again if anything fails or panics.
pub fn run_experiment(
    prep: &PreparedExperiment,
    host: &HostCapabilities,
    enforcer: Option<&Enforcer>,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<Vec<RoundReport>, ExperimentError> {
    let cfg = &prep.config;
    let real = cfg.mode == RunMode::Real;
    if real {
        let enforcer = enforcer.ok_or_else(|| ExperimentError::Config("real mode needs an enforcer".into()))?;
        preflight(prep, host, enforcer)?;
        let stale = enforcer.stale_state();
        if !stale.is_empty() {
            log::warn!("stale state from an earlier run: {}", stale.join(", "));
            for line in enforcer.emergency_reset().lines {
                log::warn!("reset: {line}");
            }
        }
    }

    fs::create_dir_all(&cfg.output_dir).map_err(io_err(format!("creating {}", cfg.output_dir.display())))?;
    write_manifest(&cfg.output_dir, &prep.manifest(host))?;
    let params_in = params_in_path(prep)?;
    let run_id = format!("run-{}", std::process::id());

    let ctx = RoundContext {
        mode: cfg.mode,
        host,
        catalog: &prep.catalog,
        enforcer,
        workload: prep.workload.as_ref(),
        run_id: &run_id,
        degrade_allowed: cfg.degrade_allowed,
        output_dir: &cfg.output_dir,
        params_in: &params_in,
    };

    let body = || -> Result<Vec<RoundReport>, ExperimentError> {
        let mut timeline = Timeline::new();
        let mut reports = Vec::with_capacity(prep.rounds.len());
        for round in &prep.rounds {
            let report = run_round(round.round_idx, &round.federation, &cfg.task, &ctx, &mut timeline)?;
            write_report(&cfg.output_dir.join(&round.report_file), &report.runs)?;
            on_round(&report);
            reports.push(report);
        }
        Ok(reports)
    };
    let outcome = panic::catch_unwind(AssertUnwindSafe(body));

    if let Some(enforcer) = enforcer.filter(|_| real) {
        let failed = !matches!(outcome, Ok(Ok(_)));
        if failed {
            for line in enforcer.emergency_reset().lines {
                log::warn!("reset after failure: {line}");
            }
        }
        enforcer.shutdown();
    }
    match outcome {
        Ok(result) => result,
        Err(payload) => panic::resume_unwind(payload),
    }
}

/// Reads back the reports persisted in `dir`.
pub fn load_reports(dir: &Path) -> Result<Vec<RoundReport>, ExperimentError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(io_err(format!("reading {}", manifest_path.display())))?,
    )
    .map_err(|e| ExperimentError::Config(format!("{}: {e}", manifest_path.display())))?;

    let mut reports = Vec::new();
    for round in &manifest.rounds {
        let path = dir.join(&round.report_file);
        // Rounds that never ran (interrupted experiment) have no file.
        let Ok(content) = fs::read_to_string(&path) else { break };
        let runs = content
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<ClientRunResult>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        reports.push(RoundReport {
            round_idx: round.round_idx,
            host: manifest.host.clone(),
            runs,
            mode: manifest.mode,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_zero_keeps_the_seed() {
        assert_eq!(round_seed(42, 0), 42);
        assert_ne!(round_seed(42, 1), round_seed(42, 2));
        assert_eq!(round_seed(u64::MAX, 1), ROUND_SEED_STEP - 1);
    }

    #[test]
    fn normalize_folds_parent_dirs() {
        assert_eq!(normalize(Path::new("/a/b/../c/./d")), PathBuf::from("/a/c/d"));
        assert_eq!(normalize(Path::new("../x")), PathBuf::from("../x"));
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
