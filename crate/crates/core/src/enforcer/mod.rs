//! Applying and releasing enforcement plans on the host.
//!
//! Most of the controls involved (CPU frequency, GPU clocks, the MPS daemon)
//! are host-global, so at most one lease may be unreleased at any time. The
//! [`Enforcer`] guards that rule; a [`Backend`] does the actual work.

mod cgroup;
mod linux;
mod mock;
mod probe;
mod runner;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{fraction_to_decimal, EnforcementPlan, ENV_MPS_PCT, ENV_VRAM_FRACTION};

pub use cgroup::{
    create_leaf, detect_root as detect_cgroup_root, is_cgroup2_fs, list_leaves, owner_dir,
    read_memory_max, read_memory_peak, read_oom_kills, remove_leaf, ENV_CGROUP_ROOT, OWNER_DIR,
};
pub use linux::{LinuxBackend, LinuxConfig};
pub use mock::{MockBackend, MockHostState};
pub use probe::{probe_host, ProbeConfig, ProbeResult};
pub use runner::{find_in_path, run_checked, CommandOutput, CommandRunner, RecordingRunner, SystemRunner};

pub const PRIVILEGE_REASON: &str = "requires elevated privileges";

/// A host mechanism the enforcer may drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    CpuFreq,
    CpuAffinity,
    MemoryCgroup,
    GpuClock,
    GpuMps,
    VramHint,
}

impl Mechanism {
    pub const ALL: [Mechanism; 6] = [
        Mechanism::CpuFreq,
        Mechanism::CpuAffinity,
        Mechanism::MemoryCgroup,
        Mechanism::GpuClock,
        Mechanism::GpuMps,
        Mechanism::VramHint,
    ];
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mechanism::CpuFreq => "cpu_freq",
            Mechanism::CpuAffinity => "cpu_affinity",
            Mechanism::MemoryCgroup => "memory_cgroup",
            Mechanism::GpuClock => "gpu_clock",
            Mechanism::GpuMps => "gpu_mps",
            Mechanism::VramHint => "vram_hint",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismSupport {
    pub supported: bool,
    /// Why unsupported, or a caveat for a supported mechanism.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilityReport {
    pub backend_id: String,
    pub mechanisms: BTreeMap<Mechanism, MechanismSupport>,
}

impl BackendCapabilityReport {
    pub fn new(backend_id: impl Into<String>) -> Self {
        BackendCapabilityReport {
            backend_id: backend_id.into(),
            mechanisms: BTreeMap::new(),
        }
    }

    /// Every mechanism supported.
    pub fn all_supported(backend_id: impl Into<String>) -> Self {
        let mut r = Self::new(backend_id);
        for m in Mechanism::ALL {
            r.set(m, true, None);
        }
        r
    }

    pub fn set(&mut self, m: Mechanism, supported: bool, reason: Option<String>) {
        self.mechanisms.insert(m, MechanismSupport { supported, reason });
    }

    pub fn supports(&self, m: Mechanism) -> bool {
        self.mechanisms.get(&m).is_some_and(|s| s.supported)
    }

    pub fn reason(&self, m: Mechanism) -> Option<&str> {
        self.mechanisms.get(&m).and_then(|s| s.reason.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    CpuFreqCap,
    MemoryCgroup,
    GpuCoreClockCap,
    GpuMemClockCap,
    MpsActiveThreads,
    VramFraction,
}

impl ActionKind {
    pub fn mechanism(self) -> Mechanism {
        match self {
            ActionKind::CpuFreqCap => Mechanism::CpuFreq,
            ActionKind::MemoryCgroup => Mechanism::MemoryCgroup,
            ActionKind::GpuCoreClockCap | ActionKind::GpuMemClockCap => Mechanism::GpuClock,
            ActionKind::MpsActiveThreads => Mechanism::GpuMps,
            ActionKind::VramFraction => Mechanism::VramHint,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActionKind::CpuFreqCap => "cpu_freq_cap",
            ActionKind::MemoryCgroup => "memory_cgroup",
            ActionKind::GpuCoreClockCap => "gpu_core_clock_cap",
            ActionKind::GpuMemClockCap => "gpu_mem_clock_cap",
            ActionKind::MpsActiveThreads => "mps_active_threads",
            ActionKind::VramFraction => "vram_fraction",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedAction {
    pub kind: ActionKind,
    pub target: String,
    pub new_value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ActionState {
    Applied,
    Skipped { reason: String },
    Restored,
    RestoreFailed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub kind: ActionKind,
    pub target: String,
    pub prior_value: Option<String>,
    pub new_value: String,
    #[serde(flatten)]
    pub state: ActionState,
}

impl ActionRecord {
    pub fn is_skipped(&self) -> bool {
        matches!(self.state, ActionState::Skipped { .. })
    }
}

/// Token for limits currently applied to the host.
#[derive(Debug)]
pub struct EnforcementLease {
    id: u64,
    pub plan: EnforcementPlan,
    pub backend_id: String,
    pub applied_at: Instant,
    pub actions_taken: Vec<ActionRecord>,
    pub released: bool,
    /// The lease's cgroup, when the backend created one.
    pub cgroup_dir: Option<PathBuf>,
    /// CPUs the child should be pinned to; `None` when affinity was skipped.
    pub affinity: Option<Vec<usize>>,
}

impl EnforcementLease {
    pub fn skipped(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .actions_taken
            .iter()
            .filter_map(|a| match &a.state {
                ActionState::Skipped { reason } => Some(format!("{}: {reason}", a.kind)),
                _ => None,
            })
            .collect();
        if self.affinity.is_none() {
            out.push(format!("{}: skipped", Mechanism::CpuAffinity));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReleaseOutcome {
    Released,
    /// The lease had already been released; nothing was done.
    AlreadyReleased,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ResetOutcome {
    Done,
    Skipped { reason: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetLine {
    pub action: String,
    pub target: String,
    #[serde(flatten)]
    pub outcome: ResetOutcome,
}

impl fmt::Display for ResetLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            ResetOutcome::Done => write!(f, "{} {}: done", self.action, self.target),
            ResetOutcome::Skipped { reason } => {
                write!(f, "{} {}: skipped ({reason})", self.action, self.target)
            }
            ResetOutcome::Failed { error } => {
                write!(f, "{} {}: FAILED ({error})", self.action, self.target)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetReport {
    pub lines: Vec<ResetLine>,
}

impl ResetReport {
    pub fn is_clean(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn push(&mut self, action: &str, target: impl Into<String>, outcome: ResetOutcome) {
        self.lines.push(ResetLine {
            action: action.to_string(),
            target: target.into(),
            outcome,
        });
    }

    pub fn has_failures(&self) -> bool {
        self.lines
            .iter()
            .any(|l| matches!(l.outcome, ResetOutcome::Failed { .. }))
    }
}

#[derive(Debug, Error)]
pub enum EnforcerError {
    #[error("an enforcement lease is already held ({0})")]
    LeaseHeld(String),
    #[error("{mechanism}: {reason}")]
    PrivilegeError { mechanism: Mechanism, reason: String },
    #[error("unsupported action {mechanism}: {reason}")]
    UnsupportedAction { mechanism: Mechanism, reason: String },
    #[error("command `{command}` failed (status {status:?}): {output}")]
    ExternalCommandFailed {
        command: String,
        status: Option<i32>,
        output: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("restore failed for {} action(s): {}", .0.len(), .0.join("; "))]
    RestoreFailed(Vec<String>),
    #[error("{0}")]
    Config(String),
}

/// Does the host-side work for one kind of environment.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn capabilities(&self) -> &BackendCapabilityReport;

    /// Performs the action and returns the value it replaced.
    fn apply_action(&self, action: &PlannedAction) -> Result<Option<String>, EnforcerError>;

    /// Puts back `record.prior_value`.
    fn restore_action(&self, record: &ActionRecord) -> Result<(), EnforcerError>;

    /// Where the cgroup for a memory action with this target lives, if the
    /// backend creates real directories.
    fn cgroup_path(&self, _target: &str) -> Option<PathBuf> {
        None
    }

    /// CPUs available for pinning children.
    fn allowed_cpus(&self) -> Vec<usize> {
        probe::allowed_cpus()
    }

    /// Orchestrator-owned state that outlived its lease (crash leftovers).
    fn stale_state(&self) -> Vec<String>;

    /// Puts every mechanism back to its hardware default and removes
    /// orchestrator-owned state. Never fails; problems go into the report.
    fn emergency_reset(&self) -> ResetReport;

    /// Called when the experiment ends; stops daemons the backend started.
    fn shutdown(&self) {}
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyOptions {
    pub run_id: String,
    pub client_idx: usize,
    /// Record unsupported actions as skipped instead of failing.
    pub degrade_allowed: bool,
}

/// The actions needed to realize `plan`, in application order.
pub fn planned_actions(plan: &EnforcementPlan, opts: &ApplyOptions) -> Vec<PlannedAction> {
    let mut actions = Vec::new();
    if let Some(khz) = plan.cpu_freq_cap_khz {
        actions.push(PlannedAction {
            kind: ActionKind::CpuFreqCap,
            target: "cpu".into(),
            new_value: khz.to_string(),
        });
    }
    actions.push(PlannedAction {
        kind: ActionKind::MemoryCgroup,
        target: format!("{}/{}", opts.run_id, opts.client_idx),
        new_value: plan.memory_max_bytes.to_string(),
    });
    if let Some(mhz) = plan.gpu_core_clock_cap_mhz {
        actions.push(PlannedAction {
            kind: ActionKind::GpuCoreClockCap,
            target: "gpu0".into(),
            new_value: mhz.to_string(),
        });
    }
    if let Some(mhz) = plan.gpu_mem_clock_cap_mhz {
        actions.push(PlannedAction {
            kind: ActionKind::GpuMemClockCap,
            target: "gpu0".into(),
            new_value: mhz.to_string(),
        });
    }
    if let Some(pct) = plan.gpu_active_thread_pct {
        actions.push(PlannedAction {
            kind: ActionKind::MpsActiveThreads,
            target: ENV_MPS_PCT.into(),
            new_value: pct.to_string(),
        });
    }
    if let Some(f) = &plan.vram_fraction {
        actions.push(PlannedAction {
            kind: ActionKind::VramFraction,
            target: ENV_VRAM_FRACTION.into(),
            new_value: fraction_to_decimal(f),
        });
    }
    actions
}

/// Mechanisms `plan` needs, including CPU affinity for the child.
pub fn required_mechanisms(plan: &EnforcementPlan) -> Vec<Mechanism> {
    let mut m = vec![Mechanism::CpuAffinity];
    for a in planned_actions(plan, &ApplyOptions::default()) {
        let mech = a.kind.mechanism();
        if !m.contains(&mech) {
            m.push(mech);
        }
    }
    m
}

fn unsupported(report: &BackendCapabilityReport, mechanism: Mechanism) -> EnforcerError {
    let reason = report
        .reason(mechanism)
        .unwrap_or("not supported by this backend")
        .to_string();
    if reason == PRIVILEGE_REASON {
        EnforcerError::PrivilegeError { mechanism, reason }
    } else {
        EnforcerError::UnsupportedAction { mechanism, reason }
    }
}

/// Checks that `report` covers everything `plan` needs. With
/// `degrade_allowed` nothing is ever an error.
pub fn check_support(
    report: &BackendCapabilityReport,
    plan: &EnforcementPlan,
    degrade_allowed: bool,
) -> Result<(), EnforcerError> {
    if degrade_allowed {
        return Ok(());
    }
    let mut errors: Vec<EnforcerError> = required_mechanisms(plan)
        .into_iter()
        .filter(|m| !report.supports(*m))
        .map(|m| unsupported(report, m))
        .collect();
    if errors.is_empty() {
        return Ok(());
    }
    // Privilege problems take precedence so callers can map them to their own exit path.
    let idx = errors
        .iter()
        .position(|e| matches!(e, EnforcerError::PrivilegeError { .. }))
        .unwrap_or(0);
    Err(errors.swap_remove(idx))
}

/// Single logical owner of host-global limits.
pub struct Enforcer {
    backend: Box<dyn Backend>,
    active: Mutex<Option<u64>>,
    next_id: AtomicU64,
}

impl fmt::Debug for Enforcer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enforcer")
            .field("backend", &self.backend.id())
            .field("active", &self.active)
            .finish()
    }
}

impl Enforcer {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Enforcer {
            backend,
            active: Mutex::new(None),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn capabilities(&self) -> &BackendCapabilityReport {
        self.backend.capabilities()
    }

    pub fn has_active_lease(&self) -> bool {
        self.active.lock().unwrap_or_else(|e| e.into_inner()).is_some()
    }

    /// Applies `plan`. Fails with [`EnforcerError::LeaseHeld`] while another
    /// lease is unreleased or stale orchestrator state exists on the host.
    /// If an action fails midway, the ones already applied are rolled back.
    pub fn apply(&self, plan: &EnforcementPlan, opts: &ApplyOptions) -> Result<EnforcementLease, EnforcerError> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(id) = *active {
            return Err(EnforcerError::LeaseHeld(format!("lease #{id} is unreleased")));
        }
        let stale = self.backend.stale_state();
        if !stale.is_empty() {
            return Err(EnforcerError::LeaseHeld(format!(
                "stale orchestrator state: {}",
                stale.join(", ")
            )));
        }
        let caps = self.backend.capabilities();
        check_support(caps, plan, opts.degrade_allowed)?;

        let mut records: Vec<ActionRecord> = Vec::new();
        let mut cgroup_dir = None;
        for action in planned_actions(plan, opts) {
            let mech = action.kind.mechanism();
            if !caps.supports(mech) {
                let reason = caps.reason(mech).unwrap_or("unsupported").to_string();
                records.push(ActionRecord {
                    kind: action.kind,
                    target: action.target,
                    prior_value: None,
                    new_value: action.new_value,
                    state: ActionState::Skipped { reason },
                });
                continue;
            }
            match self.backend.apply_action(&action) {
                Ok(prior) => {
                    if action.kind == ActionKind::MemoryCgroup {
                        cgroup_dir = self.backend.cgroup_path(&action.target);
                    }
                    records.push(ActionRecord {
                        kind: action.kind,
                        target: action.target,
                        prior_value: prior,
                        new_value: action.new_value,
                        state: ActionState::Applied,
                    });
                }
                Err(e) => {
                    for r in records.iter().rev().filter(|r| r.state == ActionState::Applied) {
                        if let Err(re) = self.backend.restore_action(r) {
                            log::error!("rollback of {} on {} failed: {re}", r.kind, r.target);
                        }
                    }
                    return Err(e);
                }
            }
        }

        let affinity = if caps.supports(Mechanism::CpuAffinity) {
            let cpus = self.backend.allowed_cpus();
            let n = (plan.cpu_core_count as usize).min(cpus.len()).max(1);
            Some(cpus.into_iter().take(n).collect())
        } else {
            None
        };

        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        *active = Some(id);
        Ok(EnforcementLease {
            id,
            plan: plan.clone(),
            backend_id: self.backend.id().to_string(),
            applied_at: Instant::now(),
            actions_taken: records,
            released: false,
            cgroup_dir,
            affinity,
        })
    }

    /// Restores every applied action in reverse order. A failing restore does
    /// not stop the others; all failures come back together. Releasing twice
    /// is a no-op reported as [`ReleaseOutcome::AlreadyReleased`].
    pub fn release(&self, lease: &mut EnforcementLease) -> Result<ReleaseOutcome, EnforcerError> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        if lease.released {
            log::warn!("lease #{} already released", lease.id);
            return Ok(ReleaseOutcome::AlreadyReleased);
        }
        let mut failures = Vec::new();
        for record in lease.actions_taken.iter_mut().rev() {
            if record.state != ActionState::Applied {
                continue;
            }
            match self.backend.restore_action(record) {
                Ok(()) => record.state = ActionState::Restored,
                Err(e) => {
                    failures.push(format!("{} {}: {e}", record.kind, record.target));
                    record.state = ActionState::RestoreFailed { error: e.to_string() };
                }
            }
        }
        lease.released = true;
        if *active == Some(lease.id) {
            *active = None;
        }
        if failures.is_empty() {
            Ok(ReleaseOutcome::Released)
        } else {
            Err(EnforcerError::RestoreFailed(failures))
        }
    }

    pub fn stale_state(&self) -> Vec<String> {
        self.backend.stale_state()
    }

    /// Resets the host regardless of lease bookkeeping. Clears the active
    /// lease marker so the enforcer is usable afterwards.
    pub fn emergency_reset(&self) -> ResetReport {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        let report = self.backend.emergency_reset();
        *active = None;
        report
    }

    pub fn shutdown(&self) {
        self.backend.shutdown();
    }
}

/// Which backend to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    /// Linux host controls, external commands executed for real.
    Real,
    /// Records intended actions in memory; touches nothing.
    Mock,
    /// Linux backend with recorded (not executed) external commands. Cgroup
    /// directories are still created, under `BOUQUET_CGROUP_ROOT`.
    MockCommand,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(BackendKind::Real),
            "mock" => Ok(BackendKind::Mock),
            "mock-command" => Ok(BackendKind::MockCommand),
            other => Err(format!("unknown backend '{other}' (real, mock, mock-command)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Real => "real",
            BackendKind::Mock => "mock",
            BackendKind::MockCommand => "mock-command",
        })
    }
}

/// Builds the backend for `kind`. `probe` supplies the real backend's
/// capabilities.
pub fn build_backend(kind: BackendKind, probe: &ProbeResult) -> Result<Box<dyn Backend>, EnforcerError> {
    match kind {
        BackendKind::Mock => Ok(Box::new(MockBackend::new())),
        BackendKind::Real => {
            let config = LinuxConfig::from_env(probe.host.is_privileged)?;
            Ok(Box::new(LinuxBackend::new(
                "linux",
                config,
                Box::new(SystemRunner),
                probe.report.clone(),
            )))
        }
        BackendKind::MockCommand => {
            let root = std::env::var_os(ENV_CGROUP_ROOT).ok_or_else(|| {
                EnforcerError::Config(format!("backend mock-command requires {ENV_CGROUP_ROOT}"))
            })?;
            let config = LinuxConfig::for_test_root(PathBuf::from(root));
            Ok(Box::new(LinuxBackend::new(
                "linux-mock-command",
                config,
                Box::new(RecordingRunner::new()),
                BackendCapabilityReport::all_supported("linux-mock-command"),
            )))
        }
    }
}
