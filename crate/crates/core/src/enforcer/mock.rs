use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use super::{
    ActionKind, ActionRecord, Backend, BackendCapabilityReport, EnforcerError, Mechanism,
    PlannedAction, ResetOutcome, ResetReport, PRIVILEGE_REASON,
};

/// Simulated host state the mock backend mutates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockHostState {
    pub cpu_max_khz: u64,
    pub cpu_hw_max_khz: u64,
    /// Orchestrator cgroups, target → memory.max bytes.
    pub cgroups: BTreeMap<String, u64>,
    pub gpu_core_clock_cap_mhz: Option<u32>,
    pub gpu_mem_clock_cap_mhz: Option<u32>,
    pub mps_active_thread_pct: Option<u8>,
    pub vram_fraction: Option<String>,
}

impl Default for MockHostState {
    fn default() -> Self {
        MockHostState {
            cpu_max_khz: 4_000_000,
            cpu_hw_max_khz: 4_000_000,
            cgroups: BTreeMap::new(),
            gpu_core_clock_cap_mhz: None,
            gpu_mem_clock_cap_mhz: None,
            mps_active_thread_pct: None,
            vram_fraction: None,
        }
    }
}

fn opt_to_string<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn parse_opt<T: std::str::FromStr>(v: Option<&String>) -> Option<T> {
    v.and_then(|s| s.parse().ok())
}

/// Records intended actions against an in-memory [`MockHostState`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    caps: BackendCapabilityReport,
    state: Arc<Mutex<MockHostState>>,
    privileged: bool,
    fail_apply: Arc<Mutex<HashSet<ActionKind>>>,
    fail_restore: Arc<Mutex<HashSet<ActionKind>>>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            caps: BackendCapabilityReport::all_supported("mock"),
            state: Arc::new(Mutex::new(MockHostState::default())),
            privileged: true,
            fail_apply: Arc::default(),
            fail_restore: Arc::default(),
        }
    }

    /// A mock of an unprivileged host: privileged mechanisms are unsupported
    /// and resets are skipped.
    pub fn unprivileged() -> Self {
        let mut m = Self::new();
        m.privileged = false;
        for mech in [Mechanism::CpuFreq, Mechanism::MemoryCgroup, Mechanism::GpuClock] {
            m.caps.set(mech, false, Some(PRIVILEGE_REASON.into()));
        }
        m
    }

    pub fn with_unsupported(mut self, mech: Mechanism, reason: &str) -> Self {
        self.caps.set(mech, false, Some(reason.into()));
        self
    }

    /// Shared handle on the simulated host state.
    pub fn state_handle(&self) -> Arc<Mutex<MockHostState>> {
        Arc::clone(&self.state)
    }

    pub fn snapshot(&self) -> MockHostState {
        self.state.lock().unwrap().clone()
    }

    pub fn fail_apply_of(&self, kind: ActionKind) {
        self.fail_apply.lock().unwrap().insert(kind);
    }

    pub fn fail_restore_of(&self, kind: ActionKind) {
        self.fail_restore.lock().unwrap().insert(kind);
    }

    fn injected(kind: ActionKind, verb: &str) -> EnforcerError {
        EnforcerError::ExternalCommandFailed {
            command: format!("mock {verb} {kind}"),
            status: Some(1),
            output: "injected failure".into(),
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn capabilities(&self) -> &BackendCapabilityReport {
        &self.caps
    }

    fn apply_action(&self, action: &PlannedAction) -> Result<Option<String>, EnforcerError> {
        if self.fail_apply.lock().unwrap().contains(&action.kind) {
            return Err(Self::injected(action.kind, "apply"));
        }
        let mut s = self.state.lock().unwrap();
        let v = &action.new_value;
        let prior = match action.kind {
            ActionKind::CpuFreqCap => {
                let prior = s.cpu_max_khz.to_string();
                s.cpu_max_khz = v.parse().unwrap_or(s.cpu_max_khz);
                Some(prior)
            }
            ActionKind::MemoryCgroup => {
                if s.cgroups.contains_key(&action.target) {
                    return Err(EnforcerError::LeaseHeld(format!("cgroup {} exists", action.target)));
                }
                s.cgroups.insert(action.target.clone(), v.parse().unwrap_or(0));
                None
            }
            ActionKind::GpuCoreClockCap => {
                let prior = opt_to_string(s.gpu_core_clock_cap_mhz);
                s.gpu_core_clock_cap_mhz = v.parse().ok();
                prior
            }
            ActionKind::GpuMemClockCap => {
                let prior = opt_to_string(s.gpu_mem_clock_cap_mhz);
                s.gpu_mem_clock_cap_mhz = v.parse().ok();
                prior
            }
            ActionKind::MpsActiveThreads => {
                let prior = opt_to_string(s.mps_active_thread_pct);
                s.mps_active_thread_pct = v.parse().ok();
                prior
            }
            ActionKind::VramFraction => {
                let prior = s.vram_fraction.clone();
                s.vram_fraction = Some(v.clone());
                prior
            }
        };
        Ok(prior)
    }

    fn restore_action(&self, record: &ActionRecord) -> Result<(), EnforcerError> {
        if self.fail_restore.lock().unwrap().contains(&record.kind) {
            return Err(Self::injected(record.kind, "restore"));
        }
        let mut s = self.state.lock().unwrap();
        let prior = record.prior_value.as_ref();
        match record.kind {
            ActionKind::CpuFreqCap => {
                let hw = s.cpu_hw_max_khz;
                s.cpu_max_khz = parse_opt(prior).unwrap_or(hw);
            }
            ActionKind::MemoryCgroup => {
                s.cgroups.remove(&record.target);
            }
            ActionKind::GpuCoreClockCap => s.gpu_core_clock_cap_mhz = parse_opt(prior),
            ActionKind::GpuMemClockCap => s.gpu_mem_clock_cap_mhz = parse_opt(prior),
            ActionKind::MpsActiveThreads => s.mps_active_thread_pct = parse_opt(prior),
            ActionKind::VramFraction => s.vram_fraction = prior.cloned(),
        }
        Ok(())
    }

    fn stale_state(&self) -> Vec<String> {
        self.state
            .lock()
            .unwrap()
            .cgroups
            .keys()
            .map(|k| format!("cgroup {k}"))
            .collect()
    }

    fn emergency_reset(&self) -> ResetReport {
        let mut report = ResetReport::default();
        let mut s = self.state.lock().unwrap();
        if !self.privileged {
            for action in ["cpu_freq_reset", "cgroup_cleanup", "gpu_clock_reset", "mps_daemon_stop"] {
                report.push(action, "host", ResetOutcome::Skipped { reason: PRIVILEGE_REASON.into() });
            }
            return report;
        }
        if s.cpu_max_khz != s.cpu_hw_max_khz {
            s.cpu_max_khz = s.cpu_hw_max_khz;
            report.push("cpu_freq_reset", "cpu", ResetOutcome::Done);
        }
        for target in std::mem::take(&mut s.cgroups).into_keys() {
            report.push("cgroup_remove", target, ResetOutcome::Done);
        }
        if s.gpu_core_clock_cap_mhz.take().is_some() {
            report.push("gpu_core_clock_reset", "gpu0", ResetOutcome::Done);
        }
        if s.gpu_mem_clock_cap_mhz.take().is_some() {
            report.push("gpu_mem_clock_reset", "gpu0", ResetOutcome::Done);
        }
        if s.mps_active_thread_pct.take().is_some() {
            report.push("mps_reset", "mps", ResetOutcome::Done);
        }
        s.vram_fraction = None;
        report
    }
}
